//! Command-line front end. [`run`] parses arguments, executes one subcommand
//! and returns the process exit code: 0 on success, 1 on a usage error, 2 when
//! the command itself fails.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{Preset, RunConfig};
use crate::datagen::{dedup_pairs, generate_dataset, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::imaging::Level;
use crate::rng;
use crate::training::{self, aerial_input, augment_pair, grad_check, with_pool, Checkpoint, GradCheckConfig};
use crate::viz;

#[derive(Debug, Parser)]
#[command(name = "geodtr", version, about = "Cross-view geo-localization with geometric layout descriptors")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand. They are applied on top of the preset
/// and the `--config` file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON config; keys it leaves out keep their preset values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base configuration (paper or desk).
    #[arg(long, global = true)]
    pub preset: Option<Preset>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run on a single thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true)]
    pub layout_level: Option<Level>,
    #[arg(long, global = true)]
    pub semantic_level: Option<Level>,
    #[arg(long, global = true, overrides_with = "no_polar")]
    pub polar: bool,
    #[arg(long, global = true, overrides_with = "polar")]
    pub no_polar: bool,
    #[arg(long, global = true, overrides_with = "no_cf")]
    pub cf: bool,
    #[arg(long, global = true, overrides_with = "cf")]
    pub no_cf: bool,
    /// Number of layout descriptors.
    #[arg(long, global = true)]
    pub k: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with its manifest.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train from scratch; writes metrics.csv, final.gdtr and best.gdtr.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print R@1, R@5, R@10 and R@1% of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Also write the recalls as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write augmented copies of every pair with a new manifest.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw ground, aerial and difference descriptor grids as PNG.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs, one row each.
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Pixels per descriptor cell.
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
    /// Report pairs with identical pixels.
    Dedup {
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    GradCheck {
        /// Entries checked per tensor; all when omitted.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Inspect the effective configuration.
    #[command(subcommand)]
    Config(ConfigCommand),
}

#[derive(Debug, Subcommand)]
pub enum ConfigCommand {
    /// Print as JSON (or as `section.key = value` lines with --flat).
    Show {
        #[arg(long)]
        flat: bool,
    },
}

impl Common {
    /// Preset, then `--config`, then the individual flags.
    pub fn effective_config(&self) -> Result<RunConfig> {
        self.effective_config_over(RunConfig::preset(self.preset.unwrap_or(Preset::Paper)))
    }

    /// Like [`Common::effective_config`] with `base` in place of the preset
    /// unless `--preset` is given.
    pub fn effective_config_over(&self, base: RunConfig) -> Result<RunConfig> {
        let base = match self.preset {
            Some(p) => RunConfig::preset(p),
            None => base,
        };
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                RunConfig::from_json_over(&base, &text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => base,
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(l) = self.layout_level {
            cfg.augment.layout_level = l;
        }
        if let Some(l) = self.semantic_level {
            cfg.augment.set_semantic_level(l);
        }
        if self.polar {
            cfg.train.use_polar_transform = true;
        }
        if self.no_polar {
            cfg.train.use_polar_transform = false;
        }
        if self.cf {
            cfg.train.cf_enabled = true;
        }
        if self.no_cf {
            cfg.train.cf_enabled = false;
        }
        if let Some(k) = self.k {
            cfg.model.descriptors = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The checkpoint's stored config under the command-line overrides.
    fn load_checkpoint(&self, path: &Path) -> Result<Checkpoint> {
        let stored = RunConfig::load(&Checkpoint::config_path(path))?;
        Checkpoint::load(path, Some(&self.effective_config_over(stored)?))
    }
}

fn required(path: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.or_else(|| fallback.clone())
        .ok_or_else(|| Error::invalid(format!("no {what} given (flag or paths section of the config)")))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const STREAM_CLI_AUGMENT: u64 = 0xa6;

fn execute(common: &Common, command: Command) -> Result<()> {
    match command {
        Command::GenData { n, out, split } => {
            let cfg = common.effective_config()?;
            let m = generate_dataset(n, common.seed.unwrap_or(0), &out, &cfg.data, &split)?;
            println!("wrote {} pairs to {}", m.len(), out.join(crate::datagen::MANIFEST_FILE).display());
        }
        Command::Train { manifest, val_manifest, out } => {
            let cfg = common.effective_config()?;
            let manifest = DatasetManifest::load(&required(manifest, &cfg.paths.train_manifest, "training manifest")?)?;
            let val = val_manifest.or_else(|| cfg.paths.val_manifest.clone()).map(|p| DatasetManifest::load(&p)).transpose()?;
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.clone());
            let run = training::train(&cfg, &manifest, val.as_ref(), Some(&out))?;
            let (first, last) = run.first_last_epoch_loss();
            println!("{} steps, mean loss first epoch {first:.5}, last epoch {last:.5}", run.log.len());
            if let Some(r) = run.val_history.last() {
                print!("validation after the last epoch\n{}", r.table());
            }
            println!("checkpoints in {}", out.display());
        }
        Command::Eval { checkpoint, manifest, out } => {
            let ck = common.load_checkpoint(&checkpoint)?;
            let manifest = DatasetManifest::load(&required(manifest, &ck.config.paths.test_manifest, "evaluation manifest")?)?;
            let rec = training::evaluate(&ck, &manifest)?;
            print!("{}", rec.table());
            if let Some(p) = out {
                write_file(&p, &rec.csv())?;
            }
        }
        Command::Augment { manifest, out } => {
            let cfg = common.effective_config()?;
            let src = DatasetManifest::load(&manifest)?;
            let seed = cfg.train.seed;
            let mut entries = Vec::with_capacity(src.len());
            for e in &src.entries {
                let (a, g) = src.load_pair(e)?;
                let s = rng::derive_seed(seed, &[STREAM_CLI_AUGMENT, cfg.augment.seed, e.id]);
                let (a, g) = augment_pair(&cfg.augment, &a, &g, s)?;
                let a = aerial_input(&a, &cfg.model, cfg.train.use_polar_transform)?;
                let entry = ManifestEntry {
                    id: e.id,
                    aerial: PathBuf::from(format!("aerial/{:06}.png", e.id)),
                    ground: PathBuf::from(format!("ground/{:06}.png", e.id)),
                    seed: s,
                };
                for sub in ["aerial", "ground"] {
                    let d = out.join(sub);
                    fs::create_dir_all(&d).map_err(|err| Error::io(&d, err))?;
                }
                a.save_png(&out.join(&entry.aerial))?;
                g.save_png(&out.join(&entry.ground))?;
                entries.push(entry);
            }
            let m = DatasetManifest { root: out.clone(), entries, meta: src.meta.clone() };
            m.save()?;
            println!("wrote {} augmented pairs to {}", m.len(), out.display());
        }
        Command::Viz { checkpoint, manifest, out, n, scale } => {
            let ck = common.load_checkpoint(&checkpoint)?;
            let mut m = DatasetManifest::load(&manifest)?;
            m.entries.truncate(n.max(1));
            let pairs = m.load_all()?;
            let files = viz::write_descriptor_pngs(&ck.params, &ck.config.model, ck.config.train.use_polar_transform, &pairs, scale, &out)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Dedup { manifest, out } => {
            let m = DatasetManifest::load(&manifest)?;
            let rep = dedup_pairs(&m)?;
            println!("{} pairs, {} kept, {} removed", m.len(), rep.kept.len(), rep.removed.len());
            for g in &rep.groups {
                let ids: Vec<String> = g.iter().map(u64::to_string).collect();
                println!("duplicates: {}", ids.join(" "));
            }
            if let Some(p) = out {
                write_file(&p, &(serde_json::to_string_pretty(&rep).expect("report serializes") + "\n"))?;
            }
        }
        Command::GradCheck { n, tol } => {
            let cfg = common.effective_config()?;
            let mut gc = GradCheckConfig { seed: cfg.train.seed, entries_per_tensor: n, ..GradCheckConfig::default() };
            gc.loss.cf_enabled = cfg.train.cf_enabled;
            let rep = grad_check(&gc)?;
            print!("{}", rep.table());
            if !rep.passed(tol) {
                return Err(Error::invalid(format!("gradient check failed: max relative error {:.3e} > {tol:e}", rep.max_rel_err())));
            }
        }
        Command::Config(ConfigCommand::Show { flat }) => {
            let cfg = common.effective_config()?;
            print!("{}", if flat { cfg.show() } else { cfg.to_json() });
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs it.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let deterministic = cli.common.deterministic;
    let result = with_pool(deterministic, || execute(&cli.common, cli.command)).and_then(|r| r);
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("geodtr").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_config() {
        let c = parse(&["config", "show", "--k", "3", "--no-cf", "--seed", "5", "--semantic-level", "weak"]);
        let cfg = c.common.effective_config().unwrap();
        assert_eq!(cfg.model.descriptors, 3);
        assert!(!cfg.train.cf_enabled);
        assert_eq!(cfg.train.seed, 5);
        assert_eq!(cfg.augment.jitter_strength, 0.1);
        let c = parse(&["--no-polar", "--polar", "config", "show"]);
        assert!(c.common.effective_config().unwrap().train.use_polar_transform);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["geodtr", "frobnicate"]), 1);
        assert_eq!(run(["geodtr", "config", "show", "--bogus"]), 1);
        assert_eq!(run(["geodtr", "gen-data", "--n", "x", "--out", "d"]), 1);
        assert_eq!(run(["geodtr", "--help"]), 0);
    }

    #[test]
    fn runtime_errors_exit_two() {
        assert_eq!(run(["geodtr", "dedup", "--manifest", "/nonexistent/manifest.csv"]), 2);
        assert_eq!(run(["geodtr", "config", "show", "--k", "0"]), 2);
    }
}
