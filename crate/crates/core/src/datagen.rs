//! Procedural aerial/ground scene pairs with exact cross-view correspondence,
//! CSV manifests, and pixel-hash duplicate detection.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{polar_transform, Image, View};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_META_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub aerial_size: usize,
    /// `(height, width)` of the ground panorama.
    pub ground_size: (usize, usize),
    /// Per-pixel Gaussian noise on the ground view. Zero disables all
    /// photometric perturbation, including the brightness offset.
    pub noise_sigma: f64,
    /// Ground brightness offset is drawn from `U[-b, b]`.
    pub brightness_offset: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { aerial_size: 64, ground_size: (32, 128), noise_sigma: 0.05, brightness_offset: 0.1 }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.ground_size;
        if self.aerial_size < 2 || h < 2 || w < 2 {
            return Err(Error::invalid(format!(
                "scene sizes must be at least 2 pixels: aerial {}, ground {h}x{w}",
                self.aerial_size
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.brightness_offset >= 0.0 && self.brightness_offset <= 1.0) {
            return Err(Error::invalid(format!("brightness_offset must be in [0, 1], got {}", self.brightness_offset)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub id: u64,
    pub seed: u64,
    pub aerial: Image,
    pub ground: Image,
}

fn random_color<R: Rng + ?Sized>(r: &mut R) -> [f64; 3] {
    [r.random(), r.random(), r.random()]
}

/// Renders the aerial scene for `seed`.
pub fn render_aerial(seed: u64, size: usize) -> Image {
    let mut r = rng::seeded(seed);
    let s = size as f64;
    let unit = s / 64.0;
    let mut img = Image::filled(size, size, random_color(&mut r), View::Aerial);
    let c = (s - 1.0) / 2.0;

    let roads = r.random_range(1..=3);
    for _ in 0..roads {
        let angle = r.random_range(0.0..PI);
        let half_width = r.random_range(1.5..3.5) * unit;
        let color = random_color(&mut r);
        let (nx, ny) = (-angle.sin(), angle.cos());
        for y in 0..size {
            for x in 0..size {
                let dist = ((x as f64 - c) * nx + (y as f64 - c) * ny).abs();
                if dist <= half_width {
                    img.set_pixel(y, x, color);
                }
            }
        }
    }

    let discs = r.random_range(3..=8);
    for _ in 0..discs {
        let rho = r.random_range(0.1..0.45) * s;
        let phi = r.random_range(0.0..2.0 * PI);
        let radius = r.random_range(2.0..6.0) * unit;
        let color = random_color(&mut r);
        let (cx, cy) = (c + rho * phi.sin(), c - rho * phi.cos());
        for y in 0..size {
            for x in 0..size {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= radius * radius {
                    img.set_pixel(y, x, color);
                }
            }
        }
    }
    img
}

/// Adds brightness offset and per-pixel noise, clamping to `[0, 1]`.
fn perturb(img: &mut Image, cfg: &SceneConfig, seed: u64) {
    if cfg.noise_sigma == 0.0 {
        return;
    }
    let mut r = rng::derived(seed, &[1]);
    let offset = if cfg.brightness_offset > 0.0 { r.random_range(-cfg.brightness_offset..=cfg.brightness_offset) } else { 0.0 };
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
    for v in img.data.iter_mut() {
        *v = (*v + offset + noise.sample(&mut r)).clamp(0.0, 1.0);
    }
}

pub fn generate_scene(id: u64, seed: u64, cfg: &SceneConfig) -> Result<ScenePair> {
    cfg.validate()?;
    let aerial = render_aerial(seed, cfg.aerial_size);
    let mut ground = polar_transform(&aerial, cfg.ground_size.0, cfg.ground_size.1)?;
    perturb(&mut ground, cfg, seed);
    Ok(ScenePair { id, seed, aerial, ground })
}

/// Seed of item `index` under global seed `seed`.
pub fn item_seed(seed: u64, index: u64) -> u64 {
    rng::derive_seed(seed, &[0xda7a, index])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub aerial: PathBuf,
    pub ground: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMeta {
    pub split: String,
    pub seed: u64,
    pub scene: SceneConfig,
}

/// Rows of `manifest.csv` plus the split tag and global seed from the sidecar.
/// Image paths are relative to `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub meta: Option<ManifestMeta>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.root.join(p) }
    }

    /// Accepts a manifest CSV or the directory containing `manifest.csv`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::Reader::from_path(&file).map_err(|e| csv_error(&file, e))?;
        let headers = reader.headers().map_err(|e| csv_error(&file, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "aerial", "ground", "seed"] {
            return Err(Error::Format(format!("{}: expected header id,aerial,ground,seed", file.display())));
        }
        let entries: Vec<ManifestEntry> =
            reader.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| csv_error(&file, e))?;
        let mut seen = std::collections::BTreeSet::new();
        if let Some(e) = entries.iter().find(|e| !seen.insert(e.id)) {
            return Err(Error::Format(format!("{}: duplicate id {}", file.display(), e.id)));
        }
        let meta_path = root.join(MANIFEST_META_FILE);
        let meta = if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?)
        } else {
            None
        };
        Ok(DatasetManifest { root, entries, meta })
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let file = self.root.join(MANIFEST_FILE);
        let mut w = csv::Writer::from_path(&file).map_err(|e| csv_error(&file, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|err| csv_error(&file, err))?;
        }
        w.flush().map_err(|e| Error::io(&file, e))?;
        if let Some(meta) = &self.meta {
            let path = self.root.join(MANIFEST_META_FILE);
            let text = serde_json::to_string_pretty(meta).expect("manifest metadata serializes");
            fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<(Image, Image)> {
        Ok((
            Image::load_png(&self.resolve(&entry.aerial), View::Aerial)?,
            Image::load_png(&self.resolve(&entry.ground), View::Panorama)?,
        ))
    }

    /// All pairs, loaded in parallel, in manifest order.
    pub fn load_all(&self) -> Result<Vec<(Image, Image)>> {
        self.entries.par_iter().map(|e| self.load_pair(e)).collect()
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {:?}", path.display(), other)),
    }
}

/// Writes `n` pairs as `aerial/NNNNNN.png` and `ground/NNNNNN.png` under `out_dir`
/// with `manifest.csv` and its `manifest.json` sidecar.
pub fn generate_dataset(n: usize, seed: u64, out_dir: &Path, cfg: &SceneConfig, split: &str) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    cfg.validate()?;
    for sub in ["aerial", "ground"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let entries: Vec<ManifestEntry> = (0..n as u64)
        .into_par_iter()
        .map(|id| {
            let s = item_seed(seed, id);
            let pair = generate_scene(id, s, cfg)?;
            let entry = ManifestEntry {
                id,
                aerial: PathBuf::from(format!("aerial/{id:06}.png")),
                ground: PathBuf::from(format!("ground/{id:06}.png")),
                seed: s,
            };
            pair.aerial.save_png(&out_dir.join(&entry.aerial))?;
            pair.ground.save_png(&out_dir.join(&entry.ground))?;
            Ok(entry)
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
        meta: Some(ManifestMeta { split: split.to_string(), seed, scene: cfg.clone() }),
    };
    manifest.save()?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct DedupReport {
    /// Ids sharing one pixel hash, in manifest order; only groups of two or more.
    pub groups: Vec<Vec<u64>>,
    pub kept: Vec<u64>,
    /// Every id after the first in its group.
    pub removed: Vec<u64>,
}

impl DedupReport {
    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// md5 over the aerial RGB bytes followed by the ground RGB bytes.
pub fn pair_hash(aerial: &Image, ground: &Image) -> [u8; 16] {
    let mut ctx = md5::Context::new();
    ctx.consume(aerial.to_rgb8());
    ctx.consume(ground.to_rgb8());
    ctx.compute().0
}

pub fn dedup_pairs(manifest: &DatasetManifest) -> Result<DedupReport> {
    let hashes: Vec<[u8; 16]> = manifest
        .entries
        .par_iter()
        .map(|e| manifest.load_pair(e).map(|(a, g)| pair_hash(&a, &g)))
        .collect::<Result<_>>()?;
    let mut first_seen: BTreeMap<[u8; 16], usize> = BTreeMap::new();
    let mut groups: Vec<Vec<u64>> = Vec::new();
    let mut report = DedupReport::default();
    for (e, h) in manifest.entries.iter().zip(hashes) {
        match first_seen.get(&h) {
            None => {
                first_seen.insert(h, groups.len());
                groups.push(vec![e.id]);
                report.kept.push(e.id);
            }
            Some(&g) => {
                groups[g].push(e.id);
                report.removed.push(e.id);
            }
        }
    }
    report.groups = groups.into_iter().filter(|g| g.len() > 1).collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_free() -> SceneConfig {
        SceneConfig { noise_sigma: 0.0, ..SceneConfig::default() }
    }

    #[test]
    fn scenes_are_deterministic_and_distinct() {
        let cfg = SceneConfig::default();
        let a = generate_scene(0, 11, &cfg).unwrap();
        assert_eq!(a, generate_scene(0, 11, &cfg).unwrap());
        let b = generate_scene(0, 12, &cfg).unwrap();
        assert!(a.aerial.max_diff(&b.aerial) > 0.0);
        assert_eq!((a.ground.height, a.ground.width), (32, 128));
    }

    #[test]
    fn noise_free_ground_is_polar_of_aerial() {
        let p = generate_scene(3, 5, &noise_free()).unwrap();
        assert_eq!(p.ground, polar_transform(&p.aerial, 32, 128).unwrap());
        let noisy = generate_scene(3, 5, &SceneConfig::default()).unwrap();
        assert!(noisy.ground.max_diff(&p.ground) > 0.0);
        assert!(noisy.ground.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_sizes_rejected() {
        let cfg = SceneConfig { aerial_size: 1, ..SceneConfig::default() };
        assert!(generate_scene(0, 0, &cfg).is_err());
        let cfg = SceneConfig { noise_sigma: -1.0, ..SceneConfig::default() };
        assert!(generate_scene(0, 0, &cfg).is_err());
    }

    #[test]
    fn dataset_files_manifest_and_regeneration() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig { aerial_size: 16, ground_size: (8, 32), ..SceneConfig::default() };
        let m = generate_dataset(4, 7, dir.path(), &cfg, "train").unwrap();
        assert_eq!(m.entries.iter().map(|e| e.id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        let pngs = ["aerial", "ground"].iter().map(|d| fs::read_dir(dir.path().join(d)).unwrap().count()).sum::<usize>();
        assert_eq!(pngs, 8);
        let csv = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(csv.starts_with("id,aerial,ground,seed\n"));
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(DatasetManifest::load(dir.path()).unwrap(), m);

        let other = tempfile::tempdir().unwrap();
        generate_dataset(4, 7, other.path(), &cfg, "train").unwrap();
        for e in &m.entries {
            for p in [&e.aerial, &e.ground] {
                assert_eq!(fs::read(dir.path().join(p)).unwrap(), fs::read(other.path().join(p)).unwrap());
            }
        }
        assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), fs::read(other.path().join(MANIFEST_FILE)).unwrap());
    }

    #[test]
    fn manifest_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join(MANIFEST_FILE);
        fs::write(&f, "id,a,g,seed\n").unwrap();
        assert!(matches!(DatasetManifest::load(&f), Err(Error::Format(_))));
        fs::write(&f, "id,aerial,ground,seed\n0,a.png,g.png,1\n0,b.png,h.png,2\n").unwrap();
        assert!(matches!(DatasetManifest::load(&f), Err(Error::Format(_))));
        assert!(matches!(DatasetManifest::load(&dir.path().join("missing.csv")), Err(Error::Io { .. })));
    }

    #[test]
    fn dedup_flags_exact_copies_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig { aerial_size: 16, ground_size: (8, 32), ..SceneConfig::default() };
        let mut m = generate_dataset(4, 1, dir.path(), &cfg, "train").unwrap();
        assert!(dedup_pairs(&m).unwrap().is_empty());

        // id 4 copies id 1; id 5 copies id 2 with one pixel changed
        let (a, g) = m.load_pair(&m.entries[2]).unwrap();
        let mut g2 = g.clone();
        let p = g2.pixel(0, 0);
        g2.set_pixel(0, 0, [1.0 - p[0], p[1], p[2]]);
        a.save_png(&dir.path().join("a5.png")).unwrap();
        g2.save_png(&dir.path().join("g5.png")).unwrap();
        let copy = ManifestEntry { id: 4, ..m.entries[1].clone() };
        m.entries.push(copy);
        m.entries.push(ManifestEntry { id: 5, aerial: "a5.png".into(), ground: "g5.png".into(), seed: 0 });
        let r = dedup_pairs(&m).unwrap();
        assert_eq!(r.groups, vec![vec![1, 4]]);
        assert_eq!(r.removed, vec![4]);
        assert_eq!(r.kept, vec![0, 1, 2, 3, 5]);
    }
}
