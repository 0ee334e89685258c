//! Generates a synthetic dataset, plants duplicate pairs and finds them.
//!
//!     cargo run --release --example synthetic_dataset [n] [out_dir]

use std::path::PathBuf;

use geodtr::datagen::{dedup_pairs, generate_dataset, DatasetManifest, SceneConfig};

fn main() -> geodtr::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(20, |s| s.parse().expect("n must be an integer"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synthetic_dataset_out".into()));

    let manifest = generate_dataset(n, 7, &out, &SceneConfig::default(), "train")?;
    println!("{} pairs in {}", manifest.len(), out.display());
    for e in manifest.entries.iter().take(3) {
        println!("  {} {} {} seed {}", e.id, e.aerial.display(), e.ground.display(), e.seed);
    }

    // point the last two rows at the images of the first two
    let mut planted = DatasetManifest::load(&out)?;
    for i in 0..2.min(n / 2) {
        let src = planted.entries[i].clone();
        let dst = n - 1 - i;
        planted.entries[dst].aerial = src.aerial;
        planted.entries[dst].ground = src.ground;
    }
    let rep = dedup_pairs(&planted)?;
    println!("kept {}, removed {:?}, groups {:?}", rep.kept.len(), rep.removed, rep.groups);
    Ok(())
}
