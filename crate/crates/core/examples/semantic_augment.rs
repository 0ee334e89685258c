//! Photometric augmentation at each level, drawn from seeded streams.
//!
//!     cargo run --release --example semantic_augment [out_dir]

use std::path::PathBuf;

use geodtr::datagen::{generate_scene, SceneConfig};
use geodtr::imaging::{semantic_augment, AugmentConfig, Level};
use geodtr::rng;

fn main() -> geodtr::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "semantic_augment_out".into()));
    std::fs::create_dir_all(&out).expect("create output directory");
    let ground = generate_scene(0, 5, &SceneConfig::default())?.ground;
    ground.save_png(&out.join("original.png"))?;

    for level in [Level::None, Level::Weak, Level::Strong] {
        let cfg = AugmentConfig::with_levels(Level::None, level, 0);
        for draw in 0..4u64 {
            let img = semantic_augment(&ground, &cfg, &mut rng::derived(3, &[draw]));
            let again = semantic_augment(&ground, &cfg, &mut rng::derived(3, &[draw]));
            assert_eq!(img, again);
            let (lo, hi) = img.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
            println!("{level:?} draw {draw}: change {:.3}, range [{lo:.3}, {hi:.3}]", img.max_diff(&ground));
            img.save_png(&out.join(format!("{level:?}_{draw}.png").to_lowercase()))?;
        }
    }
    println!("images in {}", out.display());
    Ok(())
}
