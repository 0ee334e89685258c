//! Polar transform of a synthetic aerial image and the layout simulation that
//! keeps a pair aligned: rotating the aerial image shifts the panorama.
//!
//!     cargo run --release --example polar_layout [out_dir]

use std::path::PathBuf;

use geodtr::datagen::{generate_scene, SceneConfig};
use geodtr::imaging::{apply_layout, polar_transform, rotate_aerial, rotation_shift, shift_panorama, LayoutDraw};

fn main() -> geodtr::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "polar_layout_out".into()));
    std::fs::create_dir_all(&out).expect("create output directory");
    let scene = SceneConfig { noise_sigma: 0.0, brightness_offset: 0.0, ..SceneConfig::default() };
    let pair = generate_scene(0, 11, &scene)?;
    let (h, w) = scene.ground_size;

    let polar = polar_transform(&pair.aerial, h, w)?;
    println!("polar vs ground panorama, max pixel diff {:.2e}", polar.max_diff(&pair.ground));

    for theta in [90, 180, 270] {
        let lhs = polar_transform(&rotate_aerial(&pair.aerial, theta)?, h, w)?;
        let rhs = shift_panorama(&polar, rotation_shift(theta, w)?)?;
        println!("rotate {theta:>3}: shift {:>4} columns, commutation error {:.2e}", rotation_shift(theta, w)?, lhs.max_diff(&rhs));
    }

    let (a, g) = apply_layout(LayoutDraw { flip: true, rotation: 90 }, &pair.aerial, &pair.ground)?;
    println!("flip + rotate 90: polar(aerial') vs ground' {:.2e}", polar_transform(&a, h, w)?.max_diff(&g));

    pair.aerial.save_png(&out.join("aerial.png"))?;
    pair.ground.save_png(&out.join("ground.png"))?;
    polar.save_png(&out.join("polar.png"))?;
    a.save_png(&out.join("aerial_flip_rot90.png"))?;
    g.save_png(&out.join("ground_flip_rot90.png"))?;
    println!("images in {}", out.display());
    Ok(())
}
