//! Raw features, saliency and index maps, layout descriptors and the modulated
//! embedding of one pair under a freshly initialized model; writes descriptor
//! grids as PNG.
//!
//!     cargo run --release --example descriptors [out_dir]

use std::path::PathBuf;

use geodtr::datagen::{generate_scene, SceneConfig};
use geodtr::embedding::{distance, modulate};
use geodtr::features::{backbone_forward, index_map, saliency_map, Branch};
use geodtr::layout::{extract_descriptors, EncoderSettings};
use geodtr::model::ModelParams;
use geodtr::training::aerial_input;
use geodtr::{viz, RunConfig};

fn main() -> geodtr::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "descriptors_out".into()));
    let cfg = RunConfig::desk();
    let m = &cfg.model;
    let params = ModelParams::init(m, 0);
    let pair = generate_scene(0, 1, &SceneConfig { ground_size: m.ground_size, ..SceneConfig::default() })?;

    let mut emb = Vec::new();
    for b in Branch::BOTH {
        let img = match b {
            Branch::Ground => pair.ground.clone(),
            Branch::Aerial => aerial_input(&pair.aerial, m, true)?,
        };
        let bp = params.branch(b);
        let raw = backbone_forward(&img, &bp.backbone, m, b)?;
        let (s, idx) = (saliency_map(&raw), index_map(&raw));
        let d = extract_descriptors(&raw, &bp.extractor, EncoderSettings::from(m), None)?;
        let f = geodtr::embedding::normalize(&modulate(&d, &raw)?)?;
        let max_abs = d.data.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        println!(
            "{:<6} raw {:?}  saliency max {:.3}  index values {:?}..  descriptors {:?} max |p| {max_abs:.3}  embedding len {}",
            b.name(),
            raw.data.shape,
            s.data.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v)),
            &idx.data[..4],
            d.data.shape,
            f.data.len()
        );
        emb.push(f);
    }
    println!("ground-aerial distance {:.4}", distance(&emb[0], &emb[1])?);

    for f in viz::write_descriptor_pngs(&params, m, true, &[(pair.aerial, pair.ground)], 8, &out)? {
        println!("{}", f.display());
    }
    Ok(())
}
