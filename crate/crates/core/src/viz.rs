//! Descriptor pictures: one row per item, K tiles per row.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::{Branch, ModelConfig};
use crate::imaging::{Image, View};
use crate::layout::LayoutDescriptors;
use crate::model::{forward_branch, ModelParams};
use crate::training::{aerial_input, Pair};

/// Gap between tiles, in output pixels.
pub const GAP: usize = 2;
const GAP_COLOR: [f64; 3] = [0.25, 0.25, 0.25];

/// Blue for -1, white for 0, red for +1.
pub fn diverging(v: f64) -> [f64; 3] {
    let v = v.clamp(-1.0, 1.0);
    if v >= 0.0 {
        [1.0, 1.0 - v, 1.0 - v]
    } else {
        [1.0 + v, 1.0 + v, 1.0]
    }
}

/// Maps to `[0, 1]` by min-max. A constant input maps to 0.
pub fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    v.iter().map(|x| if span > 0.0 { (x - lo) / span } else { 0.0 }).collect()
}

fn tile_sheet(rows: &[LayoutDescriptors], scale: usize, paint: impl Fn(&[f64]) -> Vec<[f64; 3]>) -> Result<Image> {
    let first = rows.first().ok_or_else(|| Error::invalid("nothing to draw"))?;
    let (k, (h, w)) = (first.count(), first.grid());
    if rows.iter().any(|d| d.count() != k || d.grid() != (h, w)) {
        return Err(Error::shape("descriptor sets differ in shape"));
    }
    let scale = scale.max(1);
    let (th, tw) = (h * scale, w * scale);
    let height = rows.len() * (th + GAP) + GAP;
    let width = k * (tw + GAP) + GAP;
    let mut img = Image::filled(height, width, GAP_COLOR, View::Panorama);
    for (r, d) in rows.iter().enumerate() {
        for m in 0..k {
            let colors = paint(d.descriptor(m));
            let (y0, x0) = (GAP + r * (th + GAP), GAP + m * (tw + GAP));
            for y in 0..th {
                for x in 0..tw {
                    img.set_pixel(y0 + y, x0 + x, colors[(y / scale) * w + x / scale]);
                }
            }
        }
    }
    Ok(img)
}

/// Each descriptor min-max normalized to grayscale.
pub fn descriptor_grid(rows: &[LayoutDescriptors], scale: usize) -> Result<Image> {
    tile_sheet(rows, scale, |d| min_max(d).into_iter().map(|v| [v; 3]).collect())
}

/// Signed `ground - aerial` per descriptor, scaled by its largest magnitude
/// and drawn with [`diverging`].
pub fn difference_grid(ground: &[LayoutDescriptors], aerial: &[LayoutDescriptors], scale: usize) -> Result<Image> {
    if ground.len() != aerial.len() {
        return Err(Error::shape(format!("{} ground vs {} aerial descriptor sets", ground.len(), aerial.len())));
    }
    let diffs = ground
        .iter()
        .zip(aerial)
        .map(|(g, a)| {
            if g.data.shape != a.data.shape {
                return Err(Error::shape(format!(
                    "ground descriptors {:?} and aerial descriptors {:?} differ; the difference panel needs the polar transform",
                    g.data.shape, a.data.shape
                )));
            }
            let mut d = g.clone();
            d.data.data.iter_mut().zip(&a.data.data).for_each(|(x, y)| *x -= y);
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    tile_sheet(&diffs, scale, |d| {
        let peak = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        d.iter().map(|v| diverging(if peak > 0.0 { v / peak } else { 0.0 })).collect()
    })
}

/// Evaluation-mode descriptors of each pair, `(ground, aerial)`.
pub fn pair_descriptors(
    params: &ModelParams,
    model: &ModelConfig,
    use_polar: bool,
    pairs: &[Pair],
) -> Result<(Vec<LayoutDescriptors>, Vec<LayoutDescriptors>)> {
    let mut out = (Vec::new(), Vec::new());
    for (aerial, ground) in pairs {
        for b in Branch::BOTH {
            let img = match b {
                Branch::Ground => ground.clone(),
                Branch::Aerial => aerial_input(aerial, model, use_polar)?,
            };
            let fwd = forward_branch(params.branch(b), params.prefix(b), model, b, &img, None, None)?;
            let d = fwd.descriptors(model.grid(b));
            match b {
                Branch::Ground => out.0.push(d),
                Branch::Aerial => out.1.push(d),
            }
        }
    }
    Ok(out)
}

/// Writes `ground_descriptors.png`, `aerial_descriptors.png` and, when the two
/// grids agree, `difference.png`. Returns the written paths.
pub fn write_descriptor_pngs(
    params: &ModelParams,
    model: &ModelConfig,
    use_polar: bool,
    pairs: &[Pair],
    scale: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (g, a) = pair_descriptors(params, model, use_polar, pairs)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (name, img) in [("ground_descriptors.png", descriptor_grid(&g, scale)?), ("aerial_descriptors.png", descriptor_grid(&a, scale)?)] {
        let p = out_dir.join(name);
        img.save_png(&p)?;
        written.push(p);
    }
    if model.grid(Branch::Ground) == model.grid(Branch::Aerial) {
        let p = out_dir.join("difference.png");
        difference_grid(&g, &a, scale)?.save_png(&p)?;
        written.push(p);
    }
    Ok(written)
}
