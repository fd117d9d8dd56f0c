//! Cross-attention heatmaps over the guidance image.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::Model;
use crate::tensor::Mat;
use crate::tokenize::ImageView;

/// Attention mass received by each key: column sums of the head-averaged
/// weights. Row-stochastic inputs give a total equal to the query count.
pub fn received_mass(attention: &[Mat]) -> Vec<f64> {
    let Some(first) = attention.first() else {
        return Vec::new();
    };
    let mut mass = vec![0.0; first.cols()];
    let h = attention.len() as f64;
    for a in attention {
        for r in 0..a.rows() {
            for (m, v) in mass.iter_mut().zip(a.row(r)) {
                *m += v / h;
            }
        }
    }
    mass
}

/// Bilinear resize of a row-major `gh × gw` grid to `h × w`, sampling at
/// pixel centers with edge clamping.
pub fn upsample_bilinear(grid: &[f64], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f64> {
    assert_eq!(grid.len(), gh * gw);
    let coord = |i: usize, out: usize, src: usize| {
        let s = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(src - 1), s - lo as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, gh);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w, gw);
            let top = grid[y0 * gw + x0] * (1.0 - fx) + grid[y0 * gw + x1] * fx;
            let bottom = grid[y1 * gw + x0] * (1.0 - fx) + grid[y1 * gw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Min-max scaling to `[0, 1]`; a constant input maps to zeros.
pub fn normalize_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHeatmap {
    /// Unnormalized mass per image token, in patch-grid order.
    pub token_mass: Vec<f64>,
    pub grid: (usize, usize),
    /// `H × W` heat values in `[0, 1]`.
    pub heat: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Heat blended over the input view.
    pub overlay: ImageView,
}

impl AttentionHeatmap {
    pub fn total_mass(&self) -> f64 {
        self.token_mass.iter().sum()
    }
}

fn overlay(view: &ImageView, heat: &[f64]) -> Result<ImageView> {
    let rgb = view.to_rgb()?;
    let mut px = Vec::with_capacity(heat.len() * 3);
    for (i, &t) in heat.iter().enumerate() {
        let base = &rgb.pixels()[3 * i..3 * i + 3];
        // warm colours for high mass, cool for low
        let color = [t, 0.25 * (1.0 - (2.0 * t - 1.0).abs()), 1.0 - t];
        for c in 0..3 {
            px.push(0.5 * base[c] + 0.5 * color[c]);
        }
    }
    ImageView::new(view.height(), view.width(), 3, px)
}

pub fn attention_heatmap(model: &Model, partial: &PointCloud, view: &ImageView) -> Result<AttentionHeatmap> {
    if !model.uses_image() {
        return Err(Error::invalid(format!("variant {} has no cross-attention", model.variant)));
    }
    let sample = model.prepare(partial, view, None)?;
    let (_, fused) = model.predict_prepared(&sample)?;
    let cfg = &model.config;
    let grid = (cfg.image_height / cfg.patch, cfg.image_width / cfg.patch);
    let token_mass = received_mass(&fused.attention);
    let up = upsample_bilinear(&token_mass, grid.0, grid.1, view.height(), view.width());
    let heat = normalize_unit(&up);
    Ok(AttentionHeatmap {
        token_mass,
        grid,
        overlay: overlay(view, &heat)?,
        heat,
        height: view.height(),
        width: view.width(),
    })
}

/// Computes the heatmap and writes the overlay as a PNG.
pub fn visualize_attention(model: &Model, partial: &PointCloud, view: &ImageView, out: &Path) -> Result<AttentionHeatmap> {
    let map = attention_heatmap(model, partial, view)?;
    map.overlay.save_png(out)?;
    Ok(map)
}
