//! Attention visualization: quality-token attention rows rendered as a
//! normalized spatial mask and blended over the source image.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Which encoder layer's attention to visualize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelect {
    Index(usize),
    Mean,
}

impl LayerSelect {
    pub fn parse(s: &str) -> Result<LayerSelect> {
        if s == "mean" {
            return Ok(LayerSelect::Mean);
        }
        s.parse::<usize>()
            .map(LayerSelect::Index)
            .map_err(|_| Error::Param(format!("layer must be an index or 'mean', got '{s}'")))
    }
}

/// Bilinear upsampling with the center-aligned sampling convention:
/// output pixel d maps to source coordinate (d + 0.5)·(S/D) − 0.5,
/// clamped at the borders.
pub fn bilinear_upsample(grid: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if grid.shape.len() != 2 {
        return Err(Error::Dim(format!(
            "bilinear_upsample expects a 2-D grid, got {:?}",
            grid.shape
        )));
    }
    let (gh, gw) = (grid.shape[0], grid.shape[1]);
    if gh == 0 || gw == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Dim("bilinear_upsample: empty extent".into()));
    }
    let sample_axis = |d: usize, out: usize, src: usize| -> (usize, usize, f64) {
        let s = (d as f64 + 0.5) * (src as f64 / out as f64) - 0.5;
        let s = s.clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Tensor::zeros(vec![out_h, out_w]);
    for y in 0..out_h {
        let (y0, y1, fy) = sample_axis(y, out_h, gh);
        for x in 0..out_w {
            let (x0, x1, fx) = sample_axis(x, out_w, gw);
            let v00 = grid.data[y0 * gw + x0];
            let v01 = grid.data[y0 * gw + x1];
            let v10 = grid.data[y1 * gw + x0];
            let v11 = grid.data[y1 * gw + x1];
            let top = v00 + fx * (v01 - v00);
            let bot = v10 + fx * (v11 - v10);
            out.data[y * out_w + x] = top + fy * (bot - top);
        }
    }
    Ok(out)
}

/// Build the [H, W] mask in [0,1] from per-layer attention tensors
/// ([heads, 1+N, 1+N] each): quality-token query row, columns 1..N,
/// head- (and optionally layer-) averaged, min-max normalized, then
/// bilinearly upsampled to the image extent.
pub fn attention_mask(
    attention: &[Tensor],
    layer_select: LayerSelect,
    grid: (usize, usize),
    image_shape: (usize, usize),
) -> Result<Tensor> {
    if attention.is_empty() {
        return Err(Error::Param("no attention layers to visualize".into()));
    }
    let layers: Vec<&Tensor> = match layer_select {
        LayerSelect::Mean => attention.iter().collect(),
        LayerSelect::Index(i) => {
            let layer = attention.get(i).ok_or_else(|| {
                Error::Param(format!(
                    "layer {i} out of range (model has {} layers)",
                    attention.len()
                ))
            })?;
            vec![layer]
        }
    };
    let (gh, gw) = grid;
    let n = gh * gw;
    let mut cells = vec![0.0; n];
    let mut sources = 0usize;
    for layer in layers {
        if layer.shape.len() != 3 || layer.shape[1] != layer.shape[2] {
            return Err(Error::Dim(format!(
                "attention tensor shape {:?} is not [heads, S, S]",
                layer.shape
            )));
        }
        let s = layer.shape[1];
        if s != 1 + n {
            return Err(Error::Dim(format!(
                "sequence extent {s} does not match grid {gh}x{gw} (+1 token)"
            )));
        }
        let heads = layer.shape[0];
        for h in 0..heads {
            let row0 = &layer.data[h * s * s..h * s * s + s];
            let row_sum: f64 = row0.iter().sum();
            if (row_sum - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "attention row sums to {row_sum}, expected 1"
                )));
            }
            for j in 0..n {
                cells[j] += row0[1 + j];
            }
            sources += 1;
        }
    }
    for c in cells.iter_mut() {
        *c /= sources as f64;
    }
    let min = cells.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let normalized: Vec<f64> = if max > min {
        cells.iter().map(|c| (c - min) / (max - min)).collect()
    } else {
        // uniform attention carries no spatial signal; leave the image
        // unmodulated rather than blacking it out
        vec![1.0; n]
    };
    let grid_t = Tensor::new(vec![gh, gw], normalized)?;
    bilinear_upsample(&grid_t, image_shape.0, image_shape.1)
}

/// Luminance modulation: out = image·(alpha + (1−alpha)·mask). The
/// alpha floor keeps low-attention regions visible.
pub fn overlay(image: &Tensor, mask: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Param(format!("alpha {alpha} outside [0,1]")));
    }
    if image.shape.len() != 3 || image.shape[2] != 3 {
        return Err(Error::Dim(format!(
            "overlay expects an [H,W,3] image, got {:?}",
            image.shape
        )));
    }
    if mask.shape != [image.shape[0], image.shape[1]] {
        return Err(Error::Dim(format!(
            "mask shape {:?} does not match image {:?}",
            mask.shape, image.shape
        )));
    }
    let mut out = Tensor::zeros(image.shape.clone());
    let (h, w) = (image.shape[0], image.shape[1]);
    for y in 0..h {
        for x in 0..w {
            let m = alpha + (1.0 - alpha) * mask.data[y * w + x];
            for c in 0..3 {
                let idx = (y * w + x) * 3 + c;
                out.data[idx] = image.data[idx] * m;
            }
        }
    }
    Ok(out)
}
