//! Stride-32 residual feature extractor and the binary feature-map
//! container used to import externally computed features.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{shared, SharedTensor, Tape, Tensor, Var};

pub const FEATURE_MAGIC: &[u8; 8] = b"TRIQFMAP";
pub const OVERALL_STRIDE: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Output channels of the stem and the four residual stages.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![16, 32, 64, 128, 256],
            blocks_per_stage: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 5 {
            return Err(Error::Param(format!(
                "backbone: need 5 stage channel counts, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.iter().any(|c| *c == 0) || self.blocks_per_stage == 0 {
            return Err(Error::Param("backbone: zero-sized stage".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }
}

/// Spatial feature grid [h, w, C] at 1/32 of the source resolution.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub grid: Tensor,
    pub source_height: usize,
    pub source_width: usize,
}

impl FeatureMap {
    pub fn validate(&self) -> Result<()> {
        if self.grid.shape.len() != 3 || self.grid.shape[2] == 0 {
            return Err(Error::Format(format!(
                "feature map grid shape {:?}",
                self.grid.shape
            )));
        }
        let (eh, ew) = (
            self.source_height.div_ceil(OVERALL_STRIDE),
            self.source_width.div_ceil(OVERALL_STRIDE),
        );
        if self.grid.shape[0] != eh || self.grid.shape[1] != ew {
            return Err(Error::Format(format!(
                "feature map grid {}x{} inconsistent with source {}x{} (expected {}x{})",
                self.grid.shape[0],
                self.grid.shape[1],
                self.source_height,
                self.source_width,
                eh,
                ew
            )));
        }
        Ok(())
    }
}

struct ConvParams {
    kernel: SharedTensor, // [k, k, c_in, c_out]
    bias: SharedTensor,   // [c_out]
}

impl ConvParams {
    fn new(k: usize, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> ConvParams {
        // He fan-in scaling
        let std = (2.0 / (k * k * c_in) as f64).sqrt();
        ConvParams {
            kernel: shared(Tensor::randn(vec![k, k, c_in, c_out], std, rng).requires_grad()),
            bias: shared(Tensor::zeros(vec![c_out]).requires_grad()),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let k = tape.leaf(&self.kernel);
        let b = tape.leaf(&self.bias);
        let y = tape.conv2d(x, k, stride, pad)?;
        tape.add_chan_bias(y, b)
    }
}

/// Two 3x3 convs with an identity or 1x1-projection shortcut.
struct ResidualBlock {
    conv1: ConvParams,
    conv2: ConvParams,
    projection: Option<ConvParams>,
    stride: usize,
}

impl ResidualBlock {
    fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> ResidualBlock {
        let projection = if stride != 1 || c_in != c_out {
            Some(ConvParams::new(1, c_in, c_out, rng))
        } else {
            None
        };
        ResidualBlock {
            conv1: ConvParams::new(3, c_in, c_out, rng),
            conv2: ConvParams::new(3, c_out, c_out, rng),
            projection,
            stride,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, x, self.stride, 1)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h, 1, 1)?;
        let shortcut = match &self.projection {
            Some(p) => p.forward(tape, x, self.stride, 0)?,
            None => x,
        };
        let y = tape.add(h, shortcut)?;
        Ok(tape.relu(y))
    }
}

/// Stem conv (stride 2) plus four residual stages (stride 2 each):
/// overall stride 32.
pub struct Backbone {
    pub config: BackboneConfig,
    stem: ConvParams,
    stages: Vec<Vec<ResidualBlock>>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Backbone> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = ConvParams::new(3, 3, config.stage_channels[0], &mut rng);
        let mut stages = Vec::new();
        let mut c_in = config.stage_channels[0];
        for &c_out in &config.stage_channels[1..] {
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_stage {
                let stride = if b == 0 { 2 } else { 1 };
                let cin = if b == 0 { c_in } else { c_out };
                blocks.push(ResidualBlock::new(cin, c_out, stride, &mut rng));
            }
            stages.push(blocks);
            c_in = c_out;
        }
        Ok(Backbone {
            config,
            stem,
            stages,
        })
    }

    pub fn params(&self) -> Vec<(String, SharedTensor)> {
        let mut out = vec![
            ("backbone.stem.kernel".to_string(), self.stem.kernel.clone()),
            ("backbone.stem.bias".to_string(), self.stem.bias.clone()),
        ];
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                let base = format!("backbone.stage{si}.block{bi}");
                out.push((format!("{base}.conv1.kernel"), block.conv1.kernel.clone()));
                out.push((format!("{base}.conv1.bias"), block.conv1.bias.clone()));
                out.push((format!("{base}.conv2.kernel"), block.conv2.kernel.clone()));
                out.push((format!("{base}.conv2.bias"), block.conv2.bias.clone()));
                if let Some(p) = &block.projection {
                    out.push((format!("{base}.proj.kernel"), p.kernel.clone()));
                    out.push((format!("{base}.proj.bias"), p.bias.clone()));
                }
            }
        }
        out
    }

    /// Zero-pad an [H, W, C] image on the bottom/right to the next
    /// multiple of `multiple`, keeping the origin anchored.
    pub fn pad_to_multiple(image: &Tensor, multiple: usize) -> Result<Tensor> {
        if image.shape.len() != 3 {
            return Err(Error::Format(format!(
                "expected [H,W,C] image, got {:?}",
                image.shape
            )));
        }
        let (h, w, c) = (image.shape[0], image.shape[1], image.shape[2]);
        let (ph, pw) = (
            h.div_ceil(multiple) * multiple,
            w.div_ceil(multiple) * multiple,
        );
        if ph == h && pw == w {
            return Ok(image.clone());
        }
        let mut out = Tensor::zeros(vec![ph, pw, c]);
        for r in 0..h {
            let src = &image.data[r * w * c..(r + 1) * w * c];
            out.data[r * pw * c..r * pw * c + w * c].copy_from_slice(src);
        }
        Ok(out)
    }

    /// Forward an already padded image var through the network.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let h = self.stem.forward(tape, image, 2, 1)?;
        let mut h = tape.relu(h);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(tape, h)?;
            }
        }
        Ok(h)
    }

    /// Pad, forward, and wrap as a FeatureMap. Pixels are expected in
    /// [0,1]; no mean/std normalization is applied.
    pub fn extract_features(&self, image: &Tensor) -> Result<FeatureMap> {
        let (h, w) = (image.shape[0], image.shape[1]);
        if image.shape.len() != 3 || image.shape[2] != 3 {
            return Err(Error::Format(format!(
                "expected [H,W,3] image, got {:?}",
                image.shape
            )));
        }
        let padded = Self::pad_to_multiple(image, OVERALL_STRIDE)?;
        let mut tape = Tape::new();
        let x = tape.constant(padded);
        let grid = self.forward(&mut tape, x)?;
        let fm = FeatureMap {
            grid: tape.tensor(grid),
            source_height: h,
            source_width: w,
        };
        fm.validate()?;
        Ok(fm)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureHeader {
    source_height: usize,
    source_width: usize,
    h: usize,
    w: usize,
    c: usize,
}

pub fn save_feature_map(fm: &FeatureMap, path: &Path) -> Result<()> {
    fm.validate()?;
    let header = FeatureHeader {
        source_height: fm.source_height,
        source_width: fm.source_width,
        h: fm.grid.shape[0],
        w: fm.grid.shape[1],
        c: fm.grid.shape[2],
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("feature header: {e}")))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(FEATURE_MAGIC).map_err(|e| Error::io(path, e))?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&header_bytes).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(fm.grid.data.len() * 8);
    for v in &fm.grid.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, not a feature container",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; len];
    f.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
    let header: FeatureHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("{}: header: {e}", path.display())))?;
    let n = header.h * header.w * header.c;
    let mut data_bytes = vec![0u8; n * 8];
    f.read_exact(&mut data_bytes).map_err(|e| Error::io(path, e))?;
    let data: Vec<f64> = data_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let fm = FeatureMap {
        grid: Tensor::new(vec![header.h, header.w, header.c], data)?,
        source_height: header.source_height,
        source_width: header.source_width,
    };
    fm.validate()?;
    Ok(fm)
}
