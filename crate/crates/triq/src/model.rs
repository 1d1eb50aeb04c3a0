//! Full model assembly — backbone (or imported features) through
//! tokenizer, encoder, and quality head — plus the binary weight
//! checkpoint container.

use std::fs;
use std::io::Read as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeatureMap};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::head::{HeadConfig, HeadParams, QualityDistribution};
use crate::numerics::{SharedTensor, Tape, Tensor, Var};
use crate::seeds::subseed;
use crate::tokenizer::{
    strategy_for, Projection, ProjectionMode, SequenceParams, TokenizerInput, TokenizerStrategy,
};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRIQWGHT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: ProjectionMode,
    pub patch_size: usize,
    pub n_max_tokens: usize,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            mode: ProjectionMode::Hybrid,
            patch_size: 32,
            n_max_tokens: 768,
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Param("patch_size must be positive".into()));
        }
        if self.n_max_tokens == 0 {
            return Err(Error::Param("n_max_tokens must be positive".into()));
        }
        self.backbone.validate()?;
        self.encoder.validate()
    }
}

/// Fixed input conventions recorded in the checkpoint header so a
/// loaded model is evaluated exactly as it was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    /// Pixel values divided by this before entering the network.
    pub pixel_divisor: f64,
    /// How non-multiple resolutions are brought to the stride/patch grid.
    pub padding: String,
}

impl Default for Preprocessing {
    fn default() -> Preprocessing {
        Preprocessing {
            pixel_divisor: 255.0,
            padding: "zero bottom/right".into(),
        }
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub backbone: Option<Backbone>,
    pub projection: Projection,
    pub sequence: SequenceParams,
    pub encoder: Encoder,
    pub head: HeadParams,
    strategy: Box<dyn TokenizerStrategy>,
}

pub struct ForwardOutput {
    /// The [1, 5] distribution var, still attached to the tape for loss.
    pub dist_var: Var,
    pub distribution: QualityDistribution,
    pub mos: f64,
    /// One [heads, 1+N, 1+N] tensor per encoder layer.
    pub attention: Vec<Tensor>,
    /// Pooled grid extents (gh, gw) with N == gh*gw.
    pub grid: (usize, usize),
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let d = config.encoder.d_model;
        let (backbone, projection) = match config.mode {
            ProjectionMode::Hybrid => {
                let bb = Backbone::new(config.backbone.clone(), subseed(seed, "backbone"))?;
                let c = config.backbone.out_channels();
                (
                    Some(bb),
                    Projection::new(1, c, d, subseed(seed, "projection")),
                )
            }
            ProjectionMode::Patch => (
                None,
                Projection::new(config.patch_size, 3, d, subseed(seed, "projection")),
            ),
        };
        let sequence = SequenceParams::new(d, config.n_max_tokens, subseed(seed, "tokenizer"));
        let encoder = Encoder::new(config.encoder.clone(), subseed(seed, "encoder"))?;
        let head = HeadParams::new(
            &HeadConfig {
                d_model: d,
                d_ff: config.encoder.d_ff,
                dropout_rate: config.encoder.dropout_rate,
            },
            subseed(seed, "head"),
        )?;
        let strategy = strategy_for(config.mode, config.patch_size);
        Ok(Model {
            config,
            backbone,
            projection,
            sequence,
            encoder,
            head,
            strategy,
        })
    }

    /// All learnable parameters in the declared checkpoint order.
    pub fn params(&self) -> Vec<(String, SharedTensor)> {
        let mut out = Vec::new();
        if let Some(bb) = &self.backbone {
            out.extend(bb.params());
        }
        out.extend(self.projection.params());
        out.extend(self.sequence.params());
        out.extend(self.encoder.params());
        out.extend(self.head.params());
        out
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &TokenizerInput,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput> {
        let grid = self.strategy.project(
            tape,
            input,
            self.backbone.as_ref(),
            &self.projection,
            self.config.n_max_tokens,
        )?;
        let gsh = tape.shape(grid).to_vec();
        let (gh, gw) = (gsh[0], gsh[1]);
        let seq = self.sequence.assemble(tape, grid)?;
        let (encoded, attention) = self.encoder.encode(tape, seq, training, rng)?;
        let z0 = tape.slice_rows(encoded, 0, 1)?;
        let dist_var = self.head.forward(tape, z0, training, rng)?;
        let distribution = crate::head::distribution_from_var(tape, dist_var)?;
        let mos = crate::head::mos_from_distribution(&distribution)?;
        Ok(ForwardOutput {
            dist_var,
            distribution,
            mos,
            attention,
            grid: (gh, gw),
        })
    }

    pub fn forward_image(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput> {
        self.forward(tape, &TokenizerInput::Image(image), training, rng)
    }

    pub fn forward_feature_map(
        &self,
        tape: &mut Tape,
        fm: &FeatureMap,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput> {
        if self.config.mode != ProjectionMode::Hybrid {
            return Err(Error::Param(
                "feature-map input requires hybrid mode".into(),
            ));
        }
        self.forward(tape, &TokenizerInput::Features(fm), training, rng)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    preprocessing: Preprocessing,
    pe_rows: usize,
    /// Training metadata recorded by the trainer; null for raw saves.
    #[serde(default)]
    train: serde_json::Value,
    params: Vec<ParamEntry>,
}

/// Write `magic | u32 LE header length | JSON header | f64 LE blobs`.
pub fn save_checkpoint(model: &Model, train_meta: serde_json::Value, path: &Path) -> Result<()> {
    let params = model.params();
    let header = CheckpointHeader {
        model: model.config.clone(),
        preprocessing: Preprocessing::default(),
        pe_rows: 1 + model.config.n_max_tokens,
        train: train_meta,
        params: params
            .iter()
            .map(|(name, p)| ParamEntry {
                name: name.clone(),
                shape: p.borrow().shape.clone(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encode: {e}")))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, p) in &params {
        for v in &p.borrow().data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rebuild a model from a checkpoint; returns the model and the train
/// metadata stored by the saver.
pub fn load_checkpoint(path: &Path) -> Result<(Model, serde_json::Value)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a weight checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Format(format!("{}: header decode: {e}", path.display())))?;
    let model = Model::new(header.model, 0)?;
    let params = model.params();
    if params.len() != header.params.len() {
        return Err(Error::Format(format!(
            "{}: parameter count mismatch ({} in file, {} in model)",
            path.display(),
            header.params.len(),
            params.len()
        )));
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    let mut offset = 0usize;
    for ((name, p), entry) in params.iter().zip(&header.params) {
        if *name != entry.name || p.borrow().shape != entry.shape {
            return Err(Error::Format(format!(
                "{}: parameter mismatch: file has {} {:?}, model expects {} {:?}",
                path.display(),
                entry.name,
                entry.shape,
                name,
                p.borrow().shape
            )));
        }
        let n = p.borrow().numel();
        let need = n * 8;
        if offset + need > rest.len() {
            return Err(Error::Format(format!(
                "{}: truncated parameter blob at {name}",
                path.display()
            )));
        }
        let mut t = p.borrow_mut();
        for (i, v) in t.data.iter_mut().enumerate() {
            let s = offset + i * 8;
            *v = f64::from_le_bytes(rest[s..s + 8].try_into().unwrap());
        }
        offset += need;
    }
    if offset != rest.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after parameters",
            path.display(),
            rest.len() - offset
        )));
    }
    Ok((model, header.train))
}
