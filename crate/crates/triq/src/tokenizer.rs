//! Image/feature-map to token sequence: Conv2D projection, adaptive max
//! pooling against the token budget, quality-token prepending, and
//! prefix-truncated positional embedding.
//!
//! The two projection modes (hybrid feature-map projection and raw image
//! patching) are interchangeable strategies behind one trait, selected by
//! name from the model config.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, FeatureMap, OVERALL_STRIDE};
use crate::error::{Error, Result};
use crate::numerics::{shared, SharedTensor, Tape, Tensor, Var};

/// Smallest pooling factor P whose pooled grid fits the token budget.
pub fn pool_size(grid_h: usize, grid_w: usize, n_max_tokens: usize) -> Result<usize> {
    if n_max_tokens < 1 {
        return Err(Error::Param("n_max_tokens must be >= 1".into()));
    }
    if grid_h < 1 || grid_w < 1 {
        return Err(Error::Param("pool_size: empty grid".into()));
    }
    let mut p = 1;
    loop {
        if grid_h.div_ceil(p) * grid_w.div_ceil(p) <= n_max_tokens {
            return Ok(p);
        }
        p += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    Hybrid,
    Patch,
}

impl ProjectionMode {
    pub fn parse(s: &str) -> Result<ProjectionMode> {
        match s {
            "hybrid" => Ok(ProjectionMode::Hybrid),
            "patch" => Ok(ProjectionMode::Patch),
            other => Err(Error::Param(format!(
                "unknown projection mode '{other}' (expected hybrid or patch)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProjectionMode::Hybrid => "hybrid",
            ProjectionMode::Patch => "patch",
        }
    }
}

/// Conv2D-projection parameters. Hybrid mode uses a 1x1xCxD kernel over
/// backbone features; patch mode a PxPx3xD kernel over raw pixels.
pub struct Projection {
    pub kernel: SharedTensor,
    pub bias: SharedTensor,
}

impl Projection {
    pub fn new(kernel_size: usize, c_in: usize, d_model: usize, seed: u64) -> Projection {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (2.0 / (kernel_size * kernel_size * c_in) as f64).sqrt();
        Projection {
            kernel: shared(
                Tensor::randn(vec![kernel_size, kernel_size, c_in, d_model], std, &mut rng)
                    .requires_grad(),
            ),
            bias: shared(Tensor::zeros(vec![d_model]).requires_grad()),
        }
    }

    pub fn params(&self) -> Vec<(String, SharedTensor)> {
        vec![
            ("projection.kernel".into(), self.kernel.clone()),
            ("projection.bias".into(), self.bias.clone()),
        ]
    }
}

/// What a strategy consumes: raw pixels or a precomputed feature map.
pub enum TokenizerInput<'a> {
    Image(&'a Tensor),
    Features(&'a FeatureMap),
}

/// One projection route: turns the input into a pooled [gh, gw, D] grid
/// var within the token budget.
pub trait TokenizerStrategy {
    fn name(&self) -> &'static str;

    /// Pre-pool grid extents for a source resolution.
    fn grid_dims(&self, source_h: usize, source_w: usize) -> (usize, usize);

    fn project(
        &self,
        tape: &mut Tape,
        input: &TokenizerInput,
        backbone: Option<&Backbone>,
        proj: &Projection,
        n_max_tokens: usize,
    ) -> Result<Var>;
}

/// Backbone features -> max-pool -> 1x1 Conv2D projection.
pub struct HybridStrategy;

impl TokenizerStrategy for HybridStrategy {
    fn name(&self) -> &'static str {
        "hybrid"
    }

    fn grid_dims(&self, source_h: usize, source_w: usize) -> (usize, usize) {
        (
            source_h.div_ceil(OVERALL_STRIDE),
            source_w.div_ceil(OVERALL_STRIDE),
        )
    }

    fn project(
        &self,
        tape: &mut Tape,
        input: &TokenizerInput,
        backbone: Option<&Backbone>,
        proj: &Projection,
        n_max_tokens: usize,
    ) -> Result<Var> {
        let ksh = proj.kernel.borrow().shape.clone();
        if ksh[0] != 1 || ksh[1] != 1 {
            return Err(Error::Dim(format!(
                "hybrid projection kernel must be 1x1, got {}x{}",
                ksh[0], ksh[1]
            )));
        }
        let fm_var = match input {
            TokenizerInput::Features(fm) => {
                fm.validate()?;
                if fm.grid.shape[2] != ksh[2] {
                    return Err(Error::Dim(format!(
                        "feature channels {} != projection channels {}",
                        fm.grid.shape[2], ksh[2]
                    )));
                }
                tape.constant(fm.grid.clone())
            }
            TokenizerInput::Image(image) => {
                let bb = backbone.ok_or_else(|| {
                    Error::Param("hybrid mode needs a backbone for raw images".into())
                })?;
                if image.shape.len() != 3 || image.shape[2] != 3 {
                    return Err(Error::Format(format!(
                        "expected [H,W,3] image, got {:?}",
                        image.shape
                    )));
                }
                let padded = Backbone::pad_to_multiple(image, OVERALL_STRIDE)?;
                let x = tape.constant(padded);
                bb.forward(tape, x)?
            }
        };
        let (gh, gw) = (tape.shape(fm_var)[0], tape.shape(fm_var)[1]);
        let p = pool_size(gh, gw, n_max_tokens)?;
        // pool-then-project in hybrid mode
        let pooled = tape.maxpool2d(fm_var, p)?;
        let k = tape.leaf(&proj.kernel);
        let b = tape.leaf(&proj.bias);
        let projected = tape.conv2d(pooled, k, 1, 0)?;
        tape.add_chan_bias(projected, b)
    }
}

/// Raw pixels -> Conv2D patch projection -> max-pool.
pub struct PatchStrategy {
    pub patch_size: usize,
}

impl TokenizerStrategy for PatchStrategy {
    fn name(&self) -> &'static str {
        "patch"
    }

    fn grid_dims(&self, source_h: usize, source_w: usize) -> (usize, usize) {
        (
            source_h.div_ceil(self.patch_size),
            source_w.div_ceil(self.patch_size),
        )
    }

    fn project(
        &self,
        tape: &mut Tape,
        input: &TokenizerInput,
        _backbone: Option<&Backbone>,
        proj: &Projection,
        n_max_tokens: usize,
    ) -> Result<Var> {
        let image = match input {
            TokenizerInput::Image(img) => *img,
            TokenizerInput::Features(_) => {
                return Err(Error::Param(
                    "patch mode consumes raw images, not feature maps".into(),
                ))
            }
        };
        let ksh = proj.kernel.borrow().shape.clone();
        if ksh[0] != self.patch_size || ksh[1] != self.patch_size || ksh[2] != 3 {
            return Err(Error::Dim(format!(
                "patch projection kernel {:?} must be {p}x{p}x3xD",
                ksh,
                p = self.patch_size
            )));
        }
        let padded = Backbone::pad_to_multiple(image, self.patch_size)?;
        let x = tape.constant(padded);
        let k = tape.leaf(&proj.kernel);
        let b = tape.leaf(&proj.bias);
        // project-then-pool in patch mode
        let projected = tape.conv2d(x, k, self.patch_size, 0)?;
        let projected = tape.add_chan_bias(projected, b)?;
        let (gh, gw) = (tape.shape(projected)[0], tape.shape(projected)[1]);
        let p = pool_size(gh, gw, n_max_tokens)?;
        tape.maxpool2d(projected, p)
    }
}

/// Strategy registry keyed by mode name.
pub fn strategy_for(mode: ProjectionMode, patch_size: usize) -> Box<dyn TokenizerStrategy> {
    match mode {
        ProjectionMode::Hybrid => Box::new(HybridStrategy),
        ProjectionMode::Patch => Box::new(PatchStrategy { patch_size }),
    }
}

/// Quality token F_0 plus the learnable positional-embedding table.
pub struct SequenceParams {
    pub quality_token: SharedTensor,  // [1, D]
    pub positional_embedding: SharedTensor, // [1 + n_max_tokens, D]
    pub n_max_tokens: usize,
}

impl SequenceParams {
    /// PE rows are Gaussian (std 0.02); the quality token starts at zero.
    pub fn new(d_model: usize, n_max_tokens: usize, seed: u64) -> SequenceParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SequenceParams {
            quality_token: shared(Tensor::zeros(vec![1, d_model]).requires_grad()),
            positional_embedding: shared(
                Tensor::randn(vec![1 + n_max_tokens, d_model], 0.02, &mut rng).requires_grad(),
            ),
            n_max_tokens,
        }
    }

    pub fn params(&self) -> Vec<(String, SharedTensor)> {
        vec![
            ("tokenizer.quality_token".into(), self.quality_token.clone()),
            (
                "tokenizer.positional_embedding".into(),
                self.positional_embedding.clone(),
            ),
        ]
    }

    /// Flatten the [gh, gw, D] grid row-major, prepend the quality token,
    /// and add the first 1+N rows of the PE table.
    pub fn assemble(&self, tape: &mut Tape, grid: Var) -> Result<Var> {
        let sh = tape.shape(grid).to_vec();
        if sh.len() != 3 {
            return Err(Error::Dim(format!("assemble: grid shape {:?}", sh)));
        }
        let (gh, gw, d) = (sh[0], sh[1], sh[2]);
        let n = gh * gw;
        if n > self.n_max_tokens {
            return Err(Error::Contract(format!(
                "token count {n} exceeds budget {} (pool_size bypassed?)",
                self.n_max_tokens
            )));
        }
        let flat = tape.reshape(grid, vec![n, d])?;
        let token = tape.leaf(&self.quality_token);
        let rows = tape.concat_rows(&[token, flat])?;
        let pe = tape.leaf(&self.positional_embedding);
        let pe_slice = tape.slice_rows(pe, 0, 1 + n)?;
        tape.add(rows, pe_slice)
    }
}
