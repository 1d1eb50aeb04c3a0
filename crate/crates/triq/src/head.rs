//! MLP head: five-grade quality distribution, cross-entropy loss, and the
//! expected-MOS reduction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{shared, SharedTensor, Tape, Tensor, Var};

pub const GRADES: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

/// Normalized probabilities over the five quality grades (1=bad .. 5=excellent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityDistribution {
    pub p: [f64; 5],
}

impl QualityDistribution {
    pub fn new(p: [f64; 5]) -> Result<QualityDistribution> {
        let d = QualityDistribution { p };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.p.iter().sum();
        if self.p.iter().any(|v| !(0.0..=1.0 + 1e-9).contains(v)) {
            return Err(Error::Contract(format!(
                "distribution entries outside [0,1]: {:?}",
                self.p
            )));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "distribution sums to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn one_hot(grade: usize) -> Result<QualityDistribution> {
        if !(1..=5).contains(&grade) {
            return Err(Error::Param(format!("grade {grade} outside 1..=5")));
        }
        let mut p = [0.0; 5];
        p[grade - 1] = 1.0;
        Ok(QualityDistribution { p })
    }
}

/// Expected MOS over the grade scale, Sum x * p(x).
pub fn mos_from_distribution(d: &QualityDistribution) -> Result<f64> {
    d.validate()?;
    Ok(d.p.iter().zip(GRADES).map(|(p, x)| p * x).sum())
}

/// Cross entropy -Sum target(x) * ln pred(x), with pred clamped at 1e-12.
pub fn cross_entropy(pred: &QualityDistribution, target: &QualityDistribution) -> f64 {
    pred.p
        .iter()
        .zip(&target.p)
        .map(|(p, t)| -t * p.max(1e-12).ln())
        .sum()
}

#[derive(Debug, Clone)]
pub struct HeadConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
}

pub struct HeadParams {
    pub w1: SharedTensor, // [D, d_ff]
    pub b1: SharedTensor, // [d_ff]
    pub w2: SharedTensor, // [d_ff, 5]
    pub b2: SharedTensor, // [5]
    pub dropout_rate: f64,
}

impl HeadParams {
    /// He-style fan-in init for the hidden layer; the output layer starts
    /// at zero so an untrained head predicts the uniform distribution.
    pub fn new(cfg: &HeadConfig, seed: u64) -> Result<HeadParams> {
        if !(0.0..1.0).contains(&cfg.dropout_rate) {
            return Err(Error::Param(format!(
                "dropout rate {} outside [0,1)",
                cfg.dropout_rate
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std1 = (2.0 / cfg.d_model as f64).sqrt();
        Ok(HeadParams {
            w1: shared(Tensor::randn(vec![cfg.d_model, cfg.d_ff], std1, &mut rng).requires_grad()),
            b1: shared(Tensor::zeros(vec![cfg.d_ff]).requires_grad()),
            w2: shared(Tensor::zeros(vec![cfg.d_ff, 5]).requires_grad()),
            b2: shared(Tensor::zeros(vec![5]).requires_grad()),
            dropout_rate: cfg.dropout_rate,
        })
    }

    pub fn params(&self) -> Vec<(String, SharedTensor)> {
        vec![
            ("head.w1".into(), self.w1.clone()),
            ("head.b1".into(), self.b1.clone()),
            ("head.w2".into(), self.w2.clone()),
            ("head.b2".into(), self.b2.clone()),
        ]
    }

    /// FC(D -> d_ff) + GELU -> dropout (training only) -> FC(d_ff -> 5)
    /// -> softmax. Returns the [1, 5] distribution var.
    pub fn forward(
        &self,
        tape: &mut Tape,
        z0: Var,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let w1 = tape.leaf(&self.w1);
        let b1 = tape.leaf(&self.b1);
        let w2 = tape.leaf(&self.w2);
        let b2 = tape.leaf(&self.b2);
        let h = tape.matmul(z0, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let mut h = tape.gelu(h);
        if training && self.dropout_rate > 0.0 {
            let keep = 1.0 - self.dropout_rate;
            let mask: Vec<f64> = (0..tape.data(h).len())
                .map(|_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            h = tape.dropout_mask(h, mask)?;
        }
        let logits = tape.matmul(h, w2)?;
        let logits = tape.add_row_bias(logits, b2)?;
        Ok(tape.softmax_last(logits))
    }
}

/// Read a [1, 5] tape var out as a checked distribution.
pub fn distribution_from_var(tape: &Tape, v: Var) -> Result<QualityDistribution> {
    let d = tape.data(v);
    if d.len() != 5 {
        return Err(Error::Dim(format!("expected 5 probabilities, got {}", d.len())));
    }
    // softmax guarantees the sum up to fp error; renormalize the residue
    let sum: f64 = d.iter().sum();
    let mut p = [0.0; 5];
    for (i, v) in d.iter().enumerate() {
        p[i] = v / sum;
    }
    QualityDistribution::new(p)
}

/// Append the cross-entropy loss against a fixed target to the tape.
pub fn cross_entropy_var(tape: &mut Tape, pred: Var, target: &QualityDistribution) -> Result<Var> {
    let logs = tape.ln_clamped(pred, 1e-12);
    let t = tape.constant(Tensor::new(vec![1, 5], target.p.to_vec())?);
    let prod = tape.mul(logs, t)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0))
}
