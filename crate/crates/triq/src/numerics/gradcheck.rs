//! Central finite-difference oracle for verifying analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::SharedTensor;

/// Compare analytic gradients against central finite differences.
///
/// `forward` rebuilds the computation on a fresh tape from the current
/// parameter values and returns the scalar loss var. When
/// `samples_per_tensor` is 0 every coordinate is checked; otherwise up to
/// that many coordinates are sampled per tensor (seeded, reproducible).
/// Returns the maximum relative error over all checked coordinates.
pub fn grad_check<F>(
    params: &[SharedTensor],
    step: f64,
    samples_per_tensor: usize,
    seed: u64,
    mut forward: F,
) -> Result<f64>
where
    F: FnMut(&mut Tape) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Param("grad_check: step must be > 0".into()));
    }

    // Analytic pass.
    for p in params {
        let mut t = p.borrow_mut();
        t.requires_grad = true;
        t.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = forward(&mut tape)?;
    if tape.data(loss).len() != 1 {
        return Err(Error::Contract("grad_check: loss must be scalar".into()));
    }
    if !tape.data(loss)[0].is_finite() {
        return Err(Error::Numeric("grad_check: non-finite forward value".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.borrow().grad.clone().unwrap_or_default())
        .collect();

    let eval = |forward: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = forward(&mut tape)?;
        let v = tape.data(loss)[0];
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite forward value".into()));
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let n = p.borrow().numel();
        let coords: Vec<usize> = if samples_per_tensor == 0 || n <= samples_per_tensor {
            (0..n).collect()
        } else {
            (0..samples_per_tensor)
                .map(|_| rng.gen_range(0..n))
                .collect()
        };
        for c in coords {
            let orig = p.borrow().data[c];
            p.borrow_mut().data[c] = orig + step;
            let f_plus = eval(&mut forward)?;
            p.borrow_mut().data[c] = orig - step;
            let f_minus = eval(&mut forward)?;
            p.borrow_mut().data[c] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[pi][c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
