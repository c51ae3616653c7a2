//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::{Tensor, TensorError};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively, so
/// exact zeros (dead ReLUs, pooled-away cells) do not divide by roundoff.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Outcome of one check: the worst relative error over every input element.
#[derive(Clone, Copy, Debug)]
pub struct CheckResult {
    pub max_relative_error: f64,
    pub checked: usize,
}

/// Compares analytic and numeric gradients of `Σ r ⊙ f(inputs)` with respect
/// to every element of every input, where `r` is a fixed random projection
/// drawn from `seed`. Projecting keeps the check sensitive to the full
/// Jacobian even when `sum(f)` is constant (softmax).
pub fn check<F, E>(inputs: &[Tensor], seed: u64, f: F) -> Result<CheckResult, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let proj: Vec<f64> = (0..tape.value(out).len())
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    let grads = tape.backward_with(out, Tensor::new(&out_shape, proj.clone())?);

    let objective = |inputs: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .zip(&proj)
            .map(|(y, r)| y * r)
            .sum())
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[k].shape());
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + STEP;
            let up = objective(&probe)?;
            probe[k].data_mut()[i] = x0 - STEP;
            let down = objective(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
            checked += 1;
        }
    }
    Ok(CheckResult {
        max_relative_error: worst,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_gradient() {
        for seed in 0..3 {
            let a = rand_tensor(&[3, 4], seed);
            let b = rand_tensor(&[4, 2], seed + 100);
            let r = check(&[a, b], seed, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                t.sum(y)
            })
            .unwrap();
            assert!(r.max_relative_error <= 1e-4, "{r:?}");
        }
    }

    #[test]
    fn softmax_jacobian() {
        for seed in 0..3 {
            let x = rand_tensor(&[7], seed);
            let r = check(&[x], seed, |t, v| t.softmax(v[0])).unwrap();
            assert!(r.max_relative_error <= 1e-4, "{r:?}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu'(0) is taken as 0 analytically; a central difference at 0 sees 0.5.
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        let r = check(&[x], 1, |t, v| t.relu(v[0])).unwrap();
        assert!(r.max_relative_error > 0.1);
    }
}
