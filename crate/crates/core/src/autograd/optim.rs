use super::tensor::Tensor;

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the applied scale (1 when no clipping happened).
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    scale
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

/// RMSProp optimizer state: one running mean of squared gradients per
/// parameter, mirroring parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState {
    pub decay: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    mean_square: Vec<Tensor>,
}

impl RmsPropState {
    pub const DEFAULT_DECAY: f64 = 0.9;
    pub const DEFAULT_EPSILON: f64 = 1e-8;
    pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

    /// Zero-initialised state for parameters of the given shapes.
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>, learning_rate: f64) -> Self {
        RmsPropState {
            decay: Self::DEFAULT_DECAY,
            epsilon: Self::DEFAULT_EPSILON,
            learning_rate,
            mean_square: shapes.into_iter().map(Tensor::zeros).collect(),
        }
    }

    /// Rebuilds a state from stored running means (checkpoint restore).
    pub fn from_parts(decay: f64, epsilon: f64, learning_rate: f64, mean_square: Vec<Tensor>) -> Self {
        RmsPropState {
            decay,
            epsilon,
            learning_rate,
            mean_square,
        }
    }

    pub fn mean_square(&self) -> &[Tensor] {
        &self.mean_square
    }

    /// `v ← ρv + (1−ρ)g²; p ← p − lr·g/(√v + ε)` for every parameter.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.mean_square.len(), "parameter count");
        assert_eq!(params.len(), grads.len(), "gradient count");
        let (rho, eps, lr) = (self.decay, self.epsilon, self.learning_rate);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.mean_square) {
            assert_eq!(p.shape(), g.shape());
            assert_eq!(p.shape(), v.shape());
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = rho * *vv + (1.0 - rho) * gv * gv;
                *pv -= lr * gv / (vv.sqrt() + eps);
            }
        }
    }
}
