//! Central finite-difference gradient verification.
//!
//! The scalar probed is `L = sum(out * R)` for a fixed random projection `R`,
//! so every output element contributes with a distinct weight.

use super::params::{Grads, ParamId, ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-4;

/// Elementwise `|a - n| / max(|a|, |n|, floor)`, maximized.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub input: f64,
    pub params: Vec<(String, f64)>,
}

impl GradReport {
    pub fn max(&self) -> f64 {
        self.params
            .iter()
            .map(|(_, e)| *e)
            .fold(self.input, f64::max)
    }

    pub fn worst(&self) -> (String, f64) {
        self.params
            .iter()
            .cloned()
            .fold(("input".to_string(), self.input), |acc, p| {
                if p.1 > acc.1 {
                    p
                } else {
                    acc
                }
            })
    }
}

/// Compares `backward` against central differences of `forward` with respect
/// to the input and every trainable parameter in `store`.
///
/// `backward(store, x, grad_out, grads)` must return the input gradient and
/// accumulate parameter gradients into `grads`.
pub fn check<F, B>(
    store: &mut ParamStore,
    x: &Tensor,
    forward: F,
    backward: B,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&ParamStore, &Tensor) -> Result<Tensor>,
    B: Fn(&ParamStore, &Tensor, &Tensor, &mut Grads) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = forward(store, x)?;
    let proj = Tensor::randn(out.shape(), 1.0, &mut rng);
    let loss = |s: &ParamStore, x: &Tensor| -> Result<f64> { Ok(forward(s, x)?.dot(&proj)) };

    let mut grads = Grads::all();
    let gx = backward(store, x, &proj, &mut grads)?;

    let mut numeric = vec![0.0; x.numel()];
    let mut xp = x.clone();
    for (i, n) in numeric.iter_mut().enumerate() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + EPS;
        let up = loss(store, &xp)?;
        xp.data_mut()[i] = orig - EPS;
        let down = loss(store, &xp)?;
        xp.data_mut()[i] = orig;
        *n = (up - down) / (2.0 * EPS);
    }
    let mut report = GradReport {
        input: max_rel_error(gx.data(), &numeric, REL_FLOOR),
        params: Vec::new(),
    };

    let ids: Vec<(ParamId, String)> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    for (id, name) in ids {
        let n = store.get(id).numel();
        let mut numeric = vec![0.0; n];
        for (i, v) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + EPS;
            let up = loss(store, x)?;
            store.get_mut(id).data_mut()[i] = orig - EPS;
            let down = loss(store, x)?;
            store.get_mut(id).data_mut()[i] = orig;
            *v = (up - down) / (2.0 * EPS);
        }
        let zeros = Tensor::zeros(store.get(id).shape());
        let analytic = grads.get(id).unwrap_or(&zeros);
        report
            .params
            .push((name, max_rel_error(analytic.data(), &numeric, REL_FLOOR)));
    }
    Ok(report)
}
