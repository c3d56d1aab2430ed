//! Central finite-difference verification of analytic gradients.

use super::{Model, Mode, NnError};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|a - n| / max(|a|, |n|, 1e-8)` over all parameters.
    pub max_relative_error: f64,
    /// `(layer, tensor, element)` where the worst error occurred.
    pub worst: Option<(usize, usize, usize)>,
    pub checked: usize,
}

/// Compares backward-pass gradients with `(f(θ+ε) − f(θ−ε)) / 2ε` for every
/// parameter. `loss_fn` maps logits to `(loss, dloss/dlogits)`.
///
/// In train mode every evaluation reuses a fresh generator seeded with
/// `dropout_seed`, so dropout masks are identical across perturbations.
pub fn grad_check<F>(
    model: &Model<f64>,
    loss_fn: F,
    batch: &Tensor<f64>,
    eps: f64,
    dropout_seed: u64,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    if !(eps > 0.0) {
        return Err(NnError::InvalidSpec(format!("eps must be positive, got {eps}")));
    }
    let train = model.mode() == Mode::Train;
    let evaluate = |m: &Model<f64>| -> Result<(f64, Tensor<f64>, super::ForwardPass<f64>), NnError> {
        let mut rng = SeededRng::new(dropout_seed);
        let (pass, _) = m.run(batch, train, Some(&mut rng))?;
        let (value, dlogits) = loss_fn(&pass.logits);
        if !value.is_finite() {
            return Err(NnError::NonFiniteLoss);
        }
        Ok((value, dlogits, pass))
    };

    let (_, dlogits, pass) = evaluate(model)?;
    let analytic = model.backward(&pass, &dlogits)?;

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for layer in 0..model.params().len() {
        for tensor in 0..model.params()[layer].len() {
            for idx in 0..model.params()[layer][tensor].len() {
                let original = probe.params()[layer][tensor].data()[idx];
                probe.params_mut()[layer][tensor].data_mut()[idx] = original + eps;
                let (plus, _, _) = evaluate(&probe)?;
                probe.params_mut()[layer][tensor].data_mut()[idx] = original - eps;
                let (minus, _, _) = evaluate(&probe)?;
                probe.params_mut()[layer][tensor].data_mut()[idx] = original;

                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic.layers[layer][tensor].data()[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                report.checked += 1;
                if rel > report.max_relative_error || report.worst.is_none() {
                    report.max_relative_error = rel;
                    report.worst = Some((layer, tensor, idx));
                }
            }
        }
    }
    Ok(report)
}
