use super::dataset::EditStream;
use super::eval::{evaluate_with, LocalityReference, MetricsReport};
use crate::editor::EditConfig;
use crate::error::{Result, WiseError};
use crate::model::TinyTransformer;
use crate::scalar::Scalar;

/// Sequential fine-tuning of the edit layer's `W_v` itself: no mask, no
/// routing, no constraint. Each edit takes `steps` SGD steps on its
/// autoregressive loss.
pub fn baseline_ft<T: Scalar>(
    model: &TinyTransformer<T>,
    stream: &EditStream,
    lr: f64,
    steps: usize,
) -> Result<(TinyTransformer<T>, MetricsReport)> {
    if !(lr > 0.0) {
        return Err(WiseError::Config(format!("lr must be positive, got {lr}")));
    }
    let reference = LocalityReference::compute(model, stream)?;
    let mut edited = model.clone();
    let start = std::time::Instant::now();
    for ex in &stream.examples {
        ex.validate()?;
        // the prefix does not depend on W_v of the edit layer
        let prefix = edited.edit_prefix(&ex.training_tokens())?;
        let targets = ex.training_targets();
        for _ in 0..steps {
            let (loss, grad) = edited.prefix_loss_and_grad(&prefix, &targets, edited.edit_values())?;
            if !loss.is_finite() {
                return Err(WiseError::Numeric("fine-tuning loss diverged".into()));
            }
            edited.edit_values_mut().axpy(T::of(-lr), &grad)?;
        }
    }
    let wall = start.elapsed().as_secs_f64();
    let mut report = evaluate_with(&edited, None, stream, &reference)?;
    report.wall_time = wall;
    Ok((edited, report))
}

/// [`baseline_ft`] with the step size and count of an editing config.
pub fn baseline_ft_like<T: Scalar>(
    model: &TinyTransformer<T>,
    stream: &EditStream,
    cfg: &EditConfig,
) -> Result<(TinyTransformer<T>, MetricsReport)> {
    baseline_ft(model, stream, cfg.lr, cfg.steps_per_edit)
}
