use super::TinyTransformer;
use crate::error::{Result, WiseError};
use crate::numerics::{cross_entropy_masked, Token};
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

/// Minibatch training on next-token loss over every parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Rescale the full gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub optimizer: Optimizer,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            lr: 6e-3,
            batch_size: 8,
            seed: 0,
            grad_clip: Some(1.0),
            optimizer: Optimizer::Adam,
            cosine_decay: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    pub final_loss: Option<f64>,
}

pub fn pretrain<T: Scalar>(
    model: &mut TinyTransformer<T>,
    corpus: &[Vec<Token>],
    cfg: &PretrainConfig,
) -> Result<TrainingLog> {
    let limit = model.config.max_seq_len + 1;
    let sequences: Vec<&[Token]> = corpus
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| &s[..s.len().min(limit)])
        .collect();
    if sequences.is_empty() {
        return Err(WiseError::Input("pretraining corpus has no usable sequence".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(WiseError::Config("batch_size and lr must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let inv_batch = T::one() / T::of(cfg.batch_size as f64);
    let mut adam = (cfg.optimizer == Optimizer::Adam).then(|| Adam::new(model));
    for step in 0..cfg.steps {
        let lr = if cfg.cosine_decay {
            let progress = step as f64 / cfg.steps as f64;
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            cfg.lr
        };
        let mut total = model.zeros_like();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let seq = sequences[rng.gen_range(0..sequences.len())];
            let inputs = &seq[..seq.len() - 1];
            let targets: Vec<Option<Token>> = seq[1..].iter().copied().map(Some).collect();
            let cache = model.forward_for_training(inputs)?;
            let (loss, d_logits) = cross_entropy_masked(&cache.logits, &targets)?;
            batch_loss += loss.as_f64();
            let grads = model.backward(&cache, &d_logits);
            for (acc, g) in total.params_mut().into_iter().zip(grads.params()) {
                acc.add_assign(g)?;
            }
        }
        let mut scale = inv_batch;
        if let Some(clip) = cfg.grad_clip {
            let norm = total
                .params()
                .iter()
                .map(|p| p.data().iter().map(|&x| (x * x).as_f64()).sum::<f64>())
                .sum::<f64>()
                .sqrt()
                / cfg.batch_size as f64;
            if norm > clip {
                scale = scale * T::of(clip / norm);
            }
        }
        match &mut adam {
            None => {
                let step = T::of(-lr) * scale;
                for (p, g) in model.params_mut().into_iter().zip(total.params()) {
                    p.axpy(step, g)?;
                }
            }
            Some(state) => state.step(model, &total, scale, lr),
        }
        let mean = batch_loss / cfg.batch_size as f64;
        if !mean.is_finite() {
            return Err(WiseError::Numeric("pretraining loss diverged".into()));
        }
        losses.push(mean);
    }
    Ok(TrainingLog {
        final_loss: losses.last().copied(),
        losses,
    })
}

struct Adam<T: Scalar> {
    m: TinyTransformer<T>,
    v: TinyTransformer<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &TinyTransformer<T>) -> Self {
        Self {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut TinyTransformer<T>, grads: &TinyTransformer<T>, scale: T, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(Self::BETA1), T::of(Self::BETA2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, eps) = (T::of(lr), T::of(Self::EPS));
        let params = model.params_mut();
        let ms = self.m.params_mut();
        let vs = self.v.params_mut();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(grads.params()) {
            let p = p.data_mut();
            let m = m.data_mut();
            let v = v.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * scale;
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Mean next-token loss over every sequence of `corpus`.
pub fn corpus_loss<T: Scalar>(model: &TinyTransformer<T>, corpus: &[Vec<Token>]) -> Result<f64> {
    let limit = model.config.max_seq_len + 1;
    let mut total = 0.0;
    let mut n = 0usize;
    for seq in corpus.iter().filter(|s| s.len() >= 2) {
        total += model.sequence_loss(&seq[..seq.len().min(limit)], None)?.as_f64();
        n += 1;
    }
    if n == 0 {
        return Err(WiseError::Input("corpus has no usable sequence".into()));
    }
    Ok(total / n as f64)
}
