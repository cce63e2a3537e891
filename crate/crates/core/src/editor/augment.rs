use super::config::{EditConfig, EditExample};
use crate::error::Result;
use crate::model::TinyTransformer;
use crate::numerics::Token;
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tokens a sampled prefix may start with.
const START_TOKENS: std::ops::RangeInclusive<Token> = (b'a' as Token)..=(b'z' as Token);

/// Samples `n_prefixes` random continuations from the unedited model and
/// prepends each to the edit prompt. The first token is drawn uniformly from
/// lowercase letters, the rest at temperature 1. Prefixes are shortened when
/// the result would not fit in the context window.
pub fn augment_prefixes<T: Scalar>(
    model: &TinyTransformer<T>,
    example: &EditExample,
    cfg: &EditConfig,
    seed: u64,
) -> Result<Vec<EditExample>> {
    let room = model
        .config
        .max_seq_len
        .saturating_sub(example.prompt.len() + example.target.len() - 1);
    let len = cfg.prefix_len.min(room);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.config.vocab_size as Token;
    let mut out = Vec::with_capacity(cfg.n_prefixes);
    for _ in 0..cfg.n_prefixes {
        let mut prefix = Vec::with_capacity(len);
        if len > 0 {
            let first = rng.gen_range(START_TOKENS);
            prefix.push(if first < vocab { first } else { rng.gen_range(0..vocab) });
        }
        while prefix.len() < len {
            let logits = model.forward(&prefix, None)?.logits;
            let last = logits.row(logits.rows() - 1);
            prefix.push(sample(last, &mut rng));
        }
        let mut variant = example.clone();
        prefix.extend_from_slice(&example.prompt);
        variant.prompt = prefix;
        out.push(variant);
    }
    Ok(out)
}

fn sample<T: Scalar>(logits: &[T], rng: &mut ChaCha8Rng) -> Token {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let weights: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as Token;
        }
        u -= w;
    }
    (weights.len() - 1) as Token
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn prefixes_are_deterministic_and_end_with_prompt() {
        let model = TinyTransformer::<f64>::new(ModelConfig::default(), 3).unwrap();
        let ex = EditExample::new(b"kobu lives in".iter().map(|&b| b as Token).collect(), vec![32, 120], vec![1]);
        let cfg = EditConfig::default();
        let a = augment_prefixes(&model, &ex, &cfg, 9).unwrap();
        let b = augment_prefixes(&model, &ex, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        for v in &a {
            assert_eq!(v.prompt.len(), cfg.prefix_len + ex.prompt.len());
            assert!(v.prompt.ends_with(&ex.prompt));
            assert!(START_TOKENS.contains(&v.prompt[0]));
            assert_eq!(v.target, ex.target);
        }
        assert_ne!(a, augment_prefixes(&model, &ex, &cfg, 10).unwrap());
    }

    #[test]
    fn prefixes_shrink_to_fit_context() {
        let config = ModelConfig {
            max_seq_len: 16,
            ..Default::default()
        };
        let model = TinyTransformer::<f64>::new(config, 3).unwrap();
        let ex = EditExample::new(vec![100; 10], vec![101, 102], vec![1]);
        let v = augment_prefixes(&model, &ex, &EditConfig::default(), 1).unwrap();
        assert!(v.iter().all(|v| v.prompt.len() == 15));
    }
}
