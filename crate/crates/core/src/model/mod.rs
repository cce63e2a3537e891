//! Tiny decoder-only transformer with a key–value FFN in every block and
//! hand-written backpropagation.

mod checkpoint;
mod config;
mod decode;
mod pretrain;
mod transformer;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::ModelConfig;
pub use decode::{argmax_last, greedy_decode, ValueRouter};
pub use pretrain::{corpus_loss, pretrain, Optimizer, PretrainConfig, TrainingLog};
pub use transformer::{Block, EditPrefix, ForwardTrace, FullCache, SuffixCache, TinyTransformer};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, softmax_rows, Matrix, Token};

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 16,
            d_ffn: 24,
            n_layers: 3,
            n_heads: 2,
            max_seq_len: 12,
            edit_layer: 1,
        }
    }

    fn tokens(n: usize, offset: u32) -> Vec<Token> {
        (0..n as u32).map(|i| (i * 7 + offset) % 32).collect()
    }

    #[test]
    fn value_override_with_copy_is_bitwise_identity() {
        let model = TinyTransformer::<f64>::new(ModelConfig::default(), 1).unwrap();
        let seq: Vec<Token> = b"kobu lives in".iter().map(|&b| b as Token).collect();
        let plain = model.forward(&seq, None).unwrap();
        let copy = model.edit_values().clone();
        let over = model.forward(&seq, Some(&copy)).unwrap();
        assert!(plain.logits.bit_eq(&over.logits));
        assert!(plain.ffn_activation.bit_eq(&over.ffn_activation));
    }

    #[test]
    fn changed_values_change_logits() {
        let model = TinyTransformer::<f64>::new(small_config(), 2).unwrap();
        let seq = tokens(6, 3);
        let plain = model.forward(&seq, None).unwrap();
        assert!(plain.ffn_activation.max_abs() > 0.0);
        let mut edited = model.edit_values().clone();
        edited.data_mut().iter_mut().for_each(|v| *v += 0.3);
        let over = model.forward(&seq, Some(&edited)).unwrap();
        assert!(!plain.logits.bit_eq(&over.logits));
    }

    #[test]
    fn zero_embeddings_give_uniform_predictions() {
        let mut model = TinyTransformer::<f64>::new(small_config(), 3).unwrap();
        model.token_embedding = Matrix::zeros(32, 16);
        model.position_embedding = Matrix::zeros(12, 16);
        let probs = softmax_rows(&model.forward(&tokens(5, 1), None).unwrap().logits);
        for &p in probs.data() {
            assert!((p - 1.0 / 32.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let model = TinyTransformer::<f64>::new(small_config(), 4).unwrap();
        let a = tokens(8, 2);
        let mut b = a.clone();
        b[5] = (b[5] + 1) % 32;
        b[7] = (b[7] + 9) % 32;
        let la = model.forward(&a, None).unwrap().logits;
        let lb = model.forward(&b, None).unwrap().logits;
        for t in 0..5 {
            assert_eq!(la.row(t), lb.row(t));
        }
        assert_ne!(la.row(5), lb.row(5));
    }

    #[test]
    fn too_long_sequence_and_bad_override_rejected() {
        let model = TinyTransformer::<f64>::new(small_config(), 5).unwrap();
        assert!(model.forward(&tokens(13, 0), None).is_err());
        let wrong = Matrix::zeros(3, 3);
        assert!(model.forward(&tokens(3, 0), Some(&wrong)).is_err());
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        let model = TinyTransformer::<f64>::new(small_config(), 6).unwrap();
        let seq = tokens(9, 4);
        let targets: Vec<Option<Token>> = (0..9)
            .map(|i| if i >= 4 { Some((i * 5 % 32) as Token) } else { None })
            .collect();
        let mut w = model.edit_values().clone();
        w.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * (i % 7) as f64);
        let (_, grad) = model.grad_value_matrix(&seq, &targets, Some(&w)).unwrap();
        let loss = |m: &Matrix<f64>| model.grad_value_matrix(&seq, &targets, Some(m)).unwrap().0;
        let report = finite_diff_check(loss, &w, &grad, 60, 11).unwrap();
        assert_eq!(report.num_probes, 60);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn full_backward_matches_finite_differences() {
        let model = TinyTransformer::<f64>::new(small_config(), 7).unwrap();
        let seq = tokens(7, 9);
        let (inputs, next) = (&seq[..6], &seq[1..]);
        let targets: Vec<Option<Token>> = next.iter().copied().map(Some).collect();
        let cache = model.forward_for_training(inputs).unwrap();
        let (_, d_logits) = crate::numerics::cross_entropy_masked(&cache.logits, &targets).unwrap();
        let grads = model.backward(&cache, &d_logits);
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (idx, name) in names.iter().enumerate() {
            let param = model.params()[idx].clone();
            let grad = grads.params()[idx].clone();
            let loss = |m: &Matrix<f64>| {
                let mut probe = model.clone();
                *probe.params_mut()[idx] = m.clone();
                let logits = probe.forward(inputs, None).unwrap().logits;
                crate::numerics::cross_entropy_masked(&logits, &targets).unwrap().0
            };
            let report = finite_diff_check(loss, &param, &grad, 8, idx as u64).unwrap();
            assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
        }
    }

    #[test]
    fn saturated_prediction_has_no_loss_or_gradient() {
        let mut model = TinyTransformer::<f64>::new(small_config(), 8).unwrap();
        model.final_gain = Matrix::zeros(1, 16);
        model.final_bias = Matrix::zeros(1, 16);
        model.final_bias.set(0, 0, 1.0);
        model.unembed = Matrix::zeros(16, 32);
        model.unembed.set(0, 5, 40.0);
        let seq = tokens(4, 0);
        let targets = vec![Some(5); 4];
        let (loss, grad) = model.grad_value_matrix(&seq, &targets, None).unwrap();
        assert!(loss < 1e-6);
        assert!(grad.max_abs() < 1e-6);
    }

    #[test]
    fn loss_mask_averages_over_scored_positions() {
        let model = TinyTransformer::<f64>::new(small_config(), 9).unwrap();
        let seq = tokens(6, 5);
        let logits = model.forward(&seq, None).unwrap().logits;
        // explicit per-position NLL oracle
        let nll = |r: usize, t: usize| {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            z - row[t]
        };
        let both = [None, None, None, None, Some(3), Some(8)];
        let one = [None, None, None, None, Some(3), None];
        let (l2, _) = model.grad_value_matrix(&seq, &both, None).unwrap();
        let (l1, _) = model.grad_value_matrix(&seq, &one, None).unwrap();
        assert!((l1 - nll(4, 3)).abs() < 1e-12);
        assert!((l2 - 0.5 * (nll(4, 3) + nll(5, 8))).abs() < 1e-12);
        assert!(model.grad_value_matrix(&seq, &one[..5], None).is_err());
    }

    #[test]
    fn pretraining_is_deterministic_and_zero_steps_is_identity() {
        let corpus: Vec<Vec<Token>> = (0..6).map(|i| tokens(10, i)).collect();
        let base = TinyTransformer::<f64>::new(small_config(), 10).unwrap();
        let mut untouched = base.clone();
        let cfg = PretrainConfig {
            steps: 0,
            ..Default::default()
        };
        pretrain(&mut untouched, &corpus, &cfg).unwrap();
        assert_eq!(untouched, base);

        let cfg = PretrainConfig {
            steps: 20,
            seed: 3,
            ..Default::default()
        };
        let mut a = base.clone();
        let mut b = base.clone();
        pretrain(&mut a, &corpus, &cfg).unwrap();
        pretrain(&mut b, &corpus, &cfg).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!(x.bit_eq(y));
        }
        assert!(pretrain(&mut a, &[], &cfg).is_err());
    }

    #[test]
    fn pretraining_reduces_loss() {
        let corpus: Vec<Vec<Token>> = (0..4).map(|i| tokens(11, i * 3)).collect();
        let mut model = TinyTransformer::<f64>::new(small_config(), 11).unwrap();
        let before = corpus_loss(&model, &corpus).unwrap();
        let cfg = PretrainConfig {
            steps: 2000,
            lr: 3e-3,
            batch_size: 2,
            ..Default::default()
        };
        pretrain(&mut model, &corpus, &cfg).unwrap();
        let after = corpus_loss(&model, &corpus).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn greedy_decode_basics() {
        let model = TinyTransformer::<f64>::new(small_config(), 12).unwrap();
        let prompt = tokens(3, 1);
        assert_eq!(greedy_decode(&model, &prompt, 0, None).unwrap(), prompt);
        let a = greedy_decode(&model, &prompt, 4, None).unwrap();
        let b = greedy_decode(&model, &prompt, 4, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        assert_eq!(&a[..3], &prompt[..]);
        // never runs past the context window
        assert_eq!(greedy_decode(&model, &tokens(10, 0), 8, None).unwrap().len(), 12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let logits = Matrix::from_rows(&[[0.0, 2.0, 2.0, 1.0]]).unwrap();
        assert_eq!(argmax_last(&logits), 1);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = TinyTransformer::<f64>::new(small_config(), 13).unwrap();
        let mut ckpt = Checkpoint::new();
        model.write_to(&mut ckpt);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let restored = TinyTransformer::<f64>::read_from(&back).unwrap();
        for (x, y) in model.params().iter().zip(restored.params()) {
            assert!(x.bit_eq(y));
        }
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT00000000").is_err());
    }

    #[test]
    fn single_precision_model_runs() {
        let model = TinyTransformer::<f32>::new(small_config(), 14).unwrap();
        let trace = model.forward(&tokens(5, 2), None).unwrap();
        assert!(trace.logits.is_finite());
        assert_eq!(trace.ffn_activation.shape(), (5, 24));
    }
}
