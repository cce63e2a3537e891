use super::config::{EditConfig, EditExample};
use crate::error::{Result, WiseError};
use crate::model::{EditPrefix, TinyTransformer};
use crate::numerics::{Matrix, Token};
use crate::scalar::Scalar;
use crate::side_memory::{activation_shift_grad, SideMemory};

/// Value and partial derivatives of the activation margin loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginTerms {
    pub loss: f64,
    pub d_edit: f64,
    pub d_irrelevant: f64,
}

/// `max(0, Δi − α) + max(0, β − Δe) + max(0, γ − (Δe − Δi))`
pub fn margin_loss(delta_edit: f64, delta_irrelevant: f64, cfg: &EditConfig) -> MarginTerms {
    let mut t = MarginTerms {
        loss: 0.0,
        d_edit: 0.0,
        d_irrelevant: 0.0,
    };
    let h1 = delta_irrelevant - cfg.alpha;
    if h1 > 0.0 {
        t.loss += h1;
        t.d_irrelevant += 1.0;
    }
    let h2 = cfg.beta - delta_edit;
    if h2 > 0.0 {
        t.loss += h2;
        t.d_edit -= 1.0;
    }
    let h3 = cfg.gamma - (delta_edit - delta_irrelevant);
    if h3 > 0.0 {
        t.loss += h3;
        t.d_edit -= 1.0;
        t.d_irrelevant += 1.0;
    }
    t
}

/// Loss components of one optimisation step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EditLoss {
    pub autoregressive: f64,
    pub margin: f64,
    pub memo: f64,
    pub delta_edit: f64,
    pub delta_irrelevant: f64,
}

impl EditLoss {
    pub fn total(&self) -> f64 {
        self.autoregressive + self.margin + self.memo
    }
}

/// Edit prompt with its edit-layer prefix computed once.
#[derive(Clone, Debug)]
pub struct PreparedEdit<T: Scalar = f64> {
    pub prefix: EditPrefix<T>,
    pub targets: Vec<Option<Token>>,
    pub prompt_len: usize,
}

impl<T: Scalar> PreparedEdit<T> {
    pub fn new(model: &TinyTransformer<T>, example: &EditExample) -> Result<Self> {
        example.validate()?;
        let prefix = model.edit_prefix(&example.training_tokens())?;
        Ok(Self {
            prefix,
            targets: example.training_targets(),
            prompt_len: example.prompt.len(),
        })
    }

    /// Activation rows of the prompt tokens only.
    pub fn prompt_activation(&self) -> Matrix<T> {
        self.prefix.activation.head_rows(self.prompt_len)
    }
}

/// Full editing objective on cached activations, with its gradient w.r.t.
/// the side memory values.
pub fn prepared_edit_loss<T: Scalar>(
    model: &TinyTransformer<T>,
    values: &Matrix<T>,
    edit: &PreparedEdit<T>,
    irrelevant: &[&Matrix<T>],
    cfg: &EditConfig,
) -> Result<(EditLoss, Matrix<T>)> {
    let main = model.edit_values();
    let shift = values.sub(main)?;
    let (ar, mut grad) = model.prefix_loss_and_grad(&edit.prefix, &edit.targets, values)?;
    let (de, g_e) = activation_shift_grad(&shift, &edit.prompt_activation(), cfg.aggregation)?;

    let mut di = T::zero();
    let mut g_i = Matrix::zeros(shift.rows(), shift.cols());
    if !irrelevant.is_empty() {
        let inv = T::one() / T::of(irrelevant.len() as f64);
        for rows in irrelevant {
            let (d, g) = activation_shift_grad(&shift, rows, cfg.aggregation)?;
            di += d * inv;
            g_i.axpy(inv, &g)?;
        }
    }
    let terms = margin_loss(de.as_f64(), di.as_f64(), cfg);
    if irrelevant.is_empty() && terms.d_irrelevant != 0.0 {
        return Err(WiseError::Config(
            "margin loss needs irrelevant examples while the gap hinge is active".into(),
        ));
    }
    grad.axpy(T::of(terms.d_edit), &g_e)?;
    grad.axpy(T::of(terms.d_irrelevant), &g_i)?;
    Ok((
        EditLoss {
            autoregressive: ar.as_f64(),
            margin: terms.loss,
            memo: 0.0,
            delta_edit: de.as_f64(),
            delta_irrelevant: di.as_f64(),
        },
        grad,
    ))
}

/// Autoregressive loss on the edit plus the activation margin loss against
/// the irrelevant prompts, and its gradient w.r.t. `side.values`.
pub fn edit_loss<T: Scalar>(
    model: &TinyTransformer<T>,
    side: &SideMemory<T>,
    example: &EditExample,
    irrelevants: &[Vec<Token>],
    cfg: &EditConfig,
) -> Result<(EditLoss, Matrix<T>)> {
    let edit = PreparedEdit::new(model, example)?;
    let rows = irrelevants
        .iter()
        .map(|x| model.ffn_activation(x))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix<T>> = rows.iter().collect();
    prepared_edit_loss(model, &side.values, &edit, &refs, cfg)
}

/// `max(0, Δ(x_m) − α)` on a prompt absorbed by an earlier memory, pushing
/// it away from the current one. Returns the loss and its gradient.
pub fn memo_loss<T: Scalar>(
    model: &TinyTransformer<T>,
    values: &Matrix<T>,
    replay_rows: &Matrix<T>,
    cfg: &EditConfig,
) -> Result<(f64, Matrix<T>)> {
    let shift = values.sub(model.edit_values())?;
    let (d, g) = activation_shift_grad(&shift, replay_rows, cfg.aggregation)?;
    let excess = d.as_f64() - cfg.alpha;
    if excess > 0.0 {
        Ok((excess, g))
    } else {
        Ok((0.0, Matrix::zeros(shift.rows(), shift.cols())))
    }
}

/// `W' ← W' − η (M ⊙ g)` on the active shard's mask. Entries outside the
/// mask are not touched.
pub fn masked_step<T: Scalar>(side: &mut SideMemory<T>, grad: &Matrix<T>, lr: f64) -> Result<()> {
    grad.check_same_shape(&side.values, "masked_step")?;
    let lr = T::of(lr);
    let mask = &side.masks[side.active_shard];
    let values = side.values.data_mut();
    for i in mask.support() {
        values[i] -= lr * grad.data()[i];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::finite_diff_check;

    fn cfg() -> EditConfig {
        EditConfig::default()
    }

    #[test]
    fn margin_inactive_when_separated() {
        let t = margin_loss(25.0, 3.0, &cfg());
        assert_eq!(t.loss, 0.0);
        assert_eq!((t.d_edit, t.d_irrelevant), (0.0, 0.0));
    }

    #[test]
    fn margin_all_hinges_active() {
        // (6 − 5) + (20 − 10) + (10 − (10 − 6)) = 1 + 10 + 6
        let t = margin_loss(10.0, 6.0, &cfg());
        assert_eq!(t.loss, 17.0);
        assert_eq!((t.d_edit, t.d_irrelevant), (-2.0, 2.0));
    }

    #[test]
    fn margin_only_gap_active() {
        // Δe above β, Δi below α, but the gap is 9 < 10
        let t = margin_loss(21.0, 12.0, &EditConfig { alpha: 15.0, ..cfg() });
        assert_eq!(t.loss, 1.0);
        assert_eq!((t.d_edit, t.d_irrelevant), (-1.0, 1.0));
    }

    fn small() -> TinyTransformer<f64> {
        let config = ModelConfig {
            vocab_size: 32,
            d_model: 16,
            d_ffn: 24,
            n_layers: 3,
            n_heads: 2,
            max_seq_len: 16,
            edit_layer: 1,
        };
        TinyTransformer::new(config, 21).unwrap()
    }

    #[test]
    fn edit_loss_gradient_matches_finite_differences() {
        let model = small();
        let mut side = SideMemory::init(model.edit_values(), 2, 0.5, 1).unwrap();
        side.values.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.05 * ((i % 5) as f64 - 2.0));
        let ex = EditExample::new(vec![3, 9, 4, 1], vec![7, 2], vec![5, 6]);
        let irr = vec![vec![11, 12, 13], vec![14, 15]];
        let c = EditConfig {
            alpha: 0.01,
            beta: 5.0,
            gamma: 3.0,
            ..cfg()
        };
        let (parts, grad) = edit_loss(&model, &side, &ex, &irr, &c).unwrap();
        assert!(parts.margin > 0.0);
        let loss = |m: &Matrix<f64>| {
            let mut s = side.clone();
            s.values = m.clone();
            edit_loss(&model, &s, &ex, &irr, &c).unwrap().0.total()
        };
        let report = finite_diff_check(loss, &side.values, &grad, 60, 5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn empty_irrelevant_batch_with_gap_hinge_is_config_error() {
        let model = small();
        let side = SideMemory::init(model.edit_values(), 2, 0.5, 1).unwrap();
        let ex = EditExample::new(vec![3, 9], vec![7], vec![5]);
        assert!(matches!(
            edit_loss(&model, &side, &ex, &[], &cfg()),
            Err(WiseError::Config(_))
        ));
    }

    #[test]
    fn masked_step_leaves_complement_untouched() {
        let model = small();
        let mut side = SideMemory::init(model.edit_values(), 2, 0.3, 4).unwrap();
        let before = side.values.clone();
        let grad = Matrix::filled(before.rows(), before.cols(), 1.0);
        masked_step(&mut side, &grad, 0.5).unwrap();
        for i in 0..before.len() {
            let (a, b) = (before.data()[i], side.values.data()[i]);
            if side.active_mask().get(i) {
                assert_eq!(b, a - 0.5);
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn memo_loss_only_above_alpha() {
        let model = small();
        let rows = model.ffn_activation(&[1, 2, 3]).unwrap();
        let (l, g) = memo_loss(&model, model.edit_values(), &rows, &cfg()).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.max_abs(), 0.0);
        let mut far = model.edit_values().clone();
        far.data_mut().iter_mut().for_each(|v| *v += 10.0);
        let (l, g) = memo_loss(&model, &far, &rows, &cfg()).unwrap();
        assert!(l > 0.0 && g.max_abs() > 0.0);
    }
}
