use super::TinyTransformer;
use crate::error::{Result, WiseError};
use crate::numerics::{Matrix, Token};
use crate::scalar::Scalar;

/// Chooses the edit-layer value matrix for a query from its prompt
/// activations. `None` selects the model's own `W_v`.
pub trait ValueRouter<T: Scalar> {
    fn route(&self, prompt_activation: &Matrix<T>) -> Option<&Matrix<T>>;
}

/// Index of the largest logit in the last row; ties go to the lowest id.
pub fn argmax_last<T: Scalar>(logits: &Matrix<T>) -> Token {
    let row = logits.row(logits.rows() - 1);
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as Token
}

/// Greedy decoding of up to `max_new` tokens. The router is consulted once
/// on the prompt and its choice is held for the whole continuation.
/// Returns the prompt followed by the generated tokens.
pub fn greedy_decode<T: Scalar>(
    model: &TinyTransformer<T>,
    prompt: &[Token],
    max_new: usize,
    router: Option<&dyn ValueRouter<T>>,
) -> Result<Vec<Token>> {
    if prompt.is_empty() {
        return Err(WiseError::Input("empty prompt".into()));
    }
    let mut seq = prompt.to_vec();
    if max_new == 0 {
        return Ok(seq);
    }
    let prefix = model.edit_prefix(prompt)?;
    let chosen = router.and_then(|r| r.route(&prefix.activation));
    let values = chosen.unwrap_or(model.edit_values());
    let first = model.suffix_forward(&prefix, values)?;
    seq.push(argmax_last(&first.logits));
    while seq.len() < prompt.len() + max_new && seq.len() < model.config.max_seq_len {
        let trace = model.forward(&seq, chosen)?;
        seq.push(argmax_last(&trace.logits));
    }
    Ok(seq)
}
