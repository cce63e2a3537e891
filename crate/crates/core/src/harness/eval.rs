use super::dataset::EditStream;
use crate::error::Result;
use crate::model::{greedy_decode, TinyTransformer, ValueRouter};
use crate::numerics::{cross_entropy_masked, Token};
use crate::scalar::Scalar;
use crate::side_memory::MemoryBank;
use serde::{Deserialize, Serialize};

/// Edit-quality metrics on the final model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub t_edits: usize,
    pub rel: f64,
    pub gen: f64,
    pub loc: f64,
    pub avg: f64,
    pub ppl_loc: f64,
    /// Per-token accuracy on edit prompts, for diagnostics only.
    pub rel_token: f64,
    /// Examples that carried a paraphrase.
    pub gen_count: usize,
    /// Seconds spent editing.
    pub wall_time: f64,
}

impl MetricsReport {
    fn new(t_edits: usize, rel: f64, gen: f64, loc: f64, ppl_loc: f64) -> Self {
        Self {
            t_edits,
            rel,
            gen,
            loc,
            avg: (rel + gen + loc) / 3.0,
            ppl_loc,
            rel_token: 0.0,
            gen_count: 0,
            wall_time: 0.0,
        }
    }
}

/// Greedy outputs of the unedited model on the locality probes, computed
/// once before editing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalityReference {
    pub outputs: Vec<Vec<Token>>,
}

impl LocalityReference {
    pub fn compute<T: Scalar>(model: &TinyTransformer<T>, stream: &EditStream) -> Result<Self> {
        let outputs = stream
            .examples
            .iter()
            .map(|ex| continuation(model, None, &ex.locality, ex.target.len()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { outputs })
    }
}

fn continuation<T: Scalar>(
    model: &TinyTransformer<T>,
    router: Option<&dyn ValueRouter<T>>,
    prompt: &[Token],
    len: usize,
) -> Result<Vec<Token>> {
    let out = greedy_decode(model, prompt, len, router)?;
    Ok(out[prompt.len()..].to_vec())
}

fn exact(model_out: &[Token], target: &[Token]) -> bool {
    model_out.len() >= target.len() && model_out[..target.len()] == *target
}

/// Rel / Gen / Loc as exact-match rates of the greedy continuation,
/// truncated to the target length, and the perplexity on the locality
/// probes. `router` picks the value matrix per query; `None` uses `W_v`.
pub fn evaluate_with<T: Scalar>(
    model: &TinyTransformer<T>,
    router: Option<&dyn ValueRouter<T>>,
    stream: &EditStream,
    reference: &LocalityReference,
) -> Result<MetricsReport> {
    let n = stream.len();
    if n == 0 {
        return Ok(MetricsReport::new(0, 0.0, 0.0, 1.0, 1.0));
    }
    let (mut rel, mut gen, mut gen_count, mut loc) = (0usize, 0usize, 0usize, 0usize);
    let (mut tokens_right, mut tokens_total) = (0usize, 0usize);
    let (mut nll, mut scored) = (0.0, 0usize);
    for (ex, reference) in stream.examples.iter().zip(&reference.outputs) {
        let out = continuation(model, router, &ex.prompt, ex.target.len())?;
        rel += exact(&out, &ex.target) as usize;
        tokens_right += out.iter().zip(&ex.target).filter(|(a, b)| a == b).count();
        tokens_total += ex.target.len();
        if let Some(p) = &ex.paraphrase {
            gen_count += 1;
            gen += exact(&continuation(model, router, p, ex.target.len())?, &ex.target) as usize;
        }
        loc += (continuation(model, router, &ex.locality, ex.target.len())? == *reference) as usize;
        if ex.locality.len() >= 2 {
            let (loss, count) = probe_nll(model, router, &ex.locality)?;
            nll += loss;
            scored += count;
        }
    }
    let nf = n as f64;
    let gen_rate = if gen_count == 0 { 0.0 } else { gen as f64 / gen_count as f64 };
    let ppl = if scored == 0 { 1.0 } else { (nll / scored as f64).exp() };
    let mut report = MetricsReport::new(n, rel as f64 / nf, gen_rate, loc as f64 / nf, ppl);
    report.rel_token = tokens_right as f64 / tokens_total as f64;
    report.gen_count = gen_count;
    Ok(report)
}

/// Summed next-token NLL over the probe and the number of scored tokens.
/// The value matrix is routed on the whole probe.
fn probe_nll<T: Scalar>(
    model: &TinyTransformer<T>,
    router: Option<&dyn ValueRouter<T>>,
    probe: &[Token],
) -> Result<(f64, usize)> {
    let values = match router {
        Some(r) => r.route(&model.ffn_activation(probe)?),
        None => None,
    };
    let inputs = &probe[..probe.len() - 1];
    let targets: Vec<Option<Token>> = probe[1..].iter().copied().map(Some).collect();
    let logits = model.forward(inputs, values)?.logits;
    let (mean, _) = cross_entropy_masked(&logits, &targets)?;
    Ok((mean.as_f64() * targets.len() as f64, targets.len()))
}

/// [`evaluate_with`] routing through `bank`. The locality reference is the
/// unedited model, which editing leaves untouched.
pub fn evaluate<T: Scalar>(
    model: &TinyTransformer<T>,
    bank: &MemoryBank<T>,
    stream: &EditStream,
) -> Result<MetricsReport> {
    let reference = LocalityReference::compute(model, stream)?;
    evaluate_with(model, Some(bank), stream, &reference)
}

/// Fraction of examples whose unedited greedy continuation is their original
/// object. Examples without an original are skipped; `None` if none remain.
pub fn pre_edit_rel<T: Scalar>(model: &TinyTransformer<T>, stream: &EditStream) -> Result<Option<f64>> {
    let (mut hit, mut n) = (0usize, 0usize);
    for ex in &stream.examples {
        if let Some(orig) = &ex.original {
            n += 1;
            hit += exact(&continuation(model, None, &ex.prompt, orig.len())?, orig) as usize;
        }
    }
    Ok((n > 0).then(|| hit as f64 / n as f64))
}

/// Routing activations of edit prompts and of unrelated prompts, labelled
/// `edit` / `irrelevant`.
pub fn activation_histogram<T: Scalar>(
    model: &TinyTransformer<T>,
    bank: &MemoryBank<T>,
    stream: &EditStream,
    unrelated: &[Vec<Token>],
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::with_capacity(stream.len() + unrelated.len());
    for ex in &stream.examples {
        let d = bank.max_activation(&model.ffn_activation(&ex.prompt)?)?;
        out.push(("edit".to_string(), d.as_f64()));
    }
    for x in unrelated {
        let d = bank.max_activation(&model.ffn_activation(x)?)?;
        out.push(("irrelevant".to_string(), d.as_f64()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editor::EditExample;
    use crate::model::ModelConfig;
    use crate::numerics::Matrix;

    fn tiny() -> TinyTransformer<f64> {
        let cfg = ModelConfig {
            d_model: 16,
            d_ffn: 32,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 32,
            edit_layer: 1,
            ..Default::default()
        };
        TinyTransformer::new(cfg, 11).unwrap()
    }

    fn toks(s: &str) -> Vec<Token> {
        s.bytes().map(Token::from).collect()
    }

    fn stream_of(examples: Vec<EditExample>) -> EditStream {
        EditStream { examples, corpus_ref: None }
    }

    /// Routes to `values` only for the query whose activation equals `key`.
    struct OneQuery {
        key: Matrix<f64>,
        values: Matrix<f64>,
    }

    impl ValueRouter<f64> for OneQuery {
        fn route(&self, a: &Matrix<f64>) -> Option<&Matrix<f64>> {
            a.bit_eq(&self.key).then_some(&self.values)
        }
    }

    #[test]
    fn empty_stream_is_local() {
        let m = tiny();
        let s = stream_of(Vec::new());
        let r = evaluate(&m, &MemoryBank::empty(m.edit_values()), &s).unwrap();
        assert_eq!((r.t_edits, r.loc), (0, 1.0));
    }

    #[test]
    fn no_edits_matches_raw_model() {
        let m = tiny();
        let ex: Vec<_> = (0..4)
            .map(|i| EditExample::new(toks(&format!("q{i} is")), toks(" xy"), toks(&format!("probe {i} text"))))
            .collect();
        let s = stream_of(ex);
        let bank = MemoryBank::empty(m.edit_values());
        let routed = evaluate(&m, &bank, &s).unwrap();
        let reference = LocalityReference::compute(&m, &s).unwrap();
        let raw = evaluate_with(&m, None, &s, &reference).unwrap();
        assert_eq!(routed.loc, 1.0);
        assert_eq!(routed.ppl_loc.to_bits(), raw.ppl_loc.to_bits());
        assert_eq!(routed, raw);
    }

    #[test]
    fn pre_edit_rel_scores_originals() {
        let m = tiny();
        let prompt = toks("abc is");
        let said = continuation(&m, None, &prompt, 2).unwrap();
        let mut wrong = said.clone();
        wrong[0] = if wrong[0] == 0 { 1 } else { 0 };
        let mut a = EditExample::new(prompt.clone(), toks(" q"), toks("loc"));
        a.original = Some(said);
        let mut b = EditExample::new(prompt.clone(), toks(" q"), toks("loc"));
        b.original = Some(wrong);
        let c = EditExample::new(prompt, toks(" q"), toks("loc"));
        assert_eq!(pre_edit_rel(&m, &stream_of(vec![a, b, c])).unwrap(), Some(0.5));
        assert_eq!(pre_edit_rel(&m, &stream_of(Vec::new())).unwrap(), None);
    }

    #[test]
    fn counts_rel_and_gen() {
        let m = tiny();
        let prompt = toks("abc is");
        let target = continuation(&m, None, &prompt, 3).unwrap();
        let other = ["zz", "qqq", "hello", "mm mm", "xo"]
            .into_iter()
            .map(toks)
            .find(|p| continuation(&m, None, p, 3).unwrap() != target)
            .expect("some prompt continues differently");
        let mut a = EditExample::new(prompt.clone(), target.clone(), toks("loc a"));
        a.paraphrase = Some(prompt.clone());
        let mut b = EditExample::new(prompt, target, toks("loc b"));
        b.paraphrase = Some(other);
        let s = stream_of(vec![a, b]);
        let reference = LocalityReference::compute(&m, &s).unwrap();
        let r = evaluate_with(&m, None, &s, &reference).unwrap();
        assert_eq!((r.rel, r.gen, r.loc, r.gen_count), (1.0, 0.5, 1.0, 2));
        assert!((r.avg - 2.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn one_disturbed_probe_costs_one_over_t() {
        let m = tiny();
        let t = 5;
        let ex: Vec<_> = (0..t)
            .map(|i| EditExample::new(toks(&format!("e{i} is")), toks(" xyz"), toks(&format!("loc{i} says"))))
            .collect();
        let s = stream_of(ex);
        let reference = LocalityReference::compute(&m, &s).unwrap();
        let probe = &s.examples[2].locality;
        let key = m.ffn_activation(probe).unwrap();
        let router = [-40.0, 25.0, -5.0, 60.0]
            .into_iter()
            .map(|f| OneQuery { key: key.clone(), values: m.edit_values().scale(f) })
            .find(|r| continuation(&m, Some(r), probe, 3).unwrap() != reference.outputs[2])
            .expect("some scaling changes the probe output");
        let r = evaluate_with(&m, Some(&router), &s, &reference).unwrap();
        assert_eq!(r.loc, (t - 1) as f64 / t as f64);
    }
}
