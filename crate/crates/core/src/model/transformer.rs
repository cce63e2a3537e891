use super::ModelConfig;
use crate::error::{Result, WiseError};
use crate::numerics::{
    cross_entropy_masked, dot, gelu, gelu_backward, layer_norm_backward, layer_norm_forward,
    softmax_in_place, LayerNormCache, Matrix, Token,
};
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One pre-LN transformer block. The FFN has no biases:
/// `FFN(f) = gelu(f · ffn_key) · ffn_value`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T: Scalar = f64> {
    pub ln1_gain: Matrix<T>,
    pub ln1_bias: Matrix<T>,
    pub attn_query: Matrix<T>,
    pub attn_key: Matrix<T>,
    pub attn_value: Matrix<T>,
    pub attn_output: Matrix<T>,
    pub ln2_gain: Matrix<T>,
    pub ln2_bias: Matrix<T>,
    /// d_model × d_ffn
    pub ffn_key: Matrix<T>,
    /// d_ffn × d_model
    pub ffn_value: Matrix<T>,
}

const BLOCK_PARAM_NAMES: [&str; 10] = [
    "ln1_gain",
    "ln1_bias",
    "attn_query",
    "attn_key",
    "attn_value",
    "attn_output",
    "ln2_gain",
    "ln2_bias",
    "ffn_key",
    "ffn_value",
];

impl<T: Scalar> Block<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            ln1_gain: Matrix::zeros(1, d),
            ln1_bias: Matrix::zeros(1, d),
            attn_query: Matrix::zeros(d, d),
            attn_key: Matrix::zeros(d, d),
            attn_value: Matrix::zeros(d, d),
            attn_output: Matrix::zeros(d, d),
            ln2_gain: Matrix::zeros(1, d),
            ln2_bias: Matrix::zeros(1, d),
            ffn_key: Matrix::zeros(d, cfg.d_ffn),
            ffn_value: Matrix::zeros(cfg.d_ffn, d),
        }
    }

    fn params(&self) -> [&Matrix<T>; 10] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.attn_query,
            &self.attn_key,
            &self.attn_value,
            &self.attn_output,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ffn_key,
            &self.ffn_value,
        ]
    }

    fn params_mut(&mut self) -> [&mut Matrix<T>; 10] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.attn_query,
            &mut self.attn_key,
            &mut self.attn_value,
            &mut self.attn_output,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ffn_key,
            &mut self.ffn_value,
        ]
    }
}

/// Decoder-only language model over byte tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyTransformer<T: Scalar = f64> {
    pub config: ModelConfig,
    pub token_embedding: Matrix<T>,
    pub position_embedding: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    pub final_gain: Matrix<T>,
    pub final_bias: Matrix<T>,
    /// d_model × vocab
    pub unembed: Matrix<T>,
}

/// Output of [`TinyTransformer::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T: Scalar = f64> {
    /// seq_len × vocab
    pub logits: Matrix<T>,
    /// seq_len × d_ffn activation `gelu(f · W_k)` at the edit layer.
    pub ffn_activation: Matrix<T>,
}

/// Residual stream and FFN activation at the edit layer, right before the
/// value matrix is applied. Nothing here depends on that value matrix, so an
/// editor can compute it once per prompt and reuse it across steps.
#[derive(Clone, Debug)]
pub struct EditPrefix<T: Scalar = f64> {
    pub residual: Matrix<T>,
    pub activation: Matrix<T>,
}

impl<T: Scalar> EditPrefix<T> {
    pub fn seq_len(&self) -> usize {
        self.residual.rows()
    }
}

struct AttnCache<T: Scalar> {
    ln: LayerNormCache<T>,
    normed: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// One seq × seq causal probability matrix per head.
    probs: Vec<Matrix<T>>,
    concat: Matrix<T>,
}

struct FfnCache<T: Scalar> {
    ln: LayerNormCache<T>,
    normed: Matrix<T>,
    pre_act: Matrix<T>,
    act: Matrix<T>,
}

struct BlockCache<T: Scalar> {
    attn: AttnCache<T>,
    ffn: FfnCache<T>,
}

struct HeadCache<T: Scalar> {
    ln: LayerNormCache<T>,
    normed: Matrix<T>,
}

/// Everything the full backward pass needs.
pub struct FullCache<T: Scalar> {
    tokens: Vec<Token>,
    blocks: Vec<BlockCache<T>>,
    head: HeadCache<T>,
    pub logits: Matrix<T>,
}

/// Cache for the part of the network downstream of the edit-layer FFN.
pub struct SuffixCache<T: Scalar> {
    blocks: Vec<BlockCache<T>>,
    head: HeadCache<T>,
    pub logits: Matrix<T>,
}

impl<T: Scalar> TinyTransformer<T> {
    /// Random initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = config.d_ffn;
        let proj = 1.0 / (d as f64).sqrt();
        let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let token_embedding = Matrix::random_normal(config.vocab_size, d, 1.0, &mut rng);
        let position_embedding = Matrix::random_normal(config.max_seq_len, d, 0.5, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_gain: Matrix::filled(1, d, T::one()),
                ln1_bias: Matrix::zeros(1, d),
                attn_query: Matrix::random_normal(d, d, proj, &mut rng),
                attn_key: Matrix::random_normal(d, d, proj, &mut rng),
                attn_value: Matrix::random_normal(d, d, proj, &mut rng),
                attn_output: Matrix::random_normal(d, d, proj * residual_scale, &mut rng),
                ln2_gain: Matrix::filled(1, d, T::one()),
                ln2_bias: Matrix::zeros(1, d),
                ffn_key: Matrix::random_normal(d, f, proj, &mut rng),
                ffn_value: Matrix::random_normal(
                    f,
                    d,
                    residual_scale / (f as f64).sqrt(),
                    &mut rng,
                ),
            })
            .collect();
        Ok(Self {
            token_embedding,
            position_embedding,
            blocks,
            final_gain: Matrix::filled(1, d, T::one()),
            final_bias: Matrix::zeros(1, d),
            unembed: Matrix::random_normal(d, config.vocab_size, proj, &mut rng),
            config,
        })
    }

    /// Same shapes, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let cfg = &self.config;
        Self {
            config: cfg.clone(),
            token_embedding: Matrix::zeros(cfg.vocab_size, cfg.d_model),
            position_embedding: Matrix::zeros(cfg.max_seq_len, cfg.d_model),
            blocks: (0..cfg.n_layers).map(|_| Block::zeros(cfg)).collect(),
            final_gain: Matrix::zeros(1, cfg.d_model),
            final_bias: Matrix::zeros(1, cfg.d_model),
            unembed: Matrix::zeros(cfg.d_model, cfg.vocab_size),
        }
    }

    /// Value matrix `W_v` of the edit layer.
    pub fn edit_values(&self) -> &Matrix<T> {
        &self.blocks[self.config.edit_layer].ffn_value
    }

    pub fn edit_values_mut(&mut self) -> &mut Matrix<T> {
        let l = self.config.edit_layer;
        &mut self.blocks[l].ffn_value
    }

    /// Named parameters in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, p) in BLOCK_PARAM_NAMES.iter().zip(b.params()) {
                out.push((format!("block/{l}/{name}"), p));
            }
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out.push(&mut self.unembed);
        out
    }

    pub fn params(&self) -> Vec<&Matrix<T>> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.is_empty() {
            return Err(WiseError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(WiseError::Input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(WiseError::Input(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }

    fn check_override(&self, value_override: Option<&Matrix<T>>) -> Result<()> {
        if let Some(v) = value_override {
            v.check_same_shape(self.edit_values(), "value_override")?;
        }
        Ok(())
    }

    fn embed(&self, tokens: &[Token]) -> Matrix<T> {
        let d = self.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            let tok = self.token_embedding.row(t as usize);
            let pos = self.position_embedding.row(i);
            for ((o, &a), &b) in x.row_mut(i).iter_mut().zip(tok).zip(pos) {
                *o = a + b;
            }
        }
        x
    }

    fn attn_half(&self, block: &Block<T>, x: Matrix<T>) -> (Matrix<T>, AttnCache<T>) {
        let (normed, ln) =
            layer_norm_forward(&x, &block.ln1_gain, &block.ln1_bias).expect("ln1 shapes");
        let q = normed.matmul_unchecked(&block.attn_query);
        let k = normed.matmul_unchecked(&block.attn_key);
        let v = normed.matmul_unchecked(&block.attn_value);
        let seq = x.rows();
        let dh = self.config.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut concat = Matrix::zeros(seq, self.config.d_model);
        let mut probs = Vec::with_capacity(self.config.n_heads);
        let mut scores = vec![T::zero(); seq];
        for h in 0..self.config.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Matrix::zeros(seq, seq);
            for i in 0..seq {
                let qi = &q.row(i)[cols.clone()];
                for j in 0..=i {
                    scores[j] = dot(qi, &k.row(j)[cols.clone()]) * scale;
                }
                softmax_in_place(&mut scores[..=i]);
                p.row_mut(i)[..=i].copy_from_slice(&scores[..=i]);
                let out = &mut concat.row_mut(i)[cols.clone()];
                for j in 0..=i {
                    let pij = scores[j];
                    for (o, &vj) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += pij * vj;
                    }
                }
            }
            probs.push(p);
        }
        let mut mid = concat.matmul_unchecked(&block.attn_output);
        mid.add_assign(&x).expect("residual shapes");
        (
            mid,
            AttnCache {
                ln,
                normed,
                q,
                k,
                v,
                probs,
                concat,
            },
        )
    }

    fn ffn_activation_of(&self, block: &Block<T>, mid: &Matrix<T>) -> FfnCache<T> {
        let (normed, ln) =
            layer_norm_forward(mid, &block.ln2_gain, &block.ln2_bias).expect("ln2 shapes");
        let pre_act = normed.matmul_unchecked(&block.ffn_key);
        let act = gelu(&pre_act);
        FfnCache {
            ln,
            normed,
            pre_act,
            act,
        }
    }

    fn apply_values(mid: &Matrix<T>, act: &Matrix<T>, values: &Matrix<T>) -> Matrix<T> {
        let mut out = act.matmul_unchecked(values);
        out.add_assign(mid).expect("residual shapes");
        out
    }

    fn head(&self, x: &Matrix<T>) -> (Matrix<T>, HeadCache<T>) {
        let (normed, ln) =
            layer_norm_forward(x, &self.final_gain, &self.final_bias).expect("final ln shapes");
        let logits = normed.matmul_unchecked(&self.unembed);
        (logits, HeadCache { ln, normed })
    }

    fn forward_cached(&self, tokens: &[Token], value_override: Option<&Matrix<T>>) -> FullCache<T> {
        let mut x = self.embed(tokens);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let (mid, attn) = self.attn_half(block, x);
            let ffn = self.ffn_activation_of(block, &mid);
            let values = match value_override {
                Some(v) if l == self.config.edit_layer => v,
                _ => &block.ffn_value,
            };
            x = Self::apply_values(&mid, &ffn.act, values);
            caches.push(BlockCache { attn, ffn });
        }
        let (logits, head) = self.head(&x);
        FullCache {
            tokens: tokens.to_vec(),
            blocks: caches,
            head,
            logits,
        }
    }

    /// Causal forward pass. At the edit layer the FFN uses `value_override`
    /// instead of `W_v` when one is given.
    pub fn forward(
        &self,
        tokens: &[Token],
        value_override: Option<&Matrix<T>>,
    ) -> Result<ForwardTrace<T>> {
        self.check_tokens(tokens)?;
        self.check_override(value_override)?;
        let mut cache = self.forward_cached(tokens, value_override);
        let act = std::mem::replace(
            &mut cache.blocks[self.config.edit_layer].ffn.act,
            Matrix::zeros(0, 0),
        );
        Ok(ForwardTrace {
            logits: cache.logits,
            ffn_activation: act,
        })
    }

    /// Forward pass that keeps every intermediate for [`Self::backward`].
    pub fn forward_for_training(&self, tokens: &[Token]) -> Result<FullCache<T>> {
        self.check_tokens(tokens)?;
        Ok(self.forward_cached(tokens, None))
    }

    /// State at the edit layer just before the value matrix is applied.
    pub fn edit_prefix(&self, tokens: &[Token]) -> Result<EditPrefix<T>> {
        self.check_tokens(tokens)?;
        let mut x = self.embed(tokens);
        let edit = self.config.edit_layer;
        for block in &self.blocks[..edit] {
            let (mid, _) = self.attn_half(block, x);
            let ffn = self.ffn_activation_of(block, &mid);
            x = Self::apply_values(&mid, &ffn.act, &block.ffn_value);
        }
        let (mid, _) = self.attn_half(&self.blocks[edit], x);
        let ffn = self.ffn_activation_of(&self.blocks[edit], &mid);
        Ok(EditPrefix {
            residual: mid,
            activation: ffn.act,
        })
    }

    /// Edit-layer FFN activation rows for `tokens`.
    pub fn ffn_activation(&self, tokens: &[Token]) -> Result<Matrix<T>> {
        self.edit_prefix(tokens).map(|p| p.activation)
    }

    /// Finishes a forward pass from an [`EditPrefix`] with `values` as the
    /// edit-layer value matrix. Bitwise identical to [`Self::forward`].
    pub fn suffix_forward(&self, prefix: &EditPrefix<T>, values: &Matrix<T>) -> Result<SuffixCache<T>> {
        values.check_same_shape(self.edit_values(), "suffix values")?;
        let edit = self.config.edit_layer;
        let mut x = Self::apply_values(&prefix.residual, &prefix.activation, values);
        let mut caches = Vec::with_capacity(self.blocks.len() - edit - 1);
        for block in &self.blocks[edit + 1..] {
            let (mid, attn) = self.attn_half(block, x);
            let ffn = self.ffn_activation_of(block, &mid);
            x = Self::apply_values(&mid, &ffn.act, &block.ffn_value);
            caches.push(BlockCache { attn, ffn });
        }
        let (logits, head) = self.head(&x);
        Ok(SuffixCache {
            blocks: caches,
            head,
            logits,
        })
    }

    /// Gradient w.r.t. the edit-layer value matrix given `d_logits`; all
    /// other parameters are treated as frozen.
    pub fn suffix_backward(
        &self,
        prefix: &EditPrefix<T>,
        cache: &SuffixCache<T>,
        d_logits: &Matrix<T>,
    ) -> Matrix<T> {
        let mut dx = self.head_backward(&cache.head, d_logits, None);
        let edit = self.config.edit_layer;
        for (block, bc) in self.blocks[edit + 1..].iter().zip(&cache.blocks).rev() {
            dx = self.block_backward(block, &block.ffn_value, bc, dx, None);
        }
        prefix.activation.t_matmul(&dx)
    }

    /// Autoregressive loss over the scored positions and its gradient w.r.t.
    /// the edit-layer value matrix (`value_override`, or `W_v` when absent).
    /// `targets[t]` is the token expected after position `t`.
    pub fn grad_value_matrix(
        &self,
        tokens: &[Token],
        targets: &[Option<Token>],
        value_override: Option<&Matrix<T>>,
    ) -> Result<(T, Matrix<T>)> {
        if targets.len() != tokens.len() {
            return Err(WiseError::Input(format!(
                "{} targets for {} tokens",
                targets.len(),
                tokens.len()
            )));
        }
        self.check_override(value_override)?;
        let prefix = self.edit_prefix(tokens)?;
        self.prefix_loss_and_grad(&prefix, targets, value_override.unwrap_or(self.edit_values()))
    }

    /// [`Self::grad_value_matrix`] starting from a cached prefix.
    pub fn prefix_loss_and_grad(
        &self,
        prefix: &EditPrefix<T>,
        targets: &[Option<Token>],
        values: &Matrix<T>,
    ) -> Result<(T, Matrix<T>)> {
        let cache = self.suffix_forward(prefix, values)?;
        let (loss, d_logits) = cross_entropy_masked(&cache.logits, targets)?;
        Ok((loss, self.suffix_backward(prefix, &cache, &d_logits)))
    }

    /// Gradient of every parameter given `d_logits`.
    pub fn backward(&self, cache: &FullCache<T>, d_logits: &Matrix<T>) -> TinyTransformer<T> {
        let mut grads = self.zeros_like();
        let mut dx = self.head_backward(&cache.head, d_logits, Some(&mut grads));
        for (l, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            dx = self.block_backward(block, &block.ffn_value, bc, dx, Some(&mut grads.blocks[l]));
        }
        for (i, &t) in cache.tokens.iter().enumerate() {
            let row = dx.row(i);
            for (g, &d) in grads.token_embedding.row_mut(t as usize).iter_mut().zip(row) {
                *g += d;
            }
            for (g, &d) in grads.position_embedding.row_mut(i).iter_mut().zip(row) {
                *g += d;
            }
        }
        grads
    }

    fn head_backward(
        &self,
        head: &HeadCache<T>,
        d_logits: &Matrix<T>,
        grads: Option<&mut TinyTransformer<T>>,
    ) -> Matrix<T> {
        let d_normed = d_logits.matmul_t(&self.unembed);
        let (dx, dgain, dbias) = layer_norm_backward(&head.ln, &self.final_gain, &d_normed);
        if let Some(g) = grads {
            g.unembed = head.normed.t_matmul(d_logits);
            g.final_gain = dgain;
            g.final_bias = dbias;
        }
        dx
    }

    fn block_backward(
        &self,
        block: &Block<T>,
        values: &Matrix<T>,
        cache: &BlockCache<T>,
        d_out: Matrix<T>,
        mut grads: Option<&mut Block<T>>,
    ) -> Matrix<T> {
        // FFN half: out = mid + gelu(ln2(mid) · W_k) · W_v
        let ffn = &cache.ffn;
        let d_act = d_out.matmul_t(values);
        let d_pre = gelu_backward(&ffn.pre_act, &d_act).expect("gelu shapes");
        let d_normed2 = d_pre.matmul_t(&block.ffn_key);
        let (dx2, dg2, db2) = layer_norm_backward(&ffn.ln, &block.ln2_gain, &d_normed2);
        if let Some(g) = grads.as_deref_mut() {
            g.ffn_value = ffn.act.t_matmul(&d_out);
            g.ffn_key = ffn.normed.t_matmul(&d_pre);
            g.ln2_gain = dg2;
            g.ln2_bias = db2;
        }
        let mut d_mid = d_out;
        d_mid.add_assign(&dx2).expect("shapes");

        // attention half: mid = x + attn(ln1(x)) · W_o
        let attn = &cache.attn;
        let d_concat = d_mid.matmul_t(&block.attn_output);
        let (dq, dk, dv) = self.attention_backward(attn, &d_concat);
        let mut d_normed1 = dq.matmul_t(&block.attn_query);
        d_normed1.add_assign(&dk.matmul_t(&block.attn_key)).expect("shapes");
        d_normed1.add_assign(&dv.matmul_t(&block.attn_value)).expect("shapes");
        let (dx1, dg1, db1) = layer_norm_backward(&attn.ln, &block.ln1_gain, &d_normed1);
        if let Some(g) = grads {
            g.attn_output = attn.concat.t_matmul(&d_mid);
            g.attn_query = attn.normed.t_matmul(&dq);
            g.attn_key = attn.normed.t_matmul(&dk);
            g.attn_value = attn.normed.t_matmul(&dv);
            g.ln1_gain = dg1;
            g.ln1_bias = db1;
        }
        let mut dx = d_mid;
        dx.add_assign(&dx1).expect("shapes");
        dx
    }

    fn attention_backward(
        &self,
        cache: &AttnCache<T>,
        d_concat: &Matrix<T>,
    ) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
        let seq = d_concat.rows();
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = Matrix::zeros(seq, d);
        let mut dk = Matrix::zeros(seq, d);
        let mut dv = Matrix::zeros(seq, d);
        let mut dp = vec![T::zero(); seq];
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..seq {
                let d_out = &d_concat.row(i)[cols.clone()];
                let p_row = &p.row(i)[..=i];
                let mut weighted = T::zero();
                for j in 0..=i {
                    dp[j] = dot(d_out, &cache.v.row(j)[cols.clone()]);
                    weighted += p_row[j] * dp[j];
                    let pij = p_row[j];
                    for (g, &o) in dv.row_mut(j)[cols.clone()].iter_mut().zip(d_out) {
                        *g += pij * o;
                    }
                }
                for j in 0..=i {
                    let ds = p_row[j] * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for (g, &kv) in dq.row_mut(i)[cols.clone()]
                        .iter_mut()
                        .zip(&cache.k.row(j)[cols.clone()])
                    {
                        *g += ds * kv;
                    }
                    for (g, &qv) in dk.row_mut(j)[cols.clone()]
                        .iter_mut()
                        .zip(&cache.q.row(i)[cols.clone()])
                    {
                        *g += ds * qv;
                    }
                }
            }
        }
        (dq, dk, dv)
    }

    /// Mean next-token loss of a sequence under the given value matrix.
    pub fn sequence_loss(&self, tokens: &[Token], value_override: Option<&Matrix<T>>) -> Result<T> {
        if tokens.len() < 2 {
            return Err(WiseError::Input("need at least two tokens for a loss".into()));
        }
        let trace = self.forward(&tokens[..tokens.len() - 1], value_override)?;
        let targets: Vec<Option<Token>> = tokens[1..].iter().copied().map(Some).collect();
        Ok(cross_entropy_masked(&trace.logits, &targets)?.0)
    }
}
