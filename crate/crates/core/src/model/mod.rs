//! The encoder: summed token, position and slot embeddings, a stack of
//! post-LN self-attention layers, and an MLM head tied to the token table.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Activation, ModelConfig};

use config::{ParamKind, TENSORS_PER_LAYER};

use crate::numkernel::{
    adam_step, derive_seed, AdamState, KernelError, LossFunction, Rng, Tape, Tensor, Var,
};
use crate::scenario::MaskedExample;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("input has {found} positions, model expects {expected}")]
    InputLength { expected: usize, found: usize },
    #[error("{kind} id {id} out of range (limit {limit})")]
    IdOutOfRange {
        kind: &'static str,
        id: usize,
        limit: usize,
    },
    #[error("batch has no masked positions")]
    NoMaskPositions,
    #[error("empty batch")]
    EmptyBatch,
    #[error("not a checkpoint: expected magic {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-layer, per-head attention weights from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    n_heads: usize,
    seq_len: usize,
    /// One `[heads × seq × seq]` tensor per layer.
    layers: Vec<Tensor>,
}

impl AttentionMaps {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Row-major `seq × seq` matrix; row = query position.
    pub fn matrix(&self, layer: usize, head: usize) -> &[f64] {
        let n = self.seq_len * self.seq_len;
        &self.layers[layer].data()[head * n..(head + 1) * n]
    }

    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f64] {
        &self.matrix(layer, head)[query * self.seq_len..(query + 1) * self.seq_len]
    }
}

/// Full-vocabulary ranking at one masked position.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    pub position: usize,
    /// `(token id, logit)`, best first; ties broken by lower id.
    pub ranked: Vec<(usize, f64)>,
}

impl MaskPrediction {
    pub fn top1(&self) -> usize {
        self.ranked[0].0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    params: Vec<Tensor>,
}

const TOKEN_EMB: usize = 0;
const POS_EMB: usize = 1;
const SLOT_EMB: usize = 2;
const FIRST_LAYER: usize = 3;

/// Weights drawn from N(0, init_std²) with `config.seed`; biases 0, gains 1.
pub fn init_model(config: &ModelConfig) -> Result<EncoderModel, ModelError> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let params = config
        .layout()
        .into_iter()
        .map(|(_, shape, kind)| match kind {
            ParamKind::Weight => Tensor::randn(&shape, config.init_std, &mut rng),
            ParamKind::Bias => Tensor::zeros(&shape),
            ParamKind::Gain => Tensor::full(&shape, 1.0),
        })
        .collect();
    Ok(EncoderModel {
        config: config.clone(),
        params,
    })
}

impl EncoderModel {
    /// Wraps existing parameters after checking them against the layout.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        check_layout(&config, &params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Final hidden states `[seq_len × d_model]` and attention maps for one
    /// input sequence.
    pub fn encode(&self, token_ids: &[usize], slot_ids: &[usize]) -> Result<(Tensor, AttentionMaps), ModelError> {
        self.check_input(token_ids, slot_ids)?;
        let mut tape = Tape::new();
        let vars = constants(&mut tape, &self.params);
        let fwd = forward(&mut tape, &self.config, &vars, token_ids, slot_ids, 1, None)?;
        let hidden = tape.value(fwd.hidden).clone();
        let maps = self.collect_maps(&tape, &fwd.attention);
        Ok((hidden, maps))
    }

    /// `hidden · Eᵀ + b` at every row of `hidden`.
    pub fn mlm_logits(&self, hidden: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let h = tape.constant(hidden.clone());
        let e = tape.constant(self.params[TOKEN_EMB].clone());
        let b = tape.constant(self.params.last().unwrap().clone());
        let z = tape.matmul_nt(h, e)?;
        let z = tape.add_bias(z, b)?;
        Ok(tape.value(z).clone())
    }

    pub fn predict_masked(&self, example: &MaskedExample) -> Result<Vec<MaskPrediction>, ModelError> {
        let mut out = self.predict_batch(std::slice::from_ref(example))?;
        Ok(out.pop().unwrap())
    }

    /// Rankings for many examples in one forward pass. Each example must
    /// carry at least one mask position.
    pub fn predict_batch(&self, examples: &[MaskedExample]) -> Result<Vec<Vec<MaskPrediction>>, ModelError> {
        if examples.is_empty() {
            return Ok(Vec::new());
        }
        if examples.iter().any(|e| e.mask_positions.is_empty()) {
            return Err(ModelError::NoMaskPositions);
        }
        let (tokens, slots, rows) = self.flatten(examples)?;
        let mut tape = Tape::new();
        let vars = constants(&mut tape, &self.params);
        let fwd = forward(&mut tape, &self.config, &vars, &tokens, &slots, examples.len(), None)?;
        let logits = head(&mut tape, &vars, fwd.hidden, &rows)?;
        let logits = tape.value(logits);
        let v = self.config.vocab_size;
        let mut next = 0;
        let out = examples
            .iter()
            .map(|ex| {
                ex.mask_positions
                    .iter()
                    .map(|&position| {
                        let row = &logits.data()[next * v..(next + 1) * v];
                        next += 1;
                        MaskPrediction {
                            position,
                            ranked: rank(row),
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(out)
    }

    /// Mean masked-position cross-entropy, no gradients.
    pub fn batch_loss(&self, batch: &[MaskedExample]) -> Result<f64, ModelError> {
        let params = self.params.clone();
        let mut tape = Tape::new();
        let vars = constants(&mut tape, &params);
        let loss = mlm_loss(&mut tape, &self.config, &vars, batch, None)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Loss and one gradient tensor per parameter. `dropout_rng` is only
    /// consulted when the config enables dropout.
    pub fn compute_gradients(
        &self,
        batch: &[MaskedExample],
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(f64, Vec<Tensor>), ModelError> {
        gradients(&self.config, &self.params, batch, dropout_rng)
    }

    fn check_input(&self, token_ids: &[usize], slot_ids: &[usize]) -> Result<(), ModelError> {
        check_sequence(&self.config, token_ids, slot_ids)
    }

    fn flatten(&self, examples: &[MaskedExample]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), ModelError> {
        flatten_batch(&self.config, examples)
    }

    fn collect_maps(&self, tape: &Tape, attention: &[Var]) -> AttentionMaps {
        AttentionMaps {
            n_heads: self.config.n_heads,
            seq_len: self.config.seq_len,
            layers: attention.iter().map(|&a| tape.value(a).clone()).collect(),
        }
    }
}

/// One optimizer step on the masked-position loss. Returns the loss before
/// the update. Nothing changes if the batch has no masked position.
pub fn train_step(model: &mut EncoderModel, batch: &[MaskedExample], adam: &mut AdamState) -> Result<f64, ModelError> {
    let mut rng = Rng::new(derive_seed(model.config.seed, adam.t));
    let dropout = (model.config.dropout > 0.0).then_some(&mut rng);
    let (loss, grads) = gradients(&model.config, &model.params, batch, dropout)?;
    for (p, g) in model.params.iter_mut().zip(&grads) {
        p.clear_grad();
        p.accumulate_grad(g.data())?;
    }
    adam_step(&mut model.params, adam)?;
    model.params.iter_mut().for_each(Tensor::clear_grad);
    Ok(loss)
}

/// The masked-LM loss of a fixed batch as a function of the parameters.
pub struct MlmObjective<'a> {
    pub config: &'a ModelConfig,
    pub batch: &'a [MaskedExample],
}

impl LossFunction for MlmObjective<'_> {
    fn loss(&self, params: &[Tensor]) -> Result<f64, KernelError> {
        let mut tape = Tape::new();
        let vars = constants(&mut tape, params);
        let loss = mlm_loss(&mut tape, self.config, &vars, self.batch, None).map_err(kernel_only)?;
        Ok(tape.value(loss).data()[0])
    }

    fn gradient(&self, params: &[Tensor]) -> Result<Vec<Vec<f64>>, KernelError> {
        let (_, grads) = gradients(self.config, params, self.batch, None).map_err(kernel_only)?;
        Ok(grads.into_iter().map(Tensor::into_data).collect())
    }
}

fn kernel_only(e: ModelError) -> KernelError {
    match e {
        ModelError::Kernel(k) => k,
        other => panic!("objective evaluated on invalid input: {other}"),
    }
}

fn check_layout(config: &ModelConfig, params: &[Tensor]) -> Result<(), ModelError> {
    let layout = config.layout();
    if layout.len() != params.len() {
        return Err(ModelError::ShapeMismatch {
            name: "parameter list".into(),
            expected: vec![layout.len()],
            found: vec![params.len()],
        });
    }
    for ((name, shape, _), p) in layout.into_iter().zip(params) {
        if p.shape() != shape.as_slice() {
            return Err(ModelError::ShapeMismatch {
                name,
                expected: shape,
                found: p.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn check_sequence(config: &ModelConfig, token_ids: &[usize], slot_ids: &[usize]) -> Result<(), ModelError> {
    for ids in [token_ids, slot_ids] {
        if ids.len() != config.seq_len {
            return Err(ModelError::InputLength {
                expected: config.seq_len,
                found: ids.len(),
            });
        }
    }
    if let Some(&id) = token_ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(ModelError::IdOutOfRange {
            kind: "token",
            id,
            limit: config.vocab_size,
        });
    }
    if let Some(&id) = slot_ids.iter().find(|&&s| s >= config.n_slots) {
        return Err(ModelError::IdOutOfRange {
            kind: "slot",
            id,
            limit: config.n_slots,
        });
    }
    Ok(())
}

/// Concatenated token ids, slot ids and flat row indices of mask positions.
fn flatten_batch(config: &ModelConfig, examples: &[MaskedExample]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), ModelError> {
    let t = config.seq_len;
    let mut tokens = Vec::with_capacity(examples.len() * t);
    let mut slots = Vec::with_capacity(examples.len() * t);
    let mut rows = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        check_sequence(config, &ex.token_ids, &ex.slot_ids)?;
        tokens.extend_from_slice(&ex.token_ids);
        slots.extend_from_slice(&ex.slot_ids);
        for &p in &ex.mask_positions {
            if p >= t {
                return Err(ModelError::IdOutOfRange {
                    kind: "mask position",
                    id: p,
                    limit: t,
                });
            }
            rows.push(i * t + p);
        }
    }
    Ok((tokens, slots, rows))
}

fn rank(logits: &[f64]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = logits.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

fn constants(tape: &mut Tape, params: &[Tensor]) -> Vec<Var> {
    params.iter().map(|p| tape.constant(p.clone())).collect()
}

fn gradients(
    config: &ModelConfig,
    params: &[Tensor],
    batch: &[MaskedExample],
    dropout_rng: Option<&mut Rng>,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = mlm_loss(&mut tape, config, &vars, batch, dropout_rng)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let out = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, out))
}

fn mlm_loss(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &[Var],
    batch: &[MaskedExample],
    dropout_rng: Option<&mut Rng>,
) -> Result<Var, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let (tokens, slots, rows) = flatten_batch(config, batch)?;
    if rows.is_empty() {
        return Err(ModelError::NoMaskPositions);
    }
    let targets: Vec<usize> = batch.iter().flat_map(|e| e.target_ids.iter().copied()).collect();
    if targets.len() != rows.len() {
        return Err(ModelError::Config("mask positions and targets differ in length".into()));
    }
    let fwd = forward(tape, config, vars, &tokens, &slots, batch.len(), dropout_rng)?;
    let logits = head(tape, vars, fwd.hidden, &rows)?;
    Ok(tape.cross_entropy(logits, &targets)?)
}

/// Logits at the selected rows of the final hidden states.
fn head(tape: &mut Tape, vars: &[Var], hidden: Var, rows: &[usize]) -> Result<Var, ModelError> {
    let picked = tape.gather(hidden, rows)?;
    let z = tape.matmul_nt(picked, vars[TOKEN_EMB])?;
    Ok(tape.add_bias(z, *vars.last().unwrap())?)
}

struct Forward {
    /// `[batch·seq × d_model]`.
    hidden: Var,
    /// Per layer, `[batch·heads × seq × seq]`.
    attention: Vec<Var>,
}

fn forward(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &[Var],
    tokens: &[usize],
    slots: &[usize],
    batch: usize,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<Forward, ModelError> {
    let t = config.seq_len;
    let heads = config.n_heads;
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
    let tok = tape.gather(vars[TOKEN_EMB], tokens)?;
    let pos = tape.gather(vars[POS_EMB], &positions)?;
    let slot = tape.gather(vars[SLOT_EMB], slots)?;
    let x = tape.add(tok, pos)?;
    let mut x = tape.add(x, slot)?;

    let pad_bias = config.pad_masking.then(|| pad_mask(tokens, batch, heads, t));
    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    let mut attention = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let p = &vars[FIRST_LAYER + layer * TENSORS_PER_LAYER..FIRST_LAYER + (layer + 1) * TENSORS_PER_LAYER];
        let [wq, bq, wk, bk, wv, bv, wo, bo, g1, b1n, w1, b1, w2, b2, g2, b2n] =
            <[Var; TENSORS_PER_LAYER]>::try_from(p).unwrap();

        let q = affine(tape, x, wq, bq)?;
        let k = affine(tape, x, wk, bk)?;
        let v = affine(tape, x, wv, bv)?;
        let q = tape.split_heads(q, batch, heads)?;
        let k = tape.split_heads(k, batch, heads)?;
        let v = tape.split_heads(v, batch, heads)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let mut scores = tape.scale(scores, scale)?;
        if let Some(bias) = &pad_bias {
            let bias = tape.constant(bias.clone());
            scores = tape.add(scores, bias)?;
        }
        let attn = tape.softmax(scores, 2)?;
        attention.push(attn);
        let ctx = tape.batch_matmul(attn, v, false)?;
        let ctx = tape.merge_heads(ctx, batch, heads)?;
        let out = affine(tape, ctx, wo, bo)?;
        let out = dropout(tape, out, config.dropout, dropout_rng.as_deref_mut())?;
        let res = tape.add(x, out)?;
        x = tape.layer_norm(res, g1, b1n, config.layer_norm_eps)?;

        let h = affine(tape, x, w1, b1)?;
        let h = match config.activation {
            Activation::Gelu => tape.gelu(h)?,
            Activation::Relu => tape.relu(h)?,
        };
        let out = affine(tape, h, w2, b2)?;
        let out = dropout(tape, out, config.dropout, dropout_rng.as_deref_mut())?;
        let res = tape.add(x, out)?;
        x = tape.layer_norm(res, g2, b2n, config.layer_norm_eps)?;
    }
    Ok(Forward { hidden: x, attention })
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, KernelError> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut Rng>) -> Result<Var, KernelError> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n).map(|_| if rng.bernoulli(rate) { 0.0 } else { keep }).collect();
    let mask = tape.constant(Tensor::new(&shape, mask)?);
    tape.mul(x, mask)
}

/// Additive bias that hides `[PAD]` keys (id 0).
fn pad_mask(tokens: &[usize], batch: usize, heads: usize, t: usize) -> Tensor {
    let mut data = vec![0.0; batch * heads * t * t];
    for b in 0..batch {
        let seq = &tokens[b * t..(b + 1) * t];
        for h in 0..heads {
            let base = (b * heads + h) * t * t;
            for q in 0..t {
                for (k, &tok) in seq.iter().enumerate() {
                    if tok == 0 {
                        data[base + q * t + k] = -1e9;
                    }
                }
            }
        }
    }
    Tensor::new(&[batch * heads, t, t], data).unwrap()
}
