//! Micro decoder-only transformer.
//!
//! Token + learned absolute position embeddings, pre-RMSNorm causal
//! multi-head attention, a SiLU-gated MLP (gate/up/down) and an untied
//! output head. Weights are stored `[d_in, d_out]` so a projection is `x·W`.
//! Low-rank adapters from [`crate::lora`] are injected at the Q/K/V and
//! Gate/Up/Down projections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{AutodiffError, Gradients, Tape, Tensor, Var};
use crate::corpus::LossSequence;
use crate::lora::{AdapterSet, LoraConfig, Site};

pub type TokenId = usize;

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} is outside the vocabulary of {vocab}")]
    OutOfVocab { token: TokenId, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    Empty,
    #[error("adapters already attached to this model")]
    DuplicateAttachment,
    #[error("invalid adapter config: {0}")]
    Adapter(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Input and output widths of the projection at `site`.
    pub fn site_dims(&self, site: Site) -> (usize, usize) {
        match site {
            Site::Q | Site::K | Site::V => (self.d_model, self.d_model),
            Site::Gate | Site::Up => (self.d_model, self.d_ff),
            Site::Down => (self.d_ff, self.d_model),
        }
    }

    pub fn base_param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * d * d + 3 * d * self.d_ff;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + d + d * self.vocab_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl LayerWeights {
    pub fn site(&self, site: Site) -> &Tensor {
        match site {
            Site::Q => &self.wq,
            Site::K => &self.wk,
            Site::V => &self.wv,
            Site::Gate => &self.w_gate,
            Site::Up => &self.w_up,
            Site::Down => &self.w_down,
        }
    }

    pub fn site_mut(&mut self, site: Site) -> &mut Tensor {
        match site {
            Site::Q => &mut self.wq,
            Site::K => &mut self.wk,
            Site::V => &mut self.wv,
            Site::Gate => &mut self.w_gate,
            Site::Up => &mut self.w_up,
            Site::Down => &mut self.w_down,
        }
    }

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub head: Tensor,
    /// Set once adapters are attached; a model carries at most one adapter set.
    pub(crate) lora: Option<LoraConfig>,
}

fn normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape, data).expect("shape is non-empty")
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("n >= 1")
}

/// Which parameters receive gradients in a traced forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapters,
}

/// A recorded forward pass with handles to its parameter leaves.
pub struct Trace {
    pub tape: Tape,
    pub logits: Var,
    base: Vec<Var>,
    adapters: Vec<(Var, Var)>,
}

impl Trace {
    /// Base-parameter gradients in [`Model::base_tensors`] order.
    pub fn base_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.base
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tape.value(v).shape().to_vec()))
            })
            .collect()
    }

    /// Adapter gradients flattened in parameter-address order.
    pub fn adapter_grads(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for &(a, b) in &self.adapters {
            for v in [a, b] {
                match grads.get(v) {
                    Some(g) => out.extend_from_slice(g.data()),
                    None => out.extend(std::iter::repeat_n(0.0, self.tape.value(v).len())),
                }
            }
        }
        out
    }
}

impl Model {
    /// Deterministic initialisation from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let ff = config.d_ff;
        let resid_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let tok_emb = normal(&mut rng, vec![config.vocab_size, d], 0.5);
        let pos_emb = normal(&mut rng, vec![config.max_seq_len, d], 0.1);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: ones(d),
                wq: normal(&mut rng, vec![d, d], 1.0 / (d as f64).sqrt()),
                wk: normal(&mut rng, vec![d, d], 1.0 / (d as f64).sqrt()),
                wv: normal(&mut rng, vec![d, d], 1.0 / (d as f64).sqrt()),
                wo: normal(&mut rng, vec![d, d], resid_scale / (d as f64).sqrt()),
                mlp_norm: ones(d),
                w_gate: normal(&mut rng, vec![d, ff], 1.0 / (d as f64).sqrt()),
                w_up: normal(&mut rng, vec![d, ff], 1.0 / (d as f64).sqrt()),
                w_down: normal(&mut rng, vec![ff, d], resid_scale / (ff as f64).sqrt()),
            })
            .collect();
        let final_norm = ones(d);
        let head = normal(&mut rng, vec![d, config.vocab_size], 1.0 / (d as f64).sqrt());
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            head,
            lora: None,
        })
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    /// Base tensors in their canonical (checkpoint and optimizer) order.
    pub fn base_tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.final_norm);
        out.push(&self.head);
        out
    }

    pub fn base_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Empty);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::TooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::OutOfVocab {
                token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records a forward pass over `tokens` producing `[T × vocab]` logits.
    pub fn trace(
        &self,
        adapters: Option<&AdapterSet>,
        tokens: &[TokenId],
        trainable: Trainable,
    ) -> Result<Trace, ModelError> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let n_tok = tokens.len();
        let base_rg = trainable == Trainable::Base;
        let adapter_rg = trainable == Trainable::Adapters;
        let mut tape = Tape::new();

        let base: Vec<Var> = self
            .base_tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), base_rg))
            .collect();
        let mut adapter_vars = Vec::new();
        if let Some(set) = adapters {
            for slot in set.slots() {
                let a = tape.leaf(
                    Tensor::new(vec![slot.d_in, slot.rank], set.a(slot).to_vec())?,
                    adapter_rg,
                );
                let b = tape.leaf(
                    Tensor::new(vec![slot.rank, slot.d_out], set.b(slot).to_vec())?,
                    adapter_rg,
                );
                adapter_vars.push(((slot.layer, slot.site), (a, b)));
            }
        }
        let scale = adapters.map_or(0.0, |s| s.config().scale);
        let adapter_at = |layer: usize, site: Site| {
            adapter_vars
                .iter()
                .find(|(key, _)| *key == (layer, site))
                .map(|(_, ab)| *ab)
        };

        let positions: Vec<usize> = (0..n_tok).collect();
        let tok = tape.embedding(base[0], tokens)?;
        let pos = tape.embedding(base[1], &positions)?;
        let mut x = tape.add(tok, pos)?;

        let d_head = cfg.d_model / cfg.n_heads;
        let att_scale = 1.0 / (d_head as f64).sqrt();
        for l in 0..cfg.n_layers {
            let w = &base[2 + 9 * l..2 + 9 * (l + 1)];
            let h = tape.rms_norm(x, w[0], NORM_EPS)?;
            let q = project(&mut tape, h, w[1], adapter_at(l, Site::Q), scale)?;
            let k = project(&mut tape, h, w[2], adapter_at(l, Site::K), scale)?;
            let v = project(&mut tape, h, w[3], adapter_at(l, Site::V), scale)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let (lo, hi) = (hd * d_head, (hd + 1) * d_head);
                let qh = tape.slice_cols(q, lo, hi)?;
                let kh = tape.slice_cols(k, lo, hi)?;
                let vh = tape.slice_cols(v, lo, hi)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, att_scale);
                let scores = tape.causal_mask(scores)?;
                let probs = tape.softmax(scores)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let attn = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            };
            let attn = tape.matmul(attn, w[4])?;
            x = tape.add(x, attn)?;

            let h = tape.rms_norm(x, w[5], NORM_EPS)?;
            let gate = project(&mut tape, h, w[6], adapter_at(l, Site::Gate), scale)?;
            let up = project(&mut tape, h, w[7], adapter_at(l, Site::Up), scale)?;
            let gate = tape.silu(gate);
            let hidden = tape.mul(gate, up)?;
            let down = project(&mut tape, hidden, w[8], adapter_at(l, Site::Down), scale)?;
            x = tape.add(x, down)?;
        }
        let n = base.len();
        let h = tape.rms_norm(x, base[n - 2], NORM_EPS)?;
        let logits = tape.matmul(h, base[n - 1])?;
        Ok(Trace {
            tape,
            logits,
            base,
            adapters: adapter_vars.into_iter().map(|(_, ab)| ab).collect(),
        })
    }

    /// Next-token logits at every position, `[T × vocab]`.
    pub fn forward(
        &self,
        adapters: Option<&AdapterSet>,
        tokens: &[TokenId],
    ) -> Result<Tensor, ModelError> {
        let trace = self.trace(adapters, tokens, Trainable::Nothing)?;
        Ok(trace.tape.value(trace.logits).clone())
    }

    /// Autoregressive continuation of `prompt`.
    ///
    /// Temperature 0 is greedy decoding with the lowest token id winning
    /// ties. Generation stops after emitting `opts.eos` (which is included in
    /// the output), after `opts.max_new` tokens, or at `max_seq_len`.
    pub fn sample(
        &self,
        adapters: Option<&AdapterSet>,
        prompt: &[TokenId],
        opts: &SampleOptions,
    ) -> Result<Vec<TokenId>, ModelError> {
        if opts.temperature < 0.0 || opts.temperature.is_nan() {
            return Err(ModelError::Config(format!(
                "temperature must be >= 0, got {}",
                opts.temperature
            )));
        }
        self.check_tokens(prompt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < opts.max_new && seq.len() < self.config.max_seq_len {
            let logits = self.forward(adapters, &seq)?;
            let vocab = self.config.vocab_size;
            let last = &logits.data()[(seq.len() - 1) * vocab..seq.len() * vocab];
            let next = if opts.temperature == 0.0 {
                argmax(last)
            } else {
                let mut probs: Vec<f64> = last.iter().map(|z| z / opts.temperature).collect();
                crate::autodiff::softmax_in_place(&mut probs);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = vocab - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            };
            seq.push(next);
            out.push(next);
            if Some(next) == opts.eos {
                break;
            }
        }
        Ok(out)
    }
}

impl Model {
    /// Masked next-token cross-entropy of one sequence.
    pub fn loss(&self, adapters: Option<&AdapterSet>, seq: &LossSequence) -> Result<f64, ModelError> {
        let mut trace = self.trace(adapters, &seq.inputs, Trainable::Nothing)?;
        let loss = trace.tape.masked_cross_entropy(trace.logits, &seq.targets, &seq.mask)?;
        Ok(trace.tape.value(loss).data()[0])
    }

    /// Loss and its gradient with respect to every adapter scalar, in
    /// parameter-address order.
    pub fn adapter_loss_grad(
        &self,
        adapters: &AdapterSet,
        seq: &LossSequence,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        let mut trace = self.trace(Some(adapters), &seq.inputs, Trainable::Adapters)?;
        let loss = trace.tape.masked_cross_entropy(trace.logits, &seq.targets, &seq.mask)?;
        let value = trace.tape.value(loss).data()[0];
        let grads = trace.tape.backward(loss)?;
        Ok((value, trace.adapter_grads(&grads)))
    }

    /// Loss and its gradient with respect to the base tensors, in
    /// [`Model::base_tensors`] order.
    pub fn base_loss_grad(&self, seq: &LossSequence) -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut trace = self.trace(None, &seq.inputs, Trainable::Base)?;
        let loss = trace.tape.masked_cross_entropy(trace.logits, &seq.targets, &seq.mask)?;
        let value = trace.tape.value(loss).data()[0];
        let grads = trace.tape.backward(loss)?;
        Ok((value, trace.base_grads(&grads)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub max_new: usize,
    pub temperature: f64,
    pub seed: u64,
    pub eos: Option<TokenId>,
}

impl SampleOptions {
    pub fn greedy(max_new: usize, eos: Option<TokenId>) -> Self {
        Self {
            max_new,
            temperature: 0.0,
            seed: 0,
            eos,
        }
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn project(
    tape: &mut Tape,
    h: Var,
    w: Var,
    adapter: Option<(Var, Var)>,
    scale: f64,
) -> Result<Var, AutodiffError> {
    let y = tape.matmul(h, w)?;
    match adapter {
        Some((a, b)) => {
            let low = tape.matmul(h, a)?;
            let delta = tape.matmul(low, b)?;
            let delta = tape.scale(delta, scale);
            tape.add(y, delta)
        }
        None => Ok(y),
    }
}
