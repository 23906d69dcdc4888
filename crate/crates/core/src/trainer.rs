//! Masked optimisation: base pretraining, supervised fine-tuning of adapters,
//! group-relative policy optimisation, and greedy evaluation.

use std::io::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{AutodiffError, Tensor};
use crate::corpus::{final_answer, LossSequence, SystemLabel, TaskExample, Tokenizer, EOS, SEP};
use crate::lora::AdapterSet;
use crate::model::{Model, ModelError, SampleOptions, Trainable};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("group size must be >= 2, got {0}")]
    GroupSize(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("active index {index} outside address space of {total}")]
    MaskRange { index: usize, total: usize },
    #[error("cannot draw {count} of {total} addresses")]
    MaskCount { count: usize, total: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<crate::corpus::CorpusError> for TrainError {
    fn from(e: crate::corpus::CorpusError) -> Self {
        TrainError::Config(e.to_string())
    }
}

/// Set of trainable adapter scalars; everything else is frozen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    active: Vec<usize>,
    total: usize,
}

impl FreezeMask {
    pub fn new(mut active: Vec<usize>, total: usize) -> Result<Self, TrainError> {
        active.sort_unstable();
        active.dedup();
        if let Some(&index) = active.iter().find(|&&i| i >= total) {
            return Err(TrainError::MaskRange { index, total });
        }
        Ok(Self { active, total })
    }

    pub fn full(total: usize) -> Self {
        Self {
            active: (0..total).collect(),
            total,
        }
    }

    pub fn frozen(total: usize) -> Self {
        Self {
            active: Vec::new(),
            total,
        }
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn contains(&self, index: usize) -> bool {
        self.active.binary_search(&index).is_ok()
    }

    /// Zeroes every gradient entry outside the active set.
    pub fn apply(&self, grad: &mut [f64]) {
        let mut next = self.active.iter().peekable();
        for (i, g) in grad.iter_mut().enumerate() {
            if next.peek() == Some(&&i) {
                next.next();
            } else {
                *g = 0.0;
            }
        }
    }
}

/// Uniform draw of `count` distinct addresses out of `total`.
pub fn random_mask(count: usize, seed: u64, total: usize) -> Result<FreezeMask, TrainError> {
    if count > total {
        return Err(TrainError::MaskCount { count, total });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FreezeMask::new(index::sample(&mut rng, total, count).into_vec(), total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW whose moment buffers exist only for the active indices.
#[derive(Debug, Clone)]
pub struct MaskedAdamW {
    cfg: AdamConfig,
    active: Vec<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl MaskedAdamW {
    pub fn new(cfg: AdamConfig, mask: &FreezeMask) -> Self {
        let n = mask.active().len();
        Self {
            cfg,
            active: mask.active().to_vec(),
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Number of scalars carrying optimizer state.
    pub fn state_len(&self) -> usize {
        self.m.len()
    }

    /// Updates `params[i]` for active `i` only; other entries are not touched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (k, &i) in self.active.iter().enumerate() {
            let g = grad[i];
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g;
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g;
            let update = (self.m[k] / bc1) / ((self.v[k] / bc2).sqrt() + c.eps);
            params[i] -= c.lr * (update + c.weight_decay * params[i]);
        }
    }
}

/// One JSON object per optimisation step.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StepRecord {
    pub stage: String,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<EvalReport>,
}

impl StepRecord {
    fn new(stage: &str, step: usize) -> Self {
        Self {
            stage: stage.into(),
            step,
            loss: None,
            surrogate: None,
            mean_reward: None,
            kl: None,
            accuracy: None,
        }
    }

    /// Accuracy snapshot outside the per-step series.
    pub fn snapshot(stage: &str, report: EvalReport) -> Self {
        Self {
            accuracy: Some(report),
            ..Self::new(stage, 0)
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<StepRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, r: StepRecord) {
        self.records.push(r);
    }

    /// Appends every record as a JSON line.
    pub fn append_to(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| TrainError::Config(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Cycles through a dataset in freshly shuffled passes.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

/// Next-token training of every base weight on raw sequences.
pub fn pretrain_base(
    model: &mut Model,
    sequences: &[Vec<usize>],
    cfg: &PretrainConfig,
    log: &mut MetricsLog,
) -> Result<Vec<f64>, TrainError> {
    if sequences.is_empty() {
        return Err(TrainError::EmptyDataset("pretraining"));
    }
    let seqs: Vec<LossSequence> = sequences
        .iter()
        .enumerate()
        .map(|(i, s)| LossSequence::unmasked(format!("pre-{i}"), s))
        .collect();
    let total: usize = model.base_tensors().iter().map(|t| t.len()).sum();
    let mut opt = MaskedAdamW::new(cfg.adam, &FreezeMask::full(total));
    let mut flat: Vec<f64> = model.base_tensors().iter().flat_map(|t| t.data().to_vec()).collect();
    let mut batcher = Batcher::new(seqs.len(), cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = batcher.next(cfg.batch_size.max(1));
        let mut grad = vec![0.0; total];
        let mut loss = 0.0;
        for &i in &batch {
            let (l, gs) = model.base_loss_grad(&seqs[i])?;
            loss += l;
            let mut off = 0;
            for g in &gs {
                for (acc, &d) in grad[off..off + g.len()].iter_mut().zip(g.data()) {
                    *acc += d;
                }
                off += g.len();
            }
        }
        let nb = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= nb);
        opt.step(&mut flat, &grad);
        let mut off = 0;
        for t in model.base_tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        losses.push(loss / nb);
        log.push(StepRecord {
            loss: Some(loss / nb),
            ..StepRecord::new("pretrain", step)
        });
    }
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

/// Per-step series of a fine-tuning stage plus the size of the optimiser
/// state it held, which equals the active-set size.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    /// Mean batch loss per step for SFT, mean reward per step for GRPO.
    pub per_step: Vec<f64>,
    pub optimizer_state: usize,
}

/// Minimises the answer-only cross-entropy on `data`; only `mask`-active
/// scalars move.
pub fn sft_stage(
    model: &Model,
    adapters: &mut AdapterSet,
    data: &[TaskExample],
    mask: &FreezeMask,
    cfg: &SftConfig,
    log: &mut MetricsLog,
) -> Result<StageOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset("SFT"));
    }
    check_mask(mask, adapters)?;
    let seqs: Vec<LossSequence> = data.iter().map(TaskExample::loss_sequence).collect();
    let mut opt = MaskedAdamW::new(cfg.adam, mask);
    let mut batcher = Batcher::new(seqs.len(), cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = batcher.next(cfg.batch_size.max(1));
        let mut grad = vec![0.0; adapters.len()];
        let mut loss = 0.0;
        for &i in &batch {
            let (l, g) = model.adapter_loss_grad(adapters, &seqs[i])?;
            loss += l;
            grad.iter_mut().zip(g).for_each(|(a, d)| *a += d);
        }
        let nb = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= nb);
        mask.apply(&mut grad);
        opt.step(adapters.values_mut(), &grad);
        losses.push(loss / nb);
        log.push(StepRecord {
            loss: Some(loss / nb),
            ..StepRecord::new("sft", step)
        });
    }
    Ok(StageOutcome {
        per_step: losses,
        optimizer_state: opt.state_len(),
    })
}

fn check_mask(mask: &FreezeMask, adapters: &AdapterSet) -> Result<(), TrainError> {
    if mask.total() != adapters.len() {
        return Err(TrainError::Config(format!(
            "mask covers {} addresses, adapters have {}",
            mask.total(),
            adapters.len()
        )));
    }
    Ok(())
}

/// `(r − mean) / (population std + 1e-8)`.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    // Equal rewards give exact zeros; the rounded mean would not.
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSpec {
    pub exact_match: f64,
    pub format_bonus: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            exact_match: 1.0,
            format_bonus: 0.2,
        }
    }
}

impl RewardSpec {
    /// Exact-match weight when the final answer equals `gold`, plus the
    /// format bonus when the completion contains the separator token.
    pub fn score(&self, completion: &[usize], text: &str, gold: &str) -> f64 {
        let mut r = 0.0;
        if final_answer(text) == gold {
            r += self.exact_match;
        }
        if completion.contains(&SEP) {
            r += self.format_bonus;
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoConfig {
    pub steps: usize,
    /// Prompts per step.
    pub batch_size: usize,
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub temperature: f64,
    pub max_new: usize,
    /// Optimisation passes over each sampled batch; the first pass has ratio 1.
    pub inner_epochs: usize,
    pub adam: AdamConfig,
    pub reward: RewardSpec,
    pub seed: u64,
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.group_size < 2 {
            return Err(TrainError::GroupSize(self.group_size));
        }
        if self.clip_eps <= 0.0 || self.kl_coef < 0.0 || self.temperature <= 0.0 || self.inner_epochs == 0 {
            return Err(TrainError::Config(format!(
                "need clip_eps > 0, kl_coef >= 0, temperature > 0, inner_epochs >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

struct Rollout {
    tokens: Vec<usize>,
    prompt_len: usize,
    advantage: f64,
    old_lp: Vec<f64>,
    ref_lp: Vec<f64>,
}

impl Rollout {
    fn picks(&self) -> Vec<(usize, usize)> {
        (self.prompt_len..self.tokens.len())
            .map(|p| (p - 1, self.tokens[p]))
            .collect()
    }

    fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }
}

type CoefFn<'a> = &'a dyn Fn(&[f64]) -> Vec<f64>;

/// Per-token log-probabilities of the completion, and optionally the
/// gradient of `Σ coef_t · lp_t` with respect to the adapters.
fn completion_logprobs(
    model: &Model,
    adapters: &AdapterSet,
    ro: &Rollout,
    temperature: f64,
    coef: Option<CoefFn<'_>>,
) -> Result<(Vec<f64>, Option<Vec<f64>>), TrainError> {
    let trainable = if coef.is_some() {
        Trainable::Adapters
    } else {
        Trainable::Nothing
    };
    let mut trace = model.trace(Some(adapters), ro.inputs(), trainable)?;
    let tape = &mut trace.tape;
    let logits = tape.scale(trace.logits, 1.0 / temperature);
    let lp = tape.pick_log_softmax(logits, &ro.picks())?;
    let values = tape.value(lp).data().to_vec();
    let Some(coef) = coef else {
        return Ok((values, None));
    };
    let c = coef(&values);
    let n = c.len();
    let cvar = tape.leaf(Tensor::new(vec![n], c)?, false);
    let weighted = tape.mul(lp, cvar)?;
    let total = tape.sum(weighted);
    let grads = tape.backward(total)?;
    Ok((values, Some(trace.adapter_grads(&grads))))
}

/// `∂loss/∂lp_t` for the loss `−(1/scale) Σ_t [min(ρ_t·A, clip(ρ_t)·A) − β·k3_t]`
/// with `ρ_t = exp(lp_t − old_t)` and `k3_t = r − ln r − 1`, `r = exp(ref_t − lp_t)`.
/// The clipped branch is constant in `lp`.
fn token_coefs(lp: &[f64], ro: &Rollout, clip_eps: f64, kl_coef: f64, scale: f64) -> Vec<f64> {
    let a = ro.advantage;
    lp.iter()
        .enumerate()
        .map(|(t, &l)| {
            let ratio = (l - ro.old_lp[t]).exp();
            let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
            let d_surr = if ratio * a <= clipped * a { ratio * a } else { 0.0 };
            let d_kl = 1.0 - (ro.ref_lp[t] - l).exp();
            -(d_surr - kl_coef * d_kl) / scale
        })
        .collect()
}

/// Group-relative policy optimisation on System-2 prompts.
///
/// The reference policy is a snapshot of `adapters` on entry. Each step
/// samples `group_size` completions per prompt, normalises rewards within
/// each group, and ascends the clipped token-level surrogate minus
/// `kl_coef` times the per-token `r − ln r − 1` estimate (`r = π_ref/π`).
pub fn grpo_stage(
    model: &Model,
    adapters: &mut AdapterSet,
    data: &[TaskExample],
    mask: &FreezeMask,
    cfg: &GrpoConfig,
    tokenizer: &Tokenizer,
    log: &mut MetricsLog,
) -> Result<StageOutcome, TrainError> {
    let reference = adapters.clone();
    grpo_stage_with_reference(model, adapters, &reference, data, mask, cfg, tokenizer, log)
}

/// [`grpo_stage`] with the KL anchored at `reference` instead of the entry policy.
#[allow(clippy::too_many_arguments)]
pub fn grpo_stage_with_reference(
    model: &Model,
    adapters: &mut AdapterSet,
    reference: &AdapterSet,
    data: &[TaskExample],
    mask: &FreezeMask,
    cfg: &GrpoConfig,
    tokenizer: &Tokenizer,
    log: &mut MetricsLog,
) -> Result<StageOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset("RL"));
    }
    cfg.validate()?;
    check_mask(mask, adapters)?;
    if reference.len() != adapters.len() {
        return Err(TrainError::Config(format!(
            "reference has {} scalars, policy has {}",
            reference.len(),
            adapters.len()
        )));
    }
    let mut opt = MaskedAdamW::new(cfg.adam, mask);
    let mut batcher = Batcher::new(data.len(), cfg.seed);
    let mut rewards_per_step = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = batcher.next(cfg.batch_size.max(1));
        let mut rollouts = Vec::new();
        let mut reward_sum = 0.0;
        for (b, &i) in batch.iter().enumerate() {
            let ex = &data[i];
            let gold = ex.gold_answer();
            let mut group = Vec::with_capacity(cfg.group_size);
            let mut rewards = Vec::with_capacity(cfg.group_size);
            for g in 0..cfg.group_size {
                let opts = SampleOptions {
                    max_new: cfg.max_new,
                    temperature: cfg.temperature,
                    seed: crate::seed::derive(cfg.seed, &format!("grpo/{step}/{b}/{g}")),
                    eos: Some(EOS),
                };
                let completion = model.sample(Some(adapters), &ex.prompt_tokens, &opts)?;
                let text = tokenizer.decode(&completion)?;
                rewards.push(cfg.reward.score(&completion, &text, gold));
                group.push(completion);
            }
            reward_sum += rewards.iter().sum::<f64>();
            for (completion, adv) in group.into_iter().zip(compute_advantages(&rewards)) {
                if completion.is_empty() {
                    continue;
                }
                let mut tokens = ex.prompt_tokens.clone();
                tokens.extend(&completion);
                rollouts.push(Rollout {
                    tokens,
                    prompt_len: ex.prompt_tokens.len(),
                    advantage: adv,
                    old_lp: Vec::new(),
                    ref_lp: Vec::new(),
                });
            }
        }
        for ro in rollouts.iter_mut() {
            ro.old_lp = completion_logprobs(model, adapters, ro, cfg.temperature, None)?.0;
            ro.ref_lp = completion_logprobs(model, reference, ro, cfg.temperature, None)?.0;
        }
        let n_groups = batch.len() * cfg.group_size;
        let mut surrogate = 0.0;
        let mut kl = 0.0;
        for _ in 0..cfg.inner_epochs {
            let mut grad = vec![0.0; adapters.len()];
            surrogate = 0.0;
            kl = 0.0;
            for ro in &rollouts {
                let len = ro.old_lp.len() as f64;
                let mut surr_i = 0.0;
                let mut kl_i = 0.0;
                let scale = n_groups as f64 * len;
                let coef = |lp: &[f64]| token_coefs(lp, ro, cfg.clip_eps, cfg.kl_coef, scale);
                let (lp, g) = completion_logprobs(model, adapters, ro, cfg.temperature, Some(&coef))?;
                for (t, &l) in lp.iter().enumerate() {
                    let ratio = (l - ro.old_lp[t]).exp();
                    let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
                    surr_i += (ratio * ro.advantage).min(clipped * ro.advantage);
                    let r = (ro.ref_lp[t] - l).exp();
                    kl_i += r - r.ln() - 1.0;
                }
                surrogate += surr_i / len / n_groups as f64;
                kl += kl_i / len / n_groups as f64;
                grad.iter_mut()
                    .zip(g.expect("gradient requested"))
                    .for_each(|(a, d)| *a += d);
            }
            mask.apply(&mut grad);
            opt.step(adapters.values_mut(), &grad);
        }
        rewards_per_step.push(reward_sum / n_groups as f64);
        log.push(StepRecord {
            surrogate: Some(surrogate),
            mean_reward: Some(reward_sum / n_groups as f64),
            kl: Some(kl),
            ..StepRecord::new("grpo", step)
        });
    }
    Ok(StageOutcome {
        per_step: rewards_per_step,
        optimizer_state: opt.state_len(),
    })
}

/// Exact-match accuracy overall and per gold system; `None` for empty groups.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct EvalReport {
    pub overall: Option<f64>,
    pub system1: Option<f64>,
    pub system2: Option<f64>,
    pub n: usize,
}

/// Greedy decoding of every prompt, scored by exact match of the final answer.
pub fn evaluate(
    model: &Model,
    adapters: Option<&AdapterSet>,
    data: &[TaskExample],
    tokenizer: &Tokenizer,
    max_new: usize,
) -> Result<EvalReport, TrainError> {
    let mut hits = [(0usize, 0usize); 2];
    for ex in data {
        let out = model.sample(adapters, &ex.prompt_tokens, &SampleOptions::greedy(max_new, Some(EOS)))?;
        let text = tokenizer.decode(&out)?;
        let correct = final_answer(&text) == ex.gold_answer();
        let slot = usize::from(ex.gold_system == SystemLabel::Two);
        hits[slot].0 += usize::from(correct);
        hits[slot].1 += 1;
    }
    let frac = |(c, n): (usize, usize)| (n > 0).then(|| c as f64 / n as f64);
    Ok(EvalReport {
        overall: frac((hits[0].0 + hits[1].0, hits[0].1 + hits[1].1)),
        system1: frac(hits[0]),
        system2: frac(hits[1]),
        n: data.len(),
    })
}
