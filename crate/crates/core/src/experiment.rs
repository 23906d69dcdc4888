//! End-to-end runs: split → base model → warm-up and scoring → partition →
//! SFT stage → RL stage → evaluation, with every artifact written to the run
//! directory, plus the θ sweep, α/β grid and splitter ablation built on it.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::config::{MaskMode, RunConfig, SplitMode, VoterRule};
use crate::corpus::{self, PretrainMix, TaskExample, TaskGenerator};
use crate::importance::{self, DatasetTag, ImportanceTable};
use crate::lora::{attach_lora, AdapterSet, SiteSet};
use crate::model::Model;
use crate::partition::{self, PartitionSpec};
use crate::splitter::{self, Split, Strategy, VoterProfile};
use crate::trainer::{
    self, AdamConfig, EvalReport, FreezeMask, GrpoConfig, MetricsLog, PretrainConfig, RewardSpec, SftConfig,
    StepRecord,
};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct PipelineError {
    pub stage: &'static str,
    #[source]
    pub source: BoxError,
}

fn at<E: Into<BoxError>>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        source: e.into(),
    }
}

pub struct Corpus {
    pub generator: TaskGenerator,
    pub train: Vec<TaskExample>,
    pub eval: Vec<TaskExample>,
}

pub fn build_corpus(cfg: &RunConfig) -> Result<Corpus, corpus::CorpusError> {
    let c = &cfg.corpus;
    let generator = TaskGenerator::new(c.fact_count, c.fact_seed, c.fact_fraction);
    let seed = |label: &str| crate::seed::derive(c.seed, label);
    let mut train = generator.gen_system1(c.system1_train, seed("train1"))?;
    train.extend(generator.gen_system2(c.system2_train, c.max_depth, seed("train2"))?);
    let mut eval = Vec::new();
    if c.system1_eval > 0 {
        eval.extend(generator.gen_system1(c.system1_eval, seed("eval1"))?);
    }
    if c.system2_eval > 0 {
        eval.extend(generator.gen_system2(c.system2_eval, c.max_depth, seed("eval2"))?);
    }
    Ok(Corpus { generator, train, eval })
}

pub fn voter_profiles(cfg: &RunConfig) -> Result<Vec<VoterProfile>, splitter::SplitError> {
    let s = &cfg.split;
    (0..s.voters)
        .map(|i| {
            let id = format!("voter{i}");
            let seed = crate::seed::derive(s.seed, &id);
            match s.rules[i % s.rules.len()] {
                VoterRule::OperatorCount => {
                    VoterProfile::new(id, Strategy::OperatorCount { min_ops: s.min_ops }, s.error_rate, seed)
                }
                VoterRule::PromptLength => {
                    VoterProfile::new(id, Strategy::PromptLength { max_chars: s.max_chars }, s.error_rate, seed)
                }
                VoterRule::MarkerPresence => VoterProfile::new(id, Strategy::MarkerPresence, s.error_rate, seed),
                VoterRule::External => {
                    let path = s.verdict_file.as_ref().expect("validated config");
                    VoterProfile::from_verdict_file(&id, path, s.error_rate, seed)
                }
            }
        })
        .collect()
}

pub fn split_train(cfg: &RunConfig, train: &[TaskExample]) -> Result<Split, splitter::SplitError> {
    match cfg.split.mode {
        SplitMode::Vote => splitter::split_corpus(train, &voter_profiles(cfg)?),
        SplitMode::Random => Ok(splitter::random_split(train, cfg.split.p_two, cfg.split.seed)),
    }
}

/// Digest of everything that determines the pretrained base.
pub fn base_key(cfg: &RunConfig) -> String {
    let m = &cfg.model;
    let c = &cfg.corpus;
    let p = &cfg.pretrain;
    let canon = format!(
        "v1|{}|{}|{}|{}|{}|{}|facts {} {} {} depth {}|pre {} {} {} {} {} {} {} {}",
        m.n_layers,
        m.d_model,
        m.n_heads,
        m.d_ff,
        m.max_seq_len,
        corpus::Tokenizer::default().vocab_size(),
        c.fact_count,
        c.fact_seed,
        c.fact_fraction,
        c.max_depth,
        p.count,
        p.mix_system1,
        p.mix_system2,
        p.mix_random,
        p.steps,
        p.batch_size,
        p.lr,
        p.seed
    );
    hex::encode(&Sha256::digest(canon.as_bytes())[..12])
}

static BASE_CACHE: Mutex<()> = Mutex::new(());

/// The pretrained base for `cfg`, loaded from the cache directory or trained
/// and stored there. Returns the model and its cache path.
pub fn base_model(cfg: &RunConfig, generator: &TaskGenerator) -> Result<(Model, PathBuf), PipelineError> {
    let path = cfg.cache_dir.join(format!("base-{}.ck", base_key(cfg)));
    let _guard = BASE_CACHE.lock().unwrap_or_else(|e| e.into_inner());
    if path.exists() {
        let (model, _) = checkpoint::load(&path).map_err(at("pretrain"))?;
        return Ok((model, path));
    }
    let p = &cfg.pretrain;
    let seqs = generator
        .gen_pretrain(
            p.count,
            cfg.corpus.max_depth,
            PretrainMix {
                system1: p.mix_system1,
                system2: p.mix_system2,
                random: p.mix_random,
            },
            p.seed,
        )
        .map_err(at("pretrain"))?;
    let mut model =
        Model::init(cfg.model_config(generator.tokenizer.vocab_size()), p.seed).map_err(at("pretrain"))?;
    let pcfg = PretrainConfig {
        steps: p.steps,
        batch_size: p.batch_size,
        adam: AdamConfig {
            lr: p.lr,
            ..AdamConfig::default()
        },
        seed: p.seed,
    };
    trainer::pretrain_base(&mut model, &seqs, &pcfg, &mut MetricsLog::default()).map_err(at("pretrain"))?;
    checkpoint::save(&path, &model, None).map_err(at("pretrain"))?;
    Ok((model, path))
}

fn adam(cfg: &RunConfig, lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        beta1: cfg.sft.beta1,
        beta2: cfg.sft.beta2,
        eps: cfg.sft.eps,
        weight_decay: cfg.sft.weight_decay,
    }
}

pub fn sft_config(cfg: &RunConfig) -> SftConfig {
    SftConfig {
        steps: cfg.sft.steps,
        batch_size: cfg.sft.batch_size,
        adam: adam(cfg, cfg.sft.lr),
        seed: cfg.sft.seed,
    }
}

pub fn grpo_config(cfg: &RunConfig) -> GrpoConfig {
    let g = &cfg.grpo;
    GrpoConfig {
        steps: g.steps,
        batch_size: g.batch_size,
        group_size: g.group_size,
        clip_eps: g.clip_eps,
        kl_coef: g.kl_coef,
        temperature: g.temperature,
        max_new: g.max_new,
        inner_epochs: g.inner_epochs,
        adam: adam(cfg, g.lr),
        reward: RewardSpec {
            exact_match: g.reward_exact,
            format_bonus: g.reward_format,
        },
        seed: g.seed,
    }
}

/// Warm-up on a copy of `initial` over the whole training corpus, then
/// importance tables for both subsets at the warmed-up snapshot.
pub fn score_tables(
    cfg: &RunConfig,
    model: &Model,
    initial: &AdapterSet,
    train: &[TaskExample],
    split: &Split,
    log: &mut MetricsLog,
) -> Result<(AdapterSet, ImportanceTable, ImportanceTable), PipelineError> {
    let mut warm = initial.clone();
    if cfg.importance.warmup_steps > 0 {
        let wcfg = SftConfig {
            steps: cfg.importance.warmup_steps,
            batch_size: cfg.sft.batch_size,
            adam: adam(cfg, cfg.importance.warmup_lr),
            seed: crate::seed::derive(cfg.sft.seed, "warmup"),
        };
        let mut wlog = MetricsLog::default();
        let all = FreezeMask::full(warm.len());
        trainer::sft_stage(model, &mut warm, train, &all, &wcfg, &mut wlog)
            .map_err(at("score"))?;
        for mut r in wlog.records {
            r.stage = "warmup".into();
            log.push(r);
        }
    }
    let cap = |d: &[TaskExample]| {
        let n = if cfg.importance.max_examples == 0 {
            d.len()
        } else {
            d.len().min(cfg.importance.max_examples)
        };
        d[..n].iter().map(TaskExample::loss_sequence).collect::<Vec<_>>()
    };
    let t1 = importance::accumulate(model, &warm, &cap(&split.d1), DatasetTag::System1).map_err(at("score"))?;
    let t2 = importance::accumulate(model, &warm, &cap(&split.d2), DatasetTag::System2).map_err(at("score"))?;
    Ok((warm, t1, t2))
}

/// Stage masks for the configured mask mode; random masks match the
/// importance masks' sizes.
pub fn stage_masks(cfg: &RunConfig, spec: &PartitionSpec) -> Result<(FreezeMask, FreezeMask), PipelineError> {
    let total = spec.partition.total;
    match cfg.partition.mask {
        MaskMode::Importance => Ok((
            FreezeMask::new(spec.stage1_active.clone(), total).map_err(at("partition"))?,
            FreezeMask::new(spec.stage2_active.clone(), total).map_err(at("partition"))?,
        )),
        MaskMode::Random => {
            let seed = |l: &str| crate::seed::derive(cfg.partition.seed, l);
            Ok((
                trainer::random_mask(spec.stage1_active.len(), seed("stage1"), total).map_err(at("partition"))?,
                trainer::random_mask(spec.stage2_active.len(), seed("stage2"), total).map_err(at("partition"))?,
            ))
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Output directory with a running artifact list.
pub struct RunDir {
    pub path: PathBuf,
    pub artifacts: Vec<Artifact>,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(path).map_err(at("setup"))?;
        Ok(Self {
            path: path.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Records a file already written under this directory.
    pub fn record(&mut self, name: &str) -> Result<(), PipelineError> {
        let bytes = std::fs::read(self.file(name)).map_err(at("manifest"))?;
        self.artifacts.retain(|a| a.name != name);
        self.artifacts.push(Artifact {
            name: name.into(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), PipelineError> {
        crate::binio::write_atomic(&self.file(name), contents).map_err(at("write"))?;
        self.record(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(value).map_err(at("write"))?;
        self.write(name, text.as_bytes())
    }

    pub fn write_metrics(&mut self, log: &MetricsLog) -> Result<(), PipelineError> {
        let path = self.file("metrics.jsonl");
        if path.exists() {
            std::fs::remove_file(&path).map_err(at("write"))?;
        }
        log.append_to(&path).map_err(at("write"))?;
        self.record("metrics.jsonl")
    }

    /// Writes `manifest.json`: tool version, every seed and the artifact list.
    pub fn manifest(&mut self, cfg: &RunConfig) -> Result<(), PipelineError> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            tool: &'static str,
            version: &'static str,
            config: &'static str,
            base_key: String,
            seeds: Vec<(&'static str, u64)>,
            artifacts: &'a [Artifact],
        }
        let m = Manifest {
            tool: "dualsys",
            version: env!("CARGO_PKG_VERSION"),
            config: "config.txt",
            base_key: base_key(cfg),
            seeds: cfg.seeds(),
            artifacts: &self.artifacts,
        };
        let text = serde_json::to_string_pretty(&m).map_err(at("manifest"))?;
        crate::binio::write_atomic(&self.file("manifest.json"), text.as_bytes()).map_err(at("manifest"))
    }
}

/// Everything up to and including importance scoring; shared by the cells of a sweep.
pub struct Prepared {
    pub corpus: Corpus,
    pub split: Split,
    pub model: Model,
    pub initial: AdapterSet,
    pub t1: ImportanceTable,
    pub t2: ImportanceTable,
    pub base_accuracy: EvalReport,
}

pub fn prepare(cfg: &RunConfig, dir: &mut RunDir, log: &mut MetricsLog) -> Result<Prepared, PipelineError> {
    cfg.validate().map_err(at("config"))?;
    dir.write("config.txt", cfg.render().as_bytes())?;

    let corpus = build_corpus(cfg).map_err(at("split"))?;
    corpus::write_corpus(&dir.file("corpus_train.tsv"), &corpus.train, None).map_err(at("split"))?;
    dir.record("corpus_train.tsv")?;
    corpus::write_corpus(&dir.file("corpus_eval.tsv"), &corpus.eval, None).map_err(at("split"))?;
    dir.record("corpus_eval.tsv")?;
    let split = split_train(cfg, &corpus.train).map_err(at("split"))?;
    write_split(dir, &corpus.train, &split)?;

    let (base, _) = base_model(cfg, &corpus.generator)?;
    checkpoint::save(&dir.file("base.ck"), &base, None).map_err(at("pretrain"))?;
    dir.record("base.ck")?;
    let base_accuracy = trainer::evaluate(&base, None, &corpus.eval, &corpus.generator.tokenizer, cfg.eval_max_new)
        .map_err(at("pretrain"))?;
    log.push(StepRecord::snapshot("base", base_accuracy));

    let mut model = base;
    let initial = attach_lora(&mut model, cfg.lora_config(), cfg.lora.seed).map_err(at("score"))?;
    checkpoint::save(&dir.file("stage0.ck"), &model, Some(&initial)).map_err(at("score"))?;
    dir.record("stage0.ck")?;
    let (warm, t1, t2) = score_tables(cfg, &model, &initial, &corpus.train, &split, log)?;
    checkpoint::save(&dir.file("warmup.ck"), &model, Some(&warm)).map_err(at("score"))?;
    dir.record("warmup.ck")?;
    importance::dump(&t1, &dir.file("system1.imp")).map_err(at("score"))?;
    dir.record("system1.imp")?;
    importance::dump(&t2, &dir.file("system2.imp")).map_err(at("score"))?;
    dir.record("system2.imp")?;

    Ok(Prepared {
        corpus,
        split,
        model,
        initial,
        t1,
        t2,
        base_accuracy,
    })
}

pub fn write_split(dir: &mut RunDir, train: &[TaskExample], split: &Split) -> Result<(), PipelineError> {
    corpus::write_corpus(&dir.file("split.tsv"), train, Some(&split.assigned())).map_err(at("split"))?;
    dir.record("split.tsv")?;
    let mut tallies = String::from("id\tvotes_system1\tvotes_system2\tassigned\n");
    for t in &split.tallies {
        tallies.push_str(&format!("{}\t{}\t{}\t{}\n", t.example_id, t.votes_one, t.votes_two, t.assigned));
    }
    dir.write("tallies.tsv", tallies.as_bytes())
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunReport {
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mask: String,
    pub total_params: usize,
    pub percent_param: f64,
    pub stage1_active: usize,
    pub stage2_active: usize,
    pub jaccard: f64,
    pub d1: usize,
    pub d2: usize,
    pub gold_agreement: f64,
    pub base: EvalReport,
    pub post_sft: EvalReport,
    pub post_rl: EvalReport,
}

/// Partition, both training stages and evaluation, given prepared inputs.
pub fn finish(
    cfg: &RunConfig,
    prep: &Prepared,
    dir: &mut RunDir,
    log: &mut MetricsLog,
) -> Result<RunReport, PipelineError> {
    let spec = partition_spec(cfg, prep)?;
    partition::save(&dir.file("partition.bin"), &spec).map_err(at("partition"))?;
    dir.record("partition.bin")?;
    let (mask1, mask2) = stage_masks(cfg, &spec)?;

    let (after_sft, post_sft) = run_sft(cfg, prep, &mask1, dir, log)?;
    let (_, post_rl) = run_rl(cfg, prep, after_sft, &mask2, "stage2.ck", dir, log)?;
    let p = &spec.partition;
    Ok(RunReport {
        theta: cfg.partition.theta,
        alpha: cfg.partition.alpha,
        beta: cfg.partition.beta,
        mask: cfg.partition.mask.to_string(),
        total_params: p.total,
        percent_param: p.percent_param(),
        stage1_active: mask1.active().len(),
        stage2_active: mask2.active().len(),
        jaccard: partition::jaccard(&p.s1, &p.s2),
        d1: prep.split.d1.len(),
        d2: prep.split.d2.len(),
        gold_agreement: prep.split.gold_agreement(&prep.corpus.train),
        base: prep.base_accuracy,
        post_sft,
        post_rl,
    })
}

pub fn partition_spec(cfg: &RunConfig, prep: &Prepared) -> Result<PartitionSpec, PipelineError> {
    let part = partition::build_partition(&prep.t1, &prep.t2, cfg.partition.theta).map_err(at("partition"))?;
    PartitionSpec::new(part, cfg.partition.alpha, cfg.partition.beta).map_err(at("partition"))
}

/// Stage 1 from the initial adapters; writes `stage1.ck`.
pub fn run_sft(
    cfg: &RunConfig,
    prep: &Prepared,
    mask: &FreezeMask,
    dir: &mut RunDir,
    log: &mut MetricsLog,
) -> Result<(AdapterSet, EvalReport), PipelineError> {
    let mut adapters = prep.initial.clone();
    trainer::sft_stage(&prep.model, &mut adapters, &prep.split.d1, mask, &sft_config(cfg), log)
        .map_err(at("sft"))?;
    checkpoint::save(&dir.file("stage1.ck"), &prep.model, Some(&adapters)).map_err(at("sft"))?;
    dir.record("stage1.ck")?;
    let report = evaluate_on(cfg, prep, &adapters).map_err(at("sft"))?;
    log.push(StepRecord::snapshot("sft", report));
    Ok((adapters, report))
}

/// Stage 2 from the stage-1 adapters; writes `checkpoint_name`.
pub fn run_rl(
    cfg: &RunConfig,
    prep: &Prepared,
    mut adapters: AdapterSet,
    mask: &FreezeMask,
    checkpoint_name: &str,
    dir: &mut RunDir,
    log: &mut MetricsLog,
) -> Result<(AdapterSet, EvalReport), PipelineError> {
    trainer::grpo_stage(
        &prep.model,
        &mut adapters,
        &prep.split.d2,
        mask,
        &grpo_config(cfg),
        &prep.corpus.generator.tokenizer,
        log,
    )
    .map_err(at("rl"))?;
    checkpoint::save(&dir.file(checkpoint_name), &prep.model, Some(&adapters)).map_err(at("rl"))?;
    dir.record(checkpoint_name)?;
    let report = evaluate_on(cfg, prep, &adapters).map_err(at("rl"))?;
    log.push(StepRecord::snapshot("rl", report));
    Ok((adapters, report))
}

fn evaluate_on(cfg: &RunConfig, prep: &Prepared, adapters: &AdapterSet) -> Result<EvalReport, trainer::TrainError> {
    trainer::evaluate(
        &prep.model,
        Some(adapters),
        &prep.corpus.eval,
        &prep.corpus.generator.tokenizer,
        cfg.eval_max_new,
    )
}

/// Full pipeline into `cfg.output_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport, PipelineError> {
    let mut dir = RunDir::create(&cfg.output_dir)?;
    let mut log = MetricsLog::default();
    let result = prepare(cfg, &mut dir, &mut log).and_then(|prep| finish(cfg, &prep, &mut dir, &mut log));
    dir.write_metrics(&log)?;
    let report = result?;
    dir.json("report.json", &report)?;
    dir.manifest(cfg)?;
    Ok(report)
}

/// Median; the mean of the middle pair for even counts. NaN for empty input.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn acc(r: &EvalReport) -> f64 {
    r.overall.unwrap_or(f64::NAN)
}

fn tag(x: f64) -> String {
    format!("{x}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaRow {
    pub sites: String,
    pub theta: f64,
    pub percent_param: f64,
    pub perf: f64,
    pub rand: f64,
    pub trials: Vec<(f64, f64, f64)>,
}

/// For every site set, trial and θ: an importance-masked run and a random
/// mask of the same size. Medians go to `theta_sweep.csv`, every trial to
/// `theta_sweep_trials.csv`, both under `cfg.output_dir`.
pub fn theta_sweep(
    cfg: &RunConfig,
    thetas: &[f64],
    sites: &[SiteSet],
    trials: usize,
) -> Result<Vec<ThetaRow>, PipelineError> {
    if let Some(&t) = thetas.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(at("config")(format!("theta {t} outside [0, 1]")));
    }
    let mut top = RunDir::create(&cfg.output_dir)?;
    let mut rows = Vec::new();
    for &site_set in sites {
        let mut per_theta: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); thetas.len()];
        for trial in 0..trials {
            let mut tcfg = cfg.for_trial(trial as u64);
            tcfg.lora.sites = site_set;
            let tdir_path = cfg.output_dir.join(format!("{site_set}/trial{trial}"));
            let mut tdir = RunDir::create(&tdir_path)?;
            let mut log = MetricsLog::default();
            let prep = prepare(&tcfg, &mut tdir, &mut log)?;
            tdir.write_metrics(&log)?;
            tdir.manifest(&tcfg)?;
            for (k, &theta) in thetas.iter().enumerate() {
                let mut reports = Vec::new();
                for mode in [MaskMode::Importance, MaskMode::Random] {
                    let mut ccfg = tcfg.clone();
                    ccfg.partition.theta = theta;
                    ccfg.partition.mask = mode;
                    ccfg.output_dir = tdir_path.join(format!("theta{}/{mode}", tag(theta)));
                    reports.push(run_cell(&ccfg, &prep)?);
                }
                per_theta[k].push((reports[0].percent_param, acc(&reports[0].post_rl), acc(&reports[1].post_rl)));
            }
        }
        for (k, &theta) in thetas.iter().enumerate() {
            let t = &per_theta[k];
            rows.push(ThetaRow {
                sites: site_set.to_string(),
                theta,
                percent_param: median(&t.iter().map(|x| x.0).collect::<Vec<_>>()),
                perf: median(&t.iter().map(|x| x.1).collect::<Vec<_>>()),
                rand: median(&t.iter().map(|x| x.2).collect::<Vec<_>>()),
                trials: t.clone(),
            });
        }
    }
    let mut csv = String::from("sites,theta,percent_param,perf,rand\n");
    let mut detail = String::from("sites,theta,trial,percent_param,perf,rand\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.sites, r.theta, r.percent_param, r.perf, r.rand));
        for (i, t) in r.trials.iter().enumerate() {
            detail.push_str(&format!("{},{},{},{},{},{}\n", r.sites, r.theta, i, t.0, t.1, t.2));
        }
    }
    top.write("theta_sweep.csv", csv.as_bytes())?;
    top.write("theta_sweep_trials.csv", detail.as_bytes())?;
    top.write("config.txt", cfg.render().as_bytes())?;
    top.manifest(cfg)?;
    Ok(rows)
}

/// One partition/train/eval cell over shared prepared inputs, written to
/// `cfg.output_dir` with its own config, metrics, report and manifest.
pub fn run_cell(cfg: &RunConfig, prep: &Prepared) -> Result<RunReport, PipelineError> {
    let mut dir = RunDir::create(&cfg.output_dir)?;
    dir.write("config.txt", cfg.render().as_bytes())?;
    let mut log = MetricsLog::default();
    let result = finish(cfg, prep, &mut dir, &mut log);
    dir.write_metrics(&log)?;
    let report = result?;
    dir.json("report.json", &report)?;
    dir.manifest(cfg)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub alpha: f64,
    pub beta: f64,
    pub perf_sft: f64,
    pub perf_rl: f64,
    pub trials: Vec<(f64, f64)>,
}

/// Every (α, β) pair over `values`. Stage 1 depends only on α, so it runs
/// once per α and each β continues from its checkpoint.
pub fn alpha_beta_grid(cfg: &RunConfig, values: &[f64], trials: usize) -> Result<Vec<GridRow>, PipelineError> {
    if let Some(&v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(at("config")(format!("grid value {v} outside [0, 1]")));
    }
    let mut top = RunDir::create(&cfg.output_dir)?;
    let n = values.len();
    let mut cells: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n * n];
    for trial in 0..trials {
        let tcfg = cfg.for_trial(trial as u64);
        let tdir_path = cfg.output_dir.join(format!("trial{trial}"));
        let mut tdir = RunDir::create(&tdir_path)?;
        let mut log = MetricsLog::default();
        let prep = prepare(&tcfg, &mut tdir, &mut log)?;
        for (i, &alpha) in values.iter().enumerate() {
            let mut acfg = tcfg.clone();
            acfg.partition.alpha = alpha;
            acfg.output_dir = tdir_path.join(format!("alpha{}", tag(alpha)));
            let mut adir = RunDir::create(&acfg.output_dir)?;
            adir.write("config.txt", acfg.render().as_bytes())?;
            let mut alog = MetricsLog::default();
            // β is irrelevant to stage 1; the spec is rebuilt per β below.
            let spec = partition_spec(&acfg, &prep)?;
            let (mask1, _) = stage_masks(&acfg, &spec)?;
            let (after_sft, post_sft) = run_sft(&acfg, &prep, &mask1, &mut adir, &mut alog)?;
            for (j, &beta) in values.iter().enumerate() {
                let mut bcfg = acfg.clone();
                bcfg.partition.beta = beta;
                let spec = partition_spec(&bcfg, &prep)?;
                let name = format!("partition_beta{}.bin", tag(beta));
                partition::save(&adir.file(&name), &spec).map_err(at("partition"))?;
                adir.record(&name)?;
                let (_, mask2) = stage_masks(&bcfg, &spec)?;
                let ck = format!("stage2_beta{}.ck", tag(beta));
                let (_, post_rl) = run_rl(&bcfg, &prep, after_sft.clone(), &mask2, &ck, &mut adir, &mut alog)?;
                cells[i * n + j].push((acc(&post_sft), acc(&post_rl)));
            }
            adir.write_metrics(&alog)?;
            adir.manifest(&acfg)?;
        }
        tdir.write_metrics(&log)?;
        tdir.manifest(&tcfg)?;
    }
    let mut rows = Vec::with_capacity(n * n);
    for (i, &alpha) in values.iter().enumerate() {
        for (j, &beta) in values.iter().enumerate() {
            let t = &cells[i * n + j];
            rows.push(GridRow {
                alpha,
                beta,
                perf_sft: median(&t.iter().map(|x| x.0).collect::<Vec<_>>()),
                perf_rl: median(&t.iter().map(|x| x.1).collect::<Vec<_>>()),
                trials: t.clone(),
            });
        }
    }
    let mut csv = String::from("alpha,beta,perf_sft,perf_rl\n");
    let mut detail = String::from("alpha,beta,trial,perf_sft,perf_rl\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.alpha, r.beta, r.perf_sft, r.perf_rl));
        for (k, t) in r.trials.iter().enumerate() {
            detail.push_str(&format!("{},{},{},{},{}\n", r.alpha, r.beta, k, t.0, t.1));
        }
    }
    top.write("alpha_beta_grid.csv", csv.as_bytes())?;
    top.write("alpha_beta_grid_trials.csv", detail.as_bytes())?;
    top.write("config.txt", cfg.render().as_bytes())?;
    top.manifest(cfg)?;
    Ok(rows)
}

/// Ways of routing the training corpus compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SplitStrategy {
    SingleVoter,
    RandomPartition,
    Vote3,
    Vote5,
}

impl SplitStrategy {
    pub const ALL: [SplitStrategy; 4] = [
        SplitStrategy::SingleVoter,
        SplitStrategy::RandomPartition,
        SplitStrategy::Vote3,
        SplitStrategy::Vote5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitStrategy::SingleVoter => "single",
            SplitStrategy::RandomPartition => "random",
            SplitStrategy::Vote3 => "vote3",
            SplitStrategy::Vote5 => "vote5",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            SplitStrategy::SingleVoter => {
                cfg.split.mode = SplitMode::Vote;
                cfg.split.voters = 1;
            }
            SplitStrategy::RandomPartition => cfg.split.mode = SplitMode::Random,
            SplitStrategy::Vote3 => {
                cfg.split.mode = SplitMode::Vote;
                cfg.split.voters = 3;
            }
            SplitStrategy::Vote5 => {
                cfg.split.mode = SplitMode::Vote;
                cfg.split.voters = 5;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub strategy: String,
    pub gold_agreement: f64,
    pub perf: f64,
    pub trials: Vec<(f64, f64)>,
}

/// The same downstream pipeline under each split strategy; voters use
/// `cfg.split.error_rate`.
pub fn splitter_ablation(
    cfg: &RunConfig,
    strategies: &[SplitStrategy],
    trials: usize,
) -> Result<Vec<AblationRow>, PipelineError> {
    if strategies.len() < 2 {
        return Err(at("config")("the ablation needs at least two strategies".to_string()));
    }
    let mut top = RunDir::create(&cfg.output_dir)?;
    let mut rows = Vec::new();
    for &s in strategies {
        let mut t = Vec::new();
        for trial in 0..trials {
            let mut tcfg = cfg.for_trial(trial as u64);
            s.apply(&mut tcfg);
            tcfg.output_dir = cfg.output_dir.join(format!("{}/trial{trial}", s.name()));
            let r = run_pipeline(&tcfg)?;
            t.push((r.gold_agreement, acc(&r.post_rl)));
        }
        rows.push(AblationRow {
            strategy: s.name().into(),
            gold_agreement: median(&t.iter().map(|x| x.0).collect::<Vec<_>>()),
            perf: median(&t.iter().map(|x| x.1).collect::<Vec<_>>()),
            trials: t,
        });
    }
    let mut csv = String::from("strategy,gold_agreement,perf\n");
    let mut detail = String::from("strategy,trial,gold_agreement,perf\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.strategy, r.gold_agreement, r.perf));
        for (k, t) in r.trials.iter().enumerate() {
            detail.push_str(&format!("{},{},{},{}\n", r.strategy, k, t.0, t.1));
        }
    }
    top.write("splitter_ablation.csv", csv.as_bytes())?;
    top.write("splitter_ablation_trials.csv", detail.as_bytes())?;
    top.write("config.txt", cfg.render().as_bytes())?;
    top.manifest(cfg)?;
    Ok(rows)
}
