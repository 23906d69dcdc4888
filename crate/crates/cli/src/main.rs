use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dualsys::config::RunConfig;
use dualsys::experiment::{self, RunDir, SplitStrategy};
use dualsys::lora::SiteSet;
use dualsys::trainer::MetricsLog;
use dualsys::{checkpoint, corpus, importance, partition};

#[derive(Parser)]
#[command(name = "dualsys", version, about = "Two-stage importance-partitioned adapter fine-tuning")]
struct Cli {
    /// Run configuration file (flat `section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus and route the training set into System 1 / System 2.
    Split,
    /// Pretrain (or fetch from cache) the base model.
    Pretrain,
    /// Warm up and write both importance tables.
    Score,
    /// Partition from the importance tables in the output directory.
    Partition,
    /// Full pipeline: split through both training stages and evaluation.
    Train,
    /// Exact-match accuracy of a checkpoint on a corpus file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `corpus_eval.tsv` in the output directory.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Importance vs. random masks across cutpoints.
    SweepTheta {
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.7,0.9,1")]
        thetas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "QKVGUD")]
        sites: Vec<SiteSet>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
    /// Full α × β grid.
    GridAb {
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
        values: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
    /// Downstream accuracy per corpus-splitting strategy.
    AblateSplitter {
        #[arg(long, value_delimiter = ',', default_value = "single,random,vote3,vote5")]
        strategies: Vec<String>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
    /// Per-scalar importance scatter with overlap summary.
    ExportScatter {
        /// Defaults to `scatter.csv` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("override {kv:?} is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn strategy(name: &str) -> Result<SplitStrategy> {
    SplitStrategy::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .with_context(|| format!("unknown split strategy {name:?}"))
}

fn tables(dir: &Path) -> Result<(importance::ImportanceTable, importance::ImportanceTable)> {
    let load = |name: &str| {
        let p = dir.join(name);
        importance::load(&p).with_context(|| format!("reading {} (run `score` first)", p.display()))
    };
    Ok((load("system1.imp")?, load("system2.imp")?))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Split => {
            let mut dir = RunDir::create(&cfg.output_dir)?;
            dir.write("config.txt", cfg.render().as_bytes())?;
            let c = experiment::build_corpus(&cfg)?;
            corpus::write_corpus(&dir.file("corpus_train.tsv"), &c.train, None)?;
            dir.record("corpus_train.tsv")?;
            corpus::write_corpus(&dir.file("corpus_eval.tsv"), &c.eval, None)?;
            dir.record("corpus_eval.tsv")?;
            let split = experiment::split_train(&cfg, &c.train)?;
            experiment::write_split(&mut dir, &c.train, &split)?;
            dir.manifest(&cfg)?;
            println!(
                "system1={} system2={} gold_agreement={}",
                split.d1.len(),
                split.d2.len(),
                split.gold_agreement(&c.train)
            );
        }
        Command::Pretrain => {
            let mut dir = RunDir::create(&cfg.output_dir)?;
            let c = experiment::build_corpus(&cfg)?;
            let (model, cached) = experiment::base_model(&cfg, &c.generator)?;
            checkpoint::save(&dir.file("base.ck"), &model, None)?;
            dir.record("base.ck")?;
            dir.manifest(&cfg)?;
            println!("base {}", cached.display());
        }
        Command::Score => {
            let mut dir = RunDir::create(&cfg.output_dir)?;
            let mut log = MetricsLog::default();
            let prep = experiment::prepare(&cfg, &mut dir, &mut log)?;
            dir.write_metrics(&log)?;
            dir.manifest(&cfg)?;
            println!(
                "scalars={} total_I1={} total_I2={}",
                prep.t1.len(),
                prep.t1.total(),
                prep.t2.total()
            );
        }
        Command::Partition => {
            let mut dir = RunDir::create(&cfg.output_dir)?;
            let (t1, t2) = tables(&dir.path)?;
            let part = partition::build_partition(&t1, &t2, cfg.partition.theta)?;
            let spec = partition::PartitionSpec::new(part, cfg.partition.alpha, cfg.partition.beta)?;
            partition::save(&dir.file("partition.bin"), &spec)?;
            dir.record("partition.bin")?;
            dir.manifest(&cfg)?;
            let p = &spec.partition;
            println!(
                "percent_param={} s1={} s2={} shared={} stage1_active={} stage2_active={}",
                p.percent_param(),
                p.s1.len(),
                p.s2.len(),
                p.omega_shared.len(),
                spec.stage1_active.len(),
                spec.stage2_active.len()
            );
        }
        Command::Train => print_json(&experiment::run_pipeline(&cfg)?)?,
        Command::Eval { checkpoint: ck, corpus: path } => {
            let (model, adapters) =
                checkpoint::load(&ck).with_context(|| format!("reading {}", ck.display()))?;
            let path = path.unwrap_or_else(|| cfg.output_dir.join("corpus_eval.tsv"));
            let tok = corpus::Tokenizer::default();
            let examples: Vec<_> = corpus::read_corpus(&path, &tok)
                .with_context(|| format!("reading {}", path.display()))?
                .into_iter()
                .map(|(e, _)| e)
                .collect();
            let report = dualsys::trainer::evaluate(&model, adapters.as_ref(), &examples, &tok, cfg.eval_max_new)?;
            print_json(&report)?;
        }
        Command::SweepTheta { thetas, sites, trials } => {
            for r in experiment::theta_sweep(&cfg, &thetas, &sites, trials)? {
                println!("{},{},{},{},{}", r.sites, r.theta, r.percent_param, r.perf, r.rand);
            }
        }
        Command::GridAb { values, trials } => {
            for r in experiment::alpha_beta_grid(&cfg, &values, trials)? {
                println!("{},{},{},{}", r.alpha, r.beta, r.perf_sft, r.perf_rl);
            }
        }
        Command::AblateSplitter { strategies, trials } => {
            let s = strategies.iter().map(|n| strategy(n)).collect::<Result<Vec<_>>>()?;
            for r in experiment::splitter_ablation(&cfg, &s, trials)? {
                println!("{},{},{}", r.strategy, r.gold_agreement, r.perf);
            }
        }
        Command::ExportScatter { out } => {
            let dir = RunDir::create(&cfg.output_dir)?;
            let (t1, t2) = tables(&dir.path)?;
            let ck = dir.file("stage0.ck");
            let (_, adapters) = checkpoint::load(&ck).with_context(|| format!("reading {}", ck.display()))?;
            let Some(adapters) = adapters else {
                bail!("{} holds no adapters", ck.display());
            };
            let part = partition::build_partition(&t1, &t2, cfg.partition.theta)?;
            let out = out.unwrap_or_else(|| dir.file("scatter.csv"));
            partition::export_scatter(&t1, &t2, &part, &adapters, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
