use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nllf_core::models::Strategy;
use nllf_core::pipeline::synthetic::{self, SyntheticSpec};
use nllf_core::pipeline::{AuditArgs, Pipeline, PipelineConfig, Stage, StageOutcome, Status};
use nllf_core::weak_labeler::LabelMode;
use nllf_core::{Error, Result};

/// Natural-language learned features: staged pipeline driver.
#[derive(Parser)]
#[command(name = "nllf", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Task config (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to `run/` next to the config.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Print the plan and LLM call estimate without calling or writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Rerun stages even when up to date.
    #[arg(long, global = true)]
    force: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Tree,
    Encoder,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Vanilla,
    Cot,
    SelfAsk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Direct,
    Cot,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the corpus and copy it into the run directory.
    Ingest,
    /// Partition into train/val/test.
    Split,
    /// Ask the LLM for candidate questions on a p_q sample; writes a review CSV.
    GenBsq {
        #[arg(long)]
        p_q: Option<f64>,
    },
    /// Import the reviewed CSV as the curated question set.
    CurateImport {
        /// Edited review file (defaults to the exported one or the config's).
        #[arg(long)]
        review: Option<PathBuf>,
    },
    /// Merge curated questions with the extra pools.
    AugmentBsq,
    /// LLM yes/no answers for every (p_l sample, question) pair.
    WeakLabel {
        #[arg(long)]
        p_l: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Fine-tune the pair encoder on the weak labels.
    TrainNllfg,
    /// Score every example and assemble NLLF, EF and BoNG columns.
    BuildFeatures,
    /// Genetic-algorithm selection over stratified folds.
    SelectFeatures,
    /// Train the decision tree or the encoder classifier.
    Train {
        #[arg(value_enum)]
        model: Model,
    },
    /// Prompting baseline on the test split.
    Baseline {
        #[arg(value_enum)]
        strategy: BaselineKind,
    },
    /// Score every trained model on the test split.
    Evaluate,
    /// Per-example decision-path documents for the test split.
    Explain,
    /// Score weak verdicts against expert answers.
    Audit {
        /// CSV with columns `id,expert,<system>...`.
        #[arg(long)]
        verdicts: PathBuf,
        #[arg(long, default_value = "llm")]
        teacher: String,
        #[arg(long, default_value = "nllfg")]
        student: String,
        /// Student validation score for the compounding check.
        #[arg(long)]
        student_score: Option<f64>,
    },
    /// Every stage in order, skipping those already up to date.
    Run,
    /// Print the run manifest summary.
    Status,
    /// Write the planted-rule benchmark workspace.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long, default_value_t = 0.10)]
        noise: f64,
    },
}

fn strategy(b: BaselineKind) -> Strategy {
    match b {
        BaselineKind::Vanilla => Strategy::Vanilla,
        BaselineKind::Cot => Strategy::Cot,
        BaselineKind::SelfAsk => Strategy::SelfAsk,
    }
}

fn print_outcomes(outcomes: &[StageOutcome]) {
    for o in outcomes {
        match o.status {
            Status::Ran => println!("{:<18} ran ({} LLM calls)", o.stage, o.llm_calls),
            Status::UpToDate => println!("{:<18} up to date", o.stage),
            Status::Planned => match o.estimated_llm_calls {
                Some(n) => println!("{:<18} would run (<= {n} LLM calls)", o.stage),
                None => println!("{:<18} would run (LLM calls unknown until inputs exist)", o.stage),
            },
        }
    }
    if outcomes.iter().any(|o| o.status == Status::Planned) {
        let total: u64 = outcomes.iter().filter_map(|o| o.estimated_llm_calls).sum();
        println!("dry run: at most {total} LLM calls, nothing written");
    }
}

fn pipeline(g: &Global, adjust: impl FnOnce(&mut PipelineConfig)) -> Result<Pipeline> {
    let path = g.config.as_deref().ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    adjust(&mut cfg);
    cfg.validate()?;
    let run_dir = g.run_dir.clone().unwrap_or_else(|| cfg.base_dir.join("run"));
    let mut p = Pipeline::new(cfg, run_dir)?;
    p.dry_run = g.dry_run;
    p.force = g.force;
    Ok(p)
}

fn one(g: &Global, stage: Stage, adjust: impl FnOnce(&mut PipelineConfig)) -> Result<()> {
    let mut p = pipeline(g, adjust)?;
    print_outcomes(&[p.run_stage(stage)?]);
    Ok(())
}

fn status(g: &Global) -> Result<()> {
    let p = pipeline(g, |_| {})?;
    let m = p.manifest();
    println!("run {} ({} entries)", m.run_id, m.entries.len());
    for e in &m.entries {
        println!("{:<18} {} outputs, {} LLM calls, finished {}", e.stage, e.outputs.len(), e.llm_calls, e.finished_unix);
    }
    Ok(())
}

fn synth(out: &Path, n: usize, seed: u64, noise: f64, dry_run: bool) -> Result<()> {
    if dry_run {
        println!("would write a {n}-example synthetic workspace to {}", out.display());
        return Ok(());
    }
    let cfg = synthetic::write_workspace(out, &SyntheticSpec { n, seed, noise, ..SyntheticSpec::default() })?;
    println!("wrote {}", cfg.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest => one(g, Stage::Ingest, |_| {}),
        Command::Split => one(g, Stage::Split, |_| {}),
        Command::GenBsq { p_q } => one(g, Stage::GenBsq, |c| {
            if let Some(v) = p_q {
                c.task.params.p_q = v;
            }
        }),
        Command::CurateImport { review } => one(g, Stage::CurateImport, |c| {
            if let Some(r) = review {
                c.bsq.review = Some(std::fs::canonicalize(&r).unwrap_or(r));
            }
        }),
        Command::AugmentBsq => one(g, Stage::AugmentBsq, |_| {}),
        Command::WeakLabel { p_l, mode } => one(g, Stage::WeakLabel, |c| {
            if let Some(v) = p_l {
                c.task.params.p_l = v;
            }
            if let Some(m) = mode {
                c.weak_label.mode = match m {
                    Mode::Direct => LabelMode::Direct,
                    Mode::Cot => LabelMode::Cot,
                };
            }
        }),
        Command::TrainNllfg => one(g, Stage::TrainNllfg, |_| {}),
        Command::BuildFeatures => one(g, Stage::BuildFeatures, |_| {}),
        Command::SelectFeatures => one(g, Stage::SelectFeatures, |_| {}),
        Command::Train { model: Model::Tree } => one(g, Stage::TrainTree, |_| {}),
        Command::Train { model: Model::Encoder } => one(g, Stage::TrainEncoder, |_| {}),
        Command::Baseline { strategy: s } => one(g, Stage::Baseline(strategy(s)), |_| {}),
        Command::Evaluate => one(g, Stage::Evaluate, |_| {}),
        Command::Explain => one(g, Stage::Explain, |_| {}),
        Command::Audit { verdicts, teacher, student, student_score } => {
            let mut p = pipeline(g, |_| {})?;
            p.audit = Some(AuditArgs { verdicts, teacher, student, student_score });
            print_outcomes(&[p.run_stage(Stage::Audit)?]);
            Ok(())
        }
        Command::Run => {
            let mut p = pipeline(g, |_| {})?;
            let plan = p.full_plan();
            let mut outcomes = Vec::new();
            for s in plan {
                outcomes.push(p.run_stage(s)?);
            }
            print_outcomes(&outcomes);
            Ok(())
        }
        Command::Status => status(g),
        Command::Synth { out, n, seed, noise } => synth(&out, n, seed, noise, g.dry_run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Stale { .. } = e {
                eprintln!("hint: regenerate the stale artifact, or pass --force to the producing stage");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
