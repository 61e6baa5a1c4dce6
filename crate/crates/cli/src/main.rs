use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use gmptl::corpus::{write_corpus, UtteranceRecord};
use gmptl::encoder::{load_checkpoint, save_checkpoint};
use gmptl::eval::{compute_metrics, ConfusionMatrix, EvalReport, FoldResult};
use gmptl::gmp::{extract_gmp, gmp_path, read_codebooks, write_codebooks, write_gmp};
use gmptl::pipeline::{check_codebooks_match, run_ablation, run_pipeline, AblationGrid, PipelineConfig};
use gmptl::stage1::{train_stage1, JointLossConfig};
use gmptl::stage2::{load_gmp_dir, train_stage2, CODEBOOK_KEY};
use gmptl::stage3::{stage3_from_checkpoint, train_stage3};
use gmptl::Error;

#[derive(Parser)]
#[command(name = "gmptl", version, about = "Speech emotion recognition with multi-scale frame pseudo-labels")]
struct Cli {
    /// Pipeline configuration file (key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set gmp.tap=-2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Restrict the corpus to these sessions (comma-separated).
    #[arg(long, global = true, value_delimiter = ',')]
    sessions: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic corpus as a manifest plus feature files.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the multi-task encoder and pooling head.
    TrainStage1 {
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster tapped stage-1 features and write per-utterance GMP files.
    ExtractGmp {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked frame-level pseudo-label training.
    TrainStage2 {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        gmp_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Utterance-level fine-tuning (AM-Softmax, or CE with mode.finetune_mode=ce_ft).
    TrainStage3 {
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a stage-3 checkpoint on the corpus.
    Evaluate {
        #[arg(long)]
        stage3: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Full pipeline under 5-fold session cross-validation.
    Crossval,
    /// Run an ablation grid.
    Ablate {
        #[arg(long, value_enum)]
        grid: GridKind,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GridKind {
    /// MPs/GMPs x CE-FT/Hybrid-FT.
    Components,
    /// Tapped layer -1 through -6.
    Layers,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::ConfigInvalid(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.apply_env();
    cfg.validate()?;
    Ok(cfg)
}

fn load_corpus(cfg: &PipelineConfig, sessions: &[String]) -> Result<Vec<UtteranceRecord>> {
    let mut corpus = cfg.load_corpus()?;
    if !sessions.is_empty() {
        corpus.retain(|r| sessions.contains(&r.session_id));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    Ok(corpus)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("log.csv")
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth { out } => {
            let corpus = load_corpus(&cfg, &cli.sessions)?;
            let manifest = write_corpus(out, &corpus)?;
            println!("{}", manifest.display());
        }
        Command::TrainStage1 { out } => {
            let corpus = load_corpus(&cfg, &cli.sessions)?;
            let mut enc = cfg.encoder.clone();
            enc.input_dim = corpus[0].inline_features().dim();
            let loss = JointLossConfig { alpha_e: cfg.effective_alpha() };
            let (model, log) = train_stage1(&corpus, None, &enc, &cfg.pooling, &loss, &cfg.hyperparams(1))
                .map_err(|e| e.in_stage("stage1"))?;
            let ckpt = model.to_checkpoint().with_meta("loss.alpha_e", loss.alpha_e).with_meta("step", log.rows.len());
            save_checkpoint(&ckpt, out)?;
            write_text(&log_path(out), &log.to_csv())?;
            println!("stage1 {}", ckpt.content_hash());
        }
        Command::ExtractGmp { stage1, out } => {
            let corpus = load_corpus(&cfg, &cli.sessions)?;
            let ckpt = load_checkpoint(stage1)?;
            let (codebooks, labels) = extract_gmp(&corpus, &ckpt, &cfg.gmp).map_err(|e| e.in_stage("extract_gmp"))?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            write_codebooks(&codebooks, &out.join(gmptl::pipeline::CODEBOOK_FILE))?;
            for (id, l) in &labels {
                write_gmp(l, &gmp_path(out, id))?;
            }
            println!("{} utterances labelled at scales {:?}", labels.len(), codebooks.scales());
        }
        Command::TrainStage2 { stage1, gmp_dir, out } => {
            let corpus = load_corpus(&cfg, &cli.sessions)?;
            let s1 = load_checkpoint(stage1)?;
            let codebooks = read_codebooks(&gmp_dir.join(gmptl::pipeline::CODEBOOK_FILE))?;
            check_codebooks_match(&s1, &codebooks)?;
            let gmp = load_gmp_dir(gmp_dir, &corpus)?;
            let (model, log) =
                train_stage2(&corpus, &gmp, &s1, &cfg.stage2, &cfg.hyperparams(2)).map_err(|e| e.in_stage("stage2"))?;
            let ckpt = model
                .to_checkpoint(&s1.content_hash())
                .with_meta(CODEBOOK_KEY, &codebooks.provenance.stage1_hash)
                .with_meta("step", log.rows.len());
            save_checkpoint(&ckpt, out)?;
            write_text(&log_path(out), &log.to_csv())?;
            println!("stage2 {}", ckpt.content_hash());
        }
        Command::TrainStage3 { stage2, out } => {
            let corpus = load_corpus(&cfg, &cli.sessions)?;
            let s2 = load_checkpoint(stage2)?;
            let (model, log) = train_stage3(&corpus, &s2, &cfg.pooling, cfg.objective(), &cfg.hyperparams(3))
                .map_err(|e| e.in_stage("stage3"))?;
            let ckpt = model.to_checkpoint(&s2.content_hash()).with_meta("step", log.rows.len());
            save_checkpoint(&ckpt, out)?;
            write_text(&log_path(out), &log.to_csv())?;
            println!("stage3 {}", ckpt.content_hash());
        }
        Command::Evaluate { stage3, report } => {
            let corpus = load_corpus(&cfg, &cli.sessions)?;
            let model = stage3_from_checkpoint(&load_checkpoint(stage3)?)?;
            let preds = model.predict_all(&corpus)?;
            let truth: Vec<_> = corpus.iter().map(|r| r.emotion).collect();
            let confusion = ConfusionMatrix::from_pairs(&truth, &preds);
            let m = compute_metrics(&confusion)?;
            let sessions = gmptl::corpus::sessions(&corpus).join(",");
            let rep = EvalReport::from_folds(vec![FoldResult { fold_id: 1, test_session: sessions, confusion, war: m.war, uar: m.uar }]);
            if let Some(path) = report {
                write_text(path, &rep.to_text())?;
            }
            println!("{}", rep.summary_line());
        }
        Command::Crossval => {
            let run = run_pipeline(&cfg)?;
            println!("{}", run.report.summary_line());
            println!("artifacts: {}", run.dir.display());
        }
        Command::Ablate { grid, seeds } => {
            let grid = match grid {
                GridKind::Components => AblationGrid::components(seeds.clone()),
                GridKind::Layers => AblationGrid::layer_sweep(seeds.clone()),
            };
            let table = run_ablation(&grid, &cfg)?;
            print!("{}", table.to_tsv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<Error>().map_or(3, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
