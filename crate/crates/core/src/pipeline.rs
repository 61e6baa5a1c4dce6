//! End-to-end orchestration: configuration, per-fold artifact trees,
//! provenance checks and ablation grids.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::corpus::{generate_synthetic_corpus, load_manifest_filtered, materialize, SyntheticCorpusSpec, UtteranceRecord};
use crate::encoder::{load_checkpoint, save_checkpoint, Checkpoint, EncoderConfig, LayerTap};
use crate::error::{Error, Result};
use crate::eval::{run_crossval, EvalReport, FoldOutcome, FoldRunner, FoldSplit};
use crate::gmp::{extract_gmp, gmp_path, ids_hash, read_codebooks, write_codebooks, write_gmp, CodebookSet, GmpConfig, GmpLabels};
use crate::stage1::{train_stage1, JointLossConfig, PoolingHeadConfig};
use crate::stage2::{train_stage2, Stage2Config, CODEBOOK_KEY, UPSTREAM_KEY};
use crate::stage3::{train_stage3, AmsConfig, FinetuneMode, Objective};
use crate::train::{CsvLog, TrainHyperparams};
use crate::util::short_hash;

/// Environment variable that overrides `output.artifact_root`.
pub const ARTIFACT_ROOT_ENV: &str = "GMPTL_ARTIFACT_ROOT";

#[derive(Clone, Debug, PartialEq)]
pub enum CorpusSource {
    Synthetic(SyntheticCorpusSpec),
    /// Tab-separated manifest of precomputed frame features.
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub corpus: CorpusSource,
    pub encoder: EncoderConfig,
    pub pooling: PoolingHeadConfig,
    pub loss: JointLossConfig,
    pub gmp: GmpConfig,
    pub stage2: Stage2Config,
    pub ams: AmsConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
    /// Epochs for stages 1, 2 and 3.
    pub epochs: [usize; 3],
    /// `false` trains stage 1 without the gender task (MPs instead of GMPs).
    pub use_gender: bool,
    pub finetune_mode: FinetuneMode,
    pub artifact_root: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSource::Synthetic(SyntheticCorpusSpec::default()),
            encoder: EncoderConfig::default(),
            pooling: PoolingHeadConfig::default(),
            loss: JointLossConfig::default(),
            gmp: GmpConfig::default(),
            stage2: Stage2Config::default(),
            ams: AmsConfig::default(),
            lr: 1e-4,
            batch_size: 64,
            seed: 0,
            freeze_encoder: false,
            epochs: [30, 30, 30],
            use_gender: true,
            finetune_mode: FinetuneMode::HybridFt,
            artifact_root: PathBuf::from("artifacts"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::ConfigInvalid(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::ConfigInvalid(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

impl PipelineConfig {
    /// Small model and short utterances: a full 5-fold run takes about a
    /// minute and a half on one CPU core.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        if let CorpusSource::Synthetic(s) = &mut cfg.corpus {
            s.frame_range = (20, 40);
        }
        cfg.encoder = EncoderConfig { n_layers: 6, model_dim: 32, n_heads: 4, ff_dim: 64, ..Default::default() };
        cfg.pooling = PoolingHeadConfig { bilstm_hidden: 32, proj_hidden: 32, embed_dim: 32 };
        cfg.stage2.head_hidden = 32;
        cfg.lr = 1e-3;
        cfg.batch_size = 32;
        cfg.epochs = [6, 4, 6];
        cfg
    }

    /// Parses `key=value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::ConfigInvalid(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text)
    }

    fn synthetic_mut(&mut self) -> &mut SyntheticCorpusSpec {
        if !matches!(self.corpus, CorpusSource::Synthetic(_)) {
            self.corpus = CorpusSource::Synthetic(SyntheticCorpusSpec::default());
        }
        match &mut self.corpus {
            CorpusSource::Synthetic(s) => s,
            CorpusSource::Manifest(_) => unreachable!(),
        }
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "corpus.manifest" => self.corpus = CorpusSource::Manifest(PathBuf::from(v)),
            "corpus.synthetic.n_utterances" => self.synthetic_mut().n_utterances = parse(key, v)?,
            "corpus.synthetic.n_speakers" => self.synthetic_mut().n_speakers = parse(key, v)?,
            "corpus.synthetic.n_sessions" => self.synthetic_mut().n_sessions = parse(key, v)?,
            "corpus.synthetic.feature_dim" => self.synthetic_mut().feature_dim = parse(key, v)?,
            "corpus.synthetic.frame_min" => self.synthetic_mut().frame_range.0 = parse(key, v)?,
            "corpus.synthetic.frame_max" => self.synthetic_mut().frame_range.1 = parse(key, v)?,
            "corpus.synthetic.separability" => self.synthetic_mut().separability = parse(key, v)?,
            "corpus.synthetic.seed" => self.synthetic_mut().seed = parse(key, v)?,
            "encoder.n_layers" => self.encoder.n_layers = parse(key, v)?,
            "encoder.model_dim" => self.encoder.model_dim = parse(key, v)?,
            "encoder.n_heads" => self.encoder.n_heads = parse(key, v)?,
            "encoder.ff_dim" => self.encoder.ff_dim = parse(key, v)?,
            "encoder.dropout" => self.encoder.dropout = parse(key, v)?,
            "pooling.bilstm_hidden" => self.pooling.bilstm_hidden = parse(key, v)?,
            "pooling.proj_hidden" => self.pooling.proj_hidden = parse(key, v)?,
            "pooling.embed_dim" => self.pooling.embed_dim = parse(key, v)?,
            "loss.alpha_e" => self.loss.alpha_e = parse(key, v)?,
            "gmp.scales" => self.gmp.scales = parse_list(key, v)?,
            "gmp.tap" => self.gmp.tap = LayerTap(parse(key, v)?),
            "gmp.max_iters" => self.gmp.max_iters = parse(key, v)?,
            "gmp.tol" => self.gmp.tol = parse(key, v)?,
            "stage2.head_hidden" => self.stage2.head_hidden = parse(key, v)?,
            "stage2.mask_prob" => self.stage2.mask_prob = parse(key, v)?,
            "stage2.span_length" => self.stage2.span_length = parse(key, v)?,
            "ams.margin" => self.ams.margin = parse(key, v)?,
            "ams.scale" => self.ams.scale = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.seed" => *self = self.with_seed(parse(key, v)?),
            "train.freeze_encoder" => self.freeze_encoder = parse_bool(key, v)?,
            "train.stage1_epochs" => self.epochs[0] = parse(key, v)?,
            "train.stage2_epochs" => self.epochs[1] = parse(key, v)?,
            "train.stage3_epochs" => self.epochs[2] = parse(key, v)?,
            "mode.use_gender" => self.use_gender = parse_bool(key, v)?,
            "mode.finetune_mode" => self.finetune_mode = v.parse()?,
            "output.artifact_root" => self.artifact_root = PathBuf::from(v),
            other => return Err(Error::ConfigInvalid(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`Self::from_kv_str`]
    /// reads back.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        match &self.corpus {
            CorpusSource::Manifest(p) => put("corpus.manifest", p.display().to_string()),
            CorpusSource::Synthetic(s) => {
                put("corpus.synthetic.n_utterances", s.n_utterances.to_string());
                put("corpus.synthetic.n_speakers", s.n_speakers.to_string());
                put("corpus.synthetic.n_sessions", s.n_sessions.to_string());
                put("corpus.synthetic.feature_dim", s.feature_dim.to_string());
                put("corpus.synthetic.frame_min", s.frame_range.0.to_string());
                put("corpus.synthetic.frame_max", s.frame_range.1.to_string());
                put("corpus.synthetic.separability", s.separability.to_string());
                put("corpus.synthetic.seed", s.seed.to_string());
            }
        }
        put("encoder.n_layers", self.encoder.n_layers.to_string());
        put("encoder.model_dim", self.encoder.model_dim.to_string());
        put("encoder.n_heads", self.encoder.n_heads.to_string());
        put("encoder.ff_dim", self.encoder.ff_dim.to_string());
        put("encoder.dropout", self.encoder.dropout.to_string());
        put("pooling.bilstm_hidden", self.pooling.bilstm_hidden.to_string());
        put("pooling.proj_hidden", self.pooling.proj_hidden.to_string());
        put("pooling.embed_dim", self.pooling.embed_dim.to_string());
        put("loss.alpha_e", self.loss.alpha_e.to_string());
        let scales: Vec<String> = self.gmp.scales.iter().map(usize::to_string).collect();
        put("gmp.scales", scales.join(","));
        put("gmp.tap", self.gmp.tap.0.to_string());
        put("gmp.max_iters", self.gmp.max_iters.to_string());
        put("gmp.tol", self.gmp.tol.to_string());
        put("stage2.head_hidden", self.stage2.head_hidden.to_string());
        put("stage2.mask_prob", self.stage2.mask_prob.to_string());
        put("stage2.span_length", self.stage2.span_length.to_string());
        put("ams.margin", self.ams.margin.to_string());
        put("ams.scale", self.ams.scale.to_string());
        put("train.lr", self.lr.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.seed", self.seed.to_string());
        put("train.freeze_encoder", self.freeze_encoder.to_string());
        put("train.stage1_epochs", self.epochs[0].to_string());
        put("train.stage2_epochs", self.epochs[1].to_string());
        put("train.stage3_epochs", self.epochs[2].to_string());
        put("mode.use_gender", self.use_gender.to_string());
        put("mode.finetune_mode", self.finetune_mode.to_string());
        put("output.artifact_root", self.artifact_root.display().to_string());
        out
    }

    /// Applies [`ARTIFACT_ROOT_ENV`] if it is set.
    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(ARTIFACT_ROOT_ENV) {
            self.artifact_root = PathBuf::from(root);
        }
    }

    /// Same configuration with every training seed set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.encoder.seed = seed;
        c.gmp.seed = seed;
        c
    }

    /// Emotion weight actually used in stage 1.
    pub fn effective_alpha(&self) -> f64 {
        if self.use_gender {
            self.loss.alpha_e
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let CorpusSource::Synthetic(s) = &self.corpus {
            s.validate()?;
        }
        let mut enc = self.encoder.clone();
        enc.input_dim = enc.input_dim.max(1);
        enc.validate()?;
        self.loss.validate()?;
        self.gmp.validate()?;
        self.gmp.tap.resolve(self.encoder.n_layers)?;
        self.ams.validate()?;
        if self.pooling.bilstm_hidden == 0 || self.pooling.proj_hidden == 0 || self.pooling.embed_dim == 0 {
            return Err(Error::ConfigInvalid("pooling dimensions must be positive".into()));
        }
        if self.stage2.head_hidden == 0 {
            return Err(Error::ConfigInvalid("stage2.head_hidden must be positive".into()));
        }
        if !(self.stage2.mask_prob > 0.0 && self.stage2.mask_prob < 1.0) {
            return Err(Error::InvalidProbability(self.stage2.mask_prob));
        }
        if self.stage2.span_length == 0 {
            return Err(Error::ConfigInvalid("stage2.span_length must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::ConfigInvalid("train.lr and train.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn hyperparams(&self, stage: usize) -> TrainHyperparams {
        TrainHyperparams {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs[stage - 1],
            seed: self.seed,
            freeze_encoder: self.freeze_encoder && stage == 3,
        }
    }

    pub fn objective(&self) -> Objective {
        match self.finetune_mode {
            FinetuneMode::HybridFt => Objective::Ams(self.ams),
            FinetuneMode::CeFt => Objective::CrossEntropy,
        }
    }

    /// Loads (or generates) the corpus with inline features.
    pub fn load_corpus(&self) -> Result<Vec<UtteranceRecord>> {
        match &self.corpus {
            CorpusSource::Synthetic(spec) => generate_synthetic_corpus(spec),
            CorpusSource::Manifest(path) => materialize(&load_manifest_filtered(path)?.0),
        }
    }
}

// ---------------------------------------------------------------------------
// Provenance

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const STAGE3_CKPT: &str = "stage3.ckpt";
pub const GMP_DIR: &str = "gmp";
pub const CODEBOOK_FILE: &str = "codebooks.cbk";

/// Checks that codebooks were built from `stage1`.
pub fn check_codebooks_match(stage1: &Checkpoint, codebooks: &CodebookSet) -> Result<()> {
    let h = stage1.content_hash();
    if codebooks.provenance.stage1_hash != h {
        return Err(Error::ProvenanceMismatch(format!(
            "codebooks were built from stage1 {} but the given stage1 checkpoint is {h}",
            codebooks.provenance.stage1_hash
        )));
    }
    Ok(())
}

/// Checks that `child` names `parent` as its upstream checkpoint.
pub fn check_upstream(child: &Checkpoint, parent: &Checkpoint) -> Result<()> {
    let expected = parent.content_hash();
    match child.metadata.get(UPSTREAM_KEY) {
        Some(h) if *h == expected => Ok(()),
        found => Err(Error::ProvenanceMismatch(format!(
            "{} checkpoint names upstream {:?}, expected {} ({})",
            child.stage.as_str(),
            found,
            expected,
            parent.stage.as_str()
        ))),
    }
}

/// Re-reads a fold directory and checks the stage1 -> codebooks -> stage2
/// -> stage3 chain.
pub fn verify_fold_chain(fold_dir: &Path) -> Result<()> {
    let s1 = load_checkpoint(&fold_dir.join(STAGE1_CKPT))?;
    let cb = read_codebooks(&fold_dir.join(GMP_DIR).join(CODEBOOK_FILE))?;
    let s2 = load_checkpoint(&fold_dir.join(STAGE2_CKPT))?;
    let s3 = load_checkpoint(&fold_dir.join(STAGE3_CKPT))?;
    check_codebooks_match(&s1, &cb)?;
    check_upstream(&s2, &s1)?;
    if s2.metadata.get(CODEBOOK_KEY) != Some(&cb.provenance.stage1_hash) {
        return Err(Error::ProvenanceMismatch("stage2 was trained on different codebooks".into()));
    }
    check_upstream(&s3, &s2)
}

// ---------------------------------------------------------------------------
// Fold runner

/// Upstream results shared between runs whose configurations agree up to
/// that stage (e.g. CE-FT and Hybrid-FT cells of an ablation).
#[derive(Default)]
pub struct UpstreamCache {
    stage1: HashMap<String, (Checkpoint, CsvLog)>,
    gmp: HashMap<String, (CodebookSet, BTreeMap<String, GmpLabels>)>,
    stage2: HashMap<String, (Checkpoint, CsvLog)>,
}

impl UpstreamCache {
    pub fn new() -> Self {
        Self::default()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Runs all three stages for one fold and writes its artifacts.
struct PipelineRunner<'a> {
    cfg: &'a PipelineConfig,
    dir: PathBuf,
    cache: &'a mut UpstreamCache,
}

impl PipelineRunner<'_> {
    fn stage1(&mut self, split: &FoldSplit, key: &str) -> Result<(Checkpoint, CsvLog)> {
        if let Some(hit) = self.cache.stage1.get(key) {
            return Ok(hit.clone());
        }
        let cfg = self.cfg;
        let loss = JointLossConfig { alpha_e: cfg.effective_alpha() };
        let (model, log) = train_stage1(&split.train, None, &cfg.encoder, &cfg.pooling, &loss, &cfg.hyperparams(1))?;
        let ckpt = model
            .to_checkpoint()
            .with_meta("loss.alpha_e", loss.alpha_e)
            .with_meta("step", log.rows.len())
            .with_meta("train_ids_hash", ids_hash(split.train.iter().map(|r| r.id.as_str())));
        self.cache.stage1.insert(key.to_string(), (ckpt.clone(), log.clone()));
        Ok((ckpt, log))
    }

    fn gmp(&mut self, split: &FoldSplit, stage1: &Checkpoint, key: &str) -> Result<(CodebookSet, BTreeMap<String, GmpLabels>)> {
        if let Some(hit) = self.cache.gmp.get(key) {
            return Ok(hit.clone());
        }
        let out = extract_gmp(&split.train, stage1, &self.cfg.gmp)?;
        self.cache.gmp.insert(key.to_string(), out.clone());
        Ok(out)
    }

    fn stage2(
        &mut self,
        split: &FoldSplit,
        stage1: &Checkpoint,
        gmp: &(CodebookSet, BTreeMap<String, GmpLabels>),
        key: &str,
    ) -> Result<(Checkpoint, CsvLog)> {
        if let Some(hit) = self.cache.stage2.get(key) {
            return Ok(hit.clone());
        }
        let cfg = self.cfg;
        let (model, log) = train_stage2(&split.train, &gmp.1, stage1, &cfg.stage2, &cfg.hyperparams(2))?;
        let ckpt = model
            .to_checkpoint(&stage1.content_hash())
            .with_meta(CODEBOOK_KEY, &gmp.0.provenance.stage1_hash)
            .with_meta("gmp.tap", gmp.0.provenance.tap)
            .with_meta("step", log.rows.len());
        self.cache.stage2.insert(key.to_string(), (ckpt.clone(), log.clone()));
        Ok((ckpt, log))
    }
}

impl FoldRunner for PipelineRunner<'_> {
    fn run_fold(&mut self, split: &FoldSplit) -> Result<FoldOutcome> {
        let cfg = self.cfg;
        let fold_dir = self.dir.join(format!("fold{}", split.fold_id));
        let gmp_dir = fold_dir.join(GMP_DIR);
        create_dir(&gmp_dir)?;
        let train_hash = ids_hash(split.train.iter().map(|r| r.id.as_str()));
        let key1 = short_hash(
            format!(
                "{train_hash}|{:?}|{:?}|{}|{}|{}|{}|{}",
                cfg.encoder,
                cfg.pooling,
                cfg.effective_alpha(),
                cfg.lr,
                cfg.batch_size,
                cfg.epochs[0],
                cfg.seed
            )
            .as_bytes(),
        );
        let key_gmp = short_hash(format!("{key1}|{:?}", cfg.gmp).as_bytes());
        let key2 = short_hash(format!("{key_gmp}|{:?}|{}|{}", cfg.stage2, cfg.epochs[1], cfg.freeze_encoder).as_bytes());

        let t = Instant::now();
        let (s1, log1) = self.stage1(split, &key1).map_err(|e| e.in_stage("stage1"))?;
        save_checkpoint(&s1, &fold_dir.join(STAGE1_CKPT))?;
        write_text(&fold_dir.join("stage1_log.csv"), &log1.to_csv())?;
        log::info!("fold {}: stage1 done in {:.1}s", split.fold_id, t.elapsed().as_secs_f64());

        let t = Instant::now();
        let gmp = self.gmp(split, &s1, &key_gmp).map_err(|e| e.in_stage("extract_gmp"))?;
        write_codebooks(&gmp.0, &gmp_dir.join(CODEBOOK_FILE))?;
        for (id, labels) in &gmp.1 {
            write_gmp(labels, &gmp_path(&gmp_dir, id))?;
        }
        log::info!("fold {}: GMP extraction done in {:.1}s", split.fold_id, t.elapsed().as_secs_f64());

        let t = Instant::now();
        let (s2, log2) = self.stage2(split, &s1, &gmp, &key2).map_err(|e| e.in_stage("stage2"))?;
        save_checkpoint(&s2, &fold_dir.join(STAGE2_CKPT))?;
        write_text(&fold_dir.join("stage2_log.csv"), &log2.to_csv())?;
        log::info!("fold {}: stage2 done in {:.1}s", split.fold_id, t.elapsed().as_secs_f64());

        let t = Instant::now();
        let (model, log3) = train_stage3(&split.train, &s2, &cfg.pooling, cfg.objective(), &cfg.hyperparams(3))
            .map_err(|e| e.in_stage("stage3"))?;
        let s3 = model.to_checkpoint(&s2.content_hash()).with_meta("step", log3.rows.len());
        save_checkpoint(&s3, &fold_dir.join(STAGE3_CKPT))?;
        write_text(&fold_dir.join("stage3_log.csv"), &log3.to_csv())?;
        log::info!("fold {}: stage3 done in {:.1}s", split.fold_id, t.elapsed().as_secs_f64());

        verify_fold_chain(&fold_dir)?;
        let predictions = model.predict_all(&split.test)?;
        let mut tsv = String::from("id\ttrue\tpredicted\n");
        for (r, p) in split.test.iter().zip(&predictions) {
            let _ = writeln!(tsv, "{}\t{}\t{}", r.id, r.emotion, p);
        }
        write_text(&fold_dir.join("predictions.tsv"), &tsv)?;
        Ok(FoldOutcome { predictions, codebook: Some(gmp.0.provenance.clone()) })
    }
}

/// Result of one pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub report: EvalReport,
    pub dir: PathBuf,
}

/// Runs the configured pipeline under 5-fold cross-validation, writing
/// per-fold artifacts and `report.txt` under `cfg.artifact_root`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    run_pipeline_cached(cfg, &mut UpstreamCache::new())
}

pub fn run_pipeline_cached(cfg: &PipelineConfig, cache: &mut UpstreamCache) -> Result<PipelineRun> {
    cfg.validate()?;
    let corpus = cfg.load_corpus()?;
    run_pipeline_on(cfg, &corpus, cache)
}

/// Same as [`run_pipeline_cached`] on an already loaded corpus.
pub fn run_pipeline_on(cfg: &PipelineConfig, corpus: &[UtteranceRecord], cache: &mut UpstreamCache) -> Result<PipelineRun> {
    let first = corpus.first().ok_or(Error::EmptyCorpus)?;
    let mut cfg = cfg.clone();
    cfg.encoder.input_dim = first.inline_features().dim();
    cfg.validate()?;
    let dir = cfg.artifact_root.clone();
    create_dir(&dir)?;
    write_text(&dir.join("config.txt"), &cfg.to_kv_string())?;
    let mut runner = PipelineRunner { cfg: &cfg, dir: dir.clone(), cache };
    let report = run_crossval(corpus, &mut runner)?;
    report.write(&dir.join("report.txt"))?;
    log::info!("{}", report.summary_line());
    Ok(PipelineRun { report, dir })
}

// ---------------------------------------------------------------------------
// Ablations

#[derive(Clone, Debug, PartialEq)]
pub enum AblationAxis {
    UseGender(Vec<bool>),
    FinetuneMode(Vec<FinetuneMode>),
    Tap(Vec<i32>),
}

impl AblationAxis {
    fn len(&self) -> usize {
        match self {
            AblationAxis::UseGender(v) => v.len(),
            AblationAxis::FinetuneMode(v) => v.len(),
            AblationAxis::Tap(v) => v.len(),
        }
    }

    /// Applies value `i` and returns its `(column, value)` label.
    fn apply(&self, i: usize, cfg: &mut PipelineConfig) -> (String, String) {
        match self {
            AblationAxis::UseGender(v) => {
                cfg.use_gender = v[i];
                ("labels".into(), if v[i] { "GMPs" } else { "MPs" }.into())
            }
            AblationAxis::FinetuneMode(v) => {
                cfg.finetune_mode = v[i];
                let name = match v[i] {
                    FinetuneMode::HybridFt => "Hybrid-FT",
                    FinetuneMode::CeFt => "CE-FT",
                };
                ("finetune".into(), name.into())
            }
            AblationAxis::Tap(v) => {
                cfg.gmp.tap = LayerTap(v[i]);
                ("layer_id".into(), v[i].to_string())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub axes: Vec<AblationAxis>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    /// MPs/GMPs x CE-FT/Hybrid-FT.
    pub fn components(seeds: Vec<u64>) -> Self {
        Self {
            axes: vec![
                AblationAxis::UseGender(vec![false, true]),
                AblationAxis::FinetuneMode(vec![FinetuneMode::CeFt, FinetuneMode::HybridFt]),
            ],
            seeds,
        }
    }

    /// Tapped layer -1 through -6.
    pub fn layer_sweep(seeds: Vec<u64>) -> Self {
        Self { axes: vec![AblationAxis::Tap((1..=6).map(|i| -i).collect())], seeds }
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.iter().any(|a| a.len() == 0) || self.seeds.is_empty() {
            return Err(Error::ConfigInvalid("ablation grid is empty".into()));
        }
        Ok(())
    }

    /// Cells in row-major order (last axis varies fastest).
    pub fn cells(&self, base: &PipelineConfig) -> Vec<(Vec<(String, String)>, PipelineConfig)> {
        let mut cells = vec![(Vec::new(), base.clone())];
        for axis in &self.axes {
            let mut next = Vec::with_capacity(cells.len() * axis.len());
            for (labels, cfg) in &cells {
                for i in 0..axis.len() {
                    let mut c = cfg.clone();
                    let mut l = labels.clone();
                    l.push(axis.apply(i, &mut c));
                    next.push((l, c));
                }
            }
            cells = next;
        }
        cells
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub settings: Vec<(String, String)>,
    pub seeds: Vec<u64>,
    pub uar: Vec<f64>,
    pub war: Vec<f64>,
}

impl AblationRow {
    pub fn mean_uar(&self) -> f64 {
        self.uar.iter().sum::<f64>() / self.uar.len().max(1) as f64
    }

    pub fn mean_war(&self) -> f64 {
        self.war.iter().sum::<f64>() / self.war.len().max(1) as f64
    }

    pub fn setting(&self, column: &str) -> Option<&str> {
        self.settings.iter().find(|(c, _)| c == column).map(|(_, v)| v.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Tab-separated table: one column per axis, then mean UAR and WAR.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        if let Some(first) = self.rows.first() {
            let cols: Vec<&str> = first.settings.iter().map(|(c, _)| c.as_str()).collect();
            let _ = writeln!(out, "{}\tseeds\tUAR\tWAR", cols.join("\t"));
        }
        for r in &self.rows {
            let vals: Vec<&str> = r.settings.iter().map(|(_, v)| v.as_str()).collect();
            let _ = writeln!(out, "{}\t{}\t{:.4}\t{:.4}", vals.join("\t"), r.seeds.len(), r.mean_uar(), r.mean_war());
        }
        out
    }
}

fn cell_dir_name(settings: &[(String, String)]) -> String {
    settings.iter().map(|(c, v)| format!("{c}={v}")).collect::<Vec<_>>().join(",")
}

/// Runs every cell of `grid` for every seed. Each run lives under
/// `<artifact_root>/ablation/<cell>/seed<k>`; the table is rewritten after
/// each completed cell.
pub fn run_ablation(grid: &AblationGrid, base: &PipelineConfig) -> Result<AblationTable> {
    grid.validate()?;
    base.validate()?;
    let corpus = base.load_corpus()?;
    let root = base.artifact_root.join("ablation");
    create_dir(&root)?;
    let table_path = root.join("table.tsv");
    let mut table = AblationTable::default();
    let mut caches: BTreeMap<u64, UpstreamCache> = BTreeMap::new();
    for (settings, cell_cfg) in grid.cells(base) {
        let mut row = AblationRow { settings: settings.clone(), seeds: Vec::new(), uar: Vec::new(), war: Vec::new() };
        for &seed in &grid.seeds {
            let mut cfg = cell_cfg.with_seed(seed);
            cfg.artifact_root = root.join(cell_dir_name(&settings)).join(format!("seed{seed}"));
            let run = run_pipeline_on(&cfg, &corpus, caches.entry(seed).or_default())?;
            row.seeds.push(seed);
            row.uar.push(run.report.mean_uar);
            row.war.push(run.report.mean_war);
        }
        log::info!("ablation cell {}: UAR={:.4} WAR={:.4}", cell_dir_name(&settings), row.mean_uar(), row.mean_war());
        table.rows.push(row);
        write_text(&table_path, &table.to_tsv())?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_desk_config_matches_preset() {
        let parsed = PipelineConfig::from_kv_str(include_str!("../../../configs/desk.cfg")).unwrap();
        assert_eq!(parsed, PipelineConfig::desk());
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.gmp.scales = vec![4, 16];
        cfg.finetune_mode = FinetuneMode::CeFt;
        cfg.use_gender = false;
        cfg.epochs = [1, 2, 3];
        let parsed = PipelineConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn parse_errors_are_config_errors() {
        for text in ["nonsense", "gmp.scales=a,b", "mode.finetune_mode=x", "unknown.key=1", "mode.use_gender=maybe"] {
            let err = PipelineConfig::from_kv_str(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = PipelineConfig::from_kv_str("# comment\n\ngmp.tap=-2  # trailing\n").unwrap();
        assert_eq!(cfg.gmp.tap, LayerTap(-2));
    }

    #[test]
    fn mps_mode_uses_emotion_only() {
        let cfg = PipelineConfig { use_gender: false, ..Default::default() };
        assert_eq!(cfg.effective_alpha(), 1.0);
        assert_eq!(PipelineConfig::default().effective_alpha(), 0.9);
    }

    #[test]
    fn grid_shapes() {
        let base = PipelineConfig::default();
        let cells = AblationGrid::components(vec![0]).cells(&base);
        let labels: Vec<String> = cells.iter().map(|(s, _)| cell_dir_name(s)).collect();
        assert_eq!(
            labels,
            [
                "labels=MPs,finetune=CE-FT",
                "labels=MPs,finetune=Hybrid-FT",
                "labels=GMPs,finetune=CE-FT",
                "labels=GMPs,finetune=Hybrid-FT"
            ]
        );
        assert!(!cells[0].1.use_gender && cells[3].1.use_gender);
        let taps: Vec<i32> = AblationGrid::layer_sweep(vec![0]).cells(&base).iter().map(|(_, c)| c.gmp.tap.0).collect();
        assert_eq!(taps, [-1, -2, -3, -4, -5, -6]);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let base = PipelineConfig::default();
        for grid in [
            AblationGrid { axes: vec![], seeds: vec![0] },
            AblationGrid { axes: vec![AblationAxis::Tap(vec![])], seeds: vec![0] },
            AblationGrid { axes: vec![AblationAxis::Tap(vec![-1])], seeds: vec![] },
        ] {
            assert!(matches!(run_ablation(&grid, &base), Err(Error::ConfigInvalid(_))));
        }
    }
}
