//! Utterance-level fine-tuning with an additive-margin softmax head, or
//! plain cross-entropy for the CE-FT ablation.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{cross_entropy, margin_logits, Graph, Var};
use crate::corpus::{Emotion, UtteranceRecord};
use crate::encoder::{linear, Checkpoint, Encoder, StageTag};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, ConfusionMatrix};
use crate::params::{glorot, uniform, ParamStore};
use crate::stage1::{PoolingHead, PoolingHeadConfig, POOL_GROUP};
use crate::tensor::{argmax, Mat};
use crate::train::{batch_gradients, epoch_batches, CsvLog, Optimizers, TrainHyperparams};
use crate::util::rng_for;

/// Norm below which a vector counts as zero.
pub const MIN_NORM: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmsConfig {
    pub margin: f64,
    pub scale: f64,
    pub n_classes: usize,
}

impl Default for AmsConfig {
    fn default() -> Self {
        Self { margin: 0.2, scale: 30.0, n_classes: Emotion::COUNT }
    }
}

impl AmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::ConfigInvalid(format!("AM-Softmax margin {} not in [0, 1)", self.margin)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::ConfigInvalid(format!("AM-Softmax scale {} must be positive and finite", self.scale)));
        }
        if self.n_classes < 2 {
            return Err(Error::ConfigInvalid("AM-Softmax needs at least two classes".into()));
        }
        Ok(())
    }
}

/// Class vectors `w_j`, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct AmsHead {
    pub class_vectors: Mat,
}

impl AmsHead {
    pub fn new(n_classes: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "ams-head-init", &[]);
        let mut w = glorot(&mut rng, n_classes, embed_dim);
        for r in 0..n_classes {
            while norm(w.row(r)) < MIN_NORM {
                w.row_mut(r).copy_from_slice(uniform(&mut rng, 1, embed_dim, 1.0).data());
            }
        }
        Self { class_vectors: w }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `N x n_classes` cosine similarities between rows of `x` and class
/// vectors.
pub fn cosine_logits(x: &Mat, head: &AmsHead) -> Result<Mat> {
    let w = &head.class_vectors;
    if x.cols() != w.cols() {
        return Err(Error::ShapeMismatch(format!("embedding width {} vs class vectors {}", x.cols(), w.cols())));
    }
    let xn: Vec<f64> = (0..x.rows()).map(|i| norm(x.row(i))).collect();
    let wn: Vec<f64> = (0..w.rows()).map(|j| norm(w.row(j))).collect();
    if xn.iter().chain(&wn).any(|&n| n < MIN_NORM) {
        return Err(Error::ZeroVector);
    }
    let mut cos = x.matmul_t(w);
    for i in 0..cos.rows() {
        for j in 0..cos.cols() {
            cos[(i, j)] /= xn[i] * wn[j];
        }
    }
    Ok(cos)
}

/// Mean AM-Softmax loss over a batch of cosines.
pub fn ams_loss(cos: &Mat, labels: &[usize], cfg: &AmsConfig) -> Result<f64> {
    if !cos.is_finite() {
        return Err(Error::NonFiniteCosine);
    }
    if cos.rows() != labels.len() || labels.iter().any(|&y| y >= cos.cols()) {
        return Err(Error::ShapeMismatch("labels do not match cosine batch".into()));
    }
    Ok(cross_entropy(&margin_logits(cos, labels, cfg.margin, cfg.scale), labels).0)
}

/// Graph form: cosines between normalized embeddings and class vectors.
pub fn cosine_graph(g: &mut Graph, x: Var, w: Var) -> Var {
    let xn = g.normalize_rows(x);
    let wn = g.normalize_rows(w);
    g.matmul_t(xn, wn)
}

/// Stage-3 training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// AM-Softmax; the Hybrid-FT second stage.
    Ams(AmsConfig),
    /// Plain utterance-level cross-entropy (CE-FT).
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    HybridFt,
    CeFt,
}

impl FinetuneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneMode::HybridFt => "hybrid_ft",
            FinetuneMode::CeFt => "ce_ft",
        }
    }
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FinetuneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hybrid_ft" | "hybrid-ft" => Ok(FinetuneMode::HybridFt),
            "ce_ft" | "ce-ft" => Ok(FinetuneMode::CeFt),
            other => Err(Error::ConfigInvalid(format!("unknown finetune_mode {other:?}"))),
        }
    }
}

pub const AMS_HEAD_GROUP: &str = "ams_head";
pub const CE_HEAD_GROUP: &str = "ce_head";

/// Encoder, fresh pooling head and a classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage3Model {
    pub encoder: Encoder,
    pub pool: PoolingHead,
    /// `class_vectors` for AM-Softmax, or `w`, `b` for cross-entropy.
    pub head: ParamStore,
    pub objective: Objective,
}

impl Stage3Model {
    pub fn new(encoder: Encoder, head_cfg: PoolingHeadConfig, objective: Objective, seed: u64) -> Self {
        let pool = PoolingHead::new(head_cfg.clone(), encoder.config.model_dim, rng_seed(seed));
        let mut head = ParamStore::new();
        match objective {
            Objective::Ams(cfg) => {
                head.push("class_vectors", AmsHead::new(cfg.n_classes, head_cfg.embed_dim, seed).class_vectors);
            }
            Objective::CrossEntropy => {
                let mut rng = rng_for(seed, "ce-head-init", &[]);
                head.push("w", glorot(&mut rng, head_cfg.embed_dim, Emotion::COUNT));
                head.push("b", Mat::zeros(1, Emotion::COUNT));
            }
        }
        Self { encoder, pool, head, objective }
    }

    pub fn stores(&self) -> [&ParamStore; 3] {
        [&self.encoder.params, &self.pool.params, &self.head]
    }

    /// Pooled embedding and per-class scores: cosines for AM-Softmax,
    /// logits for cross-entropy.
    pub fn forward(&self, g: &mut Graph, features: &Mat) -> Result<(Var, Var)> {
        self.forward_train(g, features, None)
    }

    /// Same as [`forward`](Self::forward), with encoder dropout drawn from
    /// `dropout` when given.
    pub fn forward_train(&self, g: &mut Graph, features: &Mat, dropout: Option<&mut ChaCha8Rng>) -> Result<(Var, Var)> {
        let enc = self.encoder.bind(g, 0);
        let pool = self.pool.bind(g, 1);
        let head = self.head.bind(g, 2);
        let n = self.encoder.config.n_layers;
        let layers = self.encoder.forward_graph(g, &enc, features, None, n, dropout)?;
        let e = self.pool.embed(g, &pool, layers[n - 1]);
        let scores = match self.objective {
            Objective::Ams(_) => cosine_graph(g, e, head[0]),
            Objective::CrossEntropy => linear(g, e, head[0], head[1]),
        };
        Ok((e, scores))
    }

    /// Per-class scores for one utterance.
    pub fn scores(&self, features: &Mat) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (_, s) = self.forward(&mut g, features)?;
        Ok(g.value(s).row(0).to_vec())
    }

    /// Argmax of unmargined cosines (or logits); no margin at test time.
    pub fn predict(&self, features: &Mat) -> Result<Emotion> {
        Ok(Emotion::ALL[argmax(&self.scores(features)?)])
    }

    pub fn predict_all(&self, records: &[UtteranceRecord]) -> Result<Vec<Emotion>> {
        records.iter().map(|r| self.predict(&r.inline_features().frames)).collect()
    }

    pub fn to_checkpoint(&self, upstream_hash: &str) -> Checkpoint {
        let ckpt = Checkpoint::new(&self.encoder, StageTag::Stage3)
            .with_group(POOL_GROUP, &self.pool.params)
            .with_meta(crate::stage2::UPSTREAM_KEY, upstream_hash);
        match self.objective {
            Objective::Ams(cfg) => ckpt
                .with_group(AMS_HEAD_GROUP, &self.head)
                .with_meta("finetune_mode", FinetuneMode::HybridFt)
                .with_meta("ams.margin", cfg.margin)
                .with_meta("ams.scale", cfg.scale),
            Objective::CrossEntropy => {
                ckpt.with_group(CE_HEAD_GROUP, &self.head).with_meta("finetune_mode", FinetuneMode::CeFt)
            }
        }
    }
}

fn rng_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x5157_4147_4533)
}

pub fn stage3_from_checkpoint(ckpt: &Checkpoint) -> Result<Stage3Model> {
    if ckpt.stage != StageTag::Stage3 {
        return Err(Error::IncompatibleConfig(format!("expected a stage3 checkpoint, got {}", ckpt.stage.as_str())));
    }
    let encoder = ckpt.encoder()?;
    let missing = |g: &str| Error::CorruptCheckpoint(format!("missing {g} group"));
    let pool = ckpt.group(POOL_GROUP).ok_or_else(|| missing(POOL_GROUP))?;
    let head_cfg = PoolingHeadConfig {
        bilstm_hidden: pool.get(1).rows(),
        proj_hidden: pool.get(6).cols(),
        embed_dim: pool.get(8).cols(),
    };
    let meta_f64 = |k: &str| -> Result<f64> {
        ckpt.metadata
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing or bad {k}")))
    };
    let (objective, head) = if let Some(h) = ckpt.group(AMS_HEAD_GROUP) {
        let cfg = AmsConfig { margin: meta_f64("ams.margin")?, scale: meta_f64("ams.scale")?, n_classes: h.get(0).rows() };
        (Objective::Ams(cfg), h)
    } else {
        (Objective::CrossEntropy, ckpt.group(CE_HEAD_GROUP).ok_or_else(|| missing(CE_HEAD_GROUP))?)
    };
    let mut model = Stage3Model::new(encoder, head_cfg, objective, 0);
    crate::encoder::load_matching(&mut model.pool.params, pool)?;
    crate::encoder::load_matching(&mut model.head, head)?;
    Ok(model)
}

pub fn stage3_log_header(objective: &Objective) -> [&'static str; 4] {
    match objective {
        Objective::Ams(_) => ["step", "ams_loss", "train_uar", "train_war"],
        Objective::CrossEntropy => ["step", "ce_loss", "train_uar", "train_war"],
    }
}

/// Fine-tunes the encoder from `init` with a fresh pooling head.
///
/// `init` is normally a stage-2 checkpoint; a stage-1 checkpoint is
/// accepted for cross-entropy fine-tuning only.
pub fn train_stage3(
    corpus: &[UtteranceRecord],
    init: &Checkpoint,
    head_cfg: &PoolingHeadConfig,
    objective: Objective,
    hp: &TrainHyperparams,
) -> Result<(Stage3Model, CsvLog)> {
    if let Objective::Ams(cfg) = &objective {
        cfg.validate()?;
        if cfg.n_classes != Emotion::COUNT {
            return Err(Error::ConfigInvalid(format!("n_classes must be {}", Emotion::COUNT)));
        }
    }
    match (init.stage, objective) {
        (StageTag::Stage2, _) => {}
        (StageTag::Stage1, Objective::CrossEntropy) => {
            log::warn!("stage 3 initialized from a stage1 checkpoint")
        }
        (tag, _) => {
            return Err(Error::IncompatibleConfig(format!("stage 3 cannot start from a {} checkpoint", tag.as_str())))
        }
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let encoder = init.encoder()?;
    let mut model = Stage3Model::new(encoder, head_cfg.clone(), objective, hp.seed);
    let mut opt = Optimizers::new(hp.lr, &model.stores(), &[!hp.freeze_encoder, true, true]);
    let batch = hp.effective_batch(corpus.len());
    let mut log = CsvLog::new(&stage3_log_header(&objective));
    let mut step = 0;
    for epoch in 0..hp.epochs {
        for items in epoch_batches(corpus.len(), batch, hp.seed, "stage3", epoch) {
            let stores = model.stores();
            let (mut grads, stats) = batch_gradients(&items, &stores, |i| {
                let rec = &corpus[i];
                let y = rec.emotion.index();
                let mut g = Graph::new();
                let mut rng = rng_for(hp.seed, "stage3-dropout", &[epoch as u64, i as u64]);
                let (_, scores) = model.forward_train(&mut g, &rec.inline_features().frames, Some(&mut rng))?;
                if !g.value(scores).is_finite() {
                    return Err(match objective {
                        Objective::Ams(_) => Error::NonFiniteCosine,
                        Objective::CrossEntropy => Error::NonFiniteLogits,
                    });
                }
                let loss = match objective {
                    Objective::Ams(cfg) => g.am_softmax(scores, &[y], cfg.margin, cfg.scale),
                    Objective::CrossEntropy => g.cross_entropy(scores, &[y]),
                };
                let grads = g.backward(loss);
                Ok(Some((grads, (g.scalar(loss), rec.emotion, Emotion::ALL[g.value(scores).argmax_row(0)]))))
            })?;
            step += 1;
            let n = stats.len() as f64;
            let loss = stats.iter().map(|s| s.0).sum::<f64>() / n;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::DivergedLoss { stage: "stage3", step });
            }
            let mut cm = ConfusionMatrix::new();
            for s in &stats {
                cm.add(s.1, s.2);
            }
            let m = compute_metrics(&cm)?;
            log.push(vec![step as f64, loss, m.uar, m.war]);
            grads.scale(1.0 / n);
            let Stage3Model { encoder, pool, head, .. } = &mut model;
            opt.step(&mut [&mut encoder.params, &mut pool.params, head], &grads);
        }
    }
    Ok((model, log))
}
