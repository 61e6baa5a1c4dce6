//! Multi-task training: encoder -> BiLSTM -> mean pooling -> projection,
//! with emotion and gender heads on the shared embedding.
//!
//! The objective is `alpha_e * CE(emotion) + (1 - alpha_e) * CE(gender)`.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{cross_entropy, Graph, Var};
use crate::corpus::{Emotion, Gender, UtteranceRecord};
use crate::encoder::{linear, Checkpoint, Encoder, EncoderConfig, LayerTap, StageTag};
use crate::error::{Error, Result};
use crate::params::{glorot, ParamStore};
use crate::tensor::Mat;
use crate::train::{batch_gradients, epoch_batches, CsvLog, Optimizers, TrainHyperparams};
use crate::util::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct PoolingHeadConfig {
    pub bilstm_hidden: usize,
    pub proj_hidden: usize,
    pub embed_dim: usize,
}

impl Default for PoolingHeadConfig {
    fn default() -> Self {
        Self { bilstm_hidden: 64, proj_hidden: 64, embed_dim: 64 }
    }
}

/// BiLSTM, mean over time, then `Linear -> ReLU -> Linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingHead {
    pub config: PoolingHeadConfig,
    pub params: ParamStore,
}

pub struct BoundPooling {
    v: Vec<Var>,
}

impl PoolingHead {
    pub fn new(config: PoolingHeadConfig, input_dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "pooling-head-init", &[]);
        let h = config.bilstm_hidden;
        let mut p = ParamStore::new();
        for dir in ["fw", "bw"] {
            p.push(format!("lstm.{dir}.w_ih"), glorot(&mut rng, input_dim, 4 * h));
            p.push(format!("lstm.{dir}.w_hh"), glorot(&mut rng, h, 4 * h));
            let mut b = Mat::zeros(1, 4 * h);
            // forget gate starts open
            b.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
            p.push(format!("lstm.{dir}.b"), b);
        }
        p.push("proj.w1", glorot(&mut rng, 2 * h, config.proj_hidden));
        p.push("proj.b1", Mat::zeros(1, config.proj_hidden));
        p.push("proj.w2", glorot(&mut rng, config.proj_hidden, config.embed_dim));
        p.push("proj.b2", Mat::zeros(1, config.embed_dim));
        Self { config, params: p }
    }

    pub fn bind(&self, g: &mut Graph, group: usize) -> BoundPooling {
        BoundPooling { v: self.params.bind(g, group) }
    }

    /// `hidden` is `T x input_dim`; returns a `1 x embed_dim` node.
    pub fn embed(&self, g: &mut Graph, b: &BoundPooling, hidden: Var) -> Var {
        let v = &b.v;
        let fw = g.lstm(hidden, v[0], v[1], v[2], false);
        let bw = g.lstm(hidden, v[3], v[4], v[5], true);
        let seq = g.concat_cols(&[fw, bw]);
        self.pool_and_project(g, b, seq)
    }

    /// Mean over time followed by the two-layer projection.
    pub(crate) fn pool_and_project(&self, g: &mut Graph, b: &BoundPooling, seq: Var) -> Var {
        let v = &b.v;
        let pooled = g.mean_rows(seq);
        let z = linear(g, pooled, v[6], v[7]);
        let z = g.relu(z);
        linear(g, z, v[8], v[9])
    }
}

/// Embedding of a `T x model_dim` hidden-state matrix.
pub fn pooled_embedding(head: &PoolingHead, hidden: &Mat) -> Result<Mat> {
    if hidden.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    let mut g = Graph::new();
    let b = head.bind(&mut g, 0);
    let h = g.input(hidden.clone());
    let e = head.embed(&mut g, &b, h);
    Ok(g.value(e).clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLossConfig {
    pub alpha_e: f64,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        Self { alpha_e: 0.9 }
    }
}

impl JointLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_e) {
            return Err(Error::ConfigInvalid(format!("alpha_e {} not in [0, 1]", self.alpha_e)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLoss {
    pub total: f64,
    pub emotion: f64,
    pub gender: f64,
}

/// Weighted multi-task cross-entropy over a batch of logit rows.
pub fn joint_loss(
    emo_logits: &Mat,
    gender_logits: &Mat,
    emo_labels: &[usize],
    gender_labels: &[usize],
    cfg: &JointLossConfig,
) -> Result<JointLoss> {
    cfg.validate()?;
    if !emo_logits.is_finite() || !gender_logits.is_finite() {
        return Err(Error::NonFiniteLogits);
    }
    if emo_logits.rows() != emo_labels.len() || gender_logits.rows() != gender_labels.len() {
        return Err(Error::ShapeMismatch("logit rows vs label count".into()));
    }
    let (emotion, _) = cross_entropy(emo_logits, emo_labels);
    let (gender, _) = cross_entropy(gender_logits, gender_labels);
    Ok(JointLoss { total: cfg.alpha_e * emotion + (1.0 - cfg.alpha_e) * gender, emotion, gender })
}

pub const POOL_GROUP: &str = "pool";
pub const STAGE1_HEADS_GROUP: &str = "stage1_heads";

/// Encoder plus pooling head plus emotion/gender linear heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Model {
    pub encoder: Encoder,
    pub pool: PoolingHead,
    /// `emo.w, emo.b, gender.w, gender.b`
    pub heads: ParamStore,
}

pub struct Stage1Outputs {
    pub emo_logits: Var,
    pub gender_logits: Var,
}

impl Stage1Model {
    pub fn new(encoder: Encoder, head_cfg: PoolingHeadConfig, seed: u64) -> Self {
        let pool = PoolingHead::new(head_cfg.clone(), encoder.config.model_dim, seed);
        let mut rng = rng_for(seed, "stage1-heads-init", &[]);
        let mut heads = ParamStore::new();
        heads.push("emo.w", glorot(&mut rng, head_cfg.embed_dim, Emotion::COUNT));
        heads.push("emo.b", Mat::zeros(1, Emotion::COUNT));
        heads.push("gender.w", glorot(&mut rng, head_cfg.embed_dim, Gender::COUNT));
        heads.push("gender.b", Mat::zeros(1, Gender::COUNT));
        Self { encoder, pool, heads }
    }

    pub fn stores(&self) -> [&ParamStore; 3] {
        [&self.encoder.params, &self.pool.params, &self.heads]
    }

    pub fn forward(&self, g: &mut Graph, features: &Mat) -> Result<Stage1Outputs> {
        self.forward_train(g, features, None)
    }

    /// Same as [`forward`](Self::forward), with encoder dropout drawn from
    /// `dropout` when given.
    pub fn forward_train(&self, g: &mut Graph, features: &Mat, dropout: Option<&mut ChaCha8Rng>) -> Result<Stage1Outputs> {
        let enc = self.encoder.bind(g, 0);
        let pool = self.pool.bind(g, 1);
        let heads = self.heads.bind(g, 2);
        let n = self.encoder.config.n_layers;
        let layers = self.encoder.forward_graph(g, &enc, features, None, n, dropout)?;
        let e = self.pool.embed(g, &pool, layers[n - 1]);
        let emo_logits = linear(g, e, heads[0], heads[1]);
        let gender_logits = linear(g, e, heads[2], heads[3]);
        Ok(Stage1Outputs { emo_logits, gender_logits })
    }

    pub fn predict(&self, features: &Mat) -> Result<(Emotion, Gender)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, features)?;
        let e = g.value(out.emo_logits).argmax_row(0);
        let s = g.value(out.gender_logits).argmax_row(0);
        Ok((Emotion::ALL[e], if s == 0 { Gender::Male } else { Gender::Female }))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.encoder, StageTag::Stage1)
            .with_group(POOL_GROUP, &self.pool.params)
            .with_group(STAGE1_HEADS_GROUP, &self.heads)
    }

    /// Tapped-layer features for clustering.
    pub fn tapped_features(&self, features: &Mat, tap: LayerTap) -> Result<Mat> {
        self.encoder.forward_with_tap(features, tap, None)
    }
}

pub const STAGE1_LOG_HEADER: [&str; 6] = ["step", "L_Total", "L_Emo", "L_Gender", "emo_acc", "gender_acc"];

#[derive(Clone, Copy)]
struct ItemStats {
    total: f64,
    emo: f64,
    gender: f64,
    emo_ok: bool,
    gender_ok: bool,
}

/// Trains the stage-1 model. With `init`, the encoder starts from that
/// checkpoint's weights (heads are always fresh).
pub fn train_stage1(
    corpus: &[UtteranceRecord],
    init: Option<&Checkpoint>,
    enc_cfg: &EncoderConfig,
    head_cfg: &PoolingHeadConfig,
    loss_cfg: &JointLossConfig,
    hp: &TrainHyperparams,
) -> Result<(Stage1Model, CsvLog)> {
    loss_cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let genders: Vec<usize> = corpus
        .iter()
        .map(|r| r.gender.map(Gender::index).ok_or_else(|| Error::MissingGenderLabel(r.id.clone())))
        .collect::<Result<_>>()?;
    let encoder = match init {
        Some(ckpt) => Encoder::from_checkpoint(ckpt, enc_cfg)?,
        None => Encoder::new(enc_cfg.clone())?,
    };
    let mut model = Stage1Model::new(encoder, head_cfg.clone(), hp.seed);
    let mut opt = Optimizers::new(hp.lr, &model.stores(), &[!hp.freeze_encoder, true, true]);
    let batch = hp.effective_batch(corpus.len());
    let alpha = loss_cfg.alpha_e;
    let mut log = CsvLog::new(&STAGE1_LOG_HEADER);
    let mut step = 0;
    for epoch in 0..hp.epochs {
        for items in epoch_batches(corpus.len(), batch, hp.seed, "stage1", epoch) {
            let stores = model.stores();
            let (mut grads, stats) = batch_gradients(&items, &stores, |i| {
                let rec = &corpus[i];
                let mut g = Graph::new();
                let mut rng = rng_for(hp.seed, "stage1-dropout", &[epoch as u64, i as u64]);
                let out = model.forward_train(&mut g, &rec.inline_features().frames, Some(&mut rng))?;
                let le = g.cross_entropy(out.emo_logits, &[rec.emotion.index()]);
                let lg = g.cross_entropy(out.gender_logits, &[genders[i]]);
                let total = g.weighted_sum(&[(le, alpha), (lg, 1.0 - alpha)]);
                let grads = g.backward(total);
                let stats = ItemStats {
                    total: g.scalar(total),
                    emo: g.scalar(le),
                    gender: g.scalar(lg),
                    emo_ok: g.value(out.emo_logits).argmax_row(0) == rec.emotion.index(),
                    gender_ok: g.value(out.gender_logits).argmax_row(0) == genders[i],
                };
                Ok(Some((grads, stats)))
            })?;
            step += 1;
            let n = stats.len() as f64;
            let mean = |f: fn(&ItemStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
            let total = mean(|s| s.total);
            if !total.is_finite() || !grads.is_finite() {
                return Err(Error::DivergedLoss { stage: "stage1", step });
            }
            log.push(vec![
                step as f64,
                total,
                mean(|s| s.emo),
                mean(|s| s.gender),
                mean(|s| s.emo_ok as u8 as f64),
                mean(|s| s.gender_ok as u8 as f64),
            ]);
            grads.scale(1.0 / n);
            let Stage1Model { encoder, pool, heads } = &mut model;
            opt.step(&mut [&mut encoder.params, &mut pool.params, heads], &grads);
        }
    }
    Ok((model, log))
}

/// Emotion accuracy of a stage-1 model over `records`.
pub fn emotion_accuracy(model: &Stage1Model, records: &[UtteranceRecord]) -> Result<f64> {
    let mut correct = 0;
    for r in records {
        if model.predict(&r.inline_features().frames)?.0 == r.emotion {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len().max(1) as f64)
}

/// Restores a stage-1 model (encoder, pooling head and both heads).
pub fn stage1_from_checkpoint(ckpt: &Checkpoint) -> Result<Stage1Model> {
    let encoder = ckpt.encoder()?;
    let pool_params = ckpt.group(POOL_GROUP).ok_or_else(|| Error::CorruptCheckpoint("missing pool group".into()))?;
    let heads = ckpt
        .group(STAGE1_HEADS_GROUP)
        .ok_or_else(|| Error::CorruptCheckpoint("missing stage1_heads group".into()))?;
    let h = pool_params.get(1).rows();
    let proj_hidden = pool_params.get(6).cols();
    let embed_dim = pool_params.get(8).cols();
    let cfg = PoolingHeadConfig { bilstm_hidden: h, proj_hidden, embed_dim };
    let mut model = Stage1Model::new(encoder, cfg, 0);
    crate::encoder::load_matching(&mut model.pool.params, pool_params)?;
    crate::encoder::load_matching(&mut model.heads, heads)?;
    Ok(model)
}
