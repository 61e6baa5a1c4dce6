//! Masked frame-level pseudo-label prediction.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{cross_entropy, Graph, Var};
use crate::corpus::UtteranceRecord;
use crate::encoder::{linear, sample_mask_spans_with, Checkpoint, Encoder, MaskSpec, StageTag};
use crate::error::{Error, Result};
use crate::gmp::{gmp_path, read_gmp, GmpLabels};
use crate::params::{glorot, ParamStore};
use crate::tensor::Mat;
use crate::train::{batch_gradients, epoch_batches, CsvLog, Optimizers, TrainHyperparams};
use crate::util::rng_for;

const PER_SCALE: usize = 4;

/// One `model_dim -> hidden -> K_s` projection per clustering scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Head {
    pub scales: Vec<usize>,
    pub params: ParamStore,
}

impl Stage2Head {
    pub fn new(model_dim: usize, hidden: usize, scales: &[usize], seed: u64) -> Self {
        let mut rng = rng_for(seed, "stage2-heads-init", &[]);
        let mut params = ParamStore::new();
        for (s, &k) in scales.iter().enumerate() {
            params.push(format!("scale{s}.w1"), glorot(&mut rng, model_dim, hidden));
            params.push(format!("scale{s}.b1"), Mat::zeros(1, hidden));
            params.push(format!("scale{s}.w2"), glorot(&mut rng, hidden, k));
            params.push(format!("scale{s}.b2"), Mat::zeros(1, k));
        }
        Self { scales: scales.to_vec(), params }
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// Logits of scale `s` for the rows of `x`.
    pub fn logits(&self, g: &mut Graph, bound: &[Var], x: Var, s: usize) -> Var {
        let v = &bound[s * PER_SCALE..(s + 1) * PER_SCALE];
        let h = linear(g, x, v[0], v[1]);
        let h = g.relu(h);
        linear(g, h, v[2], v[3])
    }
}

/// Per-scale targets at the masked frames.
fn masked_targets(gmp: &GmpLabels, mask: &MaskSpec, s: usize) -> Vec<usize> {
    mask.masked_indices.iter().map(|&t| gmp.get(t, s) as usize).collect()
}

fn check_inputs(frames: usize, gmp: &GmpLabels, mask: &MaskSpec, n_scales: usize) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    mask.validate(frames)?;
    if gmp.num_frames() != frames {
        return Err(Error::ShapeMismatch(format!("{} GMP frames vs {frames} hidden frames", gmp.num_frames())));
    }
    if gmp.num_scales() != n_scales {
        return Err(Error::ShapeMismatch(format!("{} GMP scales vs {n_scales} heads", gmp.num_scales())));
    }
    Ok(())
}

/// Graph form of [`masked_frame_ce`]. Returns the loss node and the
/// per-scale logits at the masked frames.
pub fn masked_frame_ce_graph(
    g: &mut Graph,
    heads: &Stage2Head,
    bound: &[Var],
    hidden: Var,
    gmp: &GmpLabels,
    mask: &MaskSpec,
) -> Result<(Var, Vec<Var>)> {
    check_inputs(g.value(hidden).rows(), gmp, mask, heads.num_scales())?;
    let sel = g.select_rows(hidden, &mask.masked_indices);
    let s_count = heads.num_scales();
    let mut terms = Vec::with_capacity(s_count);
    let mut logits = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let l = heads.logits(g, bound, sel, s);
        terms.push((g.cross_entropy(l, &masked_targets(gmp, mask, s)), 1.0 / s_count as f64));
        logits.push(l);
    }
    Ok((g.weighted_sum(&terms), logits))
}

/// Mean over scales of the masked-frame cross-entropy.
pub fn masked_frame_ce(hidden: &Mat, gmp: &GmpLabels, mask: &MaskSpec, heads: &Stage2Head) -> Result<f64> {
    let mut g = Graph::new();
    let bound = heads.params.bind(&mut g, 0);
    let h = g.input(hidden.clone());
    let (loss, _) = masked_frame_ce_graph(&mut g, heads, &bound, h, gmp, mask)?;
    Ok(g.scalar(loss))
}

/// Same loss from precomputed full-sequence logits (`T x K_s` per scale).
pub fn masked_frame_ce_from_logits(logits: &[Mat], gmp: &GmpLabels, mask: &MaskSpec) -> Result<f64> {
    let frames = logits.first().map_or(0, Mat::rows);
    check_inputs(frames, gmp, mask, logits.len())?;
    let mut total = 0.0;
    for (s, l) in logits.iter().enumerate() {
        if l.rows() != frames || l.cols() != gmp.scales[s] as usize {
            return Err(Error::ShapeMismatch(format!("scale {s} logits {:?}", l.shape())));
        }
        total += cross_entropy(&l.select_rows(&mask.masked_indices), &masked_targets(gmp, mask, s)).0;
    }
    Ok(total / logits.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Config {
    pub head_hidden: usize,
    pub mask_prob: f64,
    pub span_length: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            head_hidden: 64,
            mask_prob: crate::encoder::DEFAULT_MASK_PROB,
            span_length: crate::encoder::DEFAULT_SPAN_LENGTH,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Model {
    pub encoder: Encoder,
    pub heads: Stage2Head,
}

pub const UPSTREAM_KEY: &str = "upstream_hash";
pub const CODEBOOK_KEY: &str = "codebook_stage1_hash";

impl Stage2Model {
    /// Encoder weights only; the frame heads are not carried forward.
    pub fn to_checkpoint(&self, stage1_hash: &str) -> Checkpoint {
        let scales: Vec<String> = self.heads.scales.iter().map(usize::to_string).collect();
        Checkpoint::new(&self.encoder, StageTag::Stage2)
            .with_meta(UPSTREAM_KEY, stage1_hash)
            .with_meta("gmp.scales", scales.join(","))
    }

    /// Hidden states of the final layer with an optional mask.
    fn forward(
        &self,
        g: &mut Graph,
        features: &Mat,
        mask: &MaskSpec,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<Var>)> {
        let enc = self.encoder.bind(g, 0);
        let heads = self.heads.params.bind(g, 1);
        let n = self.encoder.config.n_layers;
        let layers = self.encoder.forward_graph(g, &enc, features, Some(mask), n, dropout)?;
        Ok((layers[n - 1], heads))
    }

    /// Per-scale masked-frame accuracy over `records`, with masks drawn
    /// from `seed`. Utterances whose mask comes out empty are skipped.
    pub fn masked_accuracy(
        &self,
        records: &[UtteranceRecord],
        gmp: &BTreeMap<String, GmpLabels>,
        cfg: &Stage2Config,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let s_count = self.heads.num_scales();
        let mut correct = vec![0usize; s_count];
        let mut total = 0usize;
        for (i, r) in records.iter().enumerate() {
            let labels = gmp.get(&r.id).ok_or_else(|| Error::MissingGmp(r.id.clone()))?;
            let frames = &r.inline_features().frames;
            let mut rng = rng_for(seed, "stage2-eval-mask", &[i as u64]);
            let mask = sample_mask_spans_with(frames.rows(), cfg.mask_prob, cfg.span_length, &mut rng)?;
            if mask.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let (hidden, bound) = self.forward(&mut g, frames, &mask, None)?;
            let (_, logits) = masked_frame_ce_graph(&mut g, &self.heads, &bound, hidden, labels, &mask)?;
            for (s, l) in logits.iter().enumerate() {
                let l = g.value(*l);
                correct[s] += masked_targets(labels, &mask, s).iter().enumerate().filter(|(r, &y)| l.argmax_row(*r) == y).count();
            }
            total += mask.len();
        }
        Ok(correct.into_iter().map(|c| c as f64 / total.max(1) as f64).collect())
    }
}

/// Reads `<id>.gmp` for every record in `corpus` from `dir`.
pub fn load_gmp_dir(dir: &Path, corpus: &[UtteranceRecord]) -> Result<BTreeMap<String, GmpLabels>> {
    let mut out = BTreeMap::new();
    for r in corpus {
        let path = gmp_path(dir, &r.id);
        if !path.exists() {
            return Err(Error::MissingGmp(r.id.clone()));
        }
        let mut labels = read_gmp(&path)?;
        labels.utterance_id = r.id.clone();
        out.insert(r.id.clone(), labels);
    }
    Ok(out)
}

pub fn stage2_log_header(n_scales: usize) -> Vec<String> {
    let mut h = vec!["step".to_string(), "loss".to_string()];
    h.extend((0..n_scales).map(|s| format!("acc_scale_{s}")));
    h
}

/// Fine-tunes the stage-1 encoder to predict GMP labels at masked frames.
pub fn train_stage2(
    corpus: &[UtteranceRecord],
    gmp: &BTreeMap<String, GmpLabels>,
    stage1: &Checkpoint,
    cfg: &Stage2Config,
    hp: &TrainHyperparams,
) -> Result<(Stage2Model, CsvLog)> {
    if stage1.stage != StageTag::Stage1 {
        return Err(Error::IncompatibleConfig(format!(
            "stage 2 starts from a stage1 checkpoint, got {}",
            stage1.stage.as_str()
        )));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut scales: Option<Vec<u32>> = None;
    for r in corpus {
        let l = gmp.get(&r.id).ok_or_else(|| Error::MissingGmp(r.id.clone()))?;
        let frames = r.inline_features().num_frames();
        if l.num_frames() != frames {
            return Err(Error::FrameCountMismatch { id: r.id.clone(), expected: frames, found: l.num_frames() });
        }
        match &scales {
            None => scales = Some(l.scales.clone()),
            Some(s) if *s != l.scales => {
                return Err(Error::ShapeMismatch(format!("utterance {} has scales {:?}, expected {s:?}", r.id, l.scales)))
            }
            _ => {}
        }
    }
    let scales: Vec<usize> = scales.expect("non-empty corpus").into_iter().map(|k| k as usize).collect();
    let encoder = stage1.encoder()?;
    let heads = Stage2Head::new(encoder.config.model_dim, cfg.head_hidden, &scales, hp.seed);
    let mut model = Stage2Model { encoder, heads };
    let mut opt = Optimizers::new(hp.lr, &[&model.encoder.params, &model.heads.params], &[!hp.freeze_encoder, true]);
    let batch = hp.effective_batch(corpus.len());
    let header = stage2_log_header(scales.len());
    let mut log = CsvLog::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    let mut step = 0;
    for epoch in 0..hp.epochs {
        let mut skipped = 0;
        for items in epoch_batches(corpus.len(), batch, hp.seed, "stage2", epoch) {
            let stores = [&model.encoder.params, &model.heads.params];
            let (mut grads, stats) = batch_gradients(&items, &stores, |i| {
                let rec = &corpus[i];
                let frames = &rec.inline_features().frames;
                let mut rng = rng_for(hp.seed, "stage2-mask", &[epoch as u64, i as u64]);
                let mask = sample_mask_spans_with(frames.rows(), cfg.mask_prob, cfg.span_length, &mut rng)?;
                if mask.is_empty() {
                    return Ok(None);
                }
                let labels = &gmp[&rec.id];
                let mut g = Graph::new();
                let (hidden, bound) = model.forward(&mut g, frames, &mask, Some(&mut rng))?;
                let (loss, logits) = masked_frame_ce_graph(&mut g, &model.heads, &bound, hidden, labels, &mask)?;
                let grads = g.backward(loss);
                let correct: Vec<usize> = logits
                    .iter()
                    .enumerate()
                    .map(|(s, l)| {
                        let l = g.value(*l);
                        masked_targets(labels, &mask, s).iter().enumerate().filter(|(r, &y)| l.argmax_row(*r) == y).count()
                    })
                    .collect();
                Ok(Some((grads, (g.scalar(loss), correct, mask.len()))))
            })?;
            skipped += items.len() - stats.len();
            if stats.is_empty() {
                continue;
            }
            step += 1;
            let n = stats.len() as f64;
            let loss = stats.iter().map(|s| s.0).sum::<f64>() / n;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::DivergedLoss { stage: "stage2", step });
            }
            let masked: usize = stats.iter().map(|s| s.2).sum();
            let mut row = vec![step as f64, loss];
            row.extend((0..scales.len()).map(|s| stats.iter().map(|st| st.1[s]).sum::<usize>() as f64 / masked as f64));
            log.push(row);
            grads.scale(1.0 / n);
            let Stage2Model { encoder, heads } = &mut model;
            opt.step(&mut [&mut encoder.params, &mut heads.params], &grads);
        }
        if skipped > 0 {
            log::warn!("stage2 epoch {epoch}: skipped {skipped} utterances with empty masks");
        }
    }
    Ok((model, log))
}
