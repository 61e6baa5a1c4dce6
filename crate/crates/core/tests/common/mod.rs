#![allow(dead_code)]

use gmptl::corpus::{Emotion, UtteranceRecord};
use gmptl::eval::{compute_metrics, ConfusionMatrix};
use gmptl::tensor::Mat;

/// Per-utterance mean of frame features.
pub fn pooled(r: &UtteranceRecord) -> Vec<f64> {
    r.inline_features().frames.mean_rows().row(0).to_vec()
}

/// Nearest-class-mean probe on mean-pooled features (a linear classifier).
/// Returns test UAR.
pub fn nearest_mean_uar(train: &[UtteranceRecord], test: &[UtteranceRecord]) -> f64 {
    let dim = train[0].inline_features().dim();
    let mut sums = Mat::zeros(Emotion::COUNT, dim);
    let mut counts = [0usize; Emotion::COUNT];
    for r in train {
        let c = r.emotion.index();
        counts[c] += 1;
        sums.row_mut(c).iter_mut().zip(pooled(r)).for_each(|(s, v)| *s += v);
    }
    for c in 0..Emotion::COUNT {
        let n = counts[c].max(1) as f64;
        sums.row_mut(c).iter_mut().for_each(|s| *s /= n);
    }
    let mut cm = ConfusionMatrix::new();
    for r in test {
        let x = pooled(r);
        let best = (0..Emotion::COUNT)
            .filter(|&c| counts[c] > 0)
            .min_by(|&a, &b| {
                let da: f64 = x.iter().zip(sums.row(a)).map(|(p, q)| (p - q) * (p - q)).sum();
                let db: f64 = x.iter().zip(sums.row(b)).map(|(p, q)| (p - q) * (p - q)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        cm.add(r.emotion, Emotion::ALL[best]);
    }
    compute_metrics(&cm).unwrap().uar
}

pub fn split_by_session<'a>(corpus: &'a [UtteranceRecord], test: &str) -> (Vec<UtteranceRecord>, Vec<UtteranceRecord>) {
    corpus.iter().cloned().partition(|r| r.session_id != test)
}

use gmptl::corpus::generate_synthetic_corpus;
use gmptl::encoder::Checkpoint;
use gmptl::pipeline::{CorpusSource, PipelineConfig};
use gmptl::stage1::{train_stage1, JointLossConfig};

/// Desk preset with encoder input width set for the synthetic corpus.
pub fn desk() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk();
    if let CorpusSource::Synthetic(s) = &cfg.corpus {
        cfg.encoder.input_dim = s.feature_dim;
    }
    cfg
}

pub fn desk_corpus(cfg: &PipelineConfig) -> Vec<UtteranceRecord> {
    match &cfg.corpus {
        CorpusSource::Synthetic(s) => generate_synthetic_corpus(s).unwrap(),
        CorpusSource::Manifest(_) => cfg.load_corpus().unwrap(),
    }
}

pub fn stage1_checkpoint(cfg: &PipelineConfig, train: &[UtteranceRecord]) -> Checkpoint {
    let loss = JointLossConfig { alpha_e: cfg.effective_alpha() };
    let (model, _) = train_stage1(train, None, &cfg.encoder, &cfg.pooling, &loss, &cfg.hyperparams(1)).unwrap();
    model.to_checkpoint()
}

/// An untrained stage-1 checkpoint with the same architecture.
pub fn random_stage1_checkpoint(cfg: &PipelineConfig, train: &[UtteranceRecord]) -> Checkpoint {
    let mut c = cfg.clone();
    c.epochs[0] = 0;
    stage1_checkpoint(&c, train)
}
