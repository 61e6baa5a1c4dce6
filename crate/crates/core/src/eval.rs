//! WAR/UAR metrics and speaker-independent session cross-validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{speakers_by_session, Emotion, UtteranceRecord};
use crate::error::{Error, Result};
use crate::gmp::{ids_hash, CodebookProvenance};

const N: usize = Emotion::COUNT;

/// Rows are true categories, columns predicted ones.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N]; N],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(truth: &[Emotion], predicted: &[Emotion]) -> Self {
        let mut cm = Self::new();
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.add(t, p);
        }
        cm
    }

    pub fn add(&mut self, truth: Emotion, predicted: Emotion) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..N).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub war: f64,
    pub uar: f64,
    /// `None` for categories with no true samples.
    pub per_category_recall: [Option<f64>; N],
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mut recall = [None; N];
    for (i, row) in cm.counts.iter().enumerate() {
        let support: u64 = row.iter().sum();
        if support == 0 {
            log::warn!("category {} has no samples; excluded from UAR", Emotion::ALL[i]);
        } else {
            recall[i] = Some(row[i] as f64 / support as f64);
        }
    }
    let present: Vec<f64> = recall.iter().flatten().copied().collect();
    Ok(Metrics {
        war: cm.trace() as f64 / total as f64,
        uar: present.iter().sum::<f64>() / present.len() as f64,
        per_category_recall: recall,
    })
}

#[derive(Clone, Debug)]
pub struct FoldSplit {
    /// 1-based.
    pub fold_id: usize,
    pub test_session: String,
    pub train: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
}

pub const N_FOLDS: usize = 5;

/// One fold per session, in session order; fold `k` tests session `k`.
pub fn make_folds(corpus: &[UtteranceRecord]) -> Result<Vec<FoldSplit>> {
    let by_session = speakers_by_session(corpus);
    if by_session.len() != N_FOLDS {
        return Err(Error::WrongSessionCount(by_session.len()));
    }
    let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
    for (session, speakers) in &by_session {
        for spk in speakers {
            if let Some(prev) = seen.insert(spk, session) {
                if prev != session {
                    return Err(Error::SpeakerLeak(spk.clone()));
                }
            }
        }
    }
    let folds: Vec<FoldSplit> = by_session
        .keys()
        .enumerate()
        .map(|(i, session)| {
            let (test, train) = corpus.iter().cloned().partition(|r| &r.session_id == session);
            FoldSplit { fold_id: i + 1, test_session: session.clone(), train, test }
        })
        .collect();
    for f in &folds {
        check_split(f)?;
    }
    Ok(folds)
}

fn check_split(f: &FoldSplit) -> Result<()> {
    let train_spk: BTreeSet<&str> = f.train.iter().map(|r| r.speaker_id.as_str()).collect();
    if let Some(r) = f.test.iter().find(|r| train_spk.contains(r.speaker_id.as_str())) {
        return Err(Error::SpeakerLeak(r.speaker_id.clone()));
    }
    Ok(())
}

/// What one fold's pipeline produced for its test set.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldOutcome {
    /// One prediction per test record, in order.
    pub predictions: Vec<Emotion>,
    /// Codebooks used for this fold, if any; checked against the split.
    pub codebook: Option<CodebookProvenance>,
}

/// Trains on a split's training side and predicts its test side.
pub trait FoldRunner {
    fn run_fold(&mut self, split: &FoldSplit) -> Result<FoldOutcome>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold_id: usize,
    pub test_session: String,
    pub confusion: ConfusionMatrix,
    pub war: f64,
    pub uar: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub folds: Vec<FoldResult>,
    pub mean_war: f64,
    pub mean_uar: f64,
}

impl EvalReport {
    pub fn from_folds(folds: Vec<FoldResult>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean_war = folds.iter().map(|f| f.war).sum::<f64>() / n;
        let mean_uar = folds.iter().map(|f| f.uar).sum::<f64>() / n;
        Self { folds, mean_war, mean_uar }
    }

    pub fn summary_line(&self) -> String {
        format!("MEAN UAR={:.6} WAR={:.6}", self.mean_uar, self.mean_war)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let names: Vec<&str> = Emotion::ALL.iter().map(|e| e.as_str()).collect();
        for f in &self.folds {
            let _ = writeln!(out, "FOLD {} test_session={}", f.fold_id, f.test_session);
            let _ = writeln!(out, "  confusion (rows=true, cols=pred: {})", names.join(" "));
            for (i, row) in f.confusion.counts.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(u64::to_string).collect();
                let _ = writeln!(out, "  {:<8} {}", names[i], cells.join(" "));
            }
            let _ = writeln!(out, "  WAR={:.6} UAR={:.6}", f.war, f.uar);
        }
        out.push_str(&self.summary_line());
        out.push('\n');
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Verifies that a fold's codebooks were fit on exactly its training side.
pub fn check_codebook_provenance(split: &FoldSplit, prov: &CodebookProvenance) -> Result<()> {
    if prov.fit_sessions.contains(&split.test_session) {
        return Err(Error::ProvenanceMismatch(format!(
            "fold {} codebooks were fit on test session {}",
            split.fold_id, split.test_session
        )));
    }
    let expected = ids_hash(split.train.iter().map(|r| r.id.as_str()));
    if prov.fit_ids_hash != expected {
        return Err(Error::ProvenanceMismatch(format!(
            "fold {} codebooks were not fit on the fold's training utterances",
            split.fold_id
        )));
    }
    Ok(())
}

/// Runs every fold in order and aggregates the results.
pub fn run_crossval(corpus: &[UtteranceRecord], runner: &mut dyn FoldRunner) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(N_FOLDS);
    for split in make_folds(corpus)? {
        let fold = split.fold_id;
        let outcome = runner.run_fold(&split).map_err(|e| e.in_fold(fold))?;
        if outcome.predictions.len() != split.test.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions for {} test utterances",
                outcome.predictions.len(),
                split.test.len()
            ))
            .in_fold(fold));
        }
        if let Some(prov) = &outcome.codebook {
            check_codebook_provenance(&split, prov).map_err(|e| e.in_fold(fold))?;
        }
        let truth: Vec<Emotion> = split.test.iter().map(|r| r.emotion).collect();
        let confusion = ConfusionMatrix::from_pairs(&truth, &outcome.predictions);
        let m = compute_metrics(&confusion).map_err(|e| e.in_fold(fold))?;
        log::info!("fold {fold} ({}): WAR={:.4} UAR={:.4}", split.test_session, m.war, m.uar);
        results.push(FoldResult { fold_id: fold, test_session: split.test_session, confusion, war: m.war, uar: m.uar });
    }
    Ok(EvalReport::from_folds(results))
}
