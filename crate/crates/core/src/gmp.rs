//! Frame-level multi-scale pseudo-labels.
//!
//! Tapped-layer frame features from a stage-1 model are pooled over the
//! whole (training) corpus and clustered once per scale; every frame then
//! receives one cluster id per scale.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::{Emotion, UtteranceRecord};
use crate::encoder::{Checkpoint, LayerTap, StageTag};
use crate::error::{Error, Result};
use crate::kmeans::{assign_all, fit_kmeans};
use crate::stage1::stage1_from_checkpoint;
use crate::tensor::Mat;
use crate::util::short_hash;

#[derive(Clone, Debug, PartialEq)]
pub struct GmpConfig {
    pub scales: Vec<usize>,
    pub tap: LayerTap,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

/// Cluster counts used with a full-size corpus.
pub const FULL_SCALE_SCALES: [usize; 3] = [64, 512, 4096];
pub const DESK_SCALES: [usize; 3] = [8, 32, 128];

impl Default for GmpConfig {
    fn default() -> Self {
        Self { scales: DESK_SCALES.to_vec(), tap: LayerTap(-3), max_iters: 100, tol: 1e-4, seed: 0 }
    }
}

impl GmpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::InvalidGmpConfig("scales must be non-empty and positive".into()));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGmpConfig(format!("scales {:?} must be strictly increasing", self.scales)));
        }
        if self.max_iters == 0 || !(self.tol >= 0.0) {
            return Err(Error::InvalidGmpConfig("max_iters must be positive and tol non-negative".into()));
        }
        Ok(())
    }
}

/// Where a codebook set came from.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookProvenance {
    pub stage1_hash: String,
    pub tap: LayerTap,
    /// Sessions whose frames were clustered.
    pub fit_sessions: Vec<String>,
    /// Hash of the sorted utterance ids whose frames were clustered.
    pub fit_ids_hash: String,
    pub n_points: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookSet {
    /// One `K_s x D` centroid matrix per scale.
    pub codebooks: Vec<Mat>,
    pub feature_dim: usize,
    pub provenance: CodebookProvenance,
}

impl CodebookSet {
    pub fn scales(&self) -> Vec<usize> {
        self.codebooks.iter().map(Mat::rows).collect()
    }

    /// `T x S` nearest-centroid labels for one utterance's features.
    pub fn label(&self, utterance_id: &str, features: &Mat) -> GmpLabels {
        let t = features.rows();
        let s = self.codebooks.len();
        let mut labels = vec![0u32; t * s];
        for (si, cb) in self.codebooks.iter().enumerate() {
            let (assign, _) = assign_all(features, cb);
            for (ti, a) in assign.into_iter().enumerate() {
                labels[ti * s + si] = a as u32;
            }
        }
        GmpLabels {
            utterance_id: utterance_id.to_string(),
            scales: self.scales().into_iter().map(|k| k as u32).collect(),
            labels,
        }
    }
}

/// Per-frame cluster ids for one utterance, `T x S` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GmpLabels {
    pub utterance_id: String,
    pub scales: Vec<u32>,
    pub labels: Vec<u32>,
}

impl GmpLabels {
    pub fn num_frames(&self) -> usize {
        if self.scales.is_empty() {
            0
        } else {
            self.labels.len() / self.scales.len()
        }
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn get(&self, frame: usize, scale: usize) -> u32 {
        self.labels[frame * self.scales.len() + scale]
    }

    pub fn set(&mut self, frame: usize, scale: usize, value: u32) {
        let s = self.scales.len();
        self.labels[frame * s + scale] = value;
    }

    /// Labels of one scale across all frames.
    pub fn column(&self, scale: usize) -> Vec<usize> {
        (0..self.num_frames()).map(|t| self.get(t, scale) as usize).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.scales.len();
        if s == 0 || self.labels.len() % s != 0 {
            return Err(Error::ShapeMismatch(format!("{} labels for {s} scales", self.labels.len())));
        }
        for (i, &l) in self.labels.iter().enumerate() {
            let k = self.scales[i % s];
            if l >= k {
                return Err(Error::RangeViolation { frame: i / s, scale: i % s, label: l, k });
            }
        }
        Ok(())
    }
}

/// Clusters tapped stage-1 features of `corpus` and labels every frame.
pub fn extract_gmp(
    corpus: &[UtteranceRecord],
    stage1: &Checkpoint,
    cfg: &GmpConfig,
) -> Result<(CodebookSet, BTreeMap<String, GmpLabels>)> {
    cfg.validate()?;
    if stage1.stage != StageTag::Stage1 {
        return Err(Error::IncompatibleConfig(format!(
            "GMP extraction needs a stage1 checkpoint, got {}",
            stage1.stage.as_str()
        )));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    cfg.tap.resolve(stage1.config.n_layers)?;
    let model = stage1_from_checkpoint(stage1)?;
    let tapped: Vec<Mat> = corpus
        .iter()
        .map(|r| model.tapped_features(&r.inline_features().frames, cfg.tap))
        .collect::<Result<_>>()?;
    let parts: Vec<&Mat> = tapped.iter().collect();
    let points = Mat::vstack(&parts);
    let largest = *cfg.scales.last().expect("validated");
    if points.rows() < largest {
        return Err(Error::TooFewPoints { points: points.rows(), k: largest });
    }
    let mut codebooks = Vec::with_capacity(cfg.scales.len());
    for &k in &cfg.scales {
        codebooks.push(fit_kmeans(&points, k, cfg.max_iters, cfg.tol, cfg.seed)?.centroids);
    }
    let ids: BTreeSet<&str> = corpus.iter().map(|r| r.id.as_str()).collect();
    let provenance = CodebookProvenance {
        stage1_hash: stage1.content_hash(),
        tap: cfg.tap,
        fit_sessions: crate::corpus::sessions(corpus),
        fit_ids_hash: ids_hash(ids),
        n_points: points.rows(),
    };
    let set = CodebookSet { codebooks, feature_dim: points.cols(), provenance };
    let labels = corpus.iter().zip(&tapped).map(|(r, f)| (r.id.clone(), set.label(&r.id, f))).collect();
    Ok((set, labels))
}

/// Order-independent hash of a set of utterance ids.
pub fn ids_hash<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let sorted: BTreeSet<&str> = ids.into_iter().collect();
    let joined = sorted.into_iter().collect::<Vec<_>>().join("\n");
    short_hash(joined.as_bytes())
}

// ---------------------------------------------------------------------------
// Files

const GMP_MAGIC: &[u8; 4] = b"GMP1";
const CBK_MAGIC: &[u8; 4] = b"CBK1";

pub fn gmp_path(dir: &Path, utterance_id: &str) -> PathBuf {
    dir.join(format!("{utterance_id}.gmp"))
}

/// `GMP1`, u32 S, S x u32 K_s, u32 T, T x S u32 ids (little-endian).
pub fn write_gmp(labels: &GmpLabels, path: &Path) -> Result<()> {
    labels.validate()?;
    let mut buf = Vec::with_capacity(12 + 4 * (labels.scales.len() + labels.labels.len()));
    buf.extend_from_slice(GMP_MAGIC);
    buf.extend_from_slice(&(labels.scales.len() as u32).to_le_bytes());
    for k in &labels.scales {
        buf.extend_from_slice(&k.to_le_bytes());
    }
    buf.extend_from_slice(&(labels.num_frames() as u32).to_le_bytes());
    for l in &labels.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn u32s(bytes: &[u8]) -> impl Iterator<Item = u32> + '_ {
    bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()))
}

pub fn read_gmp(path: &Path) -> Result<GmpLabels> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |r: &str| Error::CorruptFile { path: path.to_path_buf(), reason: r.to_string() };
    if bytes.len() < 8 || &bytes[..4] != GMP_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let s = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + 4 * s + 4;
    if s == 0 || bytes.len() < header {
        return Err(corrupt("truncated header"));
    }
    let scales: Vec<u32> = u32s(&bytes[8..8 + 4 * s]).collect();
    let t = u32::from_le_bytes(bytes[header - 4..header].try_into().unwrap()) as usize;
    if bytes.len() != header + 4 * t * s {
        return Err(corrupt("payload length does not match header"));
    }
    let labels = u32s(&bytes[header..]).collect();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let out = GmpLabels { utterance_id: id, scales, labels };
    out.validate()?;
    Ok(out)
}

/// `CBK1`, u32 S, then per scale: u32 K_s, u32 D, K_s x D f32 centroids.
pub fn write_codebooks(set: &CodebookSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CBK_MAGIC);
    buf.extend_from_slice(&(set.codebooks.len() as u32).to_le_bytes());
    for cb in &set.codebooks {
        buf.extend_from_slice(&(cb.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(cb.cols() as u32).to_le_bytes());
        for v in cb.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    let p = &set.provenance;
    let prov = format!(
        "stage1_hash={}\ntap={}\nfit_sessions={}\nfit_ids_hash={}\nn_points={}\n",
        p.stage1_hash,
        p.tap,
        p.fit_sessions.join(","),
        p.fit_ids_hash,
        p.n_points
    );
    let pp = provenance_path(path);
    fs::write(&pp, prov).map_err(|e| Error::io(&pp, e))
}

pub fn provenance_path(codebook_path: &Path) -> PathBuf {
    let mut s = codebook_path.as_os_str().to_owned();
    s.push(".prov");
    PathBuf::from(s)
}

pub fn read_codebooks(path: &Path) -> Result<CodebookSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |r: &str| Error::CorruptFile { path: path.to_path_buf(), reason: r.to_string() };
    if bytes.len() < 8 || &bytes[..4] != CBK_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let s = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut pos = 8;
    let mut codebooks = Vec::with_capacity(s);
    for _ in 0..s {
        let head = bytes.get(pos..pos + 8).ok_or_else(|| corrupt("truncated scale header"))?;
        let k = u32::from_le_bytes(head[..4].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(head[4..].try_into().unwrap()) as usize;
        pos += 8;
        let raw = bytes.get(pos..pos + 4 * k * d).ok_or_else(|| corrupt("truncated centroids"))?;
        pos += 4 * k * d;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        codebooks.push(Mat::from_vec(k, d, data));
    }
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    let feature_dim = codebooks.first().map_or(0, Mat::cols);
    let provenance = read_provenance(&provenance_path(path))?;
    Ok(CodebookSet { codebooks, feature_dim, provenance })
}

fn read_provenance(path: &Path) -> Result<CodebookProvenance> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| {
        kv.get(k).copied().ok_or_else(|| Error::CorruptFile { path: path.to_path_buf(), reason: format!("missing {k}") })
    };
    Ok(CodebookProvenance {
        stage1_hash: get("stage1_hash")?.to_string(),
        tap: LayerTap(get("tap")?.parse().map_err(|_| Error::CorruptFile {
            path: path.to_path_buf(),
            reason: "bad tap".into(),
        })?),
        fit_sessions: get("fit_sessions")?.split(',').filter(|s| !s.is_empty()).map(String::from).collect(),
        fit_ids_hash: get("fit_ids_hash")?.to_string(),
        n_points: get("n_points")?.parse().unwrap_or(0),
    })
}

// ---------------------------------------------------------------------------
// Cluster quality

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterQuality {
    pub purity: Vec<f64>,
    pub nmi: Vec<f64>,
}

/// Purity and normalized mutual information of cluster ids against
/// emotion categories (each frame inherits its utterance's label).
pub fn cluster_quality(labels: &BTreeMap<String, GmpLabels>, corpus: &[UtteranceRecord]) -> Result<ClusterQuality> {
    let mut per_scale: Option<Vec<(Vec<usize>, Vec<usize>)>> = None;
    for r in corpus {
        let l = labels.get(&r.id).ok_or_else(|| Error::MissingGmp(r.id.clone()))?;
        let cols = per_scale.get_or_insert_with(|| vec![(Vec::new(), Vec::new()); l.num_scales()]);
        for (s, (clusters, classes)) in cols.iter_mut().enumerate() {
            let c = l.column(s);
            classes.extend(std::iter::repeat_n(r.emotion.index(), c.len()));
            clusters.extend(c);
        }
    }
    let per_scale = per_scale.ok_or(Error::EmptyInput)?;
    let mut q = ClusterQuality { purity: Vec::new(), nmi: Vec::new() };
    for (clusters, classes) in &per_scale {
        if clusters.is_empty() {
            return Err(Error::EmptyInput);
        }
        q.purity.push(purity(clusters, classes));
        q.nmi.push(normalized_mutual_information(clusters, classes));
    }
    Ok(q)
}

fn contingency(a: &[usize], b: &[usize]) -> BTreeMap<(usize, usize), usize> {
    let mut table = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_insert(0) += 1;
    }
    table
}

/// Fraction of points that belong to their cluster's majority class.
pub fn purity(clusters: &[usize], classes: &[usize]) -> f64 {
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for ((c, _), n) in contingency(clusters, classes) {
        let e = best.entry(c).or_insert(0);
        *e = (*e).max(n);
    }
    best.values().sum::<usize>() as f64 / clusters.len() as f64
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// Mutual information normalized by the arithmetic mean of the two
/// entropies. Defined as 1 when both labelings are constant, 0 when only
/// one is.
pub fn normalized_mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let table = contingency(a, b);
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(x, y), &c) in &table {
        *ca.entry(x).or_insert(0) += c;
        *cb.entry(y).or_insert(0) += c;
    }
    let (ha, hb) = (entropy(ca.values().copied(), n), entropy(cb.values().copied(), n));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    if ha == 0.0 || hb == 0.0 {
        return 0.0;
    }
    let mi: f64 = table
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    (mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0)
}

/// Per-emotion frame counts, used for the one-cluster purity closed form.
pub fn emotion_frame_counts(corpus: &[UtteranceRecord]) -> [usize; Emotion::COUNT] {
    let mut c = [0; Emotion::COUNT];
    for r in corpus {
        c[r.emotion.index()] += r.inline_features().num_frames();
    }
    c
}
