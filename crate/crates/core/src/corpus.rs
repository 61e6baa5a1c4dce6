//! Utterance records, manifest ingestion, label canonicalization, the
//! filterbank front end and the synthetic corpus generator.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::util::rng_for;

/// Canonical four-way emotion category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Emotion {
    Angry,
    Happy,
    Neutral,
    Sad,
}

impl Emotion {
    pub const ALL: [Emotion; 4] = [Emotion::Angry, Emotion::Happy, Emotion::Neutral, Emotion::Sad];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Emotion> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Angry => "angry",
            Emotion::Happy => "happy",
            Emotion::Neutral => "neutral",
            Emotion::Sad => "sad",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Raw tags accepted by [`map_emotion_label`]; "excited" folds into happy.
pub const ACCEPTED_TAGS: [&str; 5] = ["angry", "happy", "excited", "neutral", "sad"];

pub fn map_emotion_label(raw: &str) -> Result<Emotion> {
    match raw.trim() {
        "angry" => Ok(Emotion::Angry),
        "happy" | "excited" => Ok(Emotion::Happy),
        "neutral" => Ok(Emotion::Neutral),
        "sad" => Ok(Emotion::Sad),
        other => Err(Error::UnknownLabel(other.to_string())),
    }
}

impl FromStr for Emotion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        map_emotion_label(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl FromStr for Gender {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Gender::Male),
            "female" | "f" => Ok(Gender::Female),
            other => Err(format!("unknown gender {other:?}")),
        }
    }
}

/// `T x D` frame representation of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    pub frames: Mat,
    pub frame_rate_hz: f64,
}

pub const DEFAULT_FRAME_RATE_HZ: f64 = 50.0;

impl FrameFeatures {
    pub fn new(frames: Mat) -> Self {
        Self { frames, frame_rate_hz: DEFAULT_FRAME_RATE_HZ }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames() == 0 {
            return Err(Error::EmptySequence);
        }
        if !self.frames.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    Inline(Arc<FrameFeatures>),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub features: FeatureSource,
    pub emotion: Emotion,
    pub gender: Option<Gender>,
    pub speaker_id: String,
    pub session_id: String,
}

impl UtteranceRecord {
    /// Frame features, reading the feature file when not inline.
    pub fn load_features(&self) -> Result<Arc<FrameFeatures>> {
        match &self.features {
            FeatureSource::Inline(f) => Ok(Arc::clone(f)),
            FeatureSource::File(p) => Ok(Arc::new(read_features(p)?)),
        }
    }

    /// The inline features; panics if the record has not been materialized.
    pub fn inline_features(&self) -> &FrameFeatures {
        match &self.features {
            FeatureSource::Inline(f) => f,
            FeatureSource::File(p) => panic!("features for {} not materialized ({})", self.id, p.display()),
        }
    }
}

/// Replaces file-backed features with inline copies and checks that the
/// feature dimension is the same for every record.
pub fn materialize(records: &[UtteranceRecord]) -> Result<Vec<UtteranceRecord>> {
    let mut dim = None;
    records
        .iter()
        .map(|r| {
            let f = r.load_features()?;
            f.validate()?;
            match dim {
                None => dim = Some(f.dim()),
                Some(d) if d != f.dim() => {
                    return Err(Error::InputDimMismatch { expected: d, found: f.dim() });
                }
                _ => {}
            }
            Ok(UtteranceRecord { features: FeatureSource::Inline(f), ..r.clone() })
        })
        .collect()
}

/// Sorted distinct session ids.
pub fn sessions(records: &[UtteranceRecord]) -> Vec<String> {
    records.iter().map(|r| r.session_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

// ---------------------------------------------------------------------------
// Manifest

/// Parses a manifest, rejecting any utterance whose raw label is outside
/// [`ACCEPTED_TAGS`].
pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    parse_manifest(path, false).map(|(records, _)| records)
}

/// Parses a manifest, dropping utterances with labels outside
/// [`ACCEPTED_TAGS`]. Returns the records and the number dropped.
pub fn load_manifest_filtered(path: &Path) -> Result<(Vec<UtteranceRecord>, usize)> {
    let (records, dropped) = parse_manifest(path, true)?;
    if dropped > 0 {
        log::info!("{}: dropped {dropped} utterances with labels outside the 4-way set", path.display());
    }
    Ok((records, dropped))
}

fn parse_manifest(path: &Path, drop_unknown: bool) -> Result<(Vec<UtteranceRecord>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut dropped = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::MalformedManifest { path: path.to_path_buf(), line: lineno + 1, reason };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 tab-separated fields, found {}", fields.len())));
        }
        if fields.iter().any(|f| f.trim().is_empty()) {
            return Err(bad("empty field".into()));
        }
        let emotion = match map_emotion_label(fields[2]) {
            Ok(e) => e,
            Err(_) if drop_unknown => {
                dropped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let gender = fields[3].parse::<Gender>().map_err(bad)?;
        let id = fields[0].trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let feature_path = base.join(fields[1].trim());
        records.push(UtteranceRecord {
            id,
            features: FeatureSource::File(feature_path),
            emotion,
            gender: Some(gender),
            speaker_id: fields[4].trim().to_string(),
            session_id: fields[5].trim().to_string(),
        });
    }
    Ok((records, dropped))
}

/// Writes a manifest plus one feature file per record under `dir`.
pub fn write_corpus(dir: &Path, records: &[UtteranceRecord]) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut manifest = String::from("# id\tfeature_path\traw_emotion\tgender\tspeaker_id\tsession_id\n");
    for r in records {
        let rel = format!("features/{}.ftm", r.id);
        write_features(&dir.join(&rel), &*r.load_features()?)?;
        let gender = r.gender.ok_or_else(|| Error::MissingGenderLabel(r.id.clone()))?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id,
            rel,
            r.emotion,
            gender.as_str(),
            r.speaker_id,
            r.session_id
        ));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Feature files: "FTM1", u32 T, u32 D, T*D f32 little-endian, row-major.

const FEATURE_MAGIC: &[u8; 4] = b"FTM1";

pub fn write_features(path: &Path, features: &FrameFeatures) -> Result<()> {
    let f = &features.frames;
    let mut buf = Vec::with_capacity(12 + 4 * f.data().len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(f.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(f.cols() as u32).to_le_bytes());
    for v in f.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FrameFeatures> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::CorruptFeatures { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(corrupt("bad magic or header"));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 4 * t * d {
        return Err(corrupt("payload length does not match header"));
    }
    let data = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(FrameFeatures::new(Mat::from_vec(t, d, data)))
}

// ---------------------------------------------------------------------------
// Synthetic corpus

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpusSpec {
    pub n_utterances: usize,
    pub n_speakers: usize,
    pub n_sessions: usize,
    pub feature_dim: usize,
    pub frame_range: (usize, usize),
    /// Pairwise distance between emotion means, in within-category std units.
    pub separability: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            n_utterances: 400,
            n_speakers: 10,
            n_sessions: 5,
            feature_dim: 40,
            frame_range: (50, 150),
            separability: 6.0,
            seed: 1,
        }
    }
}

/// Norm of the gender offset relative to the emotion offset.
pub const GENDER_SIGNAL_RATIO: f64 = 0.5;

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n_utterances == 0 || self.n_speakers == 0 || self.feature_dim == 0 {
            return bad("n_utterances, n_speakers and feature_dim must be positive");
        }
        if self.n_sessions != 5 {
            return bad("n_sessions must be 5");
        }
        if self.n_speakers % self.n_sessions != 0 {
            return bad("n_speakers must be a multiple of n_sessions");
        }
        if self.feature_dim < Emotion::COUNT + 1 {
            return bad("feature_dim must be at least 5");
        }
        let (lo, hi) = self.frame_range;
        if lo == 0 || lo > hi {
            return bad("frame_range must satisfy 1 <= T_min <= T_max");
        }
        if !(self.separability.is_finite() && self.separability >= 0.0) {
            return bad("separability must be finite and non-negative");
        }
        Ok(())
    }

    /// Emotion and gender offsets: four emotion means on a regular simplex
    /// with edge `separability`, and a gender offset along a fifth
    /// orthogonal direction with norm `GENDER_SIGNAL_RATIO` times the
    /// emotion offset norm.
    pub fn class_means(&self) -> (Vec<Vec<f64>>, [Vec<f64>; 2]) {
        let mut rng = rng_for(self.seed, "synthetic-means", &[]);
        let dim = self.feature_dim;
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < Emotion::COUNT + 1 {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let radius = self.separability / std::f64::consts::SQRT_2;
        let emotion = basis[..Emotion::COUNT].iter().map(|b| b.iter().map(|x| x * radius).collect()).collect();
        let g = radius * GENDER_SIGNAL_RATIO;
        let male = basis[Emotion::COUNT].iter().map(|x| x * g).collect();
        let female = basis[Emotion::COUNT].iter().map(|x| -x * g).collect();
        (emotion, [male, female])
    }
}

pub fn session_name(index: usize) -> String {
    format!("Session{}", index + 1)
}

/// Deterministic labelled corpus. Speaker `k` belongs to session
/// `k / (n_speakers / 5)` and alternates male/female; each speaker's
/// utterances cycle through the four emotions, so emotion is balanced and
/// independent of gender.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<UtteranceRecord>> {
    spec.validate()?;
    let (emotion_means, gender_means) = spec.class_means();
    let per_session = spec.n_speakers / spec.n_sessions;
    let mut per_speaker_count = vec![0usize; spec.n_speakers];
    let mut records = Vec::with_capacity(spec.n_utterances);
    for u in 0..spec.n_utterances {
        let speaker = u % spec.n_speakers;
        let nth = per_speaker_count[speaker];
        per_speaker_count[speaker] += 1;
        let session = speaker / per_session;
        let gender = if speaker % 2 == 0 { Gender::Male } else { Gender::Female };
        let emotion = Emotion::ALL[(nth + speaker / 2) % Emotion::COUNT];
        let mut rng = rng_for(spec.seed, "synthetic-utterance", &[u as u64]);
        let frames = rng.random_range(spec.frame_range.0..=spec.frame_range.1);
        let mean: Vec<f64> = emotion_means[emotion.index()]
            .iter()
            .zip(&gender_means[gender.index()])
            .map(|(a, b)| a + b)
            .collect();
        let mut data = Vec::with_capacity(frames * spec.feature_dim);
        for _ in 0..frames {
            for m in &mean {
                let noise: f64 = StandardNormal.sample(&mut rng);
                // f32 rounding keeps in-memory and on-disk corpora identical.
                data.push((m + noise) as f32 as f64);
            }
        }
        records.push(UtteranceRecord {
            id: format!("{}_spk{:02}_u{:04}", session_name(session), speaker, u),
            features: FeatureSource::Inline(Arc::new(FrameFeatures::new(Mat::from_vec(frames, spec.feature_dim, data)))),
            emotion,
            gender: Some(gender),
            speaker_id: format!("spk{speaker:02}"),
            session_id: session_name(session),
        });
    }
    Ok(records)
}

/// Copy of `records` with emotion labels randomly permuted across
/// utterances (a chance-level control).
pub fn permute_emotions(records: &[UtteranceRecord], seed: u64) -> Vec<UtteranceRecord> {
    let mut labels: Vec<Emotion> = records.iter().map(|r| r.emotion).collect();
    labels.shuffle(&mut rng_for(seed, "permute-emotions", &[]));
    records.iter().zip(labels).map(|(r, e)| UtteranceRecord { emotion: e, ..r.clone() }).collect()
}

/// Per-session speaker sets.
pub fn speakers_by_session(records: &[UtteranceRecord]) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in records {
        out.entry(r.session_id.clone()).or_default().insert(r.speaker_id.clone());
    }
    out
}

// ---------------------------------------------------------------------------
// Filterbank front end

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: usize,
    /// Analysis window in samples (25 ms at 16 kHz).
    pub window: usize,
    /// Hop in samples (20 ms at 16 kHz, i.e. 50 frames per second).
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000, window: 400, hop: 320, n_fft: 512, n_mels: 40 }
    }
}

/// Added inside the log so silent bands stay finite.
pub const LOG_FLOOR: f64 = 1e-10;

/// Number of analysis frames for a signal of `len` samples. Only frames
/// that fit entirely inside the signal are kept (no padding).
pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window {
        0
    } else {
        (len - window) / hop + 1
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters, `n_mels x (n_fft/2 + 1)`.
fn mel_filterbank(cfg: &FrontendConfig) -> Mat {
    let bins = cfg.n_fft / 2 + 1;
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let edges: Vec<f64> =
        (0..cfg.n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)).collect();
    let mut fb = Mat::zeros(cfg.n_mels, bins);
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..bins {
            let f = b as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[(m, b)] = w;
        }
    }
    fb
}

/// Log mel-filterbank magnitudes of a mono waveform.
pub fn compute_frontend(waveform: &[f64], cfg: &FrontendConfig) -> Result<FrameFeatures> {
    if waveform.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let frames = frame_count(waveform.len(), cfg.window, cfg.hop);
    if frames == 0 {
        return Err(Error::EmptySignal);
    }
    let window: Vec<f64> = (0..cfg.window)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / cfg.window as f64).cos())
        .collect();
    let fb = mel_filterbank(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let bins = cfg.n_fft / 2 + 1;
    let mut out = Mat::zeros(frames, cfg.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut mag = vec![0.0; bins];
    for t in 0..frames {
        let start = t * cfg.hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for n in 0..cfg.window.min(cfg.n_fft) {
            buf[n] = Complex::new(waveform[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for k in 0..cfg.n_mels {
            let e: f64 = fb.row(k).iter().zip(&mag).map(|(w, m)| w * m).sum();
            out[(t, k)] = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(FrameFeatures { frames: out, frame_rate_hz: cfg.sample_rate as f64 / cfg.hop as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn excited_merges_into_happy() {
        assert_eq!(map_emotion_label("excited").unwrap(), Emotion::Happy);
        assert_eq!(map_emotion_label("sad").unwrap(), Emotion::Sad);
        assert!(matches!(map_emotion_label("frustrated"), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn exactly_five_raw_tags_are_accepted() {
        let candidates = [
            "angry", "happy", "excited", "neutral", "sad", "frustrated", "fearful", "surprised", "disgusted",
            "other", "xxx", "ang", "hap", "exc", "neu", "fru", "fea", "sur", "dis", "oth", "", "Angry",
        ];
        let accepted: Vec<&str> = candidates.iter().copied().filter(|t| map_emotion_label(t).is_ok()).collect();
        assert_eq!(accepted, ACCEPTED_TAGS);
        let targets: BTreeSet<Emotion> = accepted.iter().map(|t| map_emotion_label(t).unwrap()).collect();
        assert_eq!(targets.len(), 4);
    }

    #[test]
    fn canonicalization_is_idempotent() {
        for tag in ACCEPTED_TAGS {
            let once = map_emotion_label(tag).unwrap();
            assert_eq!(map_emotion_label(once.as_str()).unwrap(), once);
        }
    }

    fn manifest_fixture(lines: &[&str]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, lines.join("\n")).unwrap();
        (dir, path)
    }

    #[test]
    fn manifest_parsing() {
        let (_d, p) = manifest_fixture(&[
            "# comment",
            "u1\tf/u1.ftm\texcited\tmale\tspk1\tSession1",
            "u2\tf/u2.ftm\tsad\tF\tspk2\tSession1",
        ]);
        let recs = load_manifest(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].emotion, Emotion::Happy);
        assert_eq!(recs[1].gender, Some(Gender::Female));
        assert!(matches!(&recs[0].features, FeatureSource::File(f) if f.ends_with("f/u1.ftm")));

        let (_d, p) = manifest_fixture(&["u1\ta\tsad\tmale\ts\tS1", "u1\tb\tsad\tmale\ts\tS1"]);
        assert!(matches!(load_manifest(&p), Err(Error::DuplicateId(id)) if id == "u1"));

        let (_d, p) = manifest_fixture(&["u1\ta\tsad\tmale\ts"]);
        assert!(matches!(load_manifest(&p), Err(Error::MalformedManifest { line: 1, .. })));

        let (_d, p) = manifest_fixture(&["u1\ta\tfrustrated\tmale\ts\tS1", "u2\ta\tsad\tmale\ts\tS1"]);
        assert!(matches!(load_manifest(&p), Err(Error::UnknownLabel(_))));
        let (recs, dropped) = load_manifest_filtered(&p).unwrap();
        assert_eq!((recs.len(), dropped), (1, 1));
    }

    #[test]
    fn feature_file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ftm");
        let f = FrameFeatures::new(Mat::from_vec(2, 3, vec![0.5, -1.0, 2.0, 3.25, 0.0, 1e-3f32 as f64]));
        write_features(&p, &f).unwrap();
        assert_eq!(read_features(&p).unwrap(), f);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_features(&p), Err(Error::CorruptFeatures { .. })));
    }

    #[test]
    fn synthetic_corpus_bookkeeping() {
        let spec = SyntheticCorpusSpec::default();
        let recs = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(recs.len(), 400);
        let by_session = speakers_by_session(&recs);
        assert_eq!(by_session.len(), 5);
        assert!(by_session.values().all(|s| s.len() == 2));
        let mut counts = [0usize; 4];
        for r in &recs {
            counts[r.emotion.index()] += 1;
            let f = r.inline_features();
            assert!((50..=150).contains(&f.num_frames()));
            assert_eq!(f.dim(), 40);
        }
        assert_eq!(counts, [100; 4]);
        // every session holds both genders
        for s in sessions(&recs) {
            let genders: BTreeSet<_> = recs.iter().filter(|r| r.session_id == s).map(|r| r.gender).collect();
            assert_eq!(genders.len(), 2);
        }
    }

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let spec = SyntheticCorpusSpec { n_utterances: 40, ..Default::default() };
        let a = generate_synthetic_corpus(&spec).unwrap();
        let b = generate_synthetic_corpus(&spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let (fx, fy) = (x.inline_features(), y.inline_features());
            let bx: Vec<u64> = fx.frames.data().iter().map(|v| v.to_bits()).collect();
            let by: Vec<u64> = fy.frames.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
        let other = generate_synthetic_corpus(&SyntheticCorpusSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a[0].inline_features(), other[0].inline_features());
    }

    #[test]
    fn class_means_have_requested_geometry() {
        let spec = SyntheticCorpusSpec { separability: 6.0, ..Default::default() };
        let (emo, gender) = spec.class_means();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>().sqrt();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!((dist(&emo[i], &emo[j]) - 6.0).abs() < 1e-9);
            }
        }
        assert!((norm(&gender[0]) / norm(&emo[0]) - GENDER_SIGNAL_RATIO).abs() < 1e-9);
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SyntheticCorpusSpec { n_sessions: 4, ..Default::default() },
            SyntheticCorpusSpec { frame_range: (10, 5), ..Default::default() },
            SyntheticCorpusSpec { n_speakers: 7, ..Default::default() },
            SyntheticCorpusSpec { feature_dim: 3, ..Default::default() },
        ] {
            assert!(matches!(generate_synthetic_corpus(&spec), Err(Error::InvalidSpec(_))));
        }
    }

    #[test]
    fn frontend_frame_count_and_silence() {
        let cfg = FrontendConfig::default();
        let f = compute_frontend(&vec![0.0; 16_000], &cfg).unwrap();
        assert_eq!(f.num_frames(), 49);
        assert_eq!(f.num_frames(), (16_000 - 400) / 320 + 1);
        assert_eq!(f.dim(), 40);
        assert!(f.frames.data().iter().all(|&v| v == LOG_FLOOR.ln()));
        assert_eq!(f.frame_rate_hz, 50.0);
        assert!(matches!(compute_frontend(&[0.0; 399], &cfg), Err(Error::EmptySignal)));
        assert!(matches!(compute_frontend(&[f64::NAN; 800], &cfg), Err(Error::NonFiniteInput)));
    }

    #[test]
    fn frontend_is_translation_consistent() {
        let cfg = FrontendConfig::default();
        let wave: Vec<f64> = (0..8000).map(|n| (n as f64 * 0.05).sin() + 0.3 * (n as f64 * 0.31).cos()).collect();
        let a = compute_frontend(&wave, &cfg).unwrap();
        let again = compute_frontend(&wave, &cfg).unwrap();
        assert_eq!(a, again);
        let b = compute_frontend(&wave[cfg.hop..], &cfg).unwrap();
        assert_eq!(b.num_frames(), a.num_frames() - 1);
        for t in 0..b.num_frames() {
            for k in 0..cfg.n_mels {
                assert!((b.frames[(t, k)] - a.frames[(t + 1, k)]).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn frame_count_matches_formula(len in 400usize..20_000) {
            let expected = (len - 400) / 320 + 1;
            prop_assert_eq!(frame_count(len, 400, 320), expected);
            prop_assert!((expected - 1) * 320 + 400 <= len);
            prop_assert!(expected * 320 + 400 > len);
        }
    }
}
