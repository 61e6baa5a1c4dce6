//! Transformer encoder backbone with span masking, a learned mask embedding,
//! per-layer tapping and checkpoint persistence.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, uniform, ParamStore};
use crate::tensor::Mat;
use crate::util::{rng_for, sha256_hex, short_hash};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub input_dim: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { n_layers: 4, model_dim: 64, n_heads: 4, ff_dim: 128, input_dim: 40, dropout: 0.0, seed: 0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.n_layers == 0 || self.model_dim == 0 || self.n_heads == 0 || self.ff_dim == 0 || self.input_dim == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if self.model_dim % self.n_heads != 0 {
            return bad(format!("model_dim {} not divisible by n_heads {}", self.model_dim, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }

    fn same_architecture(&self, other: &EncoderConfig) -> bool {
        (self.n_layers, self.model_dim, self.n_heads, self.ff_dim, self.input_dim)
            == (other.n_layers, other.model_dim, other.n_heads, other.ff_dim, other.input_dim)
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("encoder.n_layers".into(), self.n_layers.to_string()),
            ("encoder.model_dim".into(), self.model_dim.to_string()),
            ("encoder.n_heads".into(), self.n_heads.to_string()),
            ("encoder.ff_dim".into(), self.ff_dim.to_string()),
            ("encoder.input_dim".into(), self.input_dim.to_string()),
            ("encoder.dropout".into(), self.dropout.to_string()),
            ("encoder.seed".into(), self.seed.to_string()),
        ]
    }

    pub fn config_hash(&self) -> String {
        let text: String = self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        short_hash(text.as_bytes())
    }

    fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        fn field<T: FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
            meta.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing or invalid metadata field {key}")))
        }
        Ok(Self {
            n_layers: field(meta, "encoder.n_layers")?,
            model_dim: field(meta, "encoder.model_dim")?,
            n_heads: field(meta, "encoder.n_heads")?,
            ff_dim: field(meta, "encoder.ff_dim")?,
            input_dim: field(meta, "encoder.input_dim")?,
            dropout: field(meta, "encoder.dropout")?,
            seed: field(meta, "encoder.seed")?,
        })
    }
}

/// Which layer's hidden states to read. Negative ids count from the end
/// (`-1` is the last layer); positive ids are 1-indexed from the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerTap(pub i32);

impl LayerTap {
    pub const LAST: LayerTap = LayerTap(-1);

    /// 1-indexed layer number.
    pub fn resolve(self, n_layers: usize) -> Result<usize> {
        let n = n_layers as i32;
        let err = Err(Error::TapOutOfRange { layer_id: self.0, n_layers });
        match self.0 {
            0 => err,
            k if k < 0 && -k <= n => Ok((n + k + 1) as usize),
            k if k > 0 && k <= n => Ok(k as usize),
            _ => err,
        }
    }
}

impl fmt::Display for LayerTap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Frame positions replaced by the mask embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub masked_indices: Vec<usize>,
    pub span_length: usize,
    pub mask_prob: f64,
}

impl MaskSpec {
    pub fn is_empty(&self) -> bool {
        self.masked_indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.masked_indices.len()
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        match self.masked_indices.iter().find(|&&i| i >= frames) {
            Some(&index) => Err(Error::MaskIndexOutOfRange { index, len: frames }),
            None => Ok(()),
        }
    }
}

pub const DEFAULT_MASK_PROB: f64 = 0.08;
pub const DEFAULT_SPAN_LENGTH: usize = 10;

/// Every frame independently starts a span with probability `mask_prob`;
/// each span covers `min(span_length, frames - start)` frames.
pub fn sample_mask_spans(frames: usize, mask_prob: f64, span_length: usize, seed: u64) -> Result<MaskSpec> {
    sample_mask_spans_with(frames, mask_prob, span_length, &mut rng_for(seed, "mask", &[]))
}

pub fn sample_mask_spans_with(
    frames: usize,
    mask_prob: f64,
    span_length: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MaskSpec> {
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(Error::InvalidProbability(mask_prob));
    }
    if span_length == 0 {
        return Err(Error::ConfigInvalid("span_length must be positive".into()));
    }
    let mut masked = vec![false; frames];
    for start in 0..frames {
        if rng.random::<f64>() < mask_prob {
            masked[start..frames.min(start + span_length)].iter_mut().for_each(|m| *m = true);
        }
    }
    let masked_indices = masked.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
    Ok(MaskSpec { masked_indices, span_length, mask_prob })
}

/// Sinusoidal position table, `frames x dim`.
pub fn sinusoidal_positions(frames: usize, dim: usize) -> Mat {
    let mut pe = Mat::zeros(frames, dim);
    for t in 0..frames {
        for i in 0..dim {
            let rate = 10_000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let a = t as f64 * rate;
            pe[(t, i)] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    pe
}

const PER_LAYER: usize = 16;
const GLOBAL: usize = 3;

#[derive(Clone, Copy)]
struct LayerParams {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl LayerParams {
    fn from_slice(v: &[Var]) -> Self {
        Self {
            ln1_g: v[0],
            ln1_b: v[1],
            wq: v[2],
            bq: v[3],
            wk: v[4],
            bk: v[5],
            wv: v[6],
            bv: v[7],
            wo: v[8],
            bo: v[9],
            ln2_g: v[10],
            ln2_b: v[11],
            w1: v[12],
            b1: v[13],
            w2: v[14],
            b2: v[15],
        }
    }
}

/// Pre-LayerNorm transformer encoder over frame features.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

/// Encoder parameters placed on a graph.
#[derive(Clone)]
pub struct BoundEncoder {
    vars: Vec<Var>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, "encoder-init", &[]);
        let (d, ff) = (config.model_dim, config.ff_dim);
        let mut p = ParamStore::new();
        p.push("in_proj.w", glorot(&mut rng, config.input_dim, d));
        p.push("in_proj.b", Mat::zeros(1, d));
        p.push("mask_emb", uniform(&mut rng, 1, d, 1.0));
        for l in 0..config.n_layers {
            let n = |s: &str| format!("layer{l}.{s}");
            p.push(n("ln1.g"), Mat::filled(1, d, 1.0));
            p.push(n("ln1.b"), Mat::zeros(1, d));
            for w in ["q", "k", "v", "o"] {
                p.push(n(&format!("w{w}")), glorot(&mut rng, d, d));
                p.push(n(&format!("b{w}")), Mat::zeros(1, d));
            }
            p.push(n("ln2.g"), Mat::filled(1, d, 1.0));
            p.push(n("ln2.b"), Mat::zeros(1, d));
            p.push(n("ff.w1"), glorot(&mut rng, d, ff));
            p.push(n("ff.b1"), Mat::zeros(1, ff));
            p.push(n("ff.w2"), glorot(&mut rng, ff, d));
            p.push(n("ff.b2"), Mat::zeros(1, d));
        }
        debug_assert_eq!(p.len(), GLOBAL + PER_LAYER * config.n_layers);
        Ok(Self { config, params: p })
    }

    pub fn bind(&self, g: &mut Graph, group: usize) -> BoundEncoder {
        BoundEncoder { vars: self.params.bind(g, group) }
    }

    /// Hidden states after layers `1..=depth`, in order.
    ///
    /// Masked rows of the projected input are replaced by the mask
    /// embedding before the first layer. `dropout_rng` enables dropout.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &BoundEncoder,
        features: &Mat,
        mask: Option<&MaskSpec>,
        depth: usize,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        let frames = features.rows();
        if frames == 0 {
            return Err(Error::EmptySequence);
        }
        if features.cols() != self.config.input_dim {
            return Err(Error::InputDimMismatch { expected: self.config.input_dim, found: features.cols() });
        }
        if let Some(m) = mask {
            m.validate(frames)?;
        }
        let v = &bound.vars;
        let x = g.input(features.clone());
        let mut h = g.matmul(x, v[0]);
        h = g.add_row(h, v[1]);
        if let Some(m) = mask.filter(|m| !m.is_empty()) {
            h = g.replace_rows(h, &m.masked_indices, v[2]);
        }
        let pe = g.input(sinusoidal_positions(frames, self.config.model_dim));
        h = g.add(h, pe);

        let d = self.config.model_dim;
        let heads = self.config.n_heads;
        let hd = d / heads;
        let p_drop = self.config.dropout;
        let mut outputs = Vec::with_capacity(depth);
        for l in 0..depth.min(self.config.n_layers) {
            let lp = LayerParams::from_slice(&v[GLOBAL + l * PER_LAYER..GLOBAL + (l + 1) * PER_LAYER]);
            let a = g.layer_norm(h, lp.ln1_g, lp.ln1_b);
            let q = linear(g, a, lp.wq, lp.bq);
            let k = linear(g, a, lp.wk, lp.bk);
            let val = linear(g, a, lp.wv, lp.bv);
            let mut head_out = Vec::with_capacity(heads);
            for hh in 0..heads {
                let qh = g.slice_cols(q, hh * hd, hd);
                let kh = g.slice_cols(k, hh * hd, hd);
                let vh = g.slice_cols(val, hh * hd, hd);
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
                let attn = g.softmax(scores);
                head_out.push(g.matmul(attn, vh));
            }
            let cat = if heads == 1 { head_out[0] } else { g.concat_cols(&head_out) };
            let mut att = linear(g, cat, lp.wo, lp.bo);
            if let Some(rng) = dropout_rng.as_deref_mut().filter(|_| p_drop > 0.0) {
                att = apply_dropout(g, att, p_drop, rng);
            }
            h = g.add(h, att);
            let b = g.layer_norm(h, lp.ln2_g, lp.ln2_b);
            let f = linear(g, b, lp.w1, lp.b1);
            let f = g.gelu(f);
            let mut f = linear(g, f, lp.w2, lp.b2);
            if let Some(rng) = dropout_rng.as_deref_mut().filter(|_| p_drop > 0.0) {
                f = apply_dropout(g, f, p_drop, rng);
            }
            h = g.add(h, f);
            outputs.push(h);
        }
        Ok(outputs)
    }

    /// Hidden states (`T x model_dim`) of the tapped layer, inference mode.
    pub fn forward_with_tap(&self, features: &Mat, tap: LayerTap, mask: Option<&MaskSpec>) -> Result<Mat> {
        let layer = tap.resolve(self.config.n_layers)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, 0);
        let outs = self.forward_graph(&mut g, &bound, features, mask, layer, None)?;
        Ok(g.value(outs[layer - 1]).clone())
    }

    /// Restores an encoder from a checkpoint, requiring `expected`'s
    /// architecture.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: &EncoderConfig) -> Result<Self> {
        if !ckpt.config.same_architecture(expected) {
            return Err(Error::IncompatibleConfig(format!(
                "checkpoint encoder {:?} vs requested {:?}",
                ckpt.config, expected
            )));
        }
        let stored = ckpt.group(ENCODER_GROUP).ok_or_else(|| Error::CorruptCheckpoint("no encoder weights".into()))?;
        let mut enc = Encoder::new(expected.clone())?;
        load_matching(&mut enc.params, stored)?;
        Ok(enc)
    }
}

/// Copies tensors from `src` into `dst`, requiring identical names and shapes.
pub fn load_matching(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    if dst.names() != src.names() {
        return Err(Error::IncompatibleConfig("parameter names differ".into()));
    }
    for i in 0..dst.len() {
        if dst.get(i).shape() != src.get(i).shape() {
            return Err(Error::IncompatibleConfig(format!(
                "parameter {} has shape {:?}, expected {:?}",
                dst.names()[i],
                src.get(i).shape(),
                dst.get(i).shape()
            )));
        }
        *dst.get_mut(i) = src.get(i).clone();
    }
    Ok(())
}

pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn apply_dropout(g: &mut Graph, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Var {
    let (r, c) = g.value(x).shape();
    let keep = Mat::from_vec(r, c, (0..r * c).map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 }).collect());
    g.dropout(x, &keep, p)
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageTag {
    Stage1,
    Stage2,
    Stage3,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Stage1 => "stage1",
            StageTag::Stage2 => "stage2",
            StageTag::Stage3 => "stage3",
        }
    }
}

impl FromStr for StageTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(StageTag::Stage1),
            "stage2" => Ok(StageTag::Stage2),
            "stage3" => Ok(StageTag::Stage3),
            other => Err(Error::CorruptCheckpoint(format!("unknown stage tag {other:?}"))),
        }
    }
}

pub const ENCODER_GROUP: &str = "encoder";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub stage: StageTag,
    /// Named parameter groups; always contains [`ENCODER_GROUP`].
    pub groups: Vec<(String, ParamStore)>,
    pub metadata: BTreeMap<String, String>,
}

const CKPT_MAGIC: &[u8; 4] = b"CKP1";

impl Checkpoint {
    pub fn new(encoder: &Encoder, stage: StageTag) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("seed".into(), encoder.config.seed.to_string());
        metadata.insert("step".into(), "0".into());
        Self {
            config: encoder.config.clone(),
            stage,
            groups: vec![(ENCODER_GROUP.to_string(), encoder.params.clone())],
            metadata,
        }
    }

    pub fn with_group(mut self, name: &str, params: &ParamStore) -> Self {
        self.groups.push((name.to_string(), params.clone()));
        self
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn group(&self, name: &str) -> Option<&ParamStore> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::from_checkpoint(self, &self.config)
    }

    /// Binary weight blob; its SHA-256 is the checkpoint's content hash.
    pub fn weights_blob(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut buf, self.groups.len() as u32);
        for (name, store) in &self.groups {
            put_str(&mut buf, name);
            put_u32(&mut buf, store.len() as u32);
            for (pname, m) in store.iter() {
                put_str(&mut buf, pname);
                put_u32(&mut buf, m.rows() as u32);
                put_u32(&mut buf, m.cols() as u32);
                for v in m.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        buf
    }

    pub fn content_hash(&self) -> String {
        short_hash(&self.weights_blob())
    }
}

pub fn metadata_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the weight blob at `path` and `key=value` metadata at
/// `<path>.meta`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let blob = ckpt.weights_blob();
    let mut meta = ckpt.metadata.clone();
    meta.insert("stage_tag".into(), ckpt.stage.as_str().into());
    for (k, v) in ckpt.config.to_pairs() {
        meta.insert(k, v);
    }
    meta.insert("config_hash".into(), ckpt.config.config_hash());
    meta.insert("weights_sha256".into(), sha256_hex(&blob));
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
    let mp = metadata_path(path);
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}

pub fn read_metadata(path: &Path) -> Result<BTreeMap<String, String>> {
    let mp = metadata_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let mut meta = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::CorruptCheckpoint(format!("bad metadata line {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    Ok(meta)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut meta = read_metadata(path)?;
    let corrupt = |m: &str| Error::CorruptCheckpoint(format!("{}: {m}", path.display()));
    if meta.get("weights_sha256").map(String::as_str) != Some(sha256_hex(&blob).as_str()) {
        return Err(corrupt("weights do not match recorded sha256"));
    }
    let config = EncoderConfig::from_metadata(&meta)?;
    if meta.get("config_hash") != Some(&config.config_hash()) {
        return Err(corrupt("config_hash does not match config fields"));
    }
    let stage: StageTag = meta.get("stage_tag").ok_or_else(|| corrupt("missing stage_tag"))?.parse()?;
    let groups = parse_blob(&blob).ok_or_else(|| corrupt("malformed weight blob"))?;
    for key in ["stage_tag", "config_hash", "weights_sha256"] {
        meta.remove(key);
    }
    for (k, _) in config.to_pairs() {
        meta.remove(&k);
    }
    Ok(Checkpoint { config, stage, groups, metadata: meta })
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

fn parse_blob(bytes: &[u8]) -> Option<Vec<(String, ParamStore)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return None;
    }
    let n_groups = r.u32()?;
    let mut groups = Vec::new();
    for _ in 0..n_groups {
        let name = r.string()?;
        let n = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let pname = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows.checked_mul(cols)?.checked_mul(8)?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            store.push(pname, Mat::from_vec(rows, cols, data));
        }
        groups.push((name, store));
    }
    (r.pos == bytes.len()).then_some(groups)
}
