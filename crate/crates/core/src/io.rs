//! `.hhckpt` checkpoint files and statistics documents.
//!
//! A checkpoint is one line of JSON header terminated by `\n`, followed by
//! the payload:
//!
//! ```text
//! {"version":1,"dtype":"f32","kind":"ffn","layers":[...],"tensors":[{"name":"ffn.0.U","rows":768,"cols":3072,"byte_offset":0}, ...]}\n
//! <payload>
//! ```
//!
//! `byte_offset` counts from the first payload byte. Tensors are stored
//! back to back in header order with no gaps. A plain tensor is
//! `rows·cols` little-endian `f32` values, row-major. A quantized tensor
//! carries `"dtype":"q<bits>g<group>"` plus `bits` and `group_size`; its
//! payload is the packed codes (`rows · ceil(cols·bits/8)` bytes, LSB-first,
//! rows padded to a byte boundary), then `rows·ceil(cols/group)` scales and
//! the same number of zero-points, both as little-endian `f32`.
//!
//! Tensor names: `ffn.<l>.U` / `ffn.<l>.V` for dense layers; `ffn.<l>.U1`,
//! `ffn.<l>.V1` and `ffn.<l>.U2`, `ffn.<l>.V2` (or `ffn.<l>.U2.left`,
//! `.U2.right`, `.V2.left`, `.V2.right` for low-rank tails) for split
//! layers; `calib.<b>` for calibration batches. Quantized weights are stored
//! output-major, i.e. as the transpose of the matrix applied as `x · W`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn::{Activation, FfnLayer, HeavyHitterSet, SplitFfn, TailForm, WeightForm};
use crate::linalg::{DenseMatrix, LowRankFactors};
use crate::profiler::NeuronStats;
use crate::quant::QuantizedMatrix;

pub const FORMAT_VERSION: u32 = 1;
pub const FILE_EXTENSION: &str = "hhckpt";

/// Contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Dense(Vec<FfnLayer>),
    Split(Vec<SplitFfn>),
    Calibration(Vec<DenseMatrix>),
}

impl Checkpoint {
    pub fn kind(&self) -> Kind {
        match self {
            Checkpoint::Dense(_) => Kind::Ffn,
            Checkpoint::Split(_) => Kind::Split,
            Checkpoint::Calibration(_) => Kind::Calib,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Ffn,
    Split,
    Calib,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    kind: Kind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    layers: Vec<LayerMeta>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerMeta {
    index: usize,
    d: usize,
    d_ff: usize,
    activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    heavy_hitters: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dtype: Option<String>,
    rows: usize,
    cols: usize,
    byte_offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bits: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group_size: Option<usize>,
}

impl TensorEntry {
    fn quant_params(&self) -> Option<(u8, usize)> {
        self.bits.zip(self.group_size)
    }

    fn byte_len(&self) -> Option<u64> {
        let n = self.rows.checked_mul(self.cols)?;
        match self.quant_params() {
            None => (n as u64).checked_mul(4),
            Some((bits, group)) => {
                let bpr = self.cols.checked_mul(bits as usize)?.div_ceil(8);
                let groups = self.rows.checked_mul(self.cols.div_ceil(group.max(1)))?;
                let packed = self.rows.checked_mul(bpr)? as u64;
                packed.checked_add((groups as u64).checked_mul(8)?)
            }
        }
    }
}

struct Writer {
    tensors: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self {
            tensors: Vec::new(),
            payload: Vec::new(),
        }
    }

    fn push_f32s(&mut self, values: &[f32]) {
        for v in values {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn dense(&mut self, name: String, m: &DenseMatrix) {
        self.tensors.push(TensorEntry {
            name,
            dtype: None,
            rows: m.rows(),
            cols: m.cols(),
            byte_offset: self.payload.len() as u64,
            bits: None,
            group_size: None,
        });
        self.push_f32s(m.data());
    }

    fn quantized(&mut self, name: String, q: &QuantizedMatrix) {
        self.tensors.push(TensorEntry {
            name,
            dtype: Some(format!("q{}g{}", q.bits(), q.group_size())),
            rows: q.rows(),
            cols: q.cols(),
            byte_offset: self.payload.len() as u64,
            bits: Some(q.bits()),
            group_size: Some(q.group_size()),
        });
        self.payload.extend_from_slice(q.packed());
        self.push_f32s(q.scales());
        self.push_f32s(q.zeros());
    }

    fn weight(&mut self, name: String, w: &WeightForm) -> &'static str {
        match w {
            WeightForm::Dense(m) => {
                self.dense(name, m);
                "dense"
            }
            WeightForm::Quantized(q) => {
                self.quantized(name, q);
                "quantized"
            }
        }
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    let mut layers = Vec::new();
    match ckpt {
        Checkpoint::Dense(ls) => {
            for (l, layer) in ls.iter().enumerate() {
                w.dense(format!("ffn.{l}.U"), layer.up());
                w.dense(format!("ffn.{l}.V"), layer.down());
                layers.push(LayerMeta {
                    index: l,
                    d: layer.d(),
                    d_ff: layer.d_ff(),
                    activation: layer.activation(),
                    heavy_hitters: None,
                    head: None,
                    tail: None,
                });
            }
        }
        Checkpoint::Split(ss) => {
            for (l, s) in ss.iter().enumerate() {
                let head = w.weight(format!("ffn.{l}.U1"), s.head_up());
                let head_down = w.weight(format!("ffn.{l}.V1"), s.head_down());
                if head != head_down {
                    return Err(Error::Range(format!(
                        "layer {l}: heavy-hitter weights must share one storage form"
                    )));
                }
                match s.tail() {
                    TailForm::Dense { up, down } => {
                        w.dense(format!("ffn.{l}.U2"), up);
                        w.dense(format!("ffn.{l}.V2"), down);
                    }
                    TailForm::LowRank { up, down } => {
                        w.dense(format!("ffn.{l}.U2.left"), up.left());
                        w.dense(format!("ffn.{l}.U2.right"), up.right());
                        w.dense(format!("ffn.{l}.V2.left"), down.left());
                        w.dense(format!("ffn.{l}.V2.right"), down.right());
                    }
                    TailForm::Quantized { up, down } => {
                        w.quantized(format!("ffn.{l}.U2"), up);
                        w.quantized(format!("ffn.{l}.V2"), down);
                    }
                }
                layers.push(LayerMeta {
                    index: l,
                    d: s.d(),
                    d_ff: s.original_dff(),
                    activation: Activation::Gelu,
                    heavy_hitters: Some(s.heavy_hitters().indices().to_vec()),
                    head: Some(head.to_string()),
                    tail: Some(s.tail().kind().to_string()),
                });
            }
        }
        Checkpoint::Calibration(batches) => {
            for (b, x) in batches.iter().enumerate() {
                w.dense(format!("calib.{b}"), x);
            }
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        dtype: "f32".into(),
        kind: ckpt.kind(),
        layers,
        tensors: w.tensors,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&w.payload);
    Ok(out)
}

struct Reader<'a> {
    payload: &'a [u8],
    base: u64,
    entries: HashMap<String, (TensorEntry, bool)>,
}

impl<'a> Reader<'a> {
    fn entry(&mut self, name: &str) -> Result<TensorEntry> {
        match self.entries.get_mut(name) {
            Some((e, used)) => {
                *used = true;
                Ok(e.clone())
            }
            None => Err(Error::format(self.base, format!("missing tensor {name}"))),
        }
    }

    fn f32s(&self, at: usize, n: usize) -> Vec<f32> {
        self.payload[at..at + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    }

    fn dense(&mut self, name: &str) -> Result<DenseMatrix> {
        let e = self.entry(name)?;
        if e.quant_params().is_some() {
            return Err(Error::format(self.base, format!("tensor {name} must be f32")));
        }
        let data = self.f32s(e.byte_offset as usize, e.rows * e.cols);
        DenseMatrix::new(e.rows, e.cols, data)
    }

    fn quantized(&mut self, name: &str) -> Result<QuantizedMatrix> {
        let e = self.entry(name)?;
        let (bits, group) = e
            .quant_params()
            .ok_or_else(|| Error::format(self.base, format!("tensor {name} must be quantized")))?;
        let start = e.byte_offset as usize;
        let packed_len = e.rows * (e.cols * bits as usize).div_ceil(8);
        let groups = e.rows * e.cols.div_ceil(group);
        let packed = self.payload[start..start + packed_len].to_vec();
        let scales = self.f32s(start + packed_len, groups);
        let zeros = self.f32s(start + packed_len + 4 * groups, groups);
        QuantizedMatrix::from_parts(e.rows, e.cols, bits, group, packed, scales, zeros).map_err(|err| match err {
            Error::Format { offset, msg } => {
                Error::format(self.base + e.byte_offset + offset, format!("{name}: {msg}"))
            }
            other => other,
        })
    }

    fn weight(&mut self, name: &str, form: Option<&str>) -> Result<WeightForm> {
        match form {
            Some("dense") => Ok(WeightForm::Dense(self.dense(name)?)),
            Some("quantized") => Ok(WeightForm::Quantized(self.quantized(name)?)),
            other => Err(Error::format(
                self.base,
                format!("unknown weight form {other:?} for {name}"),
            )),
        }
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(bytes.len() as u64, "header is not terminated by a newline"))?;
    let header: Header = serde_json::from_slice(&bytes[..end])
        .map_err(|e| Error::format(e.column().saturating_sub(1) as u64, format!("malformed header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::format(0, format!("unsupported version {}", header.version)));
    }
    if header.dtype != "f32" {
        return Err(Error::format(0, format!("unsupported dtype {:?}", header.dtype)));
    }
    Ok((header, end + 1))
}

fn valid_name(kind: Kind, name: &str) -> bool {
    let parts: Vec<&str> = name.split('.').collect();
    let numeric = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    match (kind, parts.as_slice()) {
        (Kind::Calib, ["calib", b]) => numeric(b),
        (Kind::Ffn, ["ffn", l, "U" | "V"]) => numeric(l),
        (Kind::Split, ["ffn", l, "U1" | "V1" | "U2" | "V2"]) => numeric(l),
        (Kind::Split, ["ffn", l, "U2" | "V2", "left" | "right"]) => numeric(l),
        _ => false,
    }
}

/// Parses and validates a checkpoint.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, start) = parse_header(bytes)?;
    let base = start as u64;
    let payload = &bytes[start..];

    let mut entries = HashMap::new();
    let mut expected = 0u64;
    for e in &header.tensors {
        if !valid_name(header.kind, &e.name) {
            return Err(Error::format(0, format!("unexpected tensor name {:?}", e.name)));
        }
        if let Some(dtype) = &e.dtype {
            let want = e.quant_params().map(|(b, g)| format!("q{b}g{g}"));
            if want.as_deref() != Some(dtype.as_str()) {
                return Err(Error::format(
                    0,
                    format!("tensor {}: dtype {dtype:?} disagrees with its parameters", e.name),
                ));
            }
            let (bits, group) = e.quant_params().expect("checked above");
            crate::quant::check_params(bits, group)
                .map_err(|err| Error::format(0, format!("tensor {}: {err}", e.name)))?;
        } else if e.bits.is_some() || e.group_size.is_some() {
            return Err(Error::format(
                0,
                format!("tensor {}: quantization fields without a dtype tag", e.name),
            ));
        }
        if e.byte_offset < expected {
            return Err(Error::format(
                base + e.byte_offset,
                format!(
                    "tensor {} overlaps the previous tensor (previous ends at payload byte {expected})",
                    e.name
                ),
            ));
        }
        if e.byte_offset > expected {
            return Err(Error::format(
                base + expected,
                format!(
                    "gap before tensor {} (expected payload offset {expected}, got {})",
                    e.name, e.byte_offset
                ),
            ));
        }
        let len = e
            .byte_len()
            .ok_or_else(|| Error::format(0, format!("tensor {} is too large", e.name)))?;
        expected += len;
        if entries.insert(e.name.clone(), (e.clone(), false)).is_some() {
            return Err(Error::format(0, format!("duplicate tensor name {}", e.name)));
        }
    }
    let have = payload.len() as u64;
    if have < expected {
        return Err(Error::format(
            base + have,
            format!("truncated payload: {expected} bytes declared, {have} present"),
        ));
    }
    if have > expected {
        return Err(Error::format(
            base + expected,
            format!("{} trailing bytes after the last tensor", have - expected),
        ));
    }

    let mut rd = Reader { payload, base, entries };
    let ckpt = match header.kind {
        Kind::Calib => {
            if !header.layers.is_empty() {
                return Err(Error::format(0, "calibration files carry no layer metadata"));
            }
            let batches = (0..header.tensors.len())
                .map(|b| rd.dense(&format!("calib.{b}")))
                .collect::<Result<Vec<_>>>()?;
            Checkpoint::Calibration(batches)
        }
        Kind::Ffn => {
            let mut layers = Vec::new();
            for (l, meta) in header.layers.iter().enumerate() {
                check_meta(meta, l)?;
                let layer = FfnLayer::new(rd.dense(&format!("ffn.{l}.U"))?, rd.dense(&format!("ffn.{l}.V"))?)?;
                if (layer.d(), layer.d_ff()) != (meta.d, meta.d_ff) {
                    return Err(Error::format(
                        0,
                        format!("layer {l}: weights disagree with declared shape"),
                    ));
                }
                layers.push(layer);
            }
            Checkpoint::Dense(layers)
        }
        Kind::Split => {
            let mut splits = Vec::new();
            for (l, meta) in header.layers.iter().enumerate() {
                check_meta(meta, l)?;
                splits.push(read_split(&mut rd, meta, l)?);
            }
            Checkpoint::Split(splits)
        }
    };
    if let Some((name, _)) = rd.entries.iter().find(|(_, (_, used))| !used) {
        return Err(Error::format(
            0,
            format!("tensor {name} is not referenced by any layer"),
        ));
    }
    Ok(ckpt)
}

fn check_meta(meta: &LayerMeta, l: usize) -> Result<()> {
    if meta.index != l {
        return Err(Error::format(
            0,
            format!("layer entry {l} declares index {}", meta.index),
        ));
    }
    Ok(())
}

fn read_split(rd: &mut Reader<'_>, meta: &LayerMeta, l: usize) -> Result<SplitFfn> {
    let hh = meta
        .heavy_hitters
        .clone()
        .ok_or_else(|| Error::format(0, format!("layer {l}: missing heavy_hitters")))?;
    if hh.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::format(
            0,
            format!("layer {l}: heavy_hitters must be strictly ascending"),
        ));
    }
    let hh = HeavyHitterSet::new(l, hh, meta.d_ff).map_err(|e| Error::format(0, format!("layer {l}: {e}")))?;
    let head_form = meta.head.as_deref();
    let head_up = rd.weight(&format!("ffn.{l}.U1"), head_form)?;
    let head_down = rd.weight(&format!("ffn.{l}.V1"), head_form)?;
    let tail = match meta.tail.as_deref() {
        Some("dense") => TailForm::Dense {
            up: rd.dense(&format!("ffn.{l}.U2"))?,
            down: rd.dense(&format!("ffn.{l}.V2"))?,
        },
        Some("lowrank") => TailForm::LowRank {
            up: LowRankFactors::new(
                rd.dense(&format!("ffn.{l}.U2.left"))?,
                rd.dense(&format!("ffn.{l}.U2.right"))?,
            )?,
            down: LowRankFactors::new(
                rd.dense(&format!("ffn.{l}.V2.left"))?,
                rd.dense(&format!("ffn.{l}.V2.right"))?,
            )?,
        },
        Some("quantized") => TailForm::Quantized {
            up: rd.quantized(&format!("ffn.{l}.U2"))?,
            down: rd.quantized(&format!("ffn.{l}.V2"))?,
        },
        other => return Err(Error::format(0, format!("layer {l}: unknown tail form {other:?}"))),
    };
    let s = SplitFfn::from_parts(head_up, head_down, tail, hh, meta.d_ff)?;
    if s.d() != meta.d {
        return Err(Error::format(
            0,
            format!("layer {l}: weights disagree with declared d={}", meta.d),
        ));
    }
    Ok(s)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

/// Writes per-layer statistics as a JSON array of versioned documents.
pub fn save_stats(path: impl AsRef<Path>, stats: &[NeuronStats]) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(stats)?)?;
    Ok(())
}

/// Reads statistics written by [`save_stats`]; a single document is also
/// accepted.
pub fn load_stats(path: impl AsRef<Path>) -> Result<Vec<NeuronStats>> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let stats: Vec<NeuronStats> = if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    };
    for s in &stats {
        s.validate()?;
    }
    Ok(stats)
}
