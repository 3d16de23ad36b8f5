//! The `.kvqt` attention-trace format and a seeded synthetic trace generator.
//!
//! Byte layout, all little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "KVQT"
//!      4     2  version (u16, currently 1)
//!      6     1  rope_layout (0 = interleaved, 1 = half-split)
//!      7     1  reserved, must be 0
//!      8     4  num_layers (u32)
//!     12     4  num_q_heads (u32)
//!     16     4  num_kv_heads (u32)
//!     20     4  head_dim (u32)
//!     24     4  prompt_len (u32)
//!     28     4  decode_len (u32)
//!     32     8  rope_theta (f64)
//!     40     8  seed (u64, 0 for captured traces)
//!     48     4  flags (u32)
//!     52        prompt position ids   u32 x prompt_len
//!               decode position ids   u32 x decode_len
//!               prompt token ids      u32 x prompt_len
//!               then for each layer:
//!                 keys            f32 [num_kv_heads][prompt_len][head_dim]
//!                 queries         f32 [num_q_heads][prompt_len][head_dim]
//!                 decode queries  f32 [num_q_heads][decode_len][head_dim]
//! ```
//!
//! Queries and keys are stored before rotary embedding so they can be
//! re-rotated to arbitrary positions.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid_config, Error, Result};
use crate::layer::LayerData;
use crate::rope::{half_split_to_interleaved, PositionId, RopeConfig};
use crate::tensor::{l2_norm, Matrix};

pub const MAGIC: [u8; 4] = *b"KVQT";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 52;
pub const FILE_EXTENSION: &str = "kvqt";

/// Set when the exporter recovered pre-rotation tensors by inverting the
/// rotation of post-rotation captures.
pub const FLAG_DEROTATED: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RopeLayout {
    #[default]
    Interleaved,
    HalfSplit,
}

impl RopeLayout {
    fn code(self) -> u8 {
        match self {
            RopeLayout::Interleaved => 0,
            RopeLayout::HalfSplit => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(RopeLayout::Interleaved),
            1 => Some(RopeLayout::HalfSplit),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceHeader {
    pub version: u16,
    pub num_layers: u32,
    pub num_q_heads: u32,
    pub num_kv_heads: u32,
    pub head_dim: u32,
    pub prompt_len: u32,
    pub decode_len: u32,
    pub rope_theta: f64,
    pub rope_layout: RopeLayout,
    pub seed: u64,
    pub flags: u32,
}

impl TraceHeader {
    fn check(&self) -> std::result::Result<(), String> {
        if self.num_layers == 0 || self.num_q_heads == 0 || self.num_kv_heads == 0 {
            return Err("layer and head counts must be positive".into());
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(format!(
                "num_q_heads {} not divisible by num_kv_heads {}",
                self.num_q_heads, self.num_kv_heads
            ));
        }
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(format!("head_dim {} must be even and positive", self.head_dim));
        }
        if self.prompt_len == 0 {
            return Err("prompt_len must be positive".into());
        }
        if !(self.rope_theta > 1.0 && self.rope_theta.is_finite()) {
            return Err(format!("rope_theta {} must be finite and > 1", self.rope_theta));
        }
        Ok(())
    }

    fn key_len(&self) -> usize {
        self.num_kv_heads as usize * self.prompt_len as usize * self.head_dim as usize
    }

    fn query_len(&self) -> usize {
        self.num_q_heads as usize * self.prompt_len as usize * self.head_dim as usize
    }

    fn decode_query_len(&self) -> usize {
        self.num_q_heads as usize * self.decode_len as usize * self.head_dim as usize
    }

    /// Total encoded size, or `None` if it overflows `u64`.
    pub fn encoded_len(&self) -> Option<u64> {
        let (lp, dec) = (self.prompt_len as u64, self.decode_len as u64);
        let ids = (2 * lp).checked_add(dec)?.checked_mul(4)?;
        let per_layer = (self.num_kv_heads as u64 * lp)
            .checked_add(self.num_q_heads as u64 * lp)?
            .checked_add(self.num_q_heads as u64 * dec)?
            .checked_mul(self.head_dim as u64)?
            .checked_mul(4)?;
        (HEADER_LEN as u64)
            .checked_add(ids)?
            .checked_add(per_layer.checked_mul(self.num_layers as u64)?)
    }

    pub fn rope_config(&self) -> RopeConfig {
        RopeConfig::new(self.head_dim as usize).with_theta(self.rope_theta)
    }
}

/// Raw `f32` tensors of one layer, laid out as on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors {
    pub keys: Vec<f32>,
    pub queries: Vec<f32>,
    pub decode_queries: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub header: TraceHeader,
    pub prompt_positions: Vec<u32>,
    pub decode_positions: Vec<u32>,
    pub token_ids: Vec<u32>,
    pub layers: Vec<LayerTensors>,
}

impl AttentionTrace {
    /// Checks array lengths against the header and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        h.check().map_err(Error::InvalidTrace)?;
        if h.version == 0 || h.version > FORMAT_VERSION {
            return Err(Error::InvalidTrace(format!("version {} cannot be written", h.version)));
        }
        let bad = |what: &str, got: usize, want: usize| {
            Error::InvalidTrace(format!("{what}: {got} values, header implies {want}"))
        };
        let (lp, dec) = (h.prompt_len as usize, h.decode_len as usize);
        if self.prompt_positions.len() != lp {
            return Err(bad("prompt positions", self.prompt_positions.len(), lp));
        }
        if self.decode_positions.len() != dec {
            return Err(bad("decode positions", self.decode_positions.len(), dec));
        }
        if self.token_ids.len() != lp {
            return Err(bad("token ids", self.token_ids.len(), lp));
        }
        if self.layers.len() != h.num_layers as usize {
            return Err(bad("layers", self.layers.len(), h.num_layers as usize));
        }
        for (l, t) in self.layers.iter().enumerate() {
            for (name, data, want) in [
                ("keys", &t.keys, h.key_len()),
                ("queries", &t.queries, h.query_len()),
                ("decode queries", &t.decode_queries, h.decode_query_len()),
            ] {
                if data.len() != want {
                    return Err(bad(&format!("layer {l} {name}"), data.len(), want));
                }
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidTrace(format!("layer {l} {name} has non-finite values")));
                }
            }
        }
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        self.header.prompt_len as usize
    }

    pub fn num_layers(&self) -> usize {
        self.header.num_layers as usize
    }

    /// Layer `l` widened to `f64` and converted to interleaved layout.
    pub fn layer(&self, l: usize) -> Result<LayerData> {
        let h = &self.header;
        let t = self
            .layers
            .get(l)
            .ok_or_else(|| Error::InvalidInput(format!("layer {l} out of range")))?;
        let d = h.head_dim as usize;
        let split = |data: &[f32], heads: u32, rows: usize| -> Result<Vec<Matrix>> {
            let per_head = rows * d;
            (0..heads as usize)
                .map(|hd| {
                    let chunk = data
                        .get(hd * per_head..(hd + 1) * per_head)
                        .ok_or_else(|| Error::InvalidTrace(format!("layer {l} arrays too short")))?;
                    let mut wide: Vec<f64> = chunk.iter().map(|&v| v as f64).collect();
                    if h.rope_layout == RopeLayout::HalfSplit {
                        wide = wide.chunks(d).flat_map(half_split_to_interleaved).collect();
                    }
                    Matrix::new(rows, d, wide)
                })
                .collect()
        };
        let (lp, dec) = (h.prompt_len as usize, h.decode_len as usize);
        let data = LayerData {
            layer: l,
            rope: h.rope_config(),
            keys: split(&t.keys, h.num_kv_heads, lp)?,
            queries: split(&t.queries, h.num_q_heads, lp)?,
            decode_queries: split(&t.decode_queries, h.num_q_heads, dec)?,
            prompt_positions: self.prompt_positions.iter().map(|&p| PositionId(p as u64)).collect(),
            decode_positions: self.decode_positions.iter().map(|&p| PositionId(p as u64)).collect(),
            token_ids: self.token_ids.clone(),
        };
        data.validate()?;
        Ok(data)
    }
}

/// Serializes `t`, returning the number of bytes written.
pub fn write_trace<W: Write>(t: &AttentionTrace, sink: &mut W) -> Result<u64> {
    t.validate()?;
    let bytes = encode(t);
    sink.write_all(&bytes)?;
    Ok(bytes.len() as u64)
}

fn encode(t: &AttentionTrace) -> Vec<u8> {
    let h = &t.header;
    let mut out = Vec::with_capacity(h.encoded_len().unwrap_or(0) as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&h.version.to_le_bytes());
    out.push(h.rope_layout.code());
    out.push(0);
    for v in [h.num_layers, h.num_q_heads, h.num_kv_heads, h.head_dim, h.prompt_len, h.decode_len] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&h.rope_theta.to_le_bytes());
    out.extend_from_slice(&h.seed.to_le_bytes());
    out.extend_from_slice(&h.flags.to_le_bytes());
    for v in t.prompt_positions.iter().chain(&t.decode_positions).chain(&t.token_ids) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for layer in &t.layers {
        for v in layer.keys.iter().chain(&layer.queries).chain(&layer.decode_queries) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reads a whole trace from `source`.
pub fn read_trace<R: Read>(source: &mut R) -> Result<AttentionTrace> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    decode_trace(&buf)
}

/// Decodes a trace from an in-memory buffer. Never returns a partial trace.
pub fn decode_trace(bytes: &[u8]) -> Result<AttentionTrace> {
    let magic_seen = &bytes[..bytes.len().min(4)];
    if magic_seen != &MAGIC[..magic_seen.len()] {
        return Err(Error::NotATrace);
    }
    let mut cur = Cursor { bytes, pos: 0 };
    cur.take(4)?;
    let version = u16::from_le_bytes(cur.array()?);
    if version == 0 {
        return Err(Error::CorruptTrace("version 0".into()));
    }
    if version > FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let layout_code = cur.u8()?;
    let rope_layout = RopeLayout::from_code(layout_code)
        .ok_or_else(|| Error::CorruptTrace(format!("unknown rope layout {layout_code}")))?;
    if cur.u8()? != 0 {
        return Err(Error::CorruptTrace("reserved header byte is non-zero".into()));
    }
    let header = TraceHeader {
        version,
        rope_layout,
        num_layers: cur.u32()?,
        num_q_heads: cur.u32()?,
        num_kv_heads: cur.u32()?,
        head_dim: cur.u32()?,
        prompt_len: cur.u32()?,
        decode_len: cur.u32()?,
        rope_theta: f64::from_le_bytes(cur.array()?),
        seed: u64::from_le_bytes(cur.array()?),
        flags: cur.u32()?,
    };
    header.check().map_err(Error::CorruptTrace)?;
    let expected = header
        .encoded_len()
        .ok_or_else(|| Error::CorruptTrace("header dimensions overflow".into()))?;
    if (bytes.len() as u64) < expected {
        return Err(Error::CorruptTrace(format!(
            "truncated: {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    if (bytes.len() as u64) > expected {
        return Err(Error::CorruptTrace(format!(
            "{} trailing bytes",
            bytes.len() as u64 - expected
        )));
    }

    let (lp, dec) = (header.prompt_len as usize, header.decode_len as usize);
    let prompt_positions = cur.u32s(lp)?;
    let decode_positions = cur.u32s(dec)?;
    let token_ids = cur.u32s(lp)?;
    let mut layers = Vec::with_capacity(header.num_layers as usize);
    for l in 0..header.num_layers {
        let keys = cur.f32s(header.key_len())?;
        let queries = cur.f32s(header.query_len())?;
        let decode_queries = cur.f32s(header.decode_query_len())?;
        if keys.iter().chain(&queries).chain(&decode_queries).any(|v| !v.is_finite()) {
            return Err(Error::CorruptTrace(format!("layer {l} contains non-finite values")));
        }
        layers.push(LayerTensors {
            keys,
            queries,
            decode_queries,
        });
    }
    Ok(AttentionTrace {
        header,
        prompt_positions,
        decode_positions,
        token_ids,
        layers,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptTrace(format!("truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Shape of a synthetic trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticShape {
    pub num_layers: u32,
    pub num_q_heads: u32,
    pub num_kv_heads: u32,
    pub head_dim: u32,
    pub prompt_len: u32,
    pub decode_len: u32,
    pub rope_theta: f64,
}

impl Default for SyntheticShape {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_q_heads: 4,
            num_kv_heads: 2,
            head_dim: 32,
            prompt_len: 512,
            decode_len: 32,
            rope_theta: 10_000.0,
        }
    }
}

const SYNTH_VOCAB: usize = 512;
const SYNTH_MIN_MODEL_DIM: usize = 16;

/// Generates a trace from a random-weight toy attention layer.
///
/// Token embeddings mix a seeded vocabulary table with an autoregressive
/// context state. Each head projects embeddings through its own Gaussian
/// matrix and adds a fixed bias whose energy is skewed toward the
/// low-frequency rotary pairs, so distinct tokens share a common query
/// direction. Decode queries come from driving the last prompt embedding
/// forward with fresh Gaussian perturbations.
pub fn generate_synthetic_trace(shape: &SyntheticShape, seed: u64) -> Result<AttentionTrace> {
    let header = TraceHeader {
        version: FORMAT_VERSION,
        num_layers: shape.num_layers,
        num_q_heads: shape.num_q_heads,
        num_kv_heads: shape.num_kv_heads,
        head_dim: shape.head_dim,
        prompt_len: shape.prompt_len,
        decode_len: shape.decode_len,
        rope_theta: shape.rope_theta,
        rope_layout: RopeLayout::Interleaved,
        seed,
        flags: 0,
    };
    header.check().map_err(invalid_config)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = shape.head_dim as usize;
    let dm = d.max(SYNTH_MIN_MODEL_DIM);
    let (lp, dec) = (shape.prompt_len as usize, shape.decode_len as usize);

    let vocab = gaussian(&mut rng, SYNTH_VOCAB * dm, 1.0);
    let mut token_ids = Vec::with_capacity(lp);
    token_ids.push(1u32);
    token_ids.extend((1..lp).map(|_| rng.random_range(4..SYNTH_VOCAB as u32)));

    let mut embeddings = Vec::with_capacity((lp + dec) * dm);
    let mut ctx = vec![0.0; dm];
    for &tok in &token_ids {
        let row = &vocab[tok as usize * dm..(tok as usize + 1) * dm];
        for (c, v) in ctx.iter_mut().zip(row) {
            let n: f64 = rng.sample(StandardNormal);
            *c = 0.8 * *c + 0.6 * n;
            embeddings.push(0.8 * v + 0.6 * *c);
        }
    }
    let mut state = embeddings[(lp - 1) * dm..lp * dm].to_vec();
    for _ in 0..dec {
        for s in state.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *s = 0.8 * *s + 0.6 * n;
        }
        embeddings.extend_from_slice(&state);
    }

    let mut layers = Vec::with_capacity(shape.num_layers as usize);
    for _ in 0..shape.num_layers {
        let kv_proj: Vec<Projection> = (0..shape.num_kv_heads)
            .map(|_| Projection::sample(&mut rng, dm, d, 1.0))
            .collect();
        let q_proj: Vec<Projection> = (0..shape.num_q_heads)
            .map(|_| Projection::sample(&mut rng, dm, d, 2.0))
            .collect();
        let mut keys = Vec::with_capacity(header.key_len());
        for p in &kv_proj {
            p.project_rows(&embeddings[..lp * dm], &mut keys);
        }
        let mut queries = Vec::with_capacity(header.query_len());
        for p in &q_proj {
            p.project_rows(&embeddings[..lp * dm], &mut queries);
        }
        let mut decode_queries = Vec::with_capacity(header.decode_query_len());
        for p in &q_proj {
            p.project_rows(&embeddings[lp * dm..], &mut decode_queries);
        }
        layers.push(LayerTensors {
            keys,
            queries,
            decode_queries,
        });
    }

    let trace = AttentionTrace {
        header,
        prompt_positions: (0..shape.prompt_len).collect(),
        decode_positions: (shape.prompt_len..shape.prompt_len + shape.decode_len).collect(),
        token_ids,
        layers,
    };
    trace.validate()?;
    Ok(trace)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

struct Projection {
    weight: Vec<f64>,
    bias: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl Projection {
    /// `bias_energy` is the bias squared norm relative to `out_dim`.
    fn sample(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, bias_energy: f64) -> Self {
        let weight = gaussian(rng, in_dim * out_dim, 1.0 / (in_dim as f64).sqrt());
        let pairs = out_dim / 2;
        let mut bias: Vec<f64> = (0..out_dim)
            .map(|i| {
                let n: f64 = rng.sample(StandardNormal);
                n * ((i / 2 + 1) as f64 / pairs as f64)
            })
            .collect();
        let norm = l2_norm(&bias).max(f64::MIN_POSITIVE);
        let target = (bias_energy * out_dim as f64).sqrt();
        for b in &mut bias {
            *b *= target / norm;
        }
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    fn project_rows(&self, rows: &[f64], out: &mut Vec<f32>) {
        for e in rows.chunks_exact(self.in_dim) {
            for o in 0..self.out_dim {
                let mut acc = self.bias[o];
                for (i, x) in e.iter().enumerate() {
                    acc += x * self.weight[i * self.out_dim + o];
                }
                out.push(acc as f32);
            }
        }
    }
}
