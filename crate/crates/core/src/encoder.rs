//! Hashed bag-of-embeddings text encoder with mean pooling.
//!
//! A text of `L` token ids is represented by the mean of its `L` table rows.
//! The encoder is linear in the table, so its adjoint simply scatters
//! `upstream / L` back to each token occurrence.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::trainer::AdamState;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("cannot encode an empty token sequence")]
    EmptySequence,
    #[error("token id {id} out of range for {buckets} buckets")]
    TokenOutOfRange { id: TokenId, buckets: usize },
    #[error("invalid encoder shape: {0}")]
    InvalidShape(String),
    #[error("upstream gradient has length {got}, expected {expected}")]
    UpstreamLength { got: usize, expected: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Row `v` of the `V x d` table embeds hash bucket `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    table: Vec<f64>,
    dim: usize,
    buckets: usize,
}

impl EncoderParams {
    pub fn from_table(table: Vec<f64>, buckets: usize, dim: usize) -> Result<Self, EncoderError> {
        if dim < 2 || buckets == 0 {
            return Err(EncoderError::InvalidShape(format!(
                "V={buckets} d={dim} (need V >= 1, d >= 2)"
            )));
        }
        if table.len() != buckets * dim {
            return Err(EncoderError::InvalidShape(format!(
                "table has {} entries, expected {}",
                table.len(),
                buckets * dim
            )));
        }
        if table.iter().any(|x| !x.is_finite()) {
            return Err(EncoderError::InvalidShape("non-finite table entry".into()));
        }
        Ok(Self {
            table,
            dim,
            buckets,
        })
    }

    pub fn zeros(buckets: usize, dim: usize) -> Result<Self, EncoderError> {
        Self::from_table(vec![0.0; buckets * dim], buckets, dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    pub fn row(&self, bucket: usize) -> &[f64] {
        &self.table[bucket * self.dim..(bucket + 1) * self.dim]
    }

    pub fn row_mut(&mut self, bucket: usize) -> &mut [f64] {
        &mut self.table[bucket * self.dim..(bucket + 1) * self.dim]
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), EncoderError> {
        if tokens.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.buckets) {
            return Err(EncoderError::TokenOutOfRange {
                id,
                buckets: self.buckets,
            });
        }
        Ok(())
    }
}

/// Entries i.i.d. uniform in `[-scale, scale]`, drawn row-major.
pub fn init_params<R: Rng + ?Sized>(
    buckets: usize,
    dim: usize,
    scale: f64,
    rng: &mut R,
) -> Result<EncoderParams, EncoderError> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(EncoderError::InvalidShape(format!("init scale {scale}")));
    }
    let table = (0..buckets * dim)
        .map(|_| {
            if scale == 0.0 {
                0.0
            } else {
                rng.gen_range(-scale..=scale)
            }
        })
        .collect();
    EncoderParams::from_table(table, buckets, dim)
}

/// Mean of the embedding rows of `tokens`.
pub fn encode(params: &EncoderParams, tokens: &[TokenId]) -> Result<Vec<f64>, EncoderError> {
    params.check_tokens(tokens)?;
    let mut out = vec![0.0; params.dim];
    for &t in tokens {
        for (o, x) in out.iter_mut().zip(params.row(t as usize)) {
            *o += x;
        }
    }
    let inv = 1.0 / tokens.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

/// Sparse accumulator for the gradient with respect to the table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradBuffer {
    rows: BTreeMap<usize, Vec<f64>>,
    terms: usize,
}

impl GradBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Number of backward calls accumulated.
    pub fn terms(&self) -> usize {
        self.terms
    }

    pub fn row(&self, bucket: usize) -> Option<&[f64]> {
        self.rows.get(&bucket).map(Vec::as_slice)
    }

    /// Touched buckets in ascending order.
    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(&b, g)| (b, g.as_slice()))
    }

    fn add_scaled(&mut self, bucket: usize, dim: usize, upstream: &[f64], scale: f64) {
        let row = self.rows.entry(bucket).or_insert_with(|| vec![0.0; dim]);
        for (r, u) in row.iter_mut().zip(upstream) {
            *r += u * scale;
        }
    }
}

/// Adjoint of [`encode`]: each token occurrence receives `upstream / L`.
pub fn encode_backward(
    params: &EncoderParams,
    tokens: &[TokenId],
    upstream: &[f64],
    buffer: &mut GradBuffer,
) -> Result<(), EncoderError> {
    params.check_tokens(tokens)?;
    if upstream.len() != params.dim {
        return Err(EncoderError::UpstreamLength {
            got: upstream.len(),
            expected: params.dim,
        });
    }
    buffer.terms += 1;
    if upstream.iter().all(|&u| u == 0.0) {
        return Ok(());
    }
    let scale = 1.0 / tokens.len() as f64;
    for &t in tokens {
        buffer.add_scaled(t as usize, params.dim, upstream, scale);
    }
    Ok(())
}

/// Pooling applied on top of the mean. L2 normalization is off by default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    MeanNormalized,
}

impl Pooling {
    pub fn from_normalize(normalize: bool) -> Self {
        if normalize {
            Pooling::MeanNormalized
        } else {
            Pooling::Mean
        }
    }
}

const NORM_FLOOR: f64 = 1e-12;

pub fn encode_pooled(
    params: &EncoderParams,
    tokens: &[TokenId],
    pooling: Pooling,
) -> Result<Vec<f64>, EncoderError> {
    let mut z = encode(params, tokens)?;
    if pooling == Pooling::MeanNormalized {
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
        z.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(z)
}

/// Adjoint of [`encode_pooled`].
pub fn encode_pooled_backward(
    params: &EncoderParams,
    tokens: &[TokenId],
    pooling: Pooling,
    upstream: &[f64],
    buffer: &mut GradBuffer,
) -> Result<(), EncoderError> {
    match pooling {
        Pooling::Mean => encode_backward(params, tokens, upstream, buffer),
        Pooling::MeanNormalized => {
            let mean = encode(params, tokens)?;
            let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < NORM_FLOOR {
                let scaled: Vec<f64> = upstream.iter().map(|u| u / NORM_FLOOR).collect();
                return encode_backward(params, tokens, &scaled, buffer);
            }
            // d(u/|u|) = (I - u u^T / |u|^2) / |u|
            let unit: Vec<f64> = mean.iter().map(|x| x / norm).collect();
            let proj: f64 = unit.iter().zip(upstream).map(|(a, b)| a * b).sum();
            let through: Vec<f64> = upstream
                .iter()
                .zip(&unit)
                .map(|(g, u)| (g - proj * u) / norm)
                .collect();
            encode_backward(params, tokens, &through, buffer)
        }
    }
}

const MAGIC: &[u8; 4] = b"CNET";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_block(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes parameters (and optionally optimizer state) to the `CNET`
/// binary layout: magic, u32 version, u64 V, u64 d, V*d f64 table, u8
/// optimizer flag, then if set two V*d moment blocks and a u64 step count.
/// All integers and floats little-endian.
pub fn checkpoint_bytes(params: &EncoderParams, optimizer: Option<&AdamState>) -> Vec<u8> {
    let n = params.table.len();
    let extra = optimizer.map_or(0, |_| 16 * n + 8);
    let mut out = Vec::with_capacity(4 + 4 + 16 + 8 * n + 1 + extra);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.buckets as u64).to_le_bytes());
    out.extend_from_slice(&(params.dim as u64).to_le_bytes());
    put_block(&mut out, &params.table);
    match optimizer {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            put_block(&mut out, state.first_moment());
            put_block(&mut out, state.second_moment());
            out.extend_from_slice(&state.step().to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.at))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn block(&mut self, n: usize) -> Result<Vec<f64>, String> {
        let len = n.checked_mul(8).ok_or("block size overflow")?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(EncoderParams, Option<AdamState>), String> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(4)? != MAGIC {
        return Err("bad magic (expected CNET)".into());
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let buckets = usize::try_from(cur.u64()?).map_err(|e| e.to_string())?;
    let dim = usize::try_from(cur.u64()?).map_err(|e| e.to_string())?;
    let n = buckets.checked_mul(dim).ok_or("shape overflow")?;
    let table = cur.block(n)?;
    let params = EncoderParams::from_table(table, buckets, dim).map_err(|e| e.to_string())?;
    let state = match cur.take(1)?[0] {
        0 => None,
        1 => {
            let m = cur.block(n)?;
            let v = cur.block(n)?;
            let t = cur.u64()?;
            Some(AdamState::from_parts(m, v, t).map_err(|e| e.to_string())?)
        }
        flag => return Err(format!("bad optimizer flag {flag}")),
    };
    if cur.at != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - cur.at));
    }
    Ok((params, state))
}

/// Writes a checkpoint via a temporary sibling file and a rename.
pub fn save_checkpoint(
    path: &Path,
    params: &EncoderParams,
    optimizer: Option<&AdamState>,
) -> Result<(), EncoderError> {
    let io = |source| EncoderError::Io {
        path: path.to_owned(),
        source,
    };
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&checkpoint_bytes(params, optimizer))
            .map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams, Option<AdamState>), EncoderError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| EncoderError::Io {
            path: path.to_owned(),
            source,
        })?;
    parse_checkpoint(&bytes).map_err(|message| EncoderError::Checkpoint {
        path: path.to_owned(),
        message,
    })
}
