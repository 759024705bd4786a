//! Binary draw files and sampler checkpoints.
//!
//! Draw file layout: 8-byte magic, `u32` version, `u64` header length, the JSON header,
//! its SHA-256, then the payload. The payload stores each chain's columns contiguously
//! (parameters first, then functionals) as little-endian `f64`, so one column can be
//! read with a single seek. The header records the payload digest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelContext;
use crate::sampler::{ChainCheckpoint, ChainTrace, PosteriorDraws, SamplerConfig};

pub const DRAWS_MAGIC: &[u8; 8] = b"SMXDRAWS";
pub const DRAWS_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMXCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChainHeader {
    chain: usize,
    n_draws: usize,
    iterations: Vec<usize>,
    acceptance: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DrawsHeader {
    param_names: Vec<String>,
    functional_names: Vec<String>,
    context: ModelContext,
    config: SamplerConfig,
    chains: Vec<ChainHeader>,
    payload_sha256: String,
}

impl DrawsHeader {
    fn n_columns(&self) -> usize {
        self.param_names.len() + self.functional_names.len()
    }

    /// Payload offset (in values) of `column` for `chain`.
    fn column_offset(&self, chain: usize, column: usize) -> usize {
        let before: usize = self.chains[..chain].iter().map(|c| c.n_draws).sum();
        before * self.n_columns() + column * self.chains[chain].n_draws
    }
}

fn write_container(path: &Path, magic: &[u8; 8], version: u32, header: &[u8], payload: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)?;
    w.write_all(&Sha256::digest(header))?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Reads and verifies magic, version, and header; leaves the reader at the payload.
fn read_header<R: Read>(r: &mut R, magic: &[u8; 8], expected: u32) -> Result<(Vec<u8>, u64)> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)
        .map_err(|_| Error::Format("file too short".into()))?;
    if &m != magic {
        return Err(Error::Format("unrecognized file type".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != expected {
        return Err(Error::Version {
            found: version,
            expected,
        });
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    let mut header = vec![0u8; usize::try_from(len).map_err(|_| Error::Format("header too large".into()))?];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)
        .map_err(|_| Error::Format("truncated header digest".into()))?;
    if Sha256::digest(&header).as_slice() != digest {
        return Err(Error::Checksum("header digest does not match".into()));
    }
    Ok((header, 8 + 4 + 8 + len + 32))
}

fn f64s_to_bytes(values: impl Iterator<Item = f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

pub fn save_draws(draws: &PosteriorDraws, path: &Path) -> Result<()> {
    let np = draws.param_names.len();
    let nf = draws.functional_names.len();
    let mut payload = Vec::new();
    for c in &draws.chains {
        if c.params.iter().any(|p| p.len() != np) || c.functionals.iter().any(|f| f.len() != nf) {
            return Err(Error::InvalidArgument(format!(
                "chain {} has draws of the wrong width",
                c.chain
            )));
        }
        if c.functionals.len() != c.params.len() || c.iterations.len() != c.params.len() {
            return Err(Error::InvalidArgument(format!(
                "chain {} has mismatched draw counts",
                c.chain
            )));
        }
        for k in 0..np {
            f64s_to_bytes(c.params.iter().map(|p| p[k]), &mut payload);
        }
        for k in 0..nf {
            f64s_to_bytes(c.functionals.iter().map(|f| f[k]), &mut payload);
        }
    }
    let header = DrawsHeader {
        param_names: draws.param_names.clone(),
        functional_names: draws.functional_names.clone(),
        context: draws.context.clone(),
        config: draws.config.clone(),
        chains: draws
            .chains
            .iter()
            .map(|c| ChainHeader {
                chain: c.chain,
                n_draws: c.params.len(),
                iterations: c.iterations.clone(),
                acceptance: c.acceptance.clone(),
            })
            .collect(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    write_container(
        path,
        DRAWS_MAGIC,
        DRAWS_VERSION,
        &serde_json::to_vec(&header)?,
        &payload,
    )
}

fn parse_draws_header(bytes: &[u8]) -> Result<DrawsHeader> {
    let mut h: DrawsHeader = serde_json::from_slice(bytes)?;
    h.context.hier.rebuild_index();
    Ok(h)
}

pub fn load_draws(path: &Path) -> Result<PosteriorDraws> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, _) = read_header(&mut r, DRAWS_MAGIC, DRAWS_VERSION)?;
    let h = parse_draws_header(&header)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if hex::encode(Sha256::digest(&payload)) != h.payload_sha256 {
        return Err(Error::Checksum(format!("payload of {} is corrupted", path.display())));
    }
    let values = bytes_to_f64s(&payload);
    let ncol = h.n_columns();
    let expected: usize = h.chains.iter().map(|c| c.n_draws * ncol).sum();
    if values.len() != expected || payload.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "payload has {} values, expected {expected}",
            values.len()
        )));
    }
    let np = h.param_names.len();
    let chains = h
        .chains
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            let col = |k: usize| {
                let start = h.column_offset(ci, k);
                &values[start..start + c.n_draws]
            };
            let row = |d: usize, range: std::ops::Range<usize>| range.map(|k| col(k)[d]).collect::<Vec<f64>>();
            ChainTrace {
                chain: c.chain,
                iterations: c.iterations.clone(),
                params: (0..c.n_draws).map(|d| row(d, 0..np)).collect(),
                functionals: (0..c.n_draws).map(|d| row(d, np..ncol)).collect(),
                acceptance: c.acceptance.clone(),
            }
        })
        .collect();
    Ok(PosteriorDraws {
        param_names: h.param_names,
        functional_names: h.functional_names,
        context: h.context,
        config: h.config,
        chains,
    })
}

/// Reads one functional's per-chain traces without loading the other columns. The header
/// is verified; the payload digest is not (that needs the whole payload).
pub fn read_functional_column(path: &Path, name: &str) -> Result<Vec<Vec<f64>>> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, start) = read_header(&mut r, DRAWS_MAGIC, DRAWS_VERSION)?;
    let h = parse_draws_header(&header)?;
    let k = h
        .functional_names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::Lookup(format!("no functional named '{name}'")))?;
    let column = h.param_names.len() + k;
    let mut out = Vec::with_capacity(h.chains.len());
    for (ci, c) in h.chains.iter().enumerate() {
        r.seek(SeekFrom::Start(start + 8 * h.column_offset(ci, column) as u64))?;
        let mut buf = vec![0u8; 8 * c.n_draws];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated payload".into()))?;
        out.push(bytes_to_f64s(&buf));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, checkpoint: &ChainCheckpoint) -> Result<()> {
    let body = serde_json::to_vec(checkpoint)?;
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &body, &[])
}

pub fn read_checkpoint(path: &Path) -> Result<ChainCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let (body, _) = read_header(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    Ok(serde_json::from_slice(&body)?)
}
