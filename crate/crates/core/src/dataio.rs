//! Study/corpus types and the `LMTR` binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header   "LMTR" | version u32 | dim u32 | grid height u32 | grid width u32 | study count u32
//! study    id_len u32 | id bytes (UTF-8) | flags u8 | n_tokens u32
//!          frontal  f32[cells * dim]
//!          lateral  f32[cells * dim]        (flags bit 0)
//!          tokens   f32[n_tokens * dim]
//!          mask     u8[n_tokens]            (0 or 1)
//!          label    i32                     (-1 = none)
//!          n_ground u32, then per record:
//!            x0 u32 | y0 u32 | x1 u32 | y1 u32 | n_idx u32 | idx u32[n_idx]
//! ```
//!
//! A sibling `<file>.json` manifest carries the split tag and a SHA-256 of the
//! container bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkit::FeatureMatrix;
use crate::posenc::{GridBox, GridShape};

pub const MAGIC: &[u8; 4] = b"LMTR";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TOKEN_CAP: usize = 97;

const FLAG_LATERAL: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    pub bbox: GridBox,
    pub tokens: Vec<usize>,
}

/// One image/report pair in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub id: String,
    pub frontal: FeatureMatrix,
    pub lateral: Option<FeatureMatrix>,
    pub tokens: FeatureMatrix,
    pub token_mask: Vec<bool>,
    pub grid: GridShape,
    pub label: Option<i32>,
    pub grounding: Vec<Grounding>,
}

impl Study {
    pub fn dim(&self) -> usize {
        self.frontal.dim()
    }

    pub fn validate(&self, token_cap: usize) -> Result<()> {
        let bad = |reason: String| Error::InvalidStudy {
            id: self.id.clone(),
            reason,
        };
        let d = self.frontal.dim();
        let cells = self.grid.cells();
        if cells == 0 || d == 0 {
            return Err(bad("empty grid or zero dim".into()));
        }
        if self.frontal.rows() != cells {
            return Err(bad(format!("frontal has {} rows, grid has {cells} cells", self.frontal.rows())));
        }
        if let Some(l) = &self.lateral {
            if l.rows() != cells || l.dim() != d {
                return Err(bad("lateral shape differs from frontal".into()));
            }
        }
        if self.tokens.dim() != d {
            return Err(bad(format!("token dim {} != region dim {d}", self.tokens.dim())));
        }
        let n_w = self.tokens.rows();
        if n_w > token_cap {
            return Err(bad(format!("{n_w} tokens exceed cap {token_cap}")));
        }
        if self.token_mask.len() != n_w {
            return Err(bad("token mask length differs from token count".into()));
        }
        for g in &self.grounding {
            if !g.bbox.within(self.grid) {
                return Err(bad(format!("grounding box {:?} outside grid", g.bbox)));
            }
            if g.tokens.is_empty() {
                return Err(bad("grounding record without tokens".into()));
            }
            for &j in &g.tokens {
                if j >= n_w || !self.token_mask[j] {
                    return Err(bad(format!("phrase token {j} missing or masked")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub studies: Vec<Study>,
    pub dim: usize,
    pub grid: GridShape,
    pub split: Split,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        if self.studies.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for s in &self.studies {
            if s.dim() != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    found: s.dim(),
                });
            }
            if s.grid != self.grid {
                return Err(Error::shape(format!("study `{}` grid differs from corpus grid", s.id)));
            }
            s.validate(DEFAULT_TOKEN_CAP)?;
        }
        Ok(())
    }

    pub fn lateral_count(&self) -> usize {
        self.studies.iter().filter(|s| s.lateral.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub studies: usize,
    pub with_lateral: usize,
    pub tokens: usize,
    pub grounding: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub id: String,
    pub split: Split,
    pub counts: ManifestCounts,
    pub checksum: String,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Malformed(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_matrix(buf: &mut Vec<u8>, m: &FeatureMatrix, what: &str) -> Result<()> {
    for &v in m.as_slice() {
        if !v.is_finite() {
            return Err(Error::NonFinite(what.into()));
        }
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

/// Serializes a validated corpus. Values are narrowed to `f32`.
pub fn encode_corpus(corpus: &Corpus) -> Result<Vec<u8>> {
    corpus.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut buf, corpus.dim)?;
    put_u32(&mut buf, corpus.grid.height)?;
    put_u32(&mut buf, corpus.grid.width)?;
    put_u32(&mut buf, corpus.studies.len())?;
    for s in &corpus.studies {
        put_u32(&mut buf, s.id.len())?;
        buf.extend_from_slice(s.id.as_bytes());
        buf.push(if s.lateral.is_some() { FLAG_LATERAL } else { 0 });
        put_u32(&mut buf, s.tokens.rows())?;
        put_matrix(&mut buf, &s.frontal, "frontal features")?;
        if let Some(l) = &s.lateral {
            put_matrix(&mut buf, l, "lateral features")?;
        }
        put_matrix(&mut buf, &s.tokens, "token features")?;
        buf.extend(s.token_mask.iter().map(|&m| m as u8));
        buf.extend_from_slice(&s.label.unwrap_or(-1).to_le_bytes());
        put_u32(&mut buf, s.grounding.len())?;
        for g in &s.grounding {
            for v in [g.bbox.x0, g.bbox.y0, g.bbox.x1, g.bbox.y1, g.tokens.len()] {
                put_u32(&mut buf, v)?;
            }
            for &j in &g.tokens {
                put_u32(&mut buf, j)?;
            }
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// Checks the byte budget before allocating.
    fn matrix(&mut self, rows: usize, dim: usize) -> Result<FeatureMatrix> {
        let n = rows.checked_mul(dim).ok_or(Error::Truncated)?;
        let bytes = n.checked_mul(4).ok_or(Error::Truncated)?;
        if bytes > self.remaining() {
            return Err(Error::Truncated);
        }
        let raw = self.take(bytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        FeatureMatrix::new(rows, dim, data)
    }
}

/// Parses container bytes; the split tag comes from the manifest.
pub fn decode_corpus(bytes: &[u8], split: Split) -> Result<Corpus> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.remaining() < 4 {
        return Err(Error::Truncated);
    }
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let dim = r.usize()?;
    let grid = GridShape::new(r.usize()?, r.usize()?);
    let count = r.usize()?;
    let cells = grid.cells();
    // Smallest possible study: id_len, flags, n_tokens, frontal, label, n_ground.
    let min_study = 4 + 1 + 4 + cells.saturating_mul(dim).saturating_mul(4) + 4 + 4;
    if count.saturating_mul(min_study) > r.remaining() {
        return Err(Error::Truncated);
    }
    let mut studies = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = r.usize()?;
        let id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| Error::Malformed("study id is not UTF-8".into()))?;
        let flags = r.u8()?;
        if flags & !FLAG_LATERAL != 0 {
            return Err(Error::Malformed(format!("unknown flags {flags:#04x} in `{id}`")));
        }
        let n_tokens = r.usize()?;
        let frontal = r.matrix(cells, dim)?;
        let lateral = if flags & FLAG_LATERAL != 0 {
            Some(r.matrix(cells, dim)?)
        } else {
            None
        };
        let tokens = r.matrix(n_tokens, dim)?;
        let token_mask = r
            .take(n_tokens)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::Malformed(format!("mask byte {b}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let label = match r.i32()? {
            -1 => None,
            l => Some(l),
        };
        let n_ground = r.usize()?;
        if n_ground.saturating_mul(20) > r.remaining() {
            return Err(Error::Truncated);
        }
        let mut grounding = Vec::with_capacity(n_ground);
        for _ in 0..n_ground {
            let bbox = GridBox::new(r.usize()?, r.usize()?, r.usize()?, r.usize()?);
            let n_idx = r.usize()?;
            if n_idx.saturating_mul(4) > r.remaining() {
                return Err(Error::Truncated);
            }
            let tokens = (0..n_idx).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            grounding.push(Grounding { bbox, tokens });
        }
        studies.push(Study {
            id,
            frontal,
            lateral,
            tokens,
            token_mask,
            grid,
            label,
            grounding,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    let corpus = Corpus {
        studies,
        dim,
        grid,
        split,
    };
    corpus.validate()?;
    Ok(corpus)
}

pub fn manifest_for(corpus: &Corpus, id: &str, bytes: &[u8]) -> Manifest {
    Manifest {
        id: id.to_string(),
        split: corpus.split,
        counts: ManifestCounts {
            studies: corpus.studies.len(),
            with_lateral: corpus.lateral_count(),
            tokens: corpus
                .studies
                .iter()
                .map(|s| s.token_mask.iter().filter(|&&m| m).count())
                .sum(),
            grounding: corpus.studies.iter().map(|s| s.grounding.len()).sum(),
        },
        checksum: format!("sha256:{}", sha256_hex(bytes)),
    }
}

/// Writes `path` and its manifest `path.json`. Returns the manifest.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<Manifest> {
    let bytes = encode_corpus(corpus)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    let manifest = manifest_for(corpus, &id, &bytes);
    fs::write(path, &bytes)?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::Manifest {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: mpath,
        reason: e.to_string(),
    })
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let manifest = read_manifest(path)?;
    let bytes = fs::read(path)?;
    let corpus = decode_corpus(&bytes, manifest.split)?;
    let found = format!("sha256:{}", sha256_hex(&bytes));
    if found != manifest.checksum {
        return Err(Error::ChecksumMismatch {
            expected: manifest.checksum,
            found,
        });
    }
    Ok(corpus)
}
