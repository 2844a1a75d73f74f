//! Reference archive: mean-pooled slide embeddings with exact cosine lookup.
//!
//! File layout (little-endian):
//!
//! ```text
//! "PNAR" | u32 version=1 | u32 d | u64 count
//! per case: u16 id_len | id (UTF-8) | d x f32 | u32 summary_len | summary (UTF-8)
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};
use crate::search::cosine;
use crate::types::FeatureStream;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"PNAR";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveCase {
    pub embedding: Vec<f32>,
    pub summary_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveIndex {
    d: usize,
    cases: BTreeMap<String, ArchiveCase>,
}

/// Mean of all tile features, accumulated in f64.
pub fn slide_embedding(stream: &FeatureStream) -> Result<Vec<f64>> {
    if stream.tiles.is_empty() {
        return Err(NavError::Empty("feature stream"));
    }
    let mut sum = vec![0.0f64; stream.d];
    for t in &stream.tiles {
        if t.feature.len() != stream.d {
            return Err(NavError::DimensionMismatch { expected: stream.d, got: t.feature.len() });
        }
        for (s, &v) in sum.iter_mut().zip(&t.feature) {
            *s += f64::from(v);
        }
    }
    let n = stream.tiles.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

impl ArchiveIndex {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(NavError::InvalidArgument("archive dimension must be positive".into()));
        }
        Ok(Self { d, cases: BTreeMap::new() })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn version(&self) -> u32 {
        ARCHIVE_VERSION
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn get(&self, slide_id: &str) -> Option<&ArchiveCase> {
        self.cases.get(slide_id)
    }

    pub fn cases(&self) -> impl Iterator<Item = (&String, &ArchiveCase)> {
        self.cases.iter()
    }

    /// Stores the embedding as f32.
    pub fn add_case(&mut self, slide_id: &str, embedding: &[f64], summary_text: &str) -> Result<()> {
        let embedding: Vec<f32> = embedding.iter().map(|&v| v as f32).collect();
        self.add_case_f32(slide_id, embedding, summary_text)
    }

    pub fn add_case_f32(&mut self, slide_id: &str, embedding: Vec<f32>, summary_text: &str) -> Result<()> {
        if embedding.len() != self.d {
            return Err(NavError::DimensionMismatch { expected: self.d, got: embedding.len() });
        }
        if slide_id.len() > usize::from(u16::MAX) {
            return Err(NavError::InvalidArgument("slide id longer than 65535 bytes".into()));
        }
        if self.cases.contains_key(slide_id) {
            return Err(NavError::DuplicateCase(slide_id.to_string()));
        }
        self.cases.insert(
            slide_id.to_string(),
            ArchiveCase { embedding, summary_text: summary_text.to_string() },
        );
        Ok(())
    }

    /// Exact cosine top-`k`, descending, ties by ascending slide id.
    pub fn retrieve(&self, query: &[f64], k: usize, exclude_id: Option<&str>) -> Result<Vec<(String, f64)>> {
        if query.len() != self.d {
            return Err(NavError::DimensionMismatch { expected: self.d, got: query.len() });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let q: Vec<f32> = query.iter().map(|&v| v as f32).collect();
        let mut hits: Vec<(String, f64)> = self
            .cases
            .iter()
            .filter(|(id, _)| Some(id.as_str()) != exclude_id)
            .map(|(id, c)| (id.clone(), cosine(&q, &c.embedding)))
            .collect();
        // BTreeMap iteration is already id-ascending, so a stable sort keeps ties ordered.
        hits.sort_by(|a, b| b.1.total_cmp(&a.1));
        hits.truncate(k);
        Ok(hits)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_u32::<LittleEndian>(ARCHIVE_VERSION)?;
        w.write_u32::<LittleEndian>(self.d as u32)?;
        w.write_u64::<LittleEndian>(self.cases.len() as u64)?;
        for (id, case) in &self.cases {
            w.write_u16::<LittleEndian>(id.len() as u16)?;
            w.write_all(id.as_bytes())?;
            for &v in &case.embedding {
                w.write_f32::<LittleEndian>(v)?;
            }
            let summary = case.summary_text.as_bytes();
            let len = u32::try_from(summary.len())
                .map_err(|_| NavError::Format(format!("summary for `{id}` is too long")))?;
            w.write_u32::<LittleEndian>(len)?;
            w.write_all(summary)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(NavError::Format(format!("bad archive magic {magic:02x?}")));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != ARCHIVE_VERSION {
            return Err(NavError::Format(format!("unsupported archive version {version}")));
        }
        let d = r.read_u32::<LittleEndian>()? as usize;
        let count = r.read_u64::<LittleEndian>()?;
        let mut index = Self::new(d)?;
        for _ in 0..count {
            let id_len = r.read_u16::<LittleEndian>()? as usize;
            let id = read_utf8(&mut r, id_len)?;
            let mut embedding = vec![0f32; d];
            r.read_f32_into::<LittleEndian>(&mut embedding)?;
            let summary_len = r.read_u32::<LittleEndian>()? as usize;
            let summary = read_utf8(&mut r, summary_len)?;
            index.add_case_f32(&id, embedding, &summary)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(NavError::Format("trailing bytes after last archive case".into()));
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }
}

fn read_utf8<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| NavError::Format(format!("invalid UTF-8 in archive: {e}")))
}
