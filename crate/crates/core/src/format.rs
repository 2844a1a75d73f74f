//! On-disk formats for tile features and relevance inputs. Little-endian.
//!
//! Feature file:
//!
//! ```text
//! "PNAV" | u32 version=1 | u8 level | u32 d | u64 count
//!        | f64 slide_diag_level0 | f64 tile_stride_level0
//! per tile: u32 grid_x | u32 grid_y | u64 level0_x | u64 level0_y | d x f32
//! ```
//!
//! Patch embeddings: `u32 dim | u64 count | count x (u32 tile_index | dim x f32)`.
//! Question embedding: `u32 dim | dim x f32`. Scores: CSV `tile_index,score`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{NavError, Result};
use crate::types::{FeatureStream, Level, TileRecord};

pub const FEATURE_MAGIC: &[u8; 4] = b"PNAV";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_features<W: Write>(stream: &FeatureStream, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    w.write_all(FEATURE_MAGIC)?;
    w.write_u32::<LittleEndian>(FEATURE_VERSION)?;
    w.write_u8(stream.level.code())?;
    w.write_u32::<LittleEndian>(stream.d as u32)?;
    w.write_u64::<LittleEndian>(stream.tiles.len() as u64)?;
    w.write_f64::<LittleEndian>(stream.slide_diag_level0)?;
    w.write_f64::<LittleEndian>(stream.tile_stride_level0)?;
    for (i, t) in stream.tiles.iter().enumerate() {
        if t.feature.len() != stream.d {
            return Err(NavError::Format(format!(
                "tile {i} has {} values, header declares d = {}",
                t.feature.len(),
                stream.d
            )));
        }
        w.write_u32::<LittleEndian>(t.grid_x)?;
        w.write_u32::<LittleEndian>(t.grid_y)?;
        w.write_u64::<LittleEndian>(t.level0_x)?;
        w.write_u64::<LittleEndian>(t.level0_y)?;
        for &v in &t.feature {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature file. The slide id is not stored in the file and must be
/// supplied by the caller (usually the file stem).
pub fn read_features<R: Read>(r: R, slide_id: &str) -> Result<FeatureStream> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(NavError::Format(format!("bad feature magic {magic:02x?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FEATURE_VERSION {
        return Err(NavError::Format(format!("unsupported feature version {version}")));
    }
    let level_code = r.read_u8()?;
    let level = Level::from_code(level_code)
        .ok_or_else(|| NavError::Format(format!("unknown level code {level_code}")))?;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u64::<LittleEndian>()? as usize;
    let slide_diag_level0 = r.read_f64::<LittleEndian>()?;
    let tile_stride_level0 = r.read_f64::<LittleEndian>()?;
    let mut tiles = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let grid_x = r.read_u32::<LittleEndian>()?;
        let grid_y = r.read_u32::<LittleEndian>()?;
        let level0_x = r.read_u64::<LittleEndian>()?;
        let level0_y = r.read_u64::<LittleEndian>()?;
        let mut feature = vec![0f32; d];
        r.read_f32_into::<LittleEndian>(&mut feature)?;
        tiles.push(TileRecord {
            grid_x,
            grid_y,
            level0_x,
            level0_y,
            feature,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(NavError::Format("trailing bytes after last tile".into()));
    }
    Ok(FeatureStream {
        slide_id: slide_id.to_string(),
        level,
        d,
        slide_diag_level0,
        tile_stride_level0,
        tiles,
    })
}

pub fn save_features(stream: &FeatureStream, path: impl AsRef<Path>) -> Result<()> {
    write_features(stream, File::create(path)?)
}

/// Loads a feature file, using the file stem as the slide id.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureStream> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_features(File::open(path)?, &id)
}

pub fn write_patch_embeddings<W: Write>(emb: &BTreeMap<usize, Vec<f32>>, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    let dim = emb.values().next().map_or(0, Vec::len);
    w.write_u32::<LittleEndian>(dim as u32)?;
    w.write_u64::<LittleEndian>(emb.len() as u64)?;
    for (&idx, v) in emb {
        if v.len() != dim {
            return Err(NavError::DimensionMismatch { expected: dim, got: v.len() });
        }
        w.write_u32::<LittleEndian>(idx as u32)?;
        for &x in v {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_patch_embeddings<R: Read>(r: R) -> Result<BTreeMap<usize, Vec<f32>>> {
    let mut r = BufReader::new(r);
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u64::<LittleEndian>()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let idx = r.read_u32::<LittleEndian>()? as usize;
        let mut v = vec![0f32; dim];
        r.read_f32_into::<LittleEndian>(&mut v)?;
        if out.insert(idx, v).is_some() {
            return Err(NavError::Format(format!("tile {idx} embedded twice")));
        }
    }
    Ok(out)
}

pub fn write_question_embedding<W: Write>(v: &[f32], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    w.write_u32::<LittleEndian>(v.len() as u32)?;
    for &x in v {
        w.write_f32::<LittleEndian>(x)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_question_embedding<R: Read>(r: R) -> Result<Vec<f32>> {
    let mut r = BufReader::new(r);
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let mut v = vec![0f32; dim];
    r.read_f32_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

pub fn write_scores_csv<W: Write>(scores: &BTreeMap<usize, f64>, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["tile_index", "score"])?;
    for (idx, s) in scores {
        wtr.write_record([idx.to_string(), s.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads `tile_index,score` rows; a header row is optional.
pub fn read_scores_csv<R: Read>(r: R) -> Result<BTreeMap<usize, f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut out = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(NavError::Format(format!("line {}: expected 2 fields", line + 1)));
        }
        let idx = match rec[0].parse::<usize>() {
            Ok(i) => i,
            Err(_) if line == 0 => continue,
            Err(_) => {
                return Err(NavError::Format(format!("line {}: bad tile index `{}`", line + 1, &rec[0])))
            }
        };
        let score: f64 = rec[1]
            .parse()
            .map_err(|_| NavError::Format(format!("line {}: bad score `{}`", line + 1, &rec[1])))?;
        out.insert(idx, score);
    }
    Ok(out)
}
