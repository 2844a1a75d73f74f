//! Low-magnification surprise scan and distance-based NMS pooling.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::error::{NavError, Result};
use crate::memory::{init_memory, MemoryState};
use crate::rng::DeterministicRng;
use crate::types::{validate_stream, FeatureStream, Level};

/// Pools smaller than this (or `k_pool`, if smaller) trigger the widen-to-all pass.
pub const POOL_MIN_SURVIVORS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldEntry {
    pub tile_index: usize,
    pub grid_x: u32,
    pub grid_y: u32,
    pub level0_x: u64,
    pub level0_y: u64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurpriseField {
    /// Scan order (row-major).
    pub entries: Vec<FieldEntry>,
    pub threshold: f64,
    pub memory_final: MemoryState,
    /// The stream was shorter than the warm-up window, so the threshold was
    /// computed from all available scores at the end of the scan.
    pub degenerate: bool,
}

impl SurpriseField {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sigma for every tile, indexed by tile index.
    pub fn sigma_by_tile(&self) -> Vec<f64> {
        let n = self.entries.iter().map(|e| e.tile_index + 1).max().unwrap_or(0);
        let mut out = vec![f64::NAN; n];
        for e in &self.entries {
            out[e.tile_index] = e.sigma;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub roi_id: usize,
    pub tile_index: usize,
    pub level0_x: u64,
    pub level0_y: u64,
    pub sigma: f64,
}

impl Roi {
    pub fn center(&self) -> (f64, f64) {
        (self.level0_x as f64, self.level0_y as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiPool {
    /// Sorted by sigma descending; `roi_id` is the position in this list.
    pub rois: Vec<Roi>,
    pub spacing_used: f64,
    pub pool_budget_used: usize,
    /// True when too few tiles cleared the threshold and the pass was rerun
    /// over every tile.
    pub widened: bool,
}

impl RoiPool {
    pub fn len(&self) -> usize {
        self.rois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois.is_empty()
    }

    pub fn get(&self, roi_id: usize) -> Option<&Roi> {
        self.rois.get(roi_id)
    }
}

/// Streams the low-magnification tiles through a fresh memory.
pub fn scan_slide(
    stream: &FeatureStream,
    cfg: &EngineConfig,
    rng: &DeterministicRng,
) -> Result<SurpriseField> {
    cfg.validate()?;
    if stream.level != Level::Low {
        return Err(NavError::InvalidArgument("scan requires a low-magnification stream".into()));
    }
    if stream.d != cfg.d {
        return Err(NavError::DimensionMismatch { expected: cfg.d, got: stream.d });
    }
    let violations = validate_stream(stream);
    if !violations.is_empty() {
        return Err(NavError::Validation(violations));
    }

    let mut init_rng = rng.clone();
    let mut memory = init_memory(cfg, &mut init_rng);
    let order = stream.row_major_order();
    let steps = memory.observe_f32(order.iter().map(|&i| stream.tiles[i].feature.as_slice()), cfg)?;
    let degenerate = memory.finalize_threshold(cfg.lambda);

    let entries = order
        .iter()
        .zip(&steps)
        .map(|(&i, &(sigma, _))| {
            let t = &stream.tiles[i];
            FieldEntry {
                tile_index: i,
                grid_x: t.grid_x,
                grid_y: t.grid_y,
                level0_x: t.level0_x,
                level0_y: t.level0_y,
                sigma,
            }
        })
        .collect();
    let threshold = memory.threshold().expect("nonempty stream always yields a threshold");
    Ok(SurpriseField {
        entries,
        threshold,
        memory_final: memory,
        degenerate,
    })
}

/// Descending by sigma, ties by ascending tile index.
fn by_sigma_desc(a: &FieldEntry, b: &FieldEntry) -> Ordering {
    b.sigma
        .total_cmp(&a.sigma)
        .then_with(|| a.tile_index.cmp(&b.tile_index))
}

/// Greedy center-distance suppression over an already-ordered candidate list.
///
/// Keeps a candidate iff it is at least `rho` (Euclidean, level-0 pixels)
/// from every center kept so far; stops after `budget` centers.
pub fn greedy_spacing<'a, I>(candidates: I, rho: f64, budget: usize) -> Vec<FieldEntry>
where
    I: IntoIterator<Item = &'a FieldEntry>,
{
    let rho_sq = rho * rho;
    let mut kept: Vec<FieldEntry> = Vec::with_capacity(budget);
    for c in candidates {
        if kept.len() >= budget {
            break;
        }
        let (cx, cy) = (c.level0_x as f64, c.level0_y as f64);
        let clear = kept.iter().all(|k| {
            let (dx, dy) = (k.level0_x as f64 - cx, k.level0_y as f64 - cy);
            dx * dx + dy * dy >= rho_sq
        });
        if clear {
            kept.push(*c);
        }
    }
    kept
}

fn to_pool(kept: Vec<FieldEntry>, rho: f64, k_pool: usize, widened: bool) -> RoiPool {
    RoiPool {
        rois: kept
            .into_iter()
            .enumerate()
            .map(|(roi_id, e)| Roi {
                roi_id,
                tile_index: e.tile_index,
                level0_x: e.level0_x,
                level0_y: e.level0_y,
                sigma: e.sigma,
            })
            .collect(),
        spacing_used: rho,
        pool_budget_used: k_pool,
        widened,
    }
}

/// Threshold, then distance-based NMS, with a widen-to-all fallback when
/// fewer than `min(k_pool, 5)` centers survive.
pub fn nms_pool(field: &SurpriseField, rho: f64, k_pool: usize) -> Result<RoiPool> {
    if field.entries.is_empty() {
        return Err(NavError::Empty("surprise field"));
    }
    if !(rho > 0.0) || k_pool == 0 {
        return Err(NavError::InvalidArgument(format!(
            "nms needs rho > 0 and k_pool >= 1 (got {rho}, {k_pool})"
        )));
    }
    let mut sorted = field.entries.clone();
    sorted.sort_by(by_sigma_desc);

    let above = sorted.iter().filter(|e| e.sigma > field.threshold);
    let kept = greedy_spacing(above, rho, k_pool);
    if kept.len() >= k_pool.min(POOL_MIN_SURVIVORS) {
        return Ok(to_pool(kept, rho, k_pool, false));
    }
    let kept = greedy_spacing(sorted.iter(), rho, k_pool);
    Ok(to_pool(kept, rho, k_pool, true))
}

/// Writes `tile_index,grid_x,grid_y,sigma` in scan order.
pub fn write_field_csv<W: Write>(field: &SurpriseField, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["tile_index", "grid_x", "grid_y", "sigma"])?;
    for e in &field.entries {
        wtr.write_record([
            e.tile_index.to_string(),
            e.grid_x.to_string(),
            e.grid_y.to_string(),
            e.sigma.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Binary (P5) 8-bit PGM of the field, min-max scaled over the slide.
/// Grid cells without a tile are black.
pub fn write_field_pgm<W: Write>(field: &SurpriseField, mut w: W) -> Result<()> {
    let width = field.entries.iter().map(|e| e.grid_x + 1).max().unwrap_or(0) as usize;
    let height = field.entries.iter().map(|e| e.grid_y + 1).max().unwrap_or(0) as usize;
    let (lo, hi) = field
        .entries
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e.sigma), hi.max(e.sigma)));
    let span = hi - lo;
    let mut pixels = vec![0u8; width * height];
    for e in &field.entries {
        let v = if span > 0.0 { (e.sigma - lo) / span } else { 0.0 };
        pixels[e.grid_y as usize * width + e.grid_x as usize] = (v * 255.0).round() as u8;
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(&pixels)?;
    Ok(())
}
