//! High-magnification evidence readout and adjudication packet assembly.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::error::{NavError, Result};
use crate::memory::{init_memory, MemoryState};
use crate::rng::DeterministicRng;
use crate::router::RoutingDecision;
use crate::scan::RoiPool;
use crate::search::{RankedTargets, Target};
use crate::types::{FeatureStream, QuestionSpec};

/// Minimum local warm-up length before it is capped by the neighborhood size.
pub const LOCAL_WARMUP_FLOOR: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceLevel {
    High,
    LowFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceEntry {
    pub roi_id: usize,
    /// 1-based position of the ROI among the targets.
    pub target_rank: usize,
    /// Index into the high stream, or into the low stream for fallbacks.
    pub patch_tile_index: usize,
    pub level: EvidenceLevel,
    /// Observation-time score from the local memory. Fallback entries carry
    /// the ROI's slide-level score instead.
    pub local_sigma: f64,
    /// 1-based.
    pub rank_in_roi: usize,
    pub level0_x: u64,
    pub level0_y: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub entries: Vec<EvidenceEntry>,
    pub total_patches: usize,
}

/// How patches are picked inside each ROI neighborhood.
#[derive(Debug, Clone, Copy)]
pub enum ReadoutMode<'a> {
    /// A fresh memory per ROI with a short warm-up (the engine default).
    FreshLocal,
    /// Score patches with the frozen slide-level memory.
    GlobalMemory(&'a MemoryState),
    /// Uniformly random patches from the neighborhood.
    Random,
    /// Skip high magnification; every target becomes a fallback entry.
    LowOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalPick {
    pub tile_index: usize,
    pub sigma: f64,
}

/// High tiles whose level-0 centers fall in the square of side `side`
/// centered at `center`, in stream order.
///
/// The square is half-open (`-side/2 <= offset < side/2` on each axis) so
/// aligned low-tile footprints partition the high grid.
pub fn local_neighborhood(center: (f64, f64), high_stream: &FeatureStream, side: f64) -> Vec<usize> {
    let half = side / 2.0;
    high_stream
        .tiles
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            let dx = t.level0_x as f64 - center.0;
            let dy = t.level0_y as f64 - center.1;
            (-half..half).contains(&dx) && (-half..half).contains(&dy)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Local warm-up length for a neighborhood of `n` patches.
pub fn local_warmup(t_w: usize, n: usize) -> usize {
    (t_w / 5).max(LOCAL_WARMUP_FLOOR).min(n)
}

fn top_t(mut picks: Vec<LocalPick>, t: usize) -> Vec<LocalPick> {
    picks.sort_by(|a, b| b.sigma.total_cmp(&a.sigma).then_with(|| a.tile_index.cmp(&b.tile_index)));
    picks.truncate(t);
    picks
}

/// Streams the neighborhood through a fresh memory and keeps the
/// `T_per_roi` patches with the highest observation-time score.
pub fn select_local_evidence(
    neigh: &[usize],
    high_stream: &FeatureStream,
    cfg: &EngineConfig,
    rng: &DeterministicRng,
) -> Result<Vec<LocalPick>> {
    if neigh.is_empty() {
        return Ok(Vec::new());
    }
    if high_stream.d != cfg.d {
        return Err(NavError::DimensionMismatch { expected: cfg.d, got: high_stream.d });
    }
    let local_cfg = EngineConfig {
        t_w: local_warmup(cfg.t_w, neigh.len()),
        ..cfg.clone()
    };
    let mut init_rng = rng.clone();
    let mut memory = init_memory(&local_cfg, &mut init_rng);
    let steps = memory.observe_f32(neigh.iter().map(|&i| high_stream.tiles[i].feature.as_slice()), &local_cfg)?;
    let picks = neigh
        .iter()
        .zip(&steps)
        .map(|(&tile_index, &(sigma, _))| LocalPick { tile_index, sigma })
        .collect();
    Ok(top_t(picks, cfg.t_per_roi))
}

fn select_with_global(
    neigh: &[usize],
    high_stream: &FeatureStream,
    memory: &MemoryState,
    cfg: &EngineConfig,
) -> Result<Vec<LocalPick>> {
    if neigh.is_empty() {
        return Ok(Vec::new());
    }
    let mut inputs = Vec::with_capacity(neigh.len() * high_stream.d);
    for &i in neigh {
        inputs.extend(high_stream.tiles[i].feature.iter().map(|&v| f64::from(v)));
    }
    let sigmas = memory.score_batch(&inputs, cfg.huber_delta)?;
    let picks = neigh
        .iter()
        .zip(sigmas)
        .map(|(&tile_index, sigma)| LocalPick { tile_index, sigma })
        .collect();
    Ok(top_t(picks, cfg.t_per_roi))
}

fn select_random(neigh: &[usize], cfg: &EngineConfig, rng: &DeterministicRng) -> Vec<LocalPick> {
    let mut r = rng.sub("random");
    let n = cfg.t_per_roi.min(neigh.len());
    sample(&mut r, neigh.len(), n)
        .into_iter()
        .map(|k| LocalPick { tile_index: neigh[k], sigma: 0.0 })
        .collect()
}

/// Fresh-local-memory readout over the targets in rank order, capped at
/// `V_max` patches in total.
pub fn assemble_evidence(
    targets: &RankedTargets,
    high_stream: Option<&FeatureStream>,
    low_stride: f64,
    cfg: &EngineConfig,
    rng: &DeterministicRng,
) -> Result<EvidenceSet> {
    assemble_evidence_with(ReadoutMode::FreshLocal, targets, high_stream, low_stride, cfg, rng)
}

/// As [`assemble_evidence`] with an explicit patch-selection rule.
///
/// `rng` is the slide-level stream; ROI `r` uses the sub-stream `roi:{r}`.
/// A target whose neighborhood is empty (or with no high stream at all)
/// contributes one low-magnification fallback entry. Once the cap is reached
/// later targets contribute nothing, and the last contributing target may be
/// cut short.
pub fn assemble_evidence_with(
    mode: ReadoutMode<'_>,
    targets: &RankedTargets,
    high_stream: Option<&FeatureStream>,
    low_stride: f64,
    cfg: &EngineConfig,
    rng: &DeterministicRng,
) -> Result<EvidenceSet> {
    let side = low_stride * cfg.neighborhood_scale;
    let mut entries = Vec::new();
    for (rank, target) in targets.targets.iter().enumerate() {
        let room = cfg.v_max.saturating_sub(entries.len());
        if room == 0 {
            break;
        }
        let picks = match (mode, high_stream) {
            (ReadoutMode::LowOnly, _) | (_, None) => Vec::new(),
            (_, Some(high)) => {
                let neigh = local_neighborhood(target_center(target), high, side);
                let roi_rng = rng.sub(&format!("roi:{}", target.roi_id));
                match mode {
                    ReadoutMode::FreshLocal => select_local_evidence(&neigh, high, cfg, &roi_rng)?,
                    ReadoutMode::GlobalMemory(m) => select_with_global(&neigh, high, m, cfg)?,
                    ReadoutMode::Random => select_random(&neigh, cfg, &roi_rng),
                    ReadoutMode::LowOnly => unreachable!(),
                }
            }
        };
        if picks.is_empty() {
            entries.push(EvidenceEntry {
                roi_id: target.roi_id,
                target_rank: rank + 1,
                patch_tile_index: target.tile_index,
                level: EvidenceLevel::LowFallback,
                local_sigma: target.raw_sigma,
                rank_in_roi: 1,
                level0_x: target.level0_x,
                level0_y: target.level0_y,
            });
            continue;
        }
        let high = high_stream.expect("picks imply a high stream");
        for (k, p) in picks.into_iter().take(room).enumerate() {
            let t = &high.tiles[p.tile_index];
            entries.push(EvidenceEntry {
                roi_id: target.roi_id,
                target_rank: rank + 1,
                patch_tile_index: p.tile_index,
                level: EvidenceLevel::High,
                local_sigma: p.sigma,
                rank_in_roi: k + 1,
                level0_x: t.level0_x,
                level0_y: t.level0_y,
            });
        }
    }
    let total_patches = entries.len();
    Ok(EvidenceSet { entries, total_patches })
}

fn target_center(t: &Target) -> (f64, f64) {
    (t.level0_x as f64, t.level0_y as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavigationSummary {
    pub mean: f64,
    pub std: f64,
    pub high_fraction: f64,
    pub candidate_count: usize,
}

impl NavigationSummary {
    /// The prompt-ready rendering of the summary slot.
    pub fn render(&self) -> String {
        format!(
            "Navigation Summary. Low-magnification scan statistics: mean {:.4}, standard deviation {:.4}, \
             high-surprise fraction {:.4}, and {} candidate regions after thresholding and NMS. \
             Use this as slide-level context, but base the final answer on the regional evidence below.",
            self.mean, self.std, self.high_fraction, self.candidate_count
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCase {
    pub slide_id: String,
    pub similarity: f64,
    pub summary_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationPacket {
    pub question: String,
    pub category: String,
    pub navigation_summary: NavigationSummary,
    pub navigation_summary_text: String,
    pub evidence: Vec<EvidenceEntry>,
    pub reference_context: Vec<ReferenceCase>,
    /// Digest of the slide memory the summary statistics were read from.
    pub summary_source_digest: String,
    pub config_echo: EngineConfig,
    pub seed: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn build_packet(
    question: &QuestionSpec,
    routing: &RoutingDecision,
    pool: &RoiPool,
    targets: &RankedTargets,
    evidence: &EvidenceSet,
    slide_memory: &MemoryState,
    references: Vec<ReferenceCase>,
    cfg: &EngineConfig,
) -> Result<AdjudicationPacket> {
    let target_ids: BTreeSet<usize> = targets.targets.iter().map(|t| t.roi_id).collect();
    if let Some(stray) = evidence.entries.iter().find(|e| !target_ids.contains(&e.roi_id)) {
        return Err(NavError::InvalidArgument(format!(
            "evidence references roi {} which is not a target",
            stray.roi_id
        )));
    }
    let stats = slide_memory.summary_stats()?;
    let navigation_summary = NavigationSummary {
        mean: stats.mean,
        std: stats.std,
        high_fraction: stats.high_fraction,
        candidate_count: pool.len(),
    };
    Ok(AdjudicationPacket {
        question: question.text.clone(),
        category: routing.category.to_string(),
        navigation_summary_text: navigation_summary.render(),
        navigation_summary,
        evidence: evidence.entries.clone(),
        reference_context: references,
        summary_source_digest: slide_memory.digest(),
        config_echo: cfg.clone(),
        seed: cfg.seed,
    })
}
