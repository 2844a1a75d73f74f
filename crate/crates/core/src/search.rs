//! Question-conditioned reranking inside the ROI pool.
//!
//! Relevance never proposes candidates: every selected target is a pool
//! member, and both signals are min-max normalized within the pool before
//! they are mixed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};
use crate::router::split_rounds;
use crate::scan::RoiPool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceMode {
    Embeddings,
    Scores,
}

impl std::str::FromStr for RelevanceMode {
    type Err = NavError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embeddings" => Ok(Self::Embeddings),
            "scores" => Ok(Self::Scores),
            other => Err(NavError::InvalidArgument(format!("unknown relevance mode `{other}`"))),
        }
    }
}

/// Externally computed relevance, keyed by low-magnification tile index.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceSource {
    pub mode: RelevanceMode,
    pub question_embedding: Option<Vec<f32>>,
    pub patch_embeddings: Option<BTreeMap<usize, Vec<f32>>>,
    pub scores: Option<BTreeMap<usize, f64>>,
}

impl RelevanceSource {
    pub fn from_embeddings(question: Vec<f32>, patches: BTreeMap<usize, Vec<f32>>) -> Self {
        Self {
            mode: RelevanceMode::Embeddings,
            question_embedding: Some(question),
            patch_embeddings: Some(patches),
            scores: None,
        }
    }

    pub fn from_scores(scores: BTreeMap<usize, f64>) -> Self {
        Self {
            mode: RelevanceMode::Scores,
            question_embedding: None,
            patch_embeddings: None,
            scores: Some(scores),
        }
    }
}

/// Cosine similarity in f64; a zero vector on either side gives 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = aa.sqrt() * bb.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        ab / denom
    }
}

/// Raw relevance for every pool member, keyed by `roi_id`.
pub fn relevance_scores(pool: &RoiPool, source: &RelevanceSource) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    let mut missing = Vec::new();
    match source.mode {
        RelevanceMode::Scores => {
            let scores = source
                .scores
                .as_ref()
                .ok_or_else(|| NavError::InvalidArgument("scores mode without scores".into()))?;
            for roi in &pool.rois {
                match scores.get(&roi.tile_index) {
                    Some(&s) => {
                        out.insert(roi.roi_id, s);
                    }
                    None => missing.push(roi.tile_index),
                }
            }
        }
        RelevanceMode::Embeddings => {
            let q = source.question_embedding.as_ref().ok_or_else(|| {
                NavError::InvalidArgument("embeddings mode without a question embedding".into())
            })?;
            let patches = source
                .patch_embeddings
                .as_ref()
                .ok_or_else(|| NavError::InvalidArgument("embeddings mode without patch embeddings".into()))?;
            for roi in &pool.rois {
                match patches.get(&roi.tile_index) {
                    Some(p) if p.len() != q.len() => {
                        return Err(NavError::DimensionMismatch { expected: q.len(), got: p.len() })
                    }
                    Some(p) => {
                        out.insert(roi.roi_id, cosine(q, p));
                    }
                    None => missing.push(roi.tile_index),
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(NavError::MissingRelevance(missing));
    }
    Ok(out)
}

/// `(s - min) / (max - min + epsilon)`. Ties everywhere map to exactly 0.
pub fn minmax_normalize(values: &BTreeMap<usize, f64>, epsilon: f64) -> BTreeMap<usize, f64> {
    let (lo, hi) = values
        .values()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo + epsilon;
    values.iter().map(|(&k, &v)| (k, (v - lo) / span)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub roi_id: usize,
    pub tile_index: usize,
    pub level0_x: u64,
    pub level0_y: u64,
    pub fused: f64,
    pub sigma_hat: f64,
    pub rel_hat: f64,
    pub raw_sigma: f64,
    pub raw_rel: f64,
    /// Zero-based selection round.
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTargets {
    pub targets: Vec<Target>,
    pub alpha_used: f64,
}

impl RankedTargets {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn roi_ids(&self) -> Vec<usize> {
        self.targets.iter().map(|t| t.roi_id).collect()
    }
}

fn rank_order(a: &Target, b: &Target) -> Ordering {
    b.fused
        .total_cmp(&a.fused)
        .then_with(|| b.raw_sigma.total_cmp(&a.raw_sigma))
        .then_with(|| a.roi_id.cmp(&b.roi_id))
}

/// Normalizes both signals within `pool`, fuses them with weight `alpha` on
/// relevance, and keeps the best `k_search`.
pub fn fuse_and_select(
    pool: &RoiPool,
    rel: &BTreeMap<usize, f64>,
    alpha: f64,
    k_search: usize,
    epsilon: f64,
) -> Result<RankedTargets> {
    fuse_subset(pool, &BTreeSet::new(), rel, alpha, k_search, epsilon, 0)
}

fn fuse_subset(
    pool: &RoiPool,
    exclude: &BTreeSet<usize>,
    rel: &BTreeMap<usize, f64>,
    alpha: f64,
    k_search: usize,
    epsilon: f64,
    round: usize,
) -> Result<RankedTargets> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(NavError::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let members: Vec<_> = pool.rois.iter().filter(|r| !exclude.contains(&r.roi_id)).collect();
    let missing: Vec<usize> = members
        .iter()
        .filter(|r| !rel.contains_key(&r.roi_id))
        .map(|r| r.tile_index)
        .collect();
    if !missing.is_empty() {
        return Err(NavError::MissingRelevance(missing));
    }
    let sigma: BTreeMap<usize, f64> = members.iter().map(|r| (r.roi_id, r.sigma)).collect();
    let relevance: BTreeMap<usize, f64> = members.iter().map(|r| (r.roi_id, rel[&r.roi_id])).collect();
    let sigma_hat = minmax_normalize(&sigma, epsilon);
    let rel_hat = minmax_normalize(&relevance, epsilon);

    let mut targets: Vec<Target> = members
        .iter()
        .map(|r| {
            let (s, q) = (sigma_hat[&r.roi_id], rel_hat[&r.roi_id]);
            Target {
                roi_id: r.roi_id,
                tile_index: r.tile_index,
                level0_x: r.level0_x,
                level0_y: r.level0_y,
                fused: alpha * q + (1.0 - alpha) * s,
                sigma_hat: s,
                rel_hat: q,
                raw_sigma: r.sigma,
                raw_rel: relevance[&r.roi_id],
                round,
            }
        })
        .collect();
    targets.sort_by(rank_order);
    targets.truncate(k_search);
    Ok(RankedTargets { targets, alpha_used: alpha })
}

/// Multi-round selection: round `i` reranks the pool minus everything
/// already chosen, with its share of `k_search` from [`split_rounds`].
/// With one round this is exactly [`fuse_and_select`].
pub fn select_rounds(
    pool: &RoiPool,
    rel: &BTreeMap<usize, f64>,
    alpha: f64,
    k_search: usize,
    rounds: usize,
    epsilon: f64,
) -> Result<RankedTargets> {
    let mut chosen = BTreeSet::new();
    let mut targets = Vec::new();
    for (round, budget) in split_rounds(k_search, rounds.max(1)).into_iter().enumerate() {
        if budget == 0 || chosen.len() == pool.len() {
            break;
        }
        let picked = fuse_subset(pool, &chosen, rel, alpha, budget, epsilon, round)?;
        chosen.extend(picked.targets.iter().map(|t| t.roi_id));
        targets.extend(picked.targets);
    }
    Ok(RankedTargets { targets, alpha_used: alpha })
}
