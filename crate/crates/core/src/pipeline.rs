//! End-to-end navigation run and its trajectory report.
//!
//! Order of stages: categorize, route, scan, NMS pool, relevance, fuse and
//! select, evidence readout, archive lookup, packet. The scan does not depend
//! on the question, so [`Navigator::run_with_field`] lets a batch of questions
//! share one [`SurpriseField`].

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{slide_embedding, ArchiveIndex};
use crate::config::EngineConfig;
use crate::error::{NavError, Result};
use crate::memory::SummaryStats;
use crate::readout::{
    assemble_evidence_with, build_packet, AdjudicationPacket, EvidenceSet, ReadoutMode, ReferenceCase,
};
use crate::rng::DeterministicRng;
use crate::router::{categorize, route, KeywordTable, RoutingDecision};
use crate::scan::{greedy_spacing, nms_pool, scan_slide, FieldEntry, Roi, RoiPool, SurpriseField};
use crate::search::{cosine, relevance_scores, select_rounds, RankedTargets, RelevanceMode, RelevanceSource};
use crate::types::{validate_stream, FeatureStream, Level, QuestionSpec};

/// How the candidate pool is proposed. Everything downstream is shared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolConstructor {
    /// Threshold plus NMS over the surprise field.
    #[default]
    Surprise,
    /// NMS over all tiles ranked by relevance; the surprise field is unused.
    Relevance,
    /// NMS over a random permutation of all tiles.
    Random,
}

/// Patch selection inside ROI neighborhoods.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutVariant {
    #[default]
    FreshLocal,
    GlobalMemory,
    Random,
    LowOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    pub pool: PoolConstructor,
    pub readout: ReadoutVariant,
    /// Record per-stage wall-clock times. Off by default so that reports are
    /// byte-identical across runs.
    pub timings: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub tiles_scanned: usize,
    pub warmup_steps: usize,
    pub updates: usize,
    pub decays: usize,
    pub perceptor_slots_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub slide_id: String,
    pub question: String,
    pub options: RunOptions,
    pub routing: RoutingDecision,
    pub surprise_summary: SummaryStats,
    pub threshold: f64,
    pub threshold_degenerate: bool,
    pub memory_digest: String,
    pub pool: RoiPool,
    pub pool_digest: String,
    /// Raw relevance per `roi_id`, enough to recompute the targets offline.
    pub pool_relevance: BTreeMap<usize, f64>,
    pub targets: RankedTargets,
    pub targets_digest: String,
    pub evidence: EvidenceSet,
    pub evidence_digest: String,
    pub packet: AdjudicationPacket,
    pub counters: Counters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<BTreeMap<String, f64>>,
}

impl TrajectoryReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn json_digest<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Root random stream for one slide.
pub fn slide_rng(seed: u64, slide_id: &str) -> DeterministicRng {
    DeterministicRng::new(seed).sub(&format!("slide:{slide_id}"))
}

#[derive(Debug, Clone)]
pub struct Navigator {
    pub cfg: EngineConfig,
    pub keywords: KeywordTable,
    pub options: RunOptions,
}

struct Stopwatch {
    on: bool,
    last: Instant,
    times: BTreeMap<String, f64>,
}

impl Stopwatch {
    fn new(on: bool) -> Self {
        Self { on, last: Instant::now(), times: BTreeMap::new() }
    }

    fn lap(&mut self, stage: &str) {
        if self.on {
            let now = Instant::now();
            *self.times.entry(stage.to_string()).or_default() += (now - self.last).as_secs_f64();
            self.last = now;
        }
    }

    fn finish(self) -> Option<BTreeMap<String, f64>> {
        self.on.then_some(self.times)
    }
}

impl Navigator {
    pub fn new(cfg: EngineConfig) -> Self {
        Self { cfg, keywords: KeywordTable::default(), options: RunOptions::default() }
    }

    pub fn with_keywords(mut self, keywords: KeywordTable) -> Self {
        self.keywords = keywords;
        self
    }

    pub fn with_options(mut self, options: RunOptions) -> Self {
        self.options = options;
        self
    }

    /// The question-independent scan of the low-magnification stream.
    pub fn scan(&self, low: &FeatureStream) -> Result<SurpriseField> {
        let rng = slide_rng(self.cfg.seed, &low.slide_id).sub("scan");
        scan_slide(low, &self.cfg, &rng).map_err(|e| e.at("scan"))
    }

    pub fn run(
        &self,
        low: &FeatureStream,
        high: Option<&FeatureStream>,
        question: &QuestionSpec,
        relevance: &RelevanceSource,
        archive: Option<&ArchiveIndex>,
    ) -> Result<TrajectoryReport> {
        let mut watch = Stopwatch::new(self.options.timings);
        let field = self.scan(low)?;
        watch.lap("scan");
        self.finish_run(&field, low, high, question, relevance, archive, watch)
    }

    /// Runs every stage after the scan against an existing field.
    pub fn run_with_field(
        &self,
        field: &SurpriseField,
        low: &FeatureStream,
        high: Option<&FeatureStream>,
        question: &QuestionSpec,
        relevance: &RelevanceSource,
        archive: Option<&ArchiveIndex>,
    ) -> Result<TrajectoryReport> {
        let watch = Stopwatch::new(self.options.timings);
        self.finish_run(field, low, high, question, relevance, archive, watch)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_run(
        &self,
        field: &SurpriseField,
        low: &FeatureStream,
        high: Option<&FeatureStream>,
        question: &QuestionSpec,
        relevance: &RelevanceSource,
        archive: Option<&ArchiveIndex>,
        mut watch: Stopwatch,
    ) -> Result<TrajectoryReport> {
        let cfg = &self.cfg;
        cfg.validate().map_err(|e| e.at("config"))?;
        if field.len() != low.len() {
            return Err(NavError::InvalidArgument(format!(
                "surprise field has {} tiles, stream has {}",
                field.len(),
                low.len()
            ))
            .at("scan"));
        }
        if let Some(h) = high {
            check_high(h, cfg).map_err(|e| e.at("readout"))?;
        }

        let categorized = categorize(question, &self.keywords);
        let mut routing = route(categorized.category, low.tile_stride_level0, low.slide_diag_level0, cfg)
            .map_err(|e| e.at("route"))?;
        routing.matched_keywords = categorized.matched_keywords;
        watch.lap("route");

        let root = slide_rng(cfg.seed, &low.slide_id);
        let pool = match self.options.pool {
            PoolConstructor::Surprise => nms_pool(field, routing.rho, routing.k_pool),
            PoolConstructor::Relevance => tile_relevance(low.len(), relevance)
                .and_then(|rel| ranked_pool(field, &rel, routing.rho, routing.k_pool)),
            PoolConstructor::Random => {
                Ok(random_pool(field, routing.rho, routing.k_pool, &mut root.sub("policy:random")))
            }
        }
        .map_err(|e| e.at("nms"))?;
        watch.lap("nms");

        let pool_relevance = relevance_scores(&pool, relevance).map_err(|e| e.at("relevance"))?;
        let targets = select_rounds(&pool, &pool_relevance, cfg.alpha, routing.k_search, cfg.rounds, cfg.epsilon_norm)
            .map_err(|e| e.at("search"))?;
        watch.lap("search");

        let memory = &field.memory_final;
        let mode = match self.options.readout {
            ReadoutVariant::FreshLocal => ReadoutMode::FreshLocal,
            ReadoutVariant::GlobalMemory => ReadoutMode::GlobalMemory(memory),
            ReadoutVariant::Random => ReadoutMode::Random,
            ReadoutVariant::LowOnly => ReadoutMode::LowOnly,
        };
        let evidence = assemble_evidence_with(mode, &targets, high, low.tile_stride_level0, cfg, &root)
            .map_err(|e| e.at("readout"))?;
        watch.lap("readout");

        let references = match archive {
            Some(index) if cfg.archive_k > 0 => {
                let query = slide_embedding(low).map_err(|e| e.at("archive"))?;
                index
                    .retrieve(&query, cfg.archive_k, Some(&low.slide_id))
                    .map_err(|e| e.at("archive"))?
                    .into_iter()
                    .map(|(slide_id, similarity)| {
                        let summary_text = index.get(&slide_id).map(|c| c.summary_text.clone()).unwrap_or_default();
                        ReferenceCase { slide_id, similarity, summary_text }
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        watch.lap("archive");

        let packet = build_packet(question, &routing, &pool, &targets, &evidence, memory, references, cfg)
            .map_err(|e| e.at("packet"))?;
        let surprise_summary = memory.summary_stats().map_err(|e| e.at("packet"))?;
        watch.lap("packet");

        Ok(TrajectoryReport {
            slide_id: low.slide_id.clone(),
            question: question.text.clone(),
            options: RunOptions { timings: false, ..self.options },
            routing,
            surprise_summary,
            threshold: field.threshold,
            threshold_degenerate: field.degenerate,
            memory_digest: memory.digest(),
            pool_digest: json_digest(&pool)?,
            pool,
            pool_relevance,
            targets_digest: json_digest(&targets)?,
            targets,
            evidence_digest: json_digest(&evidence)?,
            evidence: evidence.clone(),
            packet,
            counters: Counters {
                tiles_scanned: field.len(),
                warmup_steps: memory.warmup_scores().len(),
                updates: memory.update_count(),
                decays: memory.decay_count(),
                perceptor_slots_used: evidence.total_patches,
            },
            timings: watch.finish(),
        })
    }
}

fn check_high(high: &FeatureStream, cfg: &EngineConfig) -> Result<()> {
    if high.level != Level::High {
        return Err(NavError::InvalidArgument("readout needs a high-magnification stream".into()));
    }
    if high.d != cfg.d {
        return Err(NavError::DimensionMismatch { expected: cfg.d, got: high.d });
    }
    let violations = validate_stream(high);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(NavError::Validation(violations))
    }
}

/// Relevance for every low tile, indexed by tile index.
pub fn tile_relevance(n_tiles: usize, source: &RelevanceSource) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n_tiles);
    let mut missing = Vec::new();
    for i in 0..n_tiles {
        let v = match source.mode {
            RelevanceMode::Scores => source.scores.as_ref().and_then(|s| s.get(&i).copied()),
            RelevanceMode::Embeddings => {
                match (&source.question_embedding, source.patch_embeddings.as_ref().and_then(|p| p.get(&i))) {
                    (Some(q), Some(p)) if p.len() != q.len() => {
                        return Err(NavError::DimensionMismatch { expected: q.len(), got: p.len() })
                    }
                    (Some(q), Some(p)) => Some(cosine(q, p)),
                    _ => None,
                }
            }
        };
        match v {
            Some(v) => out.push(v),
            None => {
                missing.push(i);
                out.push(0.0);
            }
        }
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(NavError::MissingRelevance(missing))
    }
}

fn pool_from(kept: Vec<FieldEntry>, sigma: &[f64], rho: f64, k_pool: usize) -> RoiPool {
    let mut rois: Vec<Roi> = kept
        .into_iter()
        .map(|e| Roi {
            roi_id: 0,
            tile_index: e.tile_index,
            level0_x: e.level0_x,
            level0_y: e.level0_y,
            sigma: sigma[e.tile_index],
        })
        .collect();
    rois.sort_by(|a, b| b.sigma.total_cmp(&a.sigma).then_with(|| a.tile_index.cmp(&b.tile_index)));
    for (i, r) in rois.iter_mut().enumerate() {
        r.roi_id = i;
    }
    RoiPool { rois, spacing_used: rho, pool_budget_used: k_pool, widened: false }
}

/// NMS over all tiles ranked by `score` (descending, ties by tile index).
pub fn ranked_pool(field: &SurpriseField, score: &[f64], rho: f64, k_pool: usize) -> Result<RoiPool> {
    if score.len() < field.len() {
        return Err(NavError::DimensionMismatch { expected: field.len(), got: score.len() });
    }
    let mut order = field.entries.clone();
    order.sort_by(|a, b| {
        score[b.tile_index]
            .total_cmp(&score[a.tile_index])
            .then_with(|| a.tile_index.cmp(&b.tile_index))
    });
    let kept = greedy_spacing(order.iter(), rho, k_pool);
    Ok(pool_from(kept, &field.sigma_by_tile(), rho, k_pool))
}

/// NMS over a random permutation of all tiles.
pub fn random_pool(field: &SurpriseField, rho: f64, k_pool: usize, rng: &mut DeterministicRng) -> RoiPool {
    let mut order = field.entries.clone();
    order.shuffle(rng);
    let kept = greedy_spacing(order.iter(), rho, k_pool);
    pool_from(kept, &field.sigma_by_tile(), rho, k_pool)
}
