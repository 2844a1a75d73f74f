//! Synthetic slides with planted anomalies, baseline policies, recall
//! metrics, and the ablation runner.
//!
//! Each slide is a low grid whose background tiles come from a shared
//! Gaussian mixture. Anomaly blobs are disks of tiles pushed along a blob
//! specific random direction. A blob is either named by the question (its
//! tiles get relevance 1 before noise) or unnamed (relevance 0 before noise),
//! so unnamed blobs can only be found through surprise.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::error::{NavError, Result};
use crate::pipeline::{Navigator, PoolConstructor, ReadoutVariant, RunOptions, TrajectoryReport};
use crate::readout::{select_local_evidence, EvidenceEntry, EvidenceLevel};
use crate::rng::DeterministicRng;
use crate::router::{route, KeywordTable};
use crate::scan::{greedy_spacing, FieldEntry, SurpriseField};
use crate::search::RelevanceSource;
use crate::types::{Category, FeatureStream, Level, QuestionSpec, TileRecord};

/// Fusion weights swept by the ablation grid.
pub const ALPHA_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub num_modes: usize,
    /// Per-coordinate std of the mode centers.
    pub mode_scale: f64,
    /// Per-coordinate std of tile noise around its mode.
    pub noise: f64,
    /// Relative mode frequencies; empty means uniform.
    #[serde(default)]
    pub mode_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    /// Blob center as a fraction of the grid extent.
    pub center_frac: (f64, f64),
    pub radius_tiles: u32,
    pub shift_magnitude: f64,
    pub named_by_question: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub grid_w: u32,
    pub grid_h: u32,
    pub d: usize,
    pub background: BackgroundSpec,
    pub anomalies: Vec<AnomalySpec>,
    pub relevance_noise: f64,
    pub seed: u64,
    /// Low tile stride in level-0 pixels.
    pub tile_stride: u64,
    /// High tiles per low tile along each axis.
    pub high_factor: u32,
    /// Probability that a high tile under an anomalous low tile carries the
    /// plant. At least one child per anomalous low tile always does.
    pub high_plant_fraction: f64,
    pub question: String,
}

impl Default for SyntheticSpec {
    /// 100 x 100 low grid at d = 64 with four radius-9 blobs (about 10% of
    /// the tiles), two of them named by the question. One background mode is
    /// rare (10% of tiles), which makes scattered background tiles surprising
    /// without being anomalies.
    fn default() -> Self {
        let blob = |x: f64, y: f64, named: bool| AnomalySpec {
            center_frac: (x, y),
            radius_tiles: 9,
            shift_magnitude: 3.5,
            named_by_question: named,
        };
        Self {
            grid_w: 100,
            grid_h: 100,
            d: 64,
            background: BackgroundSpec {
                num_modes: 4,
                mode_scale: 1.0,
                noise: 0.5,
                mode_weights: vec![0.3, 0.3, 0.3, 0.1],
            },
            anomalies: vec![
                blob(0.25, 0.25, true),
                blob(0.75, 0.3, false),
                blob(0.3, 0.75, true),
                blob(0.72, 0.72, false),
            ],
            relevance_noise: 0.7,
            seed: 0,
            tile_stride: 1024,
            high_factor: 4,
            high_plant_fraction: 0.25,
            question: "What is the nuclear grade of the invasive carcinoma?".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_w == 0 || self.grid_h == 0 || self.d == 0 || self.tile_stride == 0 || self.high_factor == 0 {
            return Err(NavError::InvalidArgument("grid, d, stride and high factor must be positive".into()));
        }
        if self.background.num_modes == 0 {
            return Err(NavError::InvalidArgument("background needs at least one mode".into()));
        }
        let weights = &self.background.mode_weights;
        if !weights.is_empty() && weights.len() != self.background.num_modes {
            return Err(NavError::InvalidArgument("mode_weights must have one entry per mode".into()));
        }
        if self.tile_stride % u64::from(self.high_factor) != 0 {
            return Err(NavError::InvalidArgument("tile_stride must be divisible by high_factor".into()));
        }
        if !(0.0..=1.0).contains(&self.high_plant_fraction) {
            return Err(NavError::InvalidArgument("high_plant_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn blob_center(&self, a: &AnomalySpec) -> (i64, i64) {
        let cx = (a.center_frac.0 * f64::from(self.grid_w - 1)).round() as i64;
        let cy = (a.center_frac.1 * f64::from(self.grid_h - 1)).round() as i64;
        (cx, cy)
    }

    /// Low tile indices (row-major) of every blob; rejects blobs that leave
    /// the grid or share a tile.
    pub fn blob_tiles(&self) -> Result<Vec<Vec<usize>>> {
        let (w, h) = (i64::from(self.grid_w), i64::from(self.grid_h));
        let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
        let mut blobs = Vec::new();
        for (b, a) in self.anomalies.iter().enumerate() {
            if !(0.0..=1.0).contains(&a.center_frac.0) || !(0.0..=1.0).contains(&a.center_frac.1) {
                return Err(NavError::InvalidArgument(format!("blob {b}: center_frac outside [0, 1]")));
            }
            let (cx, cy) = self.blob_center(a);
            let r = i64::from(a.radius_tiles);
            if cx - r < 0 || cy - r < 0 || cx + r >= w || cy + r >= h {
                return Err(NavError::InvalidArgument(format!("blob {b} extends past the grid")));
            }
            let mut tiles = Vec::new();
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                        let idx = (y * w + x) as usize;
                        if let Some(other) = owner.insert(idx, b) {
                            return Err(NavError::InvalidArgument(format!("blobs {other} and {b} overlap")));
                        }
                        tiles.push(idx);
                    }
                }
            }
            blobs.push(tiles);
        }
        Ok(blobs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobTruth {
    pub named_by_question: bool,
    /// Low tile indices.
    pub tiles: Vec<usize>,
    /// High tile indices carrying the plant.
    pub high_plants: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub slide_id: String,
    pub blobs: Vec<BlobTruth>,
    pub anomaly_fraction: f64,
}

impl GroundTruth {
    fn low_set(&self) -> BTreeSet<usize> {
        self.blobs.iter().flat_map(|b| b.tiles.iter().copied()).collect()
    }

    fn high_set(&self) -> BTreeSet<usize> {
        self.blobs.iter().flat_map(|b| b.high_plants.iter().copied()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub low: FeatureStream,
    pub high: FeatureStream,
    pub relevance: RelevanceSource,
    pub truth: GroundTruth,
    pub question: String,
}

fn gaussian(rng: &mut DeterministicRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn unit_direction(rng: &mut DeterministicRng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Builds both streams, the relevance scores, and the truth for one spec.
/// Every draw comes from a labelled sub-stream of `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticSlide> {
    spec.validate()?;
    let blobs = spec.blob_tiles()?;
    let root = DeterministicRng::new(spec.seed).sub("synthetic");
    let d = spec.d;
    let (w, h) = (spec.grid_w, spec.grid_h);
    let n_low = (w * h) as usize;

    let mut mode_rng = root.sub("modes");
    let modes: Vec<Vec<f64>> = (0..spec.background.num_modes)
        .map(|_| gaussian(&mut mode_rng, d, spec.background.mode_scale))
        .collect();
    let mut dir_rng = root.sub("directions");
    let shifts: Vec<Vec<f64>> = spec
        .anomalies
        .iter()
        .map(|a| unit_direction(&mut dir_rng, d).into_iter().map(|v| v * a.shift_magnitude).collect())
        .collect();

    let mut blob_of = vec![None; n_low];
    for (b, tiles) in blobs.iter().enumerate() {
        for &t in tiles {
            blob_of[t] = Some(b);
        }
    }

    let mut assign_rng = root.sub("assign");
    let tile_mode: Vec<usize> = if spec.background.mode_weights.is_empty() {
        (0..n_low).map(|_| assign_rng.random_range(0..modes.len())).collect()
    } else {
        let pick = WeightedIndex::new(&spec.background.mode_weights)
            .map_err(|e| NavError::InvalidArgument(format!("mode_weights: {e}")))?;
        (0..n_low).map(|_| pick.sample(&mut assign_rng)).collect()
    };

    let stride = spec.tile_stride;
    let mut low_rng = root.sub("low");
    let mut low_tiles = Vec::with_capacity(n_low);
    for i in 0..n_low {
        let (x, y) = (i as u32 % w, i as u32 / w);
        let noise = gaussian(&mut low_rng, d, spec.background.noise);
        let feature = (0..d)
            .map(|k| {
                let shift = blob_of[i].map_or(0.0, |b| shifts[b][k]);
                (modes[tile_mode[i]][k] + noise[k] + shift) as f32
            })
            .collect();
        low_tiles.push(TileRecord {
            grid_x: x,
            grid_y: y,
            level0_x: stride / 2 + stride * u64::from(x),
            level0_y: stride / 2 + stride * u64::from(y),
            feature,
        });
    }

    // High grid: each low tile splits into f x f children that share its mode.
    let f = spec.high_factor;
    let hs = stride / u64::from(f);
    let (hw, hh) = (w * f, h * f);
    let mut plant_rng = root.sub("plants");
    let mut planted = vec![false; (hw * hh) as usize];
    for (i, b) in blob_of.iter().enumerate() {
        if b.is_none() {
            continue;
        }
        let (x, y) = (i as u32 % w, i as u32 / w);
        let children: Vec<usize> = (0..f * f)
            .map(|c| ((y * f + c / f) * hw + x * f + c % f) as usize)
            .collect();
        let mut any = false;
        for &c in &children {
            if plant_rng.random::<f64>() < spec.high_plant_fraction {
                planted[c] = true;
                any = true;
            }
        }
        if !any {
            planted[children[plant_rng.random_range(0..children.len())]] = true;
        }
    }
    let mut high_rng = root.sub("high");
    let mut high_tiles = Vec::with_capacity((hw * hh) as usize);
    let mut high_plants = vec![Vec::new(); blobs.len()];
    for j in 0..(hw * hh) as usize {
        let (hx, hy) = (j as u32 % hw, j as u32 / hw);
        let parent = ((hy / f) * w + hx / f) as usize;
        let blob = blob_of[parent].filter(|_| planted[j]);
        if let Some(b) = blob {
            high_plants[b].push(j);
        }
        let noise = gaussian(&mut high_rng, d, spec.background.noise);
        let feature = (0..d)
            .map(|k| {
                let shift = blob.map_or(0.0, |b| shifts[b][k]);
                (modes[tile_mode[parent]][k] + noise[k] + shift) as f32
            })
            .collect();
        high_tiles.push(TileRecord {
            grid_x: hx,
            grid_y: hy,
            level0_x: hs / 2 + hs * u64::from(hx),
            level0_y: hs / 2 + hs * u64::from(hy),
            feature,
        });
    }

    let mut rel_rng = root.sub("relevance");
    let scores: BTreeMap<usize, f64> = (0..n_low)
        .map(|i| {
            let named = blob_of[i].is_some_and(|b| spec.anomalies[b].named_by_question);
            let noise: f64 = StandardNormal.sample(&mut rel_rng);
            (i, f64::from(u8::from(named)) + spec.relevance_noise * noise)
        })
        .collect();

    let slide_id = format!("synthetic-{}", spec.seed);
    let diag = stride as f64 * f64::from(w * w + h * h).sqrt();
    let stream = |level, tiles, tile_stride| FeatureStream {
        slide_id: slide_id.clone(),
        level,
        d,
        slide_diag_level0: diag,
        tile_stride_level0: tile_stride,
        tiles,
    };
    let anomaly_count: usize = blobs.iter().map(Vec::len).sum();
    let truth = GroundTruth {
        slide_id: slide_id.clone(),
        blobs: blobs
            .into_iter()
            .zip(high_plants)
            .zip(&spec.anomalies)
            .map(|((tiles, high_plants), a)| BlobTruth { named_by_question: a.named_by_question, tiles, high_plants })
            .collect(),
        anomaly_fraction: anomaly_count as f64 / n_low as f64,
    };
    Ok(SyntheticSlide {
        low: stream(Level::Low, low_tiles, stride as f64),
        high: stream(Level::High, high_tiles, hs as f64),
        relevance: RelevanceSource::from_scores(scores),
        truth,
        question: spec.question.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Full,
    SurpriseOnly,
    RelevanceOnly,
    RandomPool,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Full, Policy::SurpriseOnly, Policy::RelevanceOnly, Policy::RandomPool];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Full => "full",
            Policy::SurpriseOnly => "surprise_only",
            Policy::RelevanceOnly => "relevance_only",
            Policy::RandomPool => "random_pool",
        }
    }

    /// Pool constructor and fusion weight for this policy. `alpha` is the
    /// weight used by the policies that fuse both signals.
    pub fn setup(self, alpha: f64) -> (PoolConstructor, f64) {
        match self {
            Policy::Full => (PoolConstructor::Surprise, alpha),
            Policy::SurpriseOnly => (PoolConstructor::Surprise, 0.0),
            Policy::RelevanceOnly => (PoolConstructor::Relevance, 1.0),
            Policy::RandomPool => (PoolConstructor::Random, alpha),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub policy: Policy,
    pub alpha: f64,
    pub pool_recall: f64,
    pub target_recall: f64,
    pub evidence_recall: f64,
    pub pool_size: usize,
    pub target_count: usize,
    pub evidence_count: usize,
    pub seed: u64,
}

/// Most anomalous tiles that can be held by a set spaced at least `rho`
/// apart, found greedily in tile order.
fn spaced_capacity(low: &FeatureStream, anomalous: &BTreeSet<usize>, rho: f64) -> usize {
    let entries: Vec<FieldEntry> = anomalous
        .iter()
        .map(|&i| {
            let t = &low.tiles[i];
            FieldEntry { tile_index: i, grid_x: t.grid_x, grid_y: t.grid_y, level0_x: t.level0_x, level0_y: t.level0_y, sigma: 0.0 }
        })
        .collect();
    greedy_spacing(entries.iter(), rho, entries.len()).len()
}

/// Hit count over the best achievable hit count for a set of this size.
fn recall(hits: usize, size: usize, capacity: usize) -> f64 {
    let denom = size.min(capacity.max(hits));
    if denom == 0 {
        0.0
    } else {
        hits as f64 / denom as f64
    }
}

/// Recall of a set of ROI center tiles.
///
/// An ROI is a hit when its center tile lies in a blob. The hit count is
/// divided by `min(|set|, C)` where `C` is how many anomalous tiles fit at
/// spacing `rho`, so a set that is all hits (or holds every achievable hit)
/// scores 1.
pub fn roi_recall(tiles: &[usize], rho: f64, truth: &GroundTruth, low: &FeatureStream) -> f64 {
    let low_set = truth.low_set();
    let hits = tiles.iter().filter(|t| low_set.contains(t)).count();
    recall(hits, tiles.len(), spaced_capacity(low, &low_set, rho))
}

/// Share of evidence entries that land on a plant: a high patch carrying
/// one, or a fallback on an anomalous low tile.
pub fn evidence_recall(entries: &[EvidenceEntry], truth: &GroundTruth) -> f64 {
    let low_set = truth.low_set();
    let high_set = truth.high_set();
    let hits = entries
        .iter()
        .filter(|e| match e.level {
            EvidenceLevel::High => high_set.contains(&e.patch_tile_index),
            EvidenceLevel::LowFallback => low_set.contains(&e.patch_tile_index),
        })
        .count();
    recall(hits, entries.len(), high_set.len() + low_set.len())
}

/// Recalls of one run against the planted truth.
pub fn evaluate(
    report: &TrajectoryReport,
    truth: &GroundTruth,
    low: &FeatureStream,
    policy: Policy,
    alpha: f64,
    seed: u64,
) -> Result<EvalResult> {
    if report.slide_id != truth.slide_id || low.slide_id != truth.slide_id {
        return Err(NavError::InvalidArgument(format!(
            "slide mismatch: report `{}`, truth `{}`, stream `{}`",
            report.slide_id, truth.slide_id, low.slide_id
        )));
    }
    let rho = report.routing.rho;
    let pool: Vec<usize> = report.pool.rois.iter().map(|r| r.tile_index).collect();
    let targets: Vec<usize> = report.targets.targets.iter().map(|t| t.tile_index).collect();
    Ok(EvalResult {
        policy,
        alpha,
        pool_recall: roi_recall(&pool, rho, truth, low),
        target_recall: roi_recall(&targets, rho, truth, low),
        evidence_recall: evidence_recall(&report.evidence.entries, truth),
        pool_size: pool.len(),
        target_count: targets.len(),
        evidence_count: report.evidence.total_patches,
        seed,
    })
}

/// Runs one policy on a generated slide, reusing its surprise field.
pub fn run_policy(
    slide: &SyntheticSlide,
    field: &SurpriseField,
    policy: Policy,
    alpha: f64,
    readout: ReadoutVariant,
    cfg: &EngineConfig,
) -> Result<TrajectoryReport> {
    let (pool, alpha_used) = policy.setup(alpha);
    let nav = Navigator::new(EngineConfig { alpha: alpha_used, ..cfg.clone() })
        .with_options(RunOptions { pool, readout, timings: false });
    let question = QuestionSpec::new(slide.question.clone());
    nav.run_with_field(field, &slide.low, Some(&slide.high), &question, &slide.relevance, None)
}

/// One-sided sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut term = 0.5f64.powi(n as i32); // C(n, 0) / 2^n
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += term;
        }
        term *= (n - k) as f64 / (k + 1) as f64;
    }
    tail.min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub better: String,
    pub worse: String,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
    pub mean_gap: f64,
}

fn paired_sign_test(better: &[f64], worse: &[f64], better_name: &str, worse_name: &str) -> SignTest {
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (a, b) in better.iter().zip(worse) {
        match a.partial_cmp(b) {
            Some(std::cmp::Ordering::Greater) => wins += 1,
            Some(std::cmp::Ordering::Less) => losses += 1,
            _ => ties += 1,
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    SignTest {
        better: better_name.into(),
        worse: worse_name.into(),
        wins,
        losses,
        ties,
        p_value: sign_test_p(wins, losses),
        mean_gap: mean(better) - mean(worse),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    /// False when the spec has no anomalies (the check is vacuous).
    pub applicable: bool,
    pub comparisons: Vec<SignTest>,
    /// Every compared mean gap is positive.
    pub passed: bool,
    /// Every gap is positive and significant at `p < 0.05`.
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<EvalResult>,
    pub check: OrderingCheck,
}

impl AblationTable {
    pub fn values(&self, policy: Policy, alpha: f64) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.policy == policy && r.alpha == alpha)
            .map(|r| r.target_recall)
            .collect()
    }

    pub fn mean_target_recall(&self, policy: Policy, alpha: f64) -> f64 {
        let v = self.values(policy, alpha);
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "policy", "alpha", "seed", "pool_recall", "target_recall", "evidence_recall", "pool_size", "targets",
            "evidence",
        ])?;
        for r in &self.rows {
            wtr.write_record([
                r.policy.name().to_string(),
                r.alpha.to_string(),
                r.seed.to_string(),
                r.pool_recall.to_string(),
                r.target_recall.to_string(),
                r.evidence_recall.to_string(),
                r.pool_size.to_string(),
                r.target_count.to_string(),
                r.evidence_count.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// The four policies at the default fusion weight plus the full engine at
/// every weight in [`ALPHA_GRID`], for every seed.
///
/// Seed `s` generates the slide from `spec.with_seed(s)` and runs the engine
/// with `cfg.seed = s`. Rows are sorted by (policy, alpha, seed).
pub fn ablation_grid(spec: &SyntheticSpec, cfg: &EngineConfig, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.len() < 10 {
        return Err(NavError::InvalidArgument(format!("ablation needs at least 10 seeds, got {}", seeds.len())));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let slide = generate(&spec.with_seed(seed))?;
        let cfg = EngineConfig { seed, d: spec.d, hidden: cfg.hidden, ..cfg.clone() };
        let nav = Navigator::new(cfg.clone());
        let field = nav.scan(&slide.low)?;
        let question = QuestionSpec::new(spec.question.clone());
        let mut cell = |policy: Policy, alpha: f64| -> Result<()> {
            let (pool, alpha_used) = policy.setup(alpha);
            let nav = Navigator::new(EngineConfig { alpha: alpha_used, ..cfg.clone() })
                .with_options(RunOptions { pool, ..RunOptions::default() });
            let report = nav.run_with_field(&field, &slide.low, Some(&slide.high), &question, &slide.relevance, None)?;
            rows.push(evaluate(&report, &slide.truth, &slide.low, policy, alpha, seed)?);
            Ok(())
        };
        for policy in Policy::ALL {
            if policy == Policy::Full {
                for alpha in ALPHA_GRID {
                    cell(policy, alpha)?;
                }
            } else {
                cell(policy, cfg_alpha_default())?;
            }
        }
    }
    rows.sort_by(|a, b| {
        a.policy
            .cmp(&b.policy)
            .then(a.alpha.total_cmp(&b.alpha))
            .then(a.seed.cmp(&b.seed))
    });
    let mut table = AblationTable { rows, check: OrderingCheck { applicable: false, comparisons: vec![], passed: true, significant: true } };
    table.check = ordering_check(&table, spec);
    Ok(table)
}

fn cfg_alpha_default() -> f64 {
    EngineConfig::default().alpha
}

/// Directional ordering of mean target recall.
///
/// With both named and unnamed blobs: full beats surprise_only,
/// relevance_only and random_pool, and surprise_only beats random_pool.
/// With only named blobs: full beats random_pool. Without blobs: vacuous.
pub fn ordering_check(table: &AblationTable, spec: &SyntheticSpec) -> OrderingCheck {
    let a = cfg_alpha_default();
    let named = spec.anomalies.iter().any(|b| b.named_by_question);
    let unnamed = spec.anomalies.iter().any(|b| !b.named_by_question);
    let full = table.values(Policy::Full, a);
    let pairs: Vec<(Policy, Policy)> = match (named, unnamed) {
        (true, true) => vec![
            (Policy::Full, Policy::SurpriseOnly),
            (Policy::Full, Policy::RelevanceOnly),
            (Policy::Full, Policy::RandomPool),
            (Policy::SurpriseOnly, Policy::RandomPool),
        ],
        (true, false) => vec![(Policy::Full, Policy::RandomPool)],
        (false, true) => vec![(Policy::Full, Policy::RandomPool), (Policy::SurpriseOnly, Policy::RandomPool)],
        (false, false) => {
            return OrderingCheck { applicable: false, comparisons: vec![], passed: true, significant: true }
        }
    };
    let values = |p: Policy| if p == Policy::Full { full.clone() } else { table.values(p, a) };
    let comparisons: Vec<SignTest> = pairs
        .into_iter()
        .map(|(b, w)| paired_sign_test(&values(b), &values(w), b.name(), w.name()))
        .collect();
    let passed = comparisons.iter().all(|c| c.mean_gap > 0.0);
    let significant = passed && comparisons.iter().all(|c| c.p_value < 0.05);
    OrderingCheck { applicable: true, comparisons, passed, significant }
}

/// Expected target recall of purely random, spaced targets, with the band
/// `mean +/- 3 * sqrt(var / seeds)` for a mean over `seeds` slides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChanceBand {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Which budget a chance band is drawn at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChanceSet {
    /// `k_pool` spaced tiles, compared with pool recall.
    Pool,
    /// `k_search` spaced tiles, compared with target recall.
    Targets,
}

/// Monte Carlo chance level for target recall: `draws` random orders per
/// slide, greedily spaced at the routed `rho`, first `k_search` kept.
pub fn chance_band(spec: &SyntheticSpec, cfg: &EngineConfig, seeds: &[u64], draws: usize) -> Result<ChanceBand> {
    chance_band_for(ChanceSet::Targets, spec, cfg, seeds, draws)
}

pub fn chance_band_for(
    set: ChanceSet,
    spec: &SyntheticSpec,
    cfg: &EngineConfig,
    seeds: &[u64],
    draws: usize,
) -> Result<ChanceBand> {
    let category = spec_category(spec);
    let (mut sum, mut sum_sq, mut n) = (0.0, 0.0, 0usize);
    for &seed in seeds {
        let slide = generate(&spec.with_seed(seed))?;
        let routing = route(category, slide.low.tile_stride_level0, slide.low.slide_diag_level0, cfg)?;
        let budget = match set {
            ChanceSet::Pool => routing.k_pool,
            ChanceSet::Targets => routing.k_search,
        };
        let low_set = slide.truth.low_set();
        let capacity = spaced_capacity(&slide.low, &low_set, routing.rho);
        let entries: Vec<FieldEntry> = slide
            .low
            .tiles
            .iter()
            .enumerate()
            .map(|(i, t)| FieldEntry { tile_index: i, grid_x: t.grid_x, grid_y: t.grid_y, level0_x: t.level0_x, level0_y: t.level0_y, sigma: 0.0 })
            .collect();
        let mut rng = DeterministicRng::new(seed).sub("chance");
        for _ in 0..draws {
            let mut order = entries.clone();
            order.shuffle(&mut rng);
            let kept = greedy_spacing(order.iter(), routing.rho, budget);
            let hits = kept.iter().filter(|e| low_set.contains(&e.tile_index)).count();
            let r = recall(hits, kept.len(), capacity);
            sum += r;
            sum_sq += r * r;
            n += 1;
        }
    }
    let mean = sum / n.max(1) as f64;
    let var = (sum_sq / n.max(1) as f64 - mean * mean).max(0.0);
    let half = 3.0 * (var / seeds.len().max(1) as f64).sqrt();
    Ok(ChanceBand { mean, lo: mean - half, hi: mean + half })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutRow {
    pub readout: ReadoutVariant,
    pub seed: u64,
    pub evidence_recall: f64,
    pub evidence_count: usize,
}

/// Evidence recall of the full engine under each readout variant.
pub fn readout_variants(spec: &SyntheticSpec, cfg: &EngineConfig, seeds: &[u64]) -> Result<Vec<ReadoutRow>> {
    let variants = [ReadoutVariant::FreshLocal, ReadoutVariant::GlobalMemory, ReadoutVariant::Random, ReadoutVariant::LowOnly];
    let mut rows = Vec::new();
    for &seed in seeds {
        let slide = generate(&spec.with_seed(seed))?;
        let cfg = EngineConfig { seed, d: spec.d, ..cfg.clone() };
        let field = Navigator::new(cfg.clone()).scan(&slide.low)?;
        let question = QuestionSpec::new(spec.question.clone());
        for readout in variants {
            let nav = Navigator::new(cfg.clone()).with_options(RunOptions { readout, ..RunOptions::default() });
            let report = nav.run_with_field(&field, &slide.low, Some(&slide.high), &question, &slide.relevance, None)?;
            let eval = evaluate(&report, &slide.truth, &slide.low, Policy::Full, cfg.alpha, seed)?;
            rows.push(ReadoutRow { readout, seed, evidence_recall: eval.evidence_recall, evidence_count: eval.evidence_count });
        }
    }
    Ok(rows)
}

/// One planted-patch trial: an `n x n` neighborhood of patches drawn around
/// one mode (`scale` per coordinate, noise `scale / 2`) with a single patch
/// shifted by `shift` along a random direction. Returns whether the fresh
/// local memory ranks the planted patch within the top `cfg.t_per_roi`.
pub fn planted_patch_trial(seed: u64, n: u32, scale: f64, shift: f64, cfg: &EngineConfig) -> Result<bool> {
    let root = DeterministicRng::new(seed).sub("planted-patch");
    let d = cfg.d;
    let mut rng = root.sub("features");
    let mode = gaussian(&mut rng, d, scale);
    let direction = unit_direction(&mut rng, d);
    let count = (n * n) as usize;
    let planted = rng.random_range(0..count);
    let tiles = (0..count)
        .map(|i| {
            let noise = gaussian(&mut rng, d, scale / 2.0);
            let bump = if i == planted { shift } else { 0.0 };
            TileRecord {
                grid_x: i as u32 % n,
                grid_y: i as u32 / n,
                level0_x: 128 + 256 * u64::from(i as u32 % n),
                level0_y: 128 + 256 * u64::from(i as u32 / n),
                feature: (0..d).map(|k| (mode[k] + noise[k] + bump * direction[k]) as f32).collect(),
            }
        })
        .collect();
    let high = FeatureStream {
        slide_id: format!("planted-{seed}"),
        level: Level::High,
        d,
        slide_diag_level0: 256.0 * f64::from(n) * 2f64.sqrt(),
        tile_stride_level0: 256.0,
        tiles,
    };
    let neigh: Vec<usize> = (0..count).collect();
    let picks = select_local_evidence(&neigh, &high, cfg, &root.sub("roi:0"))?;
    Ok(picks.iter().any(|p| p.tile_index == planted))
}

/// Category the router assigns to the spec's question.
pub fn spec_category(spec: &SyntheticSpec) -> Category {
    crate::router::categorize(&QuestionSpec::new(spec.question.clone()), &KeywordTable::default()).category
}
