//! Keyword question router: category, NMS spacing, and search/pool budgets.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::error::{NavError, Result};
use crate::types::{Category, QuestionSpec};

/// Minimum NMS spacing (level-0 px) for morphology questions.
pub const MORPHOLOGY_SPACING: f64 = 4096.0;
/// Minimum NMS spacing (level-0 px) for clinical questions.
pub const CLINICAL_SPACING: f64 = 20480.0;
/// Spacing for other questions, as a fraction of the slide diagonal.
pub const OTHER_SPACING_FRACTION: f64 = 0.08;

const DEFAULT_TABLE: &str = include_str!("../data/keywords.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordTable {
    pub morphology_keywords: Vec<String>,
    pub clinical_keywords: Vec<String>,
}

impl Default for KeywordTable {
    fn default() -> Self {
        Self::parse(DEFAULT_TABLE).expect("bundled keyword table parses")
    }
}

impl KeywordTable {
    /// Parses the two-section text format (`[morphology]` / `[clinical]`
    /// headers, one keyword per line, `#` comments).
    pub fn parse(text: &str) -> Result<Self> {
        let mut morph = Vec::new();
        let mut clin = Vec::new();
        let mut section: Option<Category> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match name.trim().to_ascii_lowercase().as_str() {
                    "morphology" => Some(Category::Morphology),
                    "clinical" => Some(Category::Clinical),
                    other => {
                        return Err(NavError::Format(format!(
                            "keyword table line {}: unknown section `{other}`",
                            n + 1
                        )))
                    }
                };
                continue;
            }
            let kw = tokenize(line).join(" ");
            if kw.is_empty() {
                continue;
            }
            match section {
                Some(Category::Morphology) => morph.push(kw),
                Some(Category::Clinical) => clin.push(kw),
                _ => {
                    return Err(NavError::Format(format!(
                        "keyword table line {}: keyword outside a section",
                        n + 1
                    )))
                }
            }
        }
        let table = Self {
            morphology_keywords: morph,
            clinical_keywords: clin,
        };
        table.check_disjoint()?;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn check_disjoint(&self) -> Result<()> {
        let m: BTreeSet<&String> = self.morphology_keywords.iter().collect();
        if let Some(dup) = self.clinical_keywords.iter().find(|k| m.contains(k)) {
            return Err(NavError::Format(format!(
                "keyword `{dup}` appears in both sections"
            )));
        }
        Ok(())
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn matches(tokens: &[String], keyword: &str) -> bool {
    let kw: Vec<&str> = keyword.split(' ').collect();
    tokens
        .windows(kw.len())
        .any(|w| w.iter().zip(&kw).all(|(a, b)| a == b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorized {
    pub category: Category,
    pub matched_keywords: Vec<String>,
}

/// Keyword vote: more distinct hits wins, morphology wins nonzero ties,
/// no hits is `Other`. An explicit override always wins.
pub fn categorize(question: &QuestionSpec, table: &KeywordTable) -> Categorized {
    let tokens = tokenize(&question.text);
    let hits = |list: &[String]| -> Vec<String> {
        list.iter().filter(|k| matches(&tokens, k)).cloned().collect()
    };
    let morph = hits(&table.morphology_keywords);
    let clin = hits(&table.clinical_keywords);
    let voted = if morph.is_empty() && clin.is_empty() {
        Category::Other
    } else if morph.len() >= clin.len() {
        Category::Morphology
    } else {
        Category::Clinical
    };
    let matched_keywords = morph.into_iter().chain(clin).collect();
    Categorized {
        category: question.category_override.unwrap_or(voted),
        matched_keywords,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub category: Category,
    /// NMS spacing in level-0 pixels.
    pub rho: f64,
    pub k_search: usize,
    pub k_pool: usize,
    pub matched_keywords: Vec<String>,
}

/// Spacing and budgets for one category. `d_min` is the low-magnification
/// tile stride; `slide_diag` the level-0 slide diagonal.
pub fn route(category: Category, d_min: f64, slide_diag: f64, cfg: &EngineConfig) -> Result<RoutingDecision> {
    if !(d_min > 0.0 && slide_diag > 0.0) {
        return Err(NavError::InvalidArgument(format!(
            "route needs positive d_min and slide_diag (got {d_min}, {slide_diag})"
        )));
    }
    let (base, k_search) = match category {
        Category::Morphology => (MORPHOLOGY_SPACING, cfg.k0 + 2),
        Category::Clinical => (CLINICAL_SPACING, cfg.k0 + 3),
        Category::Other => (OTHER_SPACING_FRACTION * slide_diag, cfg.k0),
    };
    Ok(RoutingDecision {
        category,
        rho: d_min.max(base),
        k_search,
        k_pool: cfg.pool_floor.max(k_search * cfg.r_max),
        matched_keywords: Vec::new(),
    })
}

/// Even split of the remaining targets over the remaining rounds, larger
/// shares first.
pub fn split_rounds(remaining_targets: usize, remaining_rounds: usize) -> Vec<usize> {
    if remaining_rounds == 0 {
        return Vec::new();
    }
    let base = remaining_targets / remaining_rounds;
    let extra = remaining_targets % remaining_rounds;
    (0..remaining_rounds)
        .map(|i| base + usize::from(i < extra))
        .collect()
}
