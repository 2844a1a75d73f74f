//! Tile streams, questions, and stream validation.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    High,
}

impl Level {
    pub fn code(self) -> u8 {
        match self {
            Level::Low => 0,
            Level::High => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Level::Low),
            1 => Some(Level::High),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    pub grid_x: u32,
    pub grid_y: u32,
    /// Tile center in level-0 pixels.
    pub level0_x: u64,
    pub level0_y: u64,
    pub feature: Vec<f32>,
}

impl TileRecord {
    pub fn center(&self) -> (f64, f64) {
        (self.level0_x as f64, self.level0_y as f64)
    }

    pub fn feature_f64(&self, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.feature.iter().map(|&v| v as f64));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStream {
    pub slide_id: String,
    pub level: Level,
    pub d: usize,
    pub slide_diag_level0: f64,
    pub tile_stride_level0: f64,
    pub tiles: Vec<TileRecord>,
}

impl FeatureStream {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Tile indices in canonical row-major order by (grid_y, grid_x).
    pub fn row_major_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.tiles.len()).collect();
        order.sort_by_key(|&i| (self.tiles[i].grid_y, self.tiles[i].grid_x));
        order
    }

    /// Grid extent as (width, height) in tiles.
    pub fn grid_extent(&self) -> (u32, u32) {
        self.tiles.iter().fold((0, 0), |(w, h), t| {
            (w.max(t.grid_x + 1), h.max(t.grid_y + 1))
        })
    }

    /// Sorts tiles into canonical order in place.
    pub fn canonicalize(&mut self) {
        self.tiles.sort_by_key(|t| (t.grid_y, t.grid_x));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Morphology,
    Clinical,
    Other,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Morphology => "morphology",
            Category::Clinical => "clinical",
            Category::Other => "other",
        })
    }
}

impl std::str::FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "morphology" => Ok(Category::Morphology),
            "clinical" => Ok(Category::Clinical),
            "other" => Ok(Category::Other),
            _ => Err(format!("unknown category `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_override: Option<Category>,
}

impl QuestionSpec {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            category_override: None,
        }
    }

    pub fn with_category(mut self, category: Category) -> Self {
        self.category_override = Some(category);
        self
    }
}

/// One broken stream invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    ZeroDimension,
    EmptyStream,
    NonPositiveGeometry { field: String, value: f64 },
    FeatureLength { index: usize, expected: usize, got: usize },
    NonFiniteFeature { index: usize },
    DuplicateGrid { first: usize, second: usize, grid_x: u32, grid_y: u32 },
    OutOfOrder { index: usize },
    DiagonalTooSmall { declared: f64, observed: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroDimension => write!(f, "feature dimension is zero"),
            Violation::EmptyStream => write!(f, "stream has no tiles"),
            Violation::NonPositiveGeometry { field, value } => {
                write!(f, "{field} must be positive, got {value}")
            }
            Violation::FeatureLength { index, expected, got } => {
                write!(f, "tile {index} has feature length {got}, expected {expected}")
            }
            Violation::NonFiniteFeature { index } => {
                write!(f, "tile {index} has a non-finite feature value")
            }
            Violation::DuplicateGrid { first, second, grid_x, grid_y } => write!(
                f,
                "tiles {first} and {second} share grid position ({grid_x}, {grid_y})"
            ),
            Violation::OutOfOrder { index } => {
                write!(f, "tile {index} breaks row-major (grid_y, grid_x) order")
            }
            Violation::DiagonalTooSmall { declared, observed } => write!(
                f,
                "slide diagonal {declared} is below the observed center spread {observed}"
            ),
        }
    }
}

/// Checks every stream invariant and returns the violations found.
pub fn validate_stream(stream: &FeatureStream) -> Vec<Violation> {
    let mut out = Vec::new();
    if stream.d == 0 {
        out.push(Violation::ZeroDimension);
    }
    if stream.tiles.is_empty() {
        out.push(Violation::EmptyStream);
    }
    for (field, value) in [
        ("slide_diag_level0", stream.slide_diag_level0),
        ("tile_stride_level0", stream.tile_stride_level0),
    ] {
        if !(value.is_finite() && value > 0.0) {
            out.push(Violation::NonPositiveGeometry {
                field: field.to_string(),
                value,
            });
        }
    }

    let mut seen: HashMap<(u32, u32), usize> = HashMap::with_capacity(stream.tiles.len());
    for (i, t) in stream.tiles.iter().enumerate() {
        if t.feature.len() != stream.d {
            out.push(Violation::FeatureLength {
                index: i,
                expected: stream.d,
                got: t.feature.len(),
            });
        } else if t.feature.iter().any(|v| !v.is_finite()) {
            out.push(Violation::NonFiniteFeature { index: i });
        }
        if let Some(&first) = seen.get(&(t.grid_x, t.grid_y)) {
            out.push(Violation::DuplicateGrid {
                first,
                second: i,
                grid_x: t.grid_x,
                grid_y: t.grid_y,
            });
        } else {
            seen.insert((t.grid_x, t.grid_y), i);
        }
        if i > 0 {
            let prev = &stream.tiles[i - 1];
            if (prev.grid_y, prev.grid_x) > (t.grid_y, t.grid_x) {
                out.push(Violation::OutOfOrder { index: i });
            }
        }
    }

    if stream.slide_diag_level0.is_finite() && stream.tiles.len() > 1 {
        let observed = max_center_distance(stream);
        if stream.slide_diag_level0 < observed {
            out.push(Violation::DiagonalTooSmall {
                declared: stream.slide_diag_level0,
                observed,
            });
        }
    }
    out
}

/// Largest pairwise distance between tile centers, via the convex hull.
pub fn max_center_distance(stream: &FeatureStream) -> f64 {
    let mut pts: Vec<(i128, i128)> = stream
        .tiles
        .iter()
        .map(|t| (t.level0_x as i128, t.level0_y as i128))
        .collect();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 2 {
        return 0.0;
    }
    let hull = convex_hull(&pts);
    let mut best = 0i128;
    for (i, a) in hull.iter().enumerate() {
        for b in &hull[i + 1..] {
            let (dx, dy) = (a.0 - b.0, a.1 - b.1);
            best = best.max(dx * dx + dy * dy);
        }
    }
    (best as f64).sqrt()
}

// Andrew's monotone chain over sorted, deduplicated points.
fn convex_hull(pts: &[(i128, i128)]) -> Vec<(i128, i128)> {
    fn cross(o: (i128, i128), a: (i128, i128), b: (i128, i128)) -> i128 {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    }
    let mut lower: Vec<(i128, i128)> = Vec::new();
    for &p in pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i128, i128)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(gx: u32, gy: u32, d: usize) -> TileRecord {
        TileRecord {
            grid_x: gx,
            grid_y: gy,
            level0_x: gx as u64 * 100 + 50,
            level0_y: gy as u64 * 100 + 50,
            feature: vec![0.5; d],
        }
    }

    fn stream(tiles: Vec<TileRecord>) -> FeatureStream {
        FeatureStream {
            slide_id: "s".into(),
            level: Level::Low,
            d: 3,
            slide_diag_level0: 1000.0,
            tile_stride_level0: 100.0,
            tiles,
        }
    }

    #[test]
    fn well_formed_stream_is_clean() {
        let s = stream(vec![tile(0, 0, 3), tile(1, 0, 3), tile(0, 1, 3)]);
        assert!(validate_stream(&s).is_empty());
    }

    #[test]
    fn duplicate_grid_names_both_indices() {
        let s = stream(vec![tile(0, 0, 3), tile(1, 0, 3), tile(1, 0, 3)]);
        let v = validate_stream(&s);
        assert_eq!(
            v,
            vec![Violation::DuplicateGrid { first: 1, second: 2, grid_x: 1, grid_y: 0 }]
        );
    }

    #[test]
    fn short_feature_names_tile() {
        let s = stream(vec![tile(0, 0, 3), tile(1, 0, 2), tile(0, 1, 3)]);
        assert_eq!(
            validate_stream(&s),
            vec![Violation::FeatureLength { index: 1, expected: 3, got: 2 }]
        );
    }

    #[test]
    fn validation_is_pure() {
        let s = stream(vec![tile(1, 0, 3), tile(0, 0, 3), tile(0, 0, 2)]);
        let before = s.clone();
        let a = validate_stream(&s);
        let b = validate_stream(&s);
        assert_eq!(a, b);
        assert_eq!(s, before);
        assert!(!a.is_empty());
    }

    #[test]
    fn order_and_diagonal_checked() {
        let mut s = stream(vec![tile(0, 1, 3), tile(0, 0, 3)]);
        s.slide_diag_level0 = 50.0;
        let v = validate_stream(&s);
        assert!(v.contains(&Violation::OutOfOrder { index: 1 }));
        assert!(v.iter().any(|x| matches!(x, Violation::DiagonalTooSmall { .. })));
    }

    #[test]
    fn hull_distance_matches_brute_force() {
        let tiles: Vec<TileRecord> = (0..7)
            .flat_map(|y| (0..5).map(move |x| tile(x, y, 3)))
            .collect();
        let s = stream(tiles);
        let mut brute = 0.0f64;
        for a in &s.tiles {
            for b in &s.tiles {
                let (ax, ay) = a.center();
                let (bx, by) = b.center();
                brute = brute.max(((ax - bx).powi(2) + (ay - by).powi(2)).sqrt());
            }
        }
        assert_eq!(max_center_distance(&s), brute);
    }
}
