//! Hierarchical HSL palette. Top-level clusters get evenly spaced base hues;
//! each child takes its parent's hue shifted by a small seeded offset
//! (wrapping modulo 1) and a lightness offset, and every pair of nodes on
//! the same level must stay more than `tau` apart in HSL space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ClusterTree;
use crate::error::{Error, Result};

const GOLDEN: f64 = 0.618_033_988_749_894_9;
const BASE_SATURATION: f64 = 0.75;
const BASE_LIGHTNESS: [f64; 2] = [0.45, 0.6];
const LIGHTNESS_RANGE: (f64, f64) = (0.15, 0.9);
const SATURATION_RANGE: (f64, f64) = (0.3, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HslColor {
    pub h: f64,
    pub s: f64,
    pub l: f64,
}

impl HslColor {
    pub fn new(h: f64, s: f64, l: f64) -> Result<Self> {
        let ok = (0.0..1.0).contains(&h) && (0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&l);
        if !ok {
            return Err(Error::InvalidInput(format!("HSL out of range: ({h}, {s}, {l})")));
        }
        Ok(HslColor { h, s, l })
    }

    /// Euclidean distance with hue measured around the circle.
    pub fn distance(&self, other: &HslColor) -> f64 {
        let dh = (self.h - other.h).abs();
        let dh = dh.min(1.0 - dh);
        let ds = self.s - other.s;
        let dl = self.l - other.l;
        (dh * dh + ds * ds + dl * dl).sqrt()
    }

    /// `#rrggbb`.
    pub fn to_hex(&self) -> String {
        let c = (1.0 - (2.0 * self.l - 1.0).abs()) * self.s;
        let hp = self.h * 6.0;
        let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
        let (r, g, b) = match hp as u32 {
            0 => (c, x, 0.0),
            1 => (x, c, 0.0),
            2 => (0.0, c, x),
            3 => (0.0, x, c),
            4 => (x, 0.0, c),
            _ => (c, 0.0, x),
        };
        let m = self.l - c / 2.0;
        let byte = |v: f64| ((v + m).clamp(0.0, 1.0) * 255.0).round() as u8;
        format!("#{:02x}{:02x}{:02x}", byte(r), byte(g), byte(b))
    }
}

/// `(parent + delta) mod 1`, kept inside `[0, 1)`.
pub fn child_hue(parent: f64, delta: f64) -> f64 {
    let h = (parent + delta).rem_euclid(1.0);
    if h >= 1.0 { 0.0 } else { h }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorConfig {
    pub tau: f64,
    /// Children shift hue by a value drawn from `[-delta_h, delta_h]`.
    pub delta_h: f64,
    pub lightness_step: f64,
    pub seed: u64,
    /// Candidates tried per node before the level is retried.
    pub candidates: usize,
    /// Whole-level retries before falling back.
    pub max_attempts: usize,
}

impl Default for ColorConfig {
    fn default() -> Self {
        ColorConfig {
            tau: 0.15,
            delta_h: 0.05,
            lightness_step: 0.12,
            seed: 42,
            candidates: 400,
            max_attempts: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    /// Indexed by cluster node id.
    pub colors: Vec<HslColor>,
    /// Per level: true when the constraint could not be met and the
    /// golden-ratio fallback was used.
    pub fallback: Vec<bool>,
}

/// Smallest same-level pairwise distance.
pub fn min_pairwise_distance(colors: &[HslColor]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in colors.iter().enumerate() {
        for b in &colors[i + 1..] {
            best = best.min(a.distance(b));
        }
    }
    best
}

pub fn assign_colors(tree: &ClusterTree, config: &ColorConfig) -> Palette {
    let mut colors: Vec<Option<HslColor>> = vec![None; tree.nodes.len()];
    let mut fallback = Vec::with_capacity(tree.n_levels());
    for level in 0..tree.n_levels() {
        let ids = &tree.levels[level];
        let chosen = if level == 0 {
            top_level(ids.len(), config)
        } else {
            let parents: Vec<HslColor> = ids
                .iter()
                .map(|&id| colors[tree.nodes[id].parent.expect("non-root node has a parent")].expect("parent colored"))
                .collect();
            child_level(&parents, level, config)
        };
        let (level_colors, fell_back) = chosen.map(|c| (c, false)).unwrap_or_else(|| {
            let c = if level == 0 {
                (0..ids.len())
                    .map(|i| HslColor { h: (i as f64 * GOLDEN).fract(), s: BASE_SATURATION, l: BASE_LIGHTNESS[i % 2] })
                    .collect()
            } else {
                fallback_level(tree, ids, &colors, config)
            };
            (c, true)
        });
        for (&id, c) in ids.iter().zip(level_colors) {
            colors[id] = Some(c);
        }
        fallback.push(fell_back);
    }
    Palette {
        colors: colors.into_iter().map(|c| c.expect("every node colored")).collect(),
        fallback,
    }
}

fn top_level(k: usize, config: &ColorConfig) -> Option<Vec<HslColor>> {
    let base: Vec<HslColor> = (0..k)
        .map(|i| HslColor { h: i as f64 / k as f64, s: BASE_SATURATION, l: BASE_LIGHTNESS[i % 2] })
        .collect();
    if k < 2 || min_pairwise_distance(&base) > config.tau {
        return Some(base);
    }
    // Too many top-level clusters for plain spacing: search around the base hues.
    let band = 0.5 / k as f64;
    search(&base, band, 0, config)
}

fn child_level(parents: &[HslColor], level: usize, config: &ColorConfig) -> Option<Vec<HslColor>> {
    search(parents, config.delta_h, level, config)
}

/// Greedy max-min placement: each node takes, among seeded candidates near
/// its anchor color, the one farthest from the colors already placed.
fn search(anchors: &[HslColor], band: f64, level: usize, config: &ColorConfig) -> Option<Vec<HslColor>> {
    for attempt in 0..config.max_attempts {
        let stream = config.seed ^ ((level as u64) << 32) ^ attempt as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let mut placed: Vec<HslColor> = Vec::with_capacity(anchors.len());
        let mut ok = true;
        for anchor in anchors {
            let mut best: Option<(f64, HslColor)> = None;
            for c in 0..config.candidates.max(1) {
                let candidate = if c == 0 {
                    *anchor
                } else {
                    let dh = if band > 0.0 { rng.random_range(-band..=band) } else { 0.0 };
                    let steps = rng.random_range(-3i32..=3) as f64;
                    HslColor {
                        h: child_hue(anchor.h, dh),
                        s: rng.random_range(SATURATION_RANGE.0..=SATURATION_RANGE.1),
                        l: (anchor.l + steps * config.lightness_step).clamp(LIGHTNESS_RANGE.0, LIGHTNESS_RANGE.1),
                    }
                };
                let score = placed.iter().map(|p| p.distance(&candidate)).fold(f64::INFINITY, f64::min);
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, candidate));
                }
            }
            let (score, color) = best.expect("at least one candidate");
            if score <= config.tau {
                ok = false;
                break;
            }
            placed.push(color);
        }
        if ok {
            return Some(placed);
        }
    }
    None
}

/// Golden-ratio hue spacing inside each parent's band, with alternating
/// lightness offsets between siblings.
fn fallback_level(tree: &ClusterTree, ids: &[usize], colors: &[Option<HslColor>], config: &ColorConfig) -> Vec<HslColor> {
    ids.iter()
        .map(|&id| {
            let node = &tree.nodes[id];
            let parent_id = node.parent.expect("non-root node has a parent");
            let parent = colors[parent_id].expect("parent colored");
            let j = tree.nodes[parent_id].children.iter().position(|&c| c == id).unwrap_or(0);
            let dh = config.delta_h * (2.0 * ((j + 1) as f64 * GOLDEN).fract() - 1.0);
            let step = ((j + 1) / 2) as f64 * if j % 2 == 1 { 1.0 } else { -1.0 };
            HslColor {
                h: child_hue(parent.h, dh),
                s: parent.s,
                l: (parent.l + step * config.lightness_step).clamp(LIGHTNESS_RANGE.0, LIGHTNESS_RANGE.1),
            }
        })
        .collect()
}
