//! Pointy-top hexagonal binning of the 2D layout. Each zoom level is bound
//! to one cluster granularity and its own cell size.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::colors::HslColor;
use super::ClusterTree;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zoom {
    Far,
    Mid,
    Near,
}

impl Zoom {
    pub const ALL: [Zoom; 3] = [Zoom::Far, Zoom::Mid, Zoom::Near];

    /// Cluster level shown at this zoom.
    pub fn level(self) -> usize {
        match self {
            Zoom::Far => 0,
            Zoom::Mid => 1,
            Zoom::Near => 2,
        }
    }

    /// Hexagons across the larger layout extent.
    pub fn divisions(self) -> f64 {
        match self {
            Zoom::Far => 6.0,
            Zoom::Mid => 12.0,
            Zoom::Near => 24.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Zoom::Far => "far",
            Zoom::Mid => "mid",
            Zoom::Near => "near",
        }
    }

    pub fn parse(s: &str) -> Result<Zoom> {
        match s {
            "far" => Ok(Zoom::Far),
            "mid" => Ok(Zoom::Mid),
            "near" => Ok(Zoom::Near),
            other => Err(Error::InvalidInput(format!("unknown zoom level {other:?}; expected far, mid or near"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HexCell {
    /// Axial coordinates.
    pub q: i64,
    pub r: i64,
    pub center: [f64; 2],
    pub count: usize,
    pub dominant_cluster: usize,
    pub color: HslColor,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HexBinLevel {
    pub zoom: Zoom,
    pub cluster_level: usize,
    /// Center-to-corner radius.
    pub cell_size: f64,
    pub origin: [f64; 2],
    /// Sorted by `(r, q)`.
    pub cells: Vec<HexCell>,
}

impl HexBinLevel {
    pub fn total_count(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }
}

fn cube_round(qf: f64, rf: f64) -> (i64, i64) {
    let sf = -qf - rf;
    let (mut q, mut r, s) = (qf.round(), rf.round(), sf.round());
    let (dq, dr, ds) = ((q - qf).abs(), (r - rf).abs(), (s - sf).abs());
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    (q as i64, r as i64)
}

/// Bins points into hexagons of radius `cell_size` anchored at `origin`.
/// `labels[i]` is the cluster of point `i` and `colors` is indexed by
/// cluster id.
pub fn hexbin_aggregate(
    coords: &Matrix,
    labels: &[usize],
    colors: &[HslColor],
    zoom: Zoom,
    cluster_level: usize,
    cell_size: f64,
    origin: [f64; 2],
) -> Result<HexBinLevel> {
    if coords.cols() != 2 || labels.len() != coords.rows() {
        return Err(Error::shape("hexbin input", coords.rows(), labels.len()));
    }
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(Error::InvalidInput(format!("hex cell size must be positive, got {cell_size}")));
    }
    let sqrt3 = 3f64.sqrt();
    let mut bins: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, row) in coords.iter_rows().enumerate() {
        let x = row[0] as f64 - origin[0];
        let y = row[1] as f64 - origin[1];
        let qf = (sqrt3 / 3.0 * x - y / 3.0) / cell_size;
        let rf = (2.0 / 3.0 * y) / cell_size;
        let (q, r) = cube_round(qf, rf);
        bins.entry((r, q)).or_default().push(i);
    }
    let mut cells = Vec::with_capacity(bins.len());
    for ((r, q), members) in bins {
        let mut tally: BTreeMap<usize, usize> = BTreeMap::new();
        for &m in &members {
            *tally.entry(labels[m]).or_default() += 1;
        }
        // BTreeMap iterates by ascending id, so strict `>` keeps the lower id on ties.
        let mut dominant = (usize::MAX, 0usize);
        for (&cluster, &n) in &tally {
            if n > dominant.1 {
                dominant = (cluster, n);
            }
        }
        let color = *colors
            .get(dominant.0)
            .ok_or_else(|| Error::NotFound(format!("color for cluster {}", dominant.0)))?;
        let cx = origin[0] + cell_size * (sqrt3 * q as f64 + sqrt3 / 2.0 * r as f64);
        let cy = origin[1] + cell_size * 1.5 * r as f64;
        cells.push(HexCell {
            q,
            r,
            center: [cx, cy],
            count: members.len(),
            dominant_cluster: dominant.0,
            color,
            members,
        });
    }
    Ok(HexBinLevel { zoom, cluster_level, cell_size, origin, cells })
}

/// Hexbins for one zoom level of a colored cluster tree.
pub fn hexbin_for_tree(coords: &Matrix, tree: &ClusterTree, zoom: Zoom) -> Result<HexBinLevel> {
    if tree.n_levels() == 0 {
        return Err(Error::InvalidInput("cluster tree has no levels".into()));
    }
    let level = zoom.level().min(tree.n_levels() - 1);
    let colors: Vec<HslColor> = tree
        .nodes
        .iter()
        .map(|n| n.color.ok_or_else(|| Error::InvalidInput(format!("cluster {} has no color", n.id))))
        .collect::<Result<_>>()?;
    let (min, max) = bounds(coords);
    let extent = (max[0] - min[0]).max(max[1] - min[1]);
    let cell_size = if extent > 0.0 { extent / zoom.divisions() } else { 1.0 };
    hexbin_aggregate(coords, &tree.assignment[level], &colors, zoom, level, cell_size, min)
}

fn bounds(coords: &Matrix) -> ([f64; 2], [f64; 2]) {
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for row in coords.iter_rows() {
        for k in 0..2 {
            min[k] = min[k].min(row[k] as f64);
            max[k] = max[k].max(row[k] as f64);
        }
    }
    if coords.rows() == 0 {
        return ([0.0; 2], [0.0; 2]);
    }
    (min, max)
}
