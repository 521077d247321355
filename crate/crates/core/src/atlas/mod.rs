//! The concept atlas of one SAE: a 2D layout of explanation embeddings, a
//! three-level Ward cluster hierarchy with topic labels and colors, and
//! hexbin aggregates for zoomable rendering.

pub mod colors;
pub mod hexbin;
pub mod layout;
pub mod topics;
pub mod ward;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use colors::{assign_colors, ColorConfig, HslColor, Palette};
pub use hexbin::{hexbin_aggregate, HexBinLevel, HexCell, Zoom};
pub use layout::{compute_layout, Layout, LayoutConfig};
pub use topics::{extract_topics, StopWords, TopicTerm};

use crate::error::{Error, Result};
use crate::tensor::{l2_norm, Matrix};

pub const DEFAULT_LEVEL_SIZES: [usize; 3] = [10, 30, 90];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterNode {
    /// Unique across the whole tree; coarser levels get smaller ids.
    pub id: usize,
    pub level: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Feature ids, ascending.
    pub members: Vec<usize>,
    /// Mean layout position of the members, once a layout exists.
    pub centroid: Option<[f32; 2]>,
    pub topics: Vec<TopicTerm>,
    pub color: Option<HslColor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub n_features: usize,
    pub level_sizes: Vec<usize>,
    /// Node ids per level.
    pub levels: Vec<Vec<usize>>,
    pub nodes: Vec<ClusterNode>,
    /// `assignment[level][feature]` is the node id holding that feature.
    pub assignment: Vec<Vec<usize>>,
    /// Per level: whether colors came from the fallback scheme.
    #[serde(default)]
    pub palette_fallback: Vec<bool>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Clamps requested level sizes to the number of features, returning a
/// warning when anything changed.
pub fn clamp_level_sizes(n_features: usize, requested: &[usize]) -> (Vec<usize>, Option<String>) {
    let clamped: Vec<usize> = requested.iter().map(|&k| k.min(n_features).max(1)).collect();
    let warning = (clamped != requested).then(|| {
        format!("only {n_features} features: cluster level sizes {requested:?} clamped to {clamped:?}")
    });
    (clamped, warning)
}

/// Builds the hierarchy by cutting a single Ward dendrogram of the
/// L2-normalized embeddings at each level size.
pub fn build_cluster_tree(embeddings: &Matrix, level_sizes: &[usize]) -> Result<ClusterTree> {
    let n = embeddings.rows();
    if level_sizes.is_empty() || level_sizes.contains(&0) {
        return Err(Error::InvalidInput("level sizes must be non-empty and positive".into()));
    }
    if level_sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("level sizes must be non-decreasing".into()));
    }
    let largest = *level_sizes.last().expect("non-empty");
    if n < largest {
        return Err(Error::InvalidInput(format!(
            "{n} features cannot form {largest} clusters"
        )));
    }
    let points: Vec<Vec<f64>> = embeddings
        .iter_rows()
        .map(|r| {
            let norm = l2_norm(r) as f64;
            r.iter().map(|v| if norm > 0.0 { *v as f64 / norm } else { 0.0 }).collect()
        })
        .collect();
    let dendrogram = ward::ward_linkage(&points)?;

    let mut nodes: Vec<ClusterNode> = Vec::new();
    let mut levels = Vec::new();
    let mut assignment = Vec::new();
    for (level, &k) in level_sizes.iter().enumerate() {
        let labels = dendrogram.cut(k)?;
        let offset = nodes.len();
        let mut ids = Vec::with_capacity(k);
        for label in 0..k {
            let members: Vec<usize> = (0..n).filter(|&f| labels[f] == label).collect();
            let parent = level
                .checked_sub(1)
                .map(|up| assignment_of(&assignment, up, members[0]));
            let id = offset + label;
            if let Some(p) = parent {
                nodes[p].children.push(id);
            }
            nodes.push(ClusterNode {
                id,
                level,
                parent,
                children: Vec::new(),
                members,
                centroid: None,
                topics: Vec::new(),
                color: None,
            });
            ids.push(id);
        }
        assignment.push(labels.iter().map(|l| offset + l).collect::<Vec<_>>());
        levels.push(ids);
    }
    let tree = ClusterTree {
        n_features: n,
        level_sizes: level_sizes.to_vec(),
        levels,
        nodes,
        assignment,
        palette_fallback: vec![false; level_sizes.len()],
        warnings: Vec::new(),
    };
    check_nesting(&tree)?;
    Ok(tree)
}

fn assignment_of(assignment: &[Vec<usize>], level: usize, feature: usize) -> usize {
    assignment[level][feature]
}

impl ClusterTree {
    pub fn node(&self, id: usize) -> &ClusterNode {
        &self.nodes[id]
    }

    pub fn level_nodes(&self, level: usize) -> impl Iterator<Item = &ClusterNode> {
        self.levels[level].iter().map(move |&id| &self.nodes[id])
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Fills each node's centroid from layout coordinates.
    pub fn set_centroids(&mut self, coords: &Matrix) {
        for node in &mut self.nodes {
            let n = node.members.len() as f32;
            let (sx, sy) = node
                .members
                .iter()
                .fold((0.0f32, 0.0f32), |(x, y), &m| (x + coords.get(m, 0), y + coords.get(m, 1)));
            node.centroid = Some([sx / n, sy / n]);
        }
    }

    /// Labels every node with its top c-TF-IDF terms. Documents are the
    /// explanations of each node's members; IDF is computed per level.
    pub fn set_topics(&mut self, explanations: &[String], stop: &StopWords, top_n: usize) -> Result<()> {
        for level in 0..self.n_levels() {
            let ids = self.levels[level].clone();
            let docs: Vec<Vec<&str>> = ids
                .iter()
                .map(|&id| self.nodes[id].members.iter().map(|&m| explanations[m].as_str()).collect())
                .collect();
            let topics = extract_topics(&docs, stop, top_n)?;
            for (id, t) in ids.into_iter().zip(topics) {
                self.nodes[id].topics = t;
            }
        }
        Ok(())
    }

    pub fn set_palette(&mut self, palette: &Palette) {
        for node in &mut self.nodes {
            node.color = Some(palette.colors[node.id]);
        }
        self.palette_fallback = palette.fallback.clone();
    }
}

/// Every feature sits in exactly one node per level, and each finer node's
/// members lie inside exactly one node of the level above.
pub fn check_nesting(tree: &ClusterTree) -> Result<()> {
    for level in 0..tree.n_levels() {
        let mut seen = BTreeSet::new();
        for node in tree.level_nodes(level) {
            for &m in &node.members {
                if !seen.insert(m) {
                    return Err(Error::InvalidInput(format!("feature {m} appears twice on level {level}")));
                }
                if tree.assignment[level][m] != node.id {
                    return Err(Error::InvalidInput(format!("assignment of feature {m} disagrees on level {level}")));
                }
            }
        }
        if seen.len() != tree.n_features {
            return Err(Error::InvalidInput(format!("level {level} covers {} of {} features", seen.len(), tree.n_features)));
        }
        if level == 0 {
            continue;
        }
        for node in tree.level_nodes(level) {
            let parents: BTreeSet<usize> = node.members.iter().map(|&m| tree.assignment[level - 1][m]).collect();
            if parents.len() != 1 || node.parent != parents.first().copied() {
                return Err(Error::InvalidInput(format!("node {} is not nested in one parent", node.id)));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_embeddings(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn tree_levels_nest_and_cover() {
        let tree = build_cluster_tree(&random_embeddings(120, 16, 1), &DEFAULT_LEVEL_SIZES).unwrap();
        assert_eq!(tree.levels.iter().map(Vec::len).collect::<Vec<_>>(), vec![10, 30, 90]);
        check_nesting(&tree).unwrap();
        let child_total: usize = tree.level_nodes(0).map(|n| n.children.len()).sum();
        assert_eq!(child_total, 30);
    }

    #[test]
    fn too_few_features_is_an_error_and_clamp_warns() {
        let m = random_embeddings(50, 8, 2);
        assert!(build_cluster_tree(&m, &DEFAULT_LEVEL_SIZES).is_err());
        let (sizes, warn) = clamp_level_sizes(50, &DEFAULT_LEVEL_SIZES);
        assert_eq!(sizes, vec![10, 30, 50]);
        assert!(warn.is_some());
        check_nesting(&build_cluster_tree(&m, &sizes).unwrap()).unwrap();
        assert!(clamp_level_sizes(128, &DEFAULT_LEVEL_SIZES).1.is_none());
    }

    #[test]
    fn nesting_check_catches_corruption() {
        let mut tree = build_cluster_tree(&random_embeddings(100, 8, 3), &DEFAULT_LEVEL_SIZES).unwrap();
        let victim = tree.levels[2][0];
        tree.nodes[victim].parent = Some(usize::MAX);
        assert!(check_nesting(&tree).is_err());
    }
}
