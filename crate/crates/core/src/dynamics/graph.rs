//! Typed multigraph over previous particles, current particles and abstract
//! nodes sampled from the current particles.

use crate::error::{Error, Result};
use crate::geometry::{subsample_uniform, Point3, SpatialIndex};

/// Edges are stored as `(sender, receiver)` index pairs into the respective
/// node sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsGraph {
    /// Indices into the current particles chosen as abstract nodes.
    pub abstract_idx: Vec<usize>,
    pub abstract_points: Vec<Point3>,
    /// Previous particle -> abstract node.
    pub prev_to_a: Vec<(usize, usize)>,
    /// Current particle -> abstract node.
    pub cur_to_a: Vec<(usize, usize)>,
    pub a_to_a: Vec<(usize, usize)>,
    /// Abstract node -> current particle; the reverse of `cur_to_a`.
    pub a_to_cur: Vec<(usize, usize)>,
}

/// Uniformly samples `n` of the `len` current particles as abstract nodes.
pub fn sample_abstract_nodes(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::EmptyScene("no current particles to place abstract nodes on".into()));
    }
    if n == 0 {
        return Err(Error::invalid("n_abstract must be at least 1"));
    }
    Ok(subsample_uniform(len, n, seed))
}

/// Links every particle to at most two nearest abstract nodes within `r_s`,
/// abstract nodes to each other within `r_s_abstract`, and abstract nodes back
/// to the current particles linked to them.
pub fn build_graph(
    prev: &[Point3],
    cur: &[Point3],
    abstract_idx: &[usize],
    r_s: f64,
    r_s_abstract: f64,
) -> Result<DynamicsGraph> {
    if prev.is_empty() || cur.is_empty() {
        return Err(Error::EmptyScene("dynamics needs nonempty particle sets".into()));
    }
    if let Some(&bad) = abstract_idx.iter().find(|&&i| i >= cur.len()) {
        return Err(Error::invalid(format!("abstract index {bad} out of range")));
    }
    let abstract_points: Vec<Point3> = abstract_idx.iter().map(|&i| cur[i]).collect();
    let near = SpatialIndex::build(abstract_points.clone(), r_s);
    let link = |pts: &[Point3]| -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(2 * pts.len());
        for (i, p) in pts.iter().enumerate() {
            for a in near.radius_neighbors(p, r_s, Some(2)) {
                edges.push((i, a));
            }
        }
        edges
    };
    let prev_to_a = link(prev);
    let cur_to_a = link(cur);
    let far = SpatialIndex::build(abstract_points.clone(), r_s_abstract);
    let mut a_to_a = Vec::new();
    for (u, p) in abstract_points.iter().enumerate() {
        let mut nb = far.radius_neighbors(p, r_s_abstract, None);
        nb.sort_unstable();
        for v in nb {
            if v != u {
                a_to_a.push((u, v));
            }
        }
    }
    let a_to_cur = cur_to_a.iter().map(|&(p, a)| (a, p)).collect();
    Ok(DynamicsGraph {
        abstract_idx: abstract_idx.to_vec(),
        abstract_points,
        prev_to_a,
        cur_to_a,
        a_to_a,
        a_to_cur,
    })
}

impl DynamicsGraph {
    pub fn num_abstract(&self) -> usize {
        self.abstract_idx.len()
    }

    pub fn num_edges(&self) -> usize {
        self.prev_to_a.len() + self.cur_to_a.len() + self.a_to_a.len() + self.a_to_cur.len()
    }
}
