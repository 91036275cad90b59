//! Motif partitions and candidate recurrent edge sets for SC-ML layers.
//!
//! A layer of `n` neurons packed into motifs of size `v` gets every directed
//! pair inside a motif (self-loops included) as a candidate edge. When
//! inter-motif wiring is enabled, neuron `k` of motif `m` is additionally
//! connected in both directions to neuron `k` of motif `m + 1`. Motifs form
//! a chain; there is no wraparound.

use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("motif size {v} does not divide layer size {n}")]
    NonDivisible { n: usize, v: usize },
    #[error("motif size set is empty")]
    Empty,
    #[error("motif sizes must be strictly increasing and positive: {0:?}")]
    Unordered(Vec<usize>),
}

/// Ordered, validated set of candidate motif sizes for one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotifSizeSet(Vec<usize>);

impl MotifSizeSet {
    pub fn new(sizes: Vec<usize>, n: usize) -> Result<Self, TopologyError> {
        if sizes.is_empty() {
            return Err(TopologyError::Empty);
        }
        if sizes[0] == 0 || sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TopologyError::Unordered(sizes));
        }
        if let Some(&v) = sizes.iter().find(|&&v| !n.is_multiple_of(v)) {
            return Err(TopologyError::NonDivisible { n, v });
        }
        Ok(Self(sizes))
    }

    pub fn sizes(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    Intra,
    Inter,
}

/// Directed candidate edge `from -> to` (presynaptic `r`, postsynaptic `i`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
}

/// Neuron `k` belongs to motif `k / v`.
pub fn partition_motifs(n: usize, v: usize) -> Result<Vec<usize>, TopologyError> {
    if v == 0 || !n.is_multiple_of(v) {
        return Err(TopologyError::NonDivisible { n, v });
    }
    Ok((0..n).map(|k| k / v).collect())
}

/// Candidate edges for motif size `v`, sorted by `(to, from)`.
pub fn candidate_edges(n: usize, v: usize, inter_enabled: bool) -> Result<Vec<Edge>, TopologyError> {
    let assignment = partition_motifs(n, v)?;
    let motifs = n / v;
    let mut edges = Vec::with_capacity(motifs * v * v + 2 * v * motifs.saturating_sub(1));
    for to in 0..n {
        let m = assignment[to];
        let offset = to % v;
        let base = m * v;
        // Inter-motif partner in the previous motif precedes the motif's own
        // range in index order, the one in the next motif follows it.
        if inter_enabled && m > 0 {
            edges.push(Edge {
                from: base - v + offset,
                to,
                kind: EdgeKind::Inter,
            });
        }
        for from in base..base + v {
            edges.push(Edge {
                from,
                to,
                kind: EdgeKind::Intra,
            });
        }
        if inter_enabled && m + 1 < motifs {
            edges.push(Edge {
                from: base + v + offset,
                to,
                kind: EdgeKind::Inter,
            });
        }
    }
    Ok(edges)
}

/// Closed-form candidate edge count.
pub fn edge_count(n: usize, v: usize, inter_enabled: bool) -> usize {
    let motifs = n / v;
    motifs * v * v + if inter_enabled { 2 * v * (motifs - 1) } else { 0 }
}

/// Candidate structure for a single motif size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifOption {
    pub motif_size: usize,
    pub assignment: Vec<usize>,
    pub edges: Vec<Edge>,
    /// `incoming[i]` is the range of `edges` whose target is `i`.
    incoming: Vec<Range<usize>>,
}

impl MotifOption {
    pub fn new(n: usize, v: usize, inter_enabled: bool) -> Result<Self, TopologyError> {
        let assignment = partition_motifs(n, v)?;
        let edges = candidate_edges(n, v, inter_enabled)?;
        let mut incoming = vec![0..0; n];
        let mut start = 0;
        for (i, slot) in incoming.iter_mut().enumerate() {
            let mut end = start;
            while end < edges.len() && edges[end].to == i {
                end += 1;
            }
            *slot = start..end;
            start = end;
        }
        Ok(Self {
            motif_size: v,
            assignment,
            edges,
            incoming,
        })
    }

    pub fn motif_count(&self) -> usize {
        self.assignment.len() / self.motif_size
    }

    /// Indices into `edges` of the edges ending at `i`.
    pub fn incoming(&self, i: usize) -> Range<usize> {
        self.incoming[i].clone()
    }

    /// Position of `from -> to` in `edges`, if it is a candidate.
    pub fn find(&self, from: usize, to: usize) -> Option<usize> {
        let range = self.incoming.get(to)?.clone();
        self.edges[range.clone()]
            .binary_search_by_key(&from, |e| e.from)
            .ok()
            .map(|k| range.start + k)
    }
}

/// Candidate structures of one SC-ML layer for every motif size option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub n: usize,
    pub inter_enabled: bool,
    pub options: Vec<MotifOption>,
}

impl LayerLayout {
    pub fn new(n: usize, sizes: &MotifSizeSet, inter_enabled: bool) -> Result<Self, TopologyError> {
        let options = sizes
            .sizes()
            .iter()
            .map(|&v| MotifOption::new(n, v, inter_enabled))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            n,
            inter_enabled,
            options,
        })
    }

    pub fn motif_sizes(&self) -> Vec<usize> {
        self.options.iter().map(|o| o.motif_size).collect()
    }
}
