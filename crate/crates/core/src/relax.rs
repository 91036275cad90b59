//! Continuous relaxation of the architecture choices of an SC-ML layer.
//!
//! Motif size and per-edge connection type are each represented by raw
//! logits and turned into selection probabilities with a softmax. The
//! recurrent current into neuron `i` is the probability-weighted mixture
//!
//! ```text
//! sum_v p(v) * sum_{r in I_i^v} sum_c p_ir(c) * w_ir^c * a_r[t-1]
//! ```
//!
//! Connection weights and type logits are kept per motif size option; edges
//! that coincide across options do not share parameters.

use crate::topology::LayerLayout;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RelaxError {
    #[error("softmax over an empty option set")]
    EmptyOptions,
    #[error("non-finite logit {0}")]
    NonFinite(f64),
    #[error("expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("edge {from} -> {to} is not a candidate for any motif size")]
    UnknownEdge { from: usize, to: usize },
}

/// Recurrent connection type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnType {
    Excitatory,
    Inhibitory,
    Absent,
}

impl ConnType {
    /// Fixed order, which is also the tie-break priority.
    pub const ALL: [ConnType; 3] = [ConnType::Excitatory, ConnType::Inhibitory, ConnType::Absent];

    pub fn index(self) -> usize {
        match self {
            ConnType::Excitatory => 0,
            ConnType::Inhibitory => 1,
            ConnType::Absent => 2,
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut p = [0.0; 3];
        p[self.index()] = 1.0;
        p
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConnType::Excitatory => "excitatory",
            ConnType::Inhibitory => "inhibitory",
            ConnType::Absent => "absent",
        }
    }
}

/// Numerically stable softmax.
pub fn softmax_probs(logits: &[f64]) -> Result<Vec<f64>, RelaxError> {
    if logits.is_empty() {
        return Err(RelaxError::EmptyOptions);
    }
    if let Some(&x) = logits.iter().find(|x| !x.is_finite()) {
        return Err(RelaxError::NonFinite(x));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

fn softmax3(logits: &[f64; 3]) -> [f64; 3] {
    let max = logits[0].max(logits[1]).max(logits[2]);
    let e = [
        (logits[0] - max).exp(),
        (logits[1] - max).exp(),
        (logits[2] - max).exp(),
    ];
    let sum = e[0] + e[1] + e[2];
    [e[0] / sum, e[1] / sum, e[2] / sum]
}

/// Softmax Jacobian-vector product: gradient w.r.t. logits given the
/// gradient w.r.t. probabilities.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs.iter().zip(grad_probs).map(|(p, g)| p * (g - dot)).collect()
}

/// Index of the largest value; the earliest index wins ties. Returns the
/// index and whether a tie occurred.
pub fn argmax_first(values: &[f64]) -> (usize, bool) {
    let mut best = 0;
    let mut tie = false;
    for (k, &x) in values.iter().enumerate().skip(1) {
        if x > values[best] {
            best = k;
            tie = false;
        } else if x == values[best] {
            tie = true;
        }
    }
    (best, tie)
}

/// Architecture parameters of one SC-ML layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    /// One logit per motif size option.
    pub motif_logits: Vec<f64>,
    /// Committed motif size option, if any.
    pub motif_fixed: Option<usize>,
    /// `conn_logits[option][edge]`, ordered as [`ConnType::ALL`].
    pub conn_logits: Vec<Vec<[f64; 3]>>,
    /// Committed per-edge types; when set the logits are inert.
    pub conn_fixed: Option<Vec<Vec<ConnType>>>,
}

impl ArchParams {
    /// Zero logits: a uniform prior over every choice.
    pub fn uniform(layout: &LayerLayout) -> Self {
        Self {
            motif_logits: vec![0.0; layout.options.len()],
            motif_fixed: None,
            conn_logits: layout
                .options
                .iter()
                .map(|o| vec![[0.0; 3]; o.edges.len()])
                .collect(),
            conn_fixed: None,
        }
    }

    /// Selections forced one-hot: motif option `option`, edge types `types`.
    pub fn one_hot(layout: &LayerLayout, option: usize, types: Vec<ConnType>) -> Self {
        let mut arch = Self::uniform(layout);
        arch.motif_fixed = Some(option);
        let fixed = layout
            .options
            .iter()
            .enumerate()
            .map(|(k, o)| {
                if k == option {
                    types.clone()
                } else {
                    vec![ConnType::Absent; o.edges.len()]
                }
            })
            .collect();
        arch.conn_fixed = Some(fixed);
        arch
    }

    pub fn motif_probs(&self) -> Vec<f64> {
        match self.motif_fixed {
            Some(k) => (0..self.motif_logits.len())
                .map(|j| if j == k { 1.0 } else { 0.0 })
                .collect(),
            None => softmax_probs(&self.motif_logits).expect("motif logits are finite and non-empty"),
        }
    }

    pub fn conn_probs(&self, option: usize, edge: usize) -> [f64; 3] {
        match &self.conn_fixed {
            Some(types) => types[option][edge].one_hot(),
            None => softmax3(&self.conn_logits[option][edge]),
        }
    }

    pub fn selection(&self) -> Selection {
        Selection {
            motif: self.motif_probs(),
            conn: (0..self.conn_logits.len())
                .map(|o| {
                    (0..self.conn_logits[o].len())
                        .map(|e| self.conn_probs(o, e))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.motif_logits.iter().all(|x| x.is_finite())
            && self.conn_logits.iter().flatten().flatten().all(|x| x.is_finite())
    }
}

/// Softmaxed view of [`ArchParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub motif: Vec<f64>,
    pub conn: Vec<Vec<[f64; 3]>>,
}

/// Recurrent weights of one SC-ML layer. Only excitatory weights are stored;
/// inhibitory edges carry the constant `-w_inh` and absent edges carry zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentWeights {
    /// `excitatory[option][edge] >= 0`.
    pub excitatory: Vec<Vec<f64>>,
    pub w_inh: f64,
}

impl RecurrentWeights {
    pub fn zeros(layout: &LayerLayout, w_inh: f64) -> Self {
        Self {
            excitatory: layout.options.iter().map(|o| vec![0.0; o.edges.len()]).collect(),
            w_inh,
        }
    }

    #[inline]
    pub fn weight(&self, option: usize, edge: usize, c: ConnType) -> f64 {
        match c {
            ConnType::Excitatory => self.excitatory[option][edge],
            ConnType::Inhibitory => -self.w_inh,
            ConnType::Absent => 0.0,
        }
    }

    /// Weights ordered as [`ConnType::ALL`].
    #[inline]
    pub fn typed(&self, option: usize, edge: usize) -> [f64; 3] {
        [self.excitatory[option][edge], -self.w_inh, 0.0]
    }

    pub fn clamp_excitatory(&mut self) {
        for w in self.excitatory.iter_mut().flatten() {
            if *w < 0.0 {
                *w = 0.0;
            }
        }
    }
}

/// Mixture current into neuron `i` from the previous-step traces `a_prev`.
pub fn mixed_recurrent_current(
    i: usize,
    a_prev: &[f64],
    sel: &Selection,
    w: &RecurrentWeights,
    layout: &LayerLayout,
) -> Result<f64, RelaxError> {
    if a_prev.len() != layout.n {
        return Err(RelaxError::ShapeMismatch {
            expected: layout.n,
            got: a_prev.len(),
        });
    }
    let mut total = 0.0;
    for (o, option) in layout.options.iter().enumerate() {
        let mut inner = 0.0;
        for k in option.incoming(i) {
            let p = sel.conn[o][k];
            let wt = w.typed(o, k);
            let mixed = p[0] * wt[0] + p[1] * wt[1] + p[2] * wt[2];
            inner += mixed * a_prev[option.edges[k].from];
        }
        total += sel.motif[o] * inner;
    }
    Ok(total)
}

/// Dense effective recurrent matrix, `m[i * n + r]` being the mixed weight of
/// `r -> i`. Options with zero selection probability are skipped.
pub fn effective_matrix(sel: &Selection, w: &RecurrentWeights, layout: &LayerLayout) -> Vec<f64> {
    let n = layout.n;
    let mut m = vec![0.0; n * n];
    for (o, option) in layout.options.iter().enumerate() {
        let pv = sel.motif[o];
        if pv == 0.0 {
            continue;
        }
        for (k, e) in option.edges.iter().enumerate() {
            let p = sel.conn[o][k];
            let wt = w.typed(o, k);
            m[e.to * n + e.from] += pv * (p[0] * wt[0] + p[1] * wt[1] + p[2] * wt[2]);
        }
    }
    m
}

/// Probability-weighted weight of a single edge across all motif options.
pub fn effective_edge_weight(
    from: usize,
    to: usize,
    arch: &ArchParams,
    w: &RecurrentWeights,
    layout: &LayerLayout,
) -> Result<f64, RelaxError> {
    let probs = arch.motif_probs();
    let mut found = false;
    let mut total = 0.0;
    for (o, option) in layout.options.iter().enumerate() {
        if let Some(k) = option.find(from, to) {
            found = true;
            let p = arch.conn_probs(o, k);
            let wt = w.typed(o, k);
            total += probs[o] * (p[0] * wt[0] + p[1] * wt[1] + p[2] * wt[2]);
        }
    }
    if found {
        Ok(total)
    } else {
        Err(RelaxError::UnknownEdge { from, to })
    }
}
