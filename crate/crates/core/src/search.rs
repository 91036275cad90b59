//! The architecture search driver.
//!
//! Each iteration takes three steps:
//!
//! 1. architecture: a virtual weight step `w' = w - lr_w * grad_w L_train`,
//!    then a logit step along `grad_alpha L_valid` evaluated at `w'`
//!    (first order: `w'` is treated as a constant of `alpha`);
//! 2. weights: a step along `grad_w L_train` at the updated logits;
//! 3. intrinsic plasticity on a fresh spiking pass over the training batch.
//!
//! Motif logits train during the first phase only; at the switch every
//! layer's motif size is fixed to its most probable option. The result is
//! discretized by per-edge argmax and retrained from fresh weights.

use crate::data::Example;
use crate::grad::{self, GradError, OptimState, UpdateTarget};
use crate::ip::{self, IpConfig, IpError};
use crate::network::{
    self, ActivityRecord, Architecture, Intrinsics, Matrix, Network, NetworkError, RecurrentKernel, Weights,
};
use crate::neuron::{Mode, NeuronIntrinsics};
use crate::relax::{argmax_first, ArchParams, ConnType};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Ip(#[from] IpError),
    #[error("example {0} appears in both the training and the validation batch")]
    DisjointnessViolation(usize),
    #[error("expected a {expected:?} batch, got {got:?}")]
    SplitMismatch { expected: Split, got: Split },
    #[error("operation requires phase {0:?}")]
    WrongPhase(Phase),
    #[error("invalid discrete architecture: {0}")]
    InvalidArchitecture(String),
    #[error("unsupported format version {0}")]
    FormatVersion(u32),
    #[error("empty {0} set")]
    EmptySplit(&'static str),
    #[error("search.{key}: {msg}")]
    InvalidConfig { key: &'static str, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Examples drawn from one split.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub split: Split,
    pub examples: Vec<&'a Example>,
}

impl<'a> Batch<'a> {
    pub fn new(split: Split, examples: Vec<&'a Example>) -> Self {
        Self { split, examples }
    }

    pub fn ids(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.id).collect()
    }
}

/// Which update a gradient evaluation fed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    /// The one-step weight lookahead inside the architecture step.
    VirtualWeights,
    Architecture,
    Weights,
}

/// One gradient evaluation, recorded for auditing data separation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradUse {
    pub iteration: usize,
    pub target: GradTarget,
    pub split: Split,
    pub ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AllParams,
    MotifFixed,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::AllParams => "all_params",
            Phase::MotifFixed => "motif_fixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Mean motif selection probability per size, ordered as
    /// [`alpha_sizes`].
    pub alpha: Vec<f64>,
    /// Mean spikes per step over recurrent neurons.
    pub mean_rate: f64,
}

#[derive(Debug, Clone)]
pub struct SearchState {
    pub arch: Architecture,
    pub weights: Weights,
    pub intr: Intrinsics,
    pub phase: Phase,
    pub iteration: usize,
    history: Vec<HistoryRow>,
    audit: Vec<GradUse>,
}

impl SearchState {
    pub fn new(arch: Architecture, weights: Weights, intr: Intrinsics) -> Self {
        Self {
            arch,
            weights,
            intr,
            phase: Phase::AllParams,
            iteration: 0,
            history: Vec::new(),
            audit: Vec::new(),
        }
    }

    pub fn initial<R: Rng + ?Sized>(net: &Network, rng: &mut R) -> Self {
        Self::new(net.initial_arch(), net.init_weights(rng), net.default_intrinsics())
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn audit(&self) -> &[GradUse] {
        &self.audit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Fraction of `iterations` after which the motif size is fixed.
    pub switch_fraction: f64,
    /// Validation-loss plateau length that ends a phase early; `0` disables.
    pub patience: usize,
    pub use_ip: bool,
    /// Checkpoint period in iterations; `0` writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch_size: 16,
            switch_fraction: 0.5,
            patience: 0,
            use_ip: true,
            checkpoint_every: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.batch_size == 0 {
            return Err(SearchError::InvalidConfig {
                key: "batch_size",
                msg: "must be positive".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.switch_fraction) {
            return Err(SearchError::InvalidConfig {
                key: "switch_fraction",
                msg: "must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }

    pub fn switch_at(&self) -> usize {
        (self.iterations as f64 * self.switch_fraction).round() as usize
    }
}

/// Distinct motif sizes over all SC-ML layers, ascending.
pub fn alpha_sizes(net: &Network) -> Vec<usize> {
    let set: BTreeSet<usize> = net
        .layers
        .iter()
        .filter_map(|l| l.layout.as_ref())
        .flat_map(|lay| lay.motif_sizes())
        .collect();
    set.into_iter().collect()
}

fn alpha_means(net: &Network, arch: &Architecture) -> Vec<f64> {
    alpha_sizes(net)
        .iter()
        .map(|&v| {
            let mut sum = 0.0;
            let mut n = 0;
            for (info, a) in net.layers.iter().zip(&arch.layers) {
                if let (Some(lay), Some(a)) = (&info.layout, a) {
                    if let Some(k) = lay.motif_sizes().iter().position(|&s| s == v) {
                        sum += a.motif_probs()[k];
                        n += 1;
                    }
                }
            }
            sum / n as f64
        })
        .collect()
}

fn mean_rate(net: &Network, acts: &[ActivityRecord]) -> f64 {
    let mut spikes = 0.0;
    let mut slots = 0usize;
    for act in acts {
        for l in net.recurrent_layers() {
            spikes += act.layers[l].s.data.iter().sum::<f64>();
            slots += act.layers[l].s.data.len();
        }
    }
    if slots == 0 {
        0.0
    } else {
        spikes / slots as f64
    }
}

fn mean_gradients(
    net: &Network,
    arch: &Architecture,
    weights: &Weights,
    intr: &Intrinsics,
    batch: &Batch,
) -> Result<grad::BatchGradients, GradError> {
    let mut bg = grad::batch_gradients(net, arch, weights, intr, &batch.examples, Mode::Spiking)?;
    bg.grads.scale(1.0 / bg.count.max(1) as f64);
    Ok(bg)
}

fn mean_loss(
    net: &Network,
    arch: &Architecture,
    weights: &Weights,
    intr: &Intrinsics,
    batch: &Batch,
) -> Result<f64, NetworkError> {
    let losses: Vec<f64> = batch
        .examples
        .par_iter()
        .map(|ex| network::forward(net, arch, weights, intr, &ex.events, Mode::Spiking).and_then(|a| network::loss(&a, ex.label)))
        .collect::<Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

fn check_batches(train: &Batch, valid: &Batch) -> Result<(), SearchError> {
    if train.split != Split::Train {
        return Err(SearchError::SplitMismatch {
            expected: Split::Train,
            got: train.split,
        });
    }
    if valid.split != Split::Valid {
        return Err(SearchError::SplitMismatch {
            expected: Split::Valid,
            got: valid.split,
        });
    }
    let ids: HashSet<usize> = train.examples.iter().map(|e| e.id).collect();
    if let Some(e) = valid.examples.iter().find(|e| ids.contains(&e.id)) {
        return Err(SearchError::DisjointnessViolation(e.id));
    }
    Ok(())
}

/// One search iteration. `ip_cfg = None` disables intrinsic plasticity.
pub fn hrmas_iteration(
    net: &Network,
    state: &mut SearchState,
    train: &Batch,
    valid: &Batch,
    ip_cfg: Option<&IpConfig>,
    opt: &OptimState,
) -> Result<(), SearchError> {
    check_batches(train, valid)?;
    let it = state.iteration;

    let valid_loss = if net.arch_trainable() {
        let lookahead = mean_gradients(net, &state.arch, &state.weights, &state.intr, train)?;
        state.audit.push(GradUse {
            iteration: it,
            target: GradTarget::VirtualWeights,
            split: train.split,
            ids: train.ids(),
        });
        let mut w_virtual = state.weights.clone();
        let mut scratch = state.arch.clone();
        grad::apply_step(&mut scratch, &mut w_virtual, &lookahead.grads, opt, UpdateTarget::Weights)?;

        let arch_grad = mean_gradients(net, &state.arch, &w_virtual, &state.intr, valid)?;
        state.audit.push(GradUse {
            iteration: it,
            target: GradTarget::Architecture,
            split: valid.split,
            ids: valid.ids(),
        });
        let mut untouched = state.weights.clone();
        grad::apply_step(&mut state.arch, &mut untouched, &arch_grad.grads, opt, UpdateTarget::Architecture)?;
        arch_grad.mean_loss()
    } else {
        mean_loss(net, &state.arch, &state.weights, &state.intr, valid)?
    };

    let wg = mean_gradients(net, &state.arch, &state.weights, &state.intr, train)?;
    state.audit.push(GradUse {
        iteration: it,
        target: GradTarget::Weights,
        split: train.split,
        ids: train.ids(),
    });
    let mut untouched = state.arch.clone();
    grad::apply_step(&mut untouched, &mut state.weights, &wg.grads, opt, UpdateTarget::Weights)?;

    let window: Vec<&Example> = match ip_cfg {
        Some(c) if c.window > 0 => train.examples.iter().take(c.window).copied().collect(),
        _ => train.examples.clone(),
    };
    let acts: Vec<ActivityRecord> = window
        .par_iter()
        .map(|ex| network::forward(net, &state.arch, &state.weights, &state.intr, &ex.events, Mode::Spiking))
        .collect::<Result<_, _>>()?;
    let rate = mean_rate(net, &acts);
    if let Some(c) = ip_cfg {
        for l in net.recurrent_layers() {
            ip::adapt_layer(&acts, l, &mut state.intr[l], c)?;
        }
    }

    state.history.push(HistoryRow {
        iteration: it,
        phase: state.phase,
        train_loss: wg.mean_loss(),
        valid_loss,
        alpha: alpha_means(net, &state.arch),
        mean_rate: rate,
    });
    state.iteration += 1;
    Ok(())
}

/// Freeze every layer's motif size at its most probable option; ties go
/// to the smallest size.
pub fn fix_motif_size(net: &Network, state: &mut SearchState) -> Result<(), SearchError> {
    if state.phase != Phase::AllParams {
        return Err(SearchError::WrongPhase(Phase::AllParams));
    }
    for (l, a) in state.arch.layers.iter_mut().enumerate() {
        if let Some(a) = a {
            if a.motif_fixed.is_none() {
                let (k, tie) = argmax_first(&a.motif_probs());
                let sizes = net.layers[l].layout.as_ref().map(|lay| lay.motif_sizes()).unwrap_or_default();
                if tie {
                    log::info!("layer {l}: motif size tie, choosing smallest candidate {}", sizes[k]);
                }
                log::info!("layer {l}: motif size fixed to {}", sizes[k]);
                a.motif_fixed = Some(k);
            }
        }
    }
    state.phase = Phase::MotifFixed;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteEdge {
    pub from: usize,
    pub to: usize,
    #[serde(rename = "type")]
    pub kind: ConnType,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLayer {
    /// Index of the layer in the network.
    pub layer: usize,
    pub layer_size: usize,
    pub motif_size: usize,
    /// Non-absent edges, ordered by `(to, from)`.
    pub edges: Vec<DiscreteEdge>,
    pub intrinsics: Vec<NeuronIntrinsics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteArchitecture {
    pub layers: Vec<DiscreteLayer>,
}

fn option_of(net: &Network, layer: &DiscreteLayer) -> Result<usize, SearchError> {
    let lay = net
        .layers
        .get(layer.layer)
        .and_then(|l| l.layout.as_ref())
        .ok_or_else(|| SearchError::InvalidArchitecture(format!("layer {} is not an SC-ML layer", layer.layer)))?;
    if lay.n != layer.layer_size {
        return Err(SearchError::InvalidArchitecture(format!(
            "layer {} has {} neurons, file says {}",
            layer.layer, lay.n, layer.layer_size
        )));
    }
    lay.motif_sizes()
        .iter()
        .position(|&v| v == layer.motif_size)
        .ok_or_else(|| {
            SearchError::InvalidArchitecture(format!(
                "motif size {} is not a candidate of layer {}",
                layer.motif_size, layer.layer
            ))
        })
}

impl DiscreteArchitecture {
    /// Shape check against `net`.
    pub fn validate(&self, net: &Network) -> Result<(), SearchError> {
        let recurrent = net.recurrent_layers();
        let listed: Vec<usize> = self.layers.iter().map(|l| l.layer).collect();
        if listed != recurrent {
            return Err(SearchError::InvalidArchitecture(format!(
                "architecture covers layers {listed:?}, network has SC-ML layers {recurrent:?}"
            )));
        }
        for layer in &self.layers {
            let o = option_of(net, layer)?;
            let opt = &net.layers[layer.layer].layout.as_ref().expect("checked").options[o];
            if layer.intrinsics.len() != layer.layer_size {
                return Err(SearchError::InvalidArchitecture(format!(
                    "layer {} lists {} intrinsics for {} neurons",
                    layer.layer,
                    layer.intrinsics.len(),
                    layer.layer_size
                )));
            }
            for p in &layer.intrinsics {
                p.validate()
                    .map_err(|e| SearchError::InvalidArchitecture(format!("layer {}: {e}", layer.layer)))?;
            }
            let mut prev: Option<(usize, usize)> = None;
            for e in &layer.edges {
                if opt.find(e.from, e.to).is_none() {
                    return Err(SearchError::InvalidArchitecture(format!(
                        "edge {} -> {} is not a candidate for motif size {}",
                        e.from, e.to, layer.motif_size
                    )));
                }
                if e.kind == ConnType::Absent || !e.weight.is_finite() {
                    return Err(SearchError::InvalidArchitecture(format!(
                        "edge {} -> {} must be excitatory or inhibitory with a finite weight",
                        e.from, e.to
                    )));
                }
                if prev.is_some_and(|p| p >= (e.to, e.from)) {
                    return Err(SearchError::InvalidArchitecture("edges must be sorted by (to, from) without repeats".into()));
                }
                prev = Some((e.to, e.from));
            }
        }
        Ok(())
    }

    /// Relaxed parameters with every selection forced one-hot onto this
    /// architecture.
    pub fn to_relaxed(&self, net: &Network) -> Result<Architecture, SearchError> {
        let mut arch = Architecture {
            layers: vec![None; net.layers.len()],
        };
        for layer in &self.layers {
            let o = option_of(net, layer)?;
            let lay = net.layers[layer.layer].layout.as_ref().expect("checked");
            let opt = &lay.options[o];
            let mut types = vec![ConnType::Absent; opt.edges.len()];
            for e in &layer.edges {
                let k = opt
                    .find(e.from, e.to)
                    .ok_or_else(|| SearchError::InvalidArchitecture(format!("edge {} -> {} not a candidate", e.from, e.to)))?;
                types[k] = e.kind;
            }
            arch.layers[layer.layer] = Some(ArchParams::one_hot(lay, o, types));
        }
        Ok(arch)
    }

    pub fn intrinsics(&self, net: &Network) -> Intrinsics {
        let mut intr = net.default_intrinsics();
        for layer in &self.layers {
            intr[layer.layer] = layer.intrinsics.clone();
        }
        intr
    }

    /// Excitatory weights of `weights` copied onto the retained edges.
    pub fn with_weights(&self, net: &Network, weights: &Weights) -> Result<Self, SearchError> {
        let mut out = self.clone();
        for layer in out.layers.iter_mut() {
            let o = option_of(net, layer)?;
            let opt = &net.layers[layer.layer].layout.as_ref().expect("checked").options[o];
            let rec = weights.rec[layer.layer]
                .as_ref()
                .ok_or_else(|| SearchError::InvalidArchitecture(format!("no recurrent weights for layer {}", layer.layer)))?;
            for e in layer.edges.iter_mut() {
                e.weight = match e.kind {
                    ConnType::Excitatory => rec.excitatory[o][opt.find(e.from, e.to).expect("validated")],
                    ConnType::Inhibitory => -rec.w_inh,
                    ConnType::Absent => 0.0,
                };
            }
        }
        Ok(out)
    }

    fn kernels(&self, net: &Network) -> Vec<Option<RecurrentKernel>> {
        let mut kernels: Vec<Option<RecurrentKernel>> = (0..net.layers.len()).map(|_| None).collect();
        for layer in &self.layers {
            let mut rows = vec![Vec::new(); layer.layer_size];
            for e in &layer.edges {
                rows[e.to].push((e.from, e.weight));
            }
            kernels[layer.layer] = Some(RecurrentKernel::Sparse(rows));
        }
        kernels
    }

    pub fn edge_count(&self) -> usize {
        self.layers.iter().map(|l| l.edges.len()).sum()
    }
}

/// Simulate a discrete architecture directly from its edge list.
pub fn simulate_discrete(
    net: &Network,
    disc: &DiscreteArchitecture,
    ff: &[Matrix],
    events: &[crate::data::SpikeEvent],
    mode: Mode,
) -> Result<ActivityRecord, SearchError> {
    disc.validate(net)?;
    if ff.len() != net.layers.len() {
        return Err(NetworkError::ShapeMismatch(format!("{} feedforward matrices for {} layers", ff.len(), net.layers.len())).into());
    }
    Ok(net.simulate(ff, &disc.kernels(net), &disc.intrinsics(net), events, mode, None)?)
}

/// Per-edge argmax of the connection-type probabilities at the fixed motif
/// size. Ties resolve excitatory, then inhibitory, then absent.
pub fn discretize(net: &Network, state: &SearchState) -> Result<DiscreteArchitecture, SearchError> {
    if state.phase != Phase::MotifFixed {
        return Err(SearchError::WrongPhase(Phase::MotifFixed));
    }
    let mut layers = Vec::new();
    let mut ties = 0;
    for l in net.recurrent_layers() {
        let lay = net.layers[l].layout.as_ref().expect("recurrent layer");
        let a = state.arch.layers[l].as_ref().expect("recurrent layer");
        let w = state.weights.rec[l].as_ref().expect("recurrent layer");
        let o = a.motif_fixed.expect("motif fixed in this phase");
        let opt = &lay.options[o];
        let mut edges = Vec::new();
        for (k, e) in opt.edges.iter().enumerate() {
            let (c, tie) = argmax_first(&a.conn_probs(o, k));
            ties += tie as usize;
            let kind = ConnType::ALL[c];
            if kind != ConnType::Absent {
                edges.push(DiscreteEdge {
                    from: e.from,
                    to: e.to,
                    kind,
                    weight: w.typed(o, k)[c],
                });
            }
        }
        layers.push(DiscreteLayer {
            layer: l,
            layer_size: lay.n,
            motif_size: opt.motif_size,
            edges,
            intrinsics: state.intr[l].clone(),
        });
    }
    if ties > 0 {
        log::info!("discretize: {ties} connection-type ties resolved excitatory > inhibitory > absent");
    }
    Ok(DiscreteArchitecture { layers })
}

/// Uniformly random motif size and connection types, default intrinsics.
pub fn random_architecture<R: Rng + ?Sized>(net: &Network, rng: &mut R) -> DiscreteArchitecture {
    let p = net.config.neuron.intrinsics();
    let layers = net
        .recurrent_layers()
        .into_iter()
        .map(|l| {
            let lay = net.layers[l].layout.as_ref().expect("recurrent layer");
            let opt = &lay.options[rng.random_range(0..lay.options.len())];
            let edges = opt
                .edges
                .iter()
                .filter_map(|e| {
                    let kind = ConnType::ALL[rng.random_range(0..3)];
                    let weight = match kind {
                        ConnType::Excitatory => 0.0,
                        ConnType::Inhibitory => -net.config.w_inh,
                        ConnType::Absent => return None,
                    };
                    Some(DiscreteEdge {
                        from: e.from,
                        to: e.to,
                        kind,
                        weight,
                    })
                })
                .collect();
            DiscreteLayer {
                layer: l,
                layer_size: lay.n,
                motif_size: opt.motif_size,
                edges,
                intrinsics: vec![p; lay.n],
            }
        })
        .collect();
    DiscreteArchitecture { layers }
}

/// Summary statistics of one layer's intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsSummary {
    pub r_mean: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub tau_mean: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl IntrinsicsSummary {
    pub fn of(intr: &[NeuronIntrinsics]) -> Self {
        let n = intr.len().max(1) as f64;
        let fold = |f: fn(&NeuronIntrinsics) -> f64| {
            let v: Vec<f64> = intr.iter().map(f).collect();
            (
                v.iter().sum::<f64>() / n,
                v.iter().copied().fold(f64::INFINITY, f64::min),
                v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        };
        let (r_mean, r_min, r_max) = fold(|p| p.r);
        let (tau_mean, tau_min, tau_max) = fold(|p| p.tau);
        Self {
            r_mean,
            r_min,
            r_max,
            tau_mean,
            tau_min,
            tau_max,
        }
    }
}

/// On-disk form of a discrete architecture. The top-level motif size,
/// layer size, edges and intrinsics summary describe the first SC-ML
/// layer; `layers` holds every layer in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchFile {
    pub format_version: u32,
    pub motif_size: usize,
    pub layer_size: usize,
    pub edges: Vec<DiscreteEdge>,
    pub intrinsics: IntrinsicsSummary,
    pub layers: Vec<DiscreteLayer>,
}

impl ArchFile {
    pub fn from_arch(disc: &DiscreteArchitecture) -> Result<Self, SearchError> {
        let first = disc
            .layers
            .first()
            .ok_or_else(|| SearchError::InvalidArchitecture("no SC-ML layers".into()))?;
        Ok(Self {
            format_version: FORMAT_VERSION,
            motif_size: first.motif_size,
            layer_size: first.layer_size,
            edges: first.edges.clone(),
            intrinsics: IntrinsicsSummary::of(&first.intrinsics),
            layers: disc.layers.clone(),
        })
    }

    pub fn into_arch(self) -> Result<DiscreteArchitecture, SearchError> {
        if self.format_version != FORMAT_VERSION {
            return Err(SearchError::FormatVersion(self.format_version));
        }
        Ok(DiscreteArchitecture { layers: self.layers })
    }
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), SearchError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_arch(path: &Path, disc: &DiscreteArchitecture) -> Result<(), SearchError> {
    let file = ArchFile::from_arch(disc)?;
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_arch(path: &Path) -> Result<DiscreteArchitecture, SearchError> {
    let file: ArchFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    file.into_arch()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub iteration: usize,
    pub phase: Phase,
    pub arch: Architecture,
    pub weights: Weights,
    pub intr: Intrinsics,
    pub history: Vec<HistoryRow>,
}

impl Checkpoint {
    pub fn of(state: &SearchState) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            iteration: state.iteration,
            phase: state.phase,
            arch: state.arch.clone(),
            weights: state.weights.clone(),
            intr: state.intr.clone(),
            history: state.history.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), SearchError> {
        write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, SearchError> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(SearchError::FormatVersion(ck.format_version));
        }
        Ok(ck)
    }

    pub fn into_state(self) -> SearchState {
        SearchState {
            arch: self.arch,
            weights: self.weights,
            intr: self.intr,
            phase: self.phase,
            iteration: self.iteration,
            history: self.history,
            audit: Vec::new(),
        }
    }
}

/// Append-only metrics log. Wall-clock time goes to a separate file so
/// that the metrics of two runs with the same seed compare byte for byte.
struct MetricsLog {
    metrics: csv::Writer<File>,
    timing: csv::Writer<File>,
}

impl MetricsLog {
    fn create(dir: &Path, sizes: &[usize]) -> Result<Self, SearchError> {
        let mut metrics = csv::Writer::from_path(dir.join("metrics.csv"))?;
        let mut header: Vec<String> = ["iteration", "phase", "train_loss", "valid_loss"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(sizes.iter().map(|v| format!("alpha_v{v}")));
        header.push("mean_rate".into());
        metrics.write_record(&header)?;
        metrics.flush()?;
        let mut timing = csv::Writer::from_path(dir.join("timing.csv"))?;
        timing.write_record(["iteration", "wall_clock_s"])?;
        timing.flush()?;
        Ok(Self { metrics, timing })
    }

    fn append(&mut self, row: &HistoryRow, elapsed: f64) -> Result<(), SearchError> {
        let mut rec = vec![
            row.iteration.to_string(),
            row.phase.as_str().to_string(),
            row.train_loss.to_string(),
            row.valid_loss.to_string(),
        ];
        rec.extend(row.alpha.iter().map(|a| a.to_string()));
        rec.push(row.mean_rate.to_string());
        self.metrics.write_record(&rec)?;
        self.metrics.flush()?;
        self.timing.write_record([row.iteration.to_string(), format!("{elapsed:.3}")])?;
        self.timing.flush()?;
        Ok(())
    }
}

/// Endless reshuffled passes over `n` indices.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub state: SearchState,
    pub arch: DiscreteArchitecture,
}

/// The full search: both phases, discretization, and (with `out`) the
/// metrics log, checkpoints and `arch.json`.
#[allow(clippy::too_many_arguments)]
pub fn run_search(
    net: &Network,
    train: &[Example],
    valid: &[Example],
    cfg: &SearchConfig,
    ip_cfg: &IpConfig,
    opt: &OptimState,
    seed: u64,
    out: Option<&Path>,
) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(SearchError::EmptySplit("training"));
    }
    if valid.is_empty() {
        return Err(SearchError::EmptySplit("validation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = SearchState::initial(net, &mut rng);
    let mut train_sampler = BatchSampler::new(train.len(), rng.random());
    let mut valid_sampler = BatchSampler::new(valid.len(), rng.random());
    let mut log_out = match out {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints"))?;
            Some(MetricsLog::create(dir, &alpha_sizes(net))?)
        }
        None => None,
    };
    let ip = cfg.use_ip.then_some(ip_cfg);
    if let Some(c) = ip {
        c.validate()?;
    }

    if !net.arch_trainable() {
        log::info!("architecture fixed; search skipped");
        fix_motif_size(net, &mut state)?;
    } else {
        let started = Instant::now();
        let switch_at = cfg.switch_at();
        let mut best = f64::INFINITY;
        let mut stale = 0;
        for it in 0..cfg.iterations {
            let plateau = cfg.patience > 0 && stale >= cfg.patience;
            if state.phase == Phase::AllParams && (it == switch_at || plateau) {
                fix_motif_size(net, &mut state)?;
                best = f64::INFINITY;
                stale = 0;
            } else if plateau {
                log::info!("validation loss plateaued; stopping at iteration {it}");
                break;
            }
            let tb = Batch::new(
                Split::Train,
                train_sampler.next_batch(cfg.batch_size).into_iter().map(|i| &train[i]).collect(),
            );
            let vb = Batch::new(
                Split::Valid,
                valid_sampler.next_batch(cfg.batch_size).into_iter().map(|i| &valid[i]).collect(),
            );
            hrmas_iteration(net, &mut state, &tb, &vb, ip, opt)?;
            let row = state.history.last().expect("row appended");
            if row.valid_loss < best {
                best = row.valid_loss;
                stale = 0;
            } else {
                stale += 1;
            }
            if it % 10 == 0 || it + 1 == cfg.iterations {
                log::info!(
                    "iter {it:>4} [{}] train {:.4} valid {:.4} rate {:.4}",
                    row.phase.as_str(),
                    row.train_loss,
                    row.valid_loss,
                    row.mean_rate
                );
            }
            if let Some(m) = log_out.as_mut() {
                m.append(row, started.elapsed().as_secs_f64())?;
            }
            if let (Some(dir), true) = (out, cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every.max(1) == 0) {
                Checkpoint::of(&state).save(&dir.join("checkpoints").join(format!("ckpt_{:06}.json", it + 1)))?;
            }
        }
        if state.phase == Phase::AllParams {
            fix_motif_size(net, &mut state)?;
        }
    }

    let arch = discretize(net, &state)?;
    if let Some(dir) = out {
        Checkpoint::of(&state).save(&dir.join("checkpoints").join("final.json"))?;
        save_arch(&dir.join("arch.json"), &arch)?;
    }
    Ok(SearchOutcome { state, arch })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub optimizer: WeightOptimizer,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightOptimizer {
    Sgd,
    #[default]
    Adam,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            lr: 0.02,
            clip: 5.0,
            optimizer: WeightOptimizer::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainRun {
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// The architecture with the trained weights on its edges.
    pub trained: DiscreteArchitecture,
    pub weights: Weights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainReport {
    pub runs: Vec<RetrainRun>,
    pub mean: f64,
    pub std: f64,
    pub best: f64,
}

/// Mean, sample standard deviation and maximum.
pub fn summarize(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), best)
}

/// Fraction of `examples` the discrete network classifies correctly.
pub fn accuracy(net: &Network, disc: &DiscreteArchitecture, ff: &[Matrix], examples: &[Example]) -> Result<f64, SearchError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = examples
        .par_iter()
        .map(|ex| simulate_discrete(net, disc, ff, &ex.events, Mode::Spiking).map(|a| a.predict() == ex.label))
        .collect::<Result<_, _>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
}

/// Fresh weights, weight-only training with intrinsics frozen, then test
/// accuracy of the resulting discrete network.
pub fn retrain_once(
    net: &Network,
    disc: &DiscreteArchitecture,
    train: &[Example],
    test: &[Example],
    cfg: &RetrainConfig,
    seed: u64,
) -> Result<RetrainRun, SearchError> {
    disc.validate(net)?;
    if train.is_empty() {
        return Err(SearchError::EmptySplit("training"));
    }
    let mut arch = disc.to_relaxed(net)?;
    let intr = disc.intrinsics(net);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = net.init_weights(&mut rng);
    let opt = OptimState {
        lr_arch: 0.0,
        lr_weights: cfg.lr,
        clip: cfg.clip,
    };
    let mut adam = grad::Adam::new(&weights);
    let mut sampler = BatchSampler::new(train.len(), rng.random());
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size.max(1));
    for epoch in 0..cfg.epochs {
        let mut loss = 0.0;
        for _ in 0..steps_per_epoch {
            let batch: Vec<&Example> = sampler.next_batch(cfg.batch_size).into_iter().map(|i| &train[i]).collect();
            let mut bg = grad::batch_gradients(net, &arch, &weights, &intr, &batch, Mode::Spiking)?;
            bg.grads.scale(1.0 / bg.count as f64);
            loss += bg.mean_loss();
            match cfg.optimizer {
                WeightOptimizer::Sgd => grad::apply_step(&mut arch, &mut weights, &bg.grads, &opt, UpdateTarget::Weights)?,
                WeightOptimizer::Adam => adam.step(&mut weights, &bg.grads, cfg.lr, cfg.clip)?,
            }
        }
        log::debug!("retrain seed {seed} epoch {epoch}: loss {:.4}", loss / steps_per_epoch as f64);
    }
    let trained = disc.with_weights(net, &weights)?;
    Ok(RetrainRun {
        seed,
        train_accuracy: accuracy(net, &trained, &weights.ff, train)?,
        test_accuracy: accuracy(net, &trained, &weights.ff, test)?,
        trained,
        weights,
    })
}

pub fn retrain(
    net: &Network,
    disc: &DiscreteArchitecture,
    train: &[Example],
    test: &[Example],
    cfg: &RetrainConfig,
    seeds: &[u64],
) -> Result<RetrainReport, SearchError> {
    let runs = seeds
        .iter()
        .map(|&s| retrain_once(net, disc, train, test, cfg, s))
        .collect::<Result<Vec<_>, _>>()?;
    let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let (mean, std, best) = summarize(&accs);
    Ok(RetrainReport { runs, mean, std, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::network::{LayerKind, LayerSpec, NetworkConfig};

    fn toy_net(sizes: Vec<usize>) -> Network {
        Network::new(NetworkConfig {
            input_size: 8,
            horizon: 20,
            classes: 2,
            hidden: vec![LayerSpec {
                size: 8,
                kind: LayerKind::ScMl { motif_sizes: sizes },
            }],
            neuron: Default::default(),
            w_inh: 1.0,
            ff_init_gain: 3.0,
            rec_init_gain: 0.3,
            ablation: Default::default(),
        })
        .unwrap()
    }

    fn toy_data() -> Vec<Example> {
        gen_synthetic(&SyntheticSpec {
            classes: 2,
            input_size: 8,
            horizon: 20,
            n_per_class: 8,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
        .examples
    }

    #[test]
    fn overlapping_batches_are_rejected() {
        let net = toy_net(vec![2, 4]);
        let data = toy_data();
        let mut state = SearchState::initial(&net, &mut ChaCha8Rng::seed_from_u64(0));
        let tb = Batch::new(Split::Train, vec![&data[0], &data[1]]);
        let vb = Batch::new(Split::Valid, vec![&data[1], &data[2]]);
        let err = hrmas_iteration(&net, &mut state, &tb, &vb, None, &OptimState::default()).unwrap_err();
        assert!(matches!(err, SearchError::DisjointnessViolation(1)));
        let wrong = Batch::new(Split::Test, vec![&data[2]]);
        let err = hrmas_iteration(&net, &mut state, &tb, &wrong, None, &OptimState::default()).unwrap_err();
        assert!(matches!(err, SearchError::SplitMismatch { .. }));
        assert!(state.history().is_empty());
    }

    #[test]
    fn zero_rates_leave_state_unchanged() {
        let net = toy_net(vec![2, 4]);
        let data = toy_data();
        let mut state = SearchState::initial(&net, &mut ChaCha8Rng::seed_from_u64(0));
        let before = state.clone();
        let tb = Batch::new(Split::Train, data[..4].iter().collect());
        let vb = Batch::new(Split::Valid, data[4..8].iter().collect());
        let opt = OptimState {
            lr_arch: 0.0,
            lr_weights: 0.0,
            clip: 5.0,
        };
        let ip = IpConfig {
            eta_ip: 0.0,
            ..Default::default()
        };
        hrmas_iteration(&net, &mut state, &tb, &vb, Some(&ip), &opt).unwrap();
        assert_eq!(state.arch, before.arch);
        assert_eq!(state.weights, before.weights);
        assert_eq!(state.intr, before.intr);
        assert_eq!(state.history().len(), 1);
    }

    #[test]
    fn zero_inner_rate_uses_current_weights() {
        let net = toy_net(vec![2, 4]);
        let data = toy_data();
        let state0 = SearchState::initial(&net, &mut ChaCha8Rng::seed_from_u64(3));
        let tb = Batch::new(Split::Train, data[..4].iter().collect());
        let vb = Batch::new(Split::Valid, data[4..8].iter().collect());
        let opt = OptimState {
            lr_arch: 0.1,
            lr_weights: 0.0,
            clip: 1e9,
        };
        let mut state = state0.clone();
        hrmas_iteration(&net, &mut state, &tb, &vb, None, &opt).unwrap();
        let g = mean_gradients(&net, &state0.arch, &state0.weights, &state0.intr, &vb).unwrap();
        let mut expect = state0.arch.clone();
        let mut w = state0.weights.clone();
        grad::apply_step(&mut expect, &mut w, &g.grads, &opt, UpdateTarget::Architecture).unwrap();
        assert_eq!(state.arch, expect);
    }

    #[test]
    fn motif_fix_takes_argmax_and_breaks_ties_low() {
        let net = toy_net(vec![2, 4, 8]);
        let mut state = SearchState::initial(&net, &mut ChaCha8Rng::seed_from_u64(0));
        let p = [0.1f64, 0.7, 0.2];
        state.arch.layers[0].as_mut().unwrap().motif_logits = p.iter().map(|x| x.ln()).collect();
        fix_motif_size(&net, &mut state).unwrap();
        assert_eq!(state.arch.layers[0].as_ref().unwrap().motif_fixed, Some(1));
        assert_eq!(state.phase, Phase::MotifFixed);
        assert!(matches!(fix_motif_size(&net, &mut state), Err(SearchError::WrongPhase(_))));

        let mut state = SearchState::initial(&net, &mut ChaCha8Rng::seed_from_u64(0));
        fix_motif_size(&net, &mut state).unwrap();
        assert_eq!(state.arch.layers[0].as_ref().unwrap().motif_fixed, Some(0));
    }

    #[test]
    fn discretize_ties_and_absent_edges() {
        let net = toy_net(vec![4]);
        let mut state = SearchState::initial(&net, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(discretize(&net, &state), Err(SearchError::WrongPhase(_))));
        fix_motif_size(&net, &mut state).unwrap();
        // uniform logits: every edge ties and resolves excitatory
        let d = discretize(&net, &state).unwrap();
        let n_edges = net.layers[0].layout.as_ref().unwrap().options[0].edges.len();
        assert_eq!(d.layers[0].edges.len(), n_edges);
        assert!(d.layers[0].edges.iter().all(|e| e.kind == ConnType::Excitatory));

        let a = state.arch.layers[0].as_mut().unwrap();
        a.conn_logits[0][0] = [0.2f64.ln(), 0.1f64.ln(), 0.7f64.ln()];
        a.conn_logits[0][1] = [0.0, 1.0, 0.0];
        let d = discretize(&net, &state).unwrap();
        let opt = &net.layers[0].layout.as_ref().unwrap().options[0];
        assert_eq!(d.layers[0].edges.len(), n_edges - 1);
        assert!(d.layers[0].edges.iter().all(|e| (e.from, e.to) != (opt.edges[0].from, opt.edges[0].to)));
        assert_eq!(d.layers[0].edges[0].kind, ConnType::Inhibitory);
        assert_eq!(d.layers[0].edges[0].weight, -1.0);
    }

    #[test]
    fn arch_file_round_trip() {
        let net = toy_net(vec![2, 4]);
        let d = random_architecture(&net, &mut ChaCha8Rng::seed_from_u64(9));
        d.validate(&net).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("arch.json");
        save_arch(&p, &d).unwrap();
        assert_eq!(load_arch(&p).unwrap(), d);
        let text = fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["format_version", "motif_size", "layer_size", "edges", "intrinsics"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(!dir.path().join("arch.json.tmp").exists());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let net = toy_net(vec![2, 4]);
        let mut state = SearchState::initial(&net, &mut ChaCha8Rng::seed_from_u64(5));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for a in state.arch.layers.iter_mut().flatten() {
            for x in a.conn_logits.iter_mut().flatten().flatten() {
                *x = rng.random_range(-1.0..1.0) / 3.0;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.json");
        Checkpoint::of(&state).save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap().into_state();
        assert_eq!(back.arch, state.arch);
        assert_eq!(back.weights, state.weights);
        assert_eq!(back.intr, state.intr);
    }

    #[test]
    fn invalid_discrete_architecture_is_rejected() {
        let net = toy_net(vec![2, 4]);
        let mut d = random_architecture(&net, &mut ChaCha8Rng::seed_from_u64(9));
        d.layers[0].motif_size = 3;
        assert!(matches!(d.validate(&net), Err(SearchError::InvalidArchitecture(_))));
        let mut d = random_architecture(&net, &mut ChaCha8Rng::seed_from_u64(9));
        d.layers[0].edges.push(DiscreteEdge {
            from: 0,
            to: 7,
            kind: ConnType::Excitatory,
            weight: 0.1,
        });
        assert!(d.validate(&net).is_err());
    }

    #[test]
    fn summary_statistics() {
        let (m, s, b) = summarize(&[0.9, 1.0, 0.8]);
        assert!((m - 0.9).abs() < 1e-12);
        assert!((s - 0.1).abs() < 1e-12);
        assert_eq!(b, 1.0);
        assert_eq!(summarize(&[0.5]), (0.5, 0.0, 0.5));
    }

    #[test]
    fn sampler_covers_every_index_per_pass() {
        let mut s = BatchSampler::new(10, 4);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
