//! Multi-layer spiking networks: input traces, stacked feedforward or SC-ML
//! layers and a feedforward readout, simulated time-major.
//!
//! At step `t` layer `l` receives the same-step traces of layer `l - 1`
//! through its feedforward weights and, for SC-ML layers, its own traces
//! from step `t - 1` through the relaxed recurrent mixture.

use crate::data::SpikeEvent;
use crate::neuron::{self, Mode, NeuronIntrinsics};
use crate::relax::{self, ArchParams, ConnType, RecurrentWeights};
use crate::topology::{LayerLayout, MotifSizeSet, TopologyError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("layer {layer}: {source}")]
    Topology {
        layer: usize,
        #[source]
        source: TopologyError,
    },
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Feedforward,
    ScMl { motif_sizes: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub size: usize,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Replace the motif size set of every SC-ML layer by the layer size.
    pub no_motif: bool,
    /// Drop inter-motif candidate edges.
    pub no_inter_motif: bool,
    /// Dense all-excitatory recurrence with no architecture parameters.
    pub fully_connected_fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronDefaults {
    pub r: f64,
    pub tau: f64,
    pub theta: f64,
    pub tau_s: f64,
    /// Sharpness of the soft activation.
    pub kappa: f64,
    /// Width of the rectangular surrogate derivative.
    pub surrogate_width: f64,
}

impl Default for NeuronDefaults {
    fn default() -> Self {
        Self {
            r: 1.0,
            tau: 4.0,
            theta: 1.0,
            tau_s: 2.0,
            kappa: 0.2,
            surrogate_width: 1.0,
        }
    }
}

impl NeuronDefaults {
    pub fn intrinsics(&self) -> NeuronIntrinsics {
        NeuronIntrinsics {
            r: self.r,
            tau: self.tau,
            theta: self.theta,
            tau_s: self.tau_s,
        }
    }

    pub fn soft_mode(&self) -> Mode {
        Mode::Soft { kappa: self.kappa }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_size: usize,
    /// Simulation horizon in timesteps.
    pub horizon: usize,
    pub classes: usize,
    pub hidden: Vec<LayerSpec>,
    #[serde(default)]
    pub neuron: NeuronDefaults,
    /// Magnitude of the fixed inhibitory weight.
    #[serde(default = "default_w_inh")]
    pub w_inh: f64,
    /// Feedforward weights start in `[0, ff_init_gain / sqrt(fan_in)]`.
    #[serde(default = "default_ff_gain")]
    pub ff_init_gain: f64,
    /// Excitatory recurrent weights start in `[0, rec_init_gain / sqrt(fan_in)]`.
    #[serde(default = "default_rec_gain")]
    pub rec_init_gain: f64,
    #[serde(default)]
    pub ablation: Ablation,
}

fn default_w_inh() -> f64 {
    1.0
}
fn default_ff_gain() -> f64 {
    3.0
}
fn default_rec_gain() -> f64 {
    0.3
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Time-major `steps x width` trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub steps: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Trace {
    pub fn zeros(steps: usize, width: usize) -> Self {
        Self {
            steps,
            width,
            data: vec![0.0; steps * width],
        }
    }

    #[inline]
    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.data[t * self.width + i]
    }

    #[inline]
    pub fn set(&mut self, t: usize, i: usize, v: f64) {
        self.data[t * self.width + i] = v;
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.width..(t + 1) * self.width]
    }

    /// Values of neuron `i` over time.
    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.steps).map(|t| self.get(t, i)).collect()
    }
}

/// Trajectories of one layer. `u` holds the potential before reset.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub u: Trace,
    pub s: Trace,
    pub a: Trace,
    /// Total synaptic input current.
    pub current: Trace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivityRecord {
    pub horizon: usize,
    /// Input traces (`horizon x input_size`).
    pub input: Trace,
    /// Hidden layers followed by the readout.
    pub layers: Vec<LayerTrace>,
}

impl ActivityRecord {
    pub fn readout(&self) -> &LayerTrace {
        self.layers.last().expect("network has a readout layer")
    }

    /// Traces feeding layer `l` through its feedforward weights.
    pub fn presynaptic(&self, l: usize) -> &Trace {
        if l == 0 {
            &self.input
        } else {
            &self.layers[l - 1].a
        }
    }

    /// Per-class scores: readout traces summed over time.
    pub fn scores(&self) -> Vec<f64> {
        let a = &self.readout().a;
        (0..a.width)
            .map(|k| (0..a.steps).map(|t| a.get(t, k)).sum())
            .collect()
    }

    /// Predicted class; the smallest index wins ties.
    pub fn predict(&self) -> usize {
        relax::argmax_first(&self.scores()).0
    }
}

/// Per-layer in-network structure.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInfo {
    pub size: usize,
    pub fan_in: usize,
    pub layout: Option<LayerLayout>,
}

/// Validated network structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    /// Hidden layers followed by the readout.
    pub layers: Vec<LayerInfo>,
}

/// Weights of every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    /// `ff[l]` is `size_l x size_{l-1}`.
    pub ff: Vec<Matrix>,
    pub rec: Vec<Option<RecurrentWeights>>,
}

/// Architecture parameters of every SC-ML layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<Option<ArchParams>>,
}

impl Architecture {
    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(ArchParams::is_finite)
    }
}

/// Intrinsic parameters, `intr[layer][neuron]`.
pub type Intrinsics = Vec<Vec<NeuronIntrinsics>>;

/// Additive perturbation of one pre-reset membrane potential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MembraneProbe {
    pub layer: usize,
    pub neuron: usize,
    pub t: usize,
    pub delta: f64,
}

/// Recurrent input of one layer during simulation.
pub(crate) enum RecurrentKernel {
    /// `m[i * n + r]`.
    Dense(Vec<f64>),
    /// Per target, `(from, weight)` in ascending `from` order.
    Sparse(Vec<Vec<(usize, f64)>>),
}

impl RecurrentKernel {
    #[inline]
    fn current(&self, i: usize, a_prev: &[f64]) -> f64 {
        match self {
            RecurrentKernel::Dense(m) => {
                let n = a_prev.len();
                let row = &m[i * n..(i + 1) * n];
                let mut acc = 0.0;
                for (w, a) in row.iter().zip(a_prev) {
                    acc += w * a;
                }
                acc
            }
            RecurrentKernel::Sparse(rows) => {
                let mut acc = 0.0;
                for &(from, w) in &rows[i] {
                    acc += w * a_prev[from];
                }
                acc
            }
        }
    }
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self, NetworkError> {
        if config.horizon == 0 {
            return Err(NetworkError::Config("horizon must be at least 1".into()));
        }
        if config.input_size == 0 {
            return Err(NetworkError::Config("input_size must be positive".into()));
        }
        if config.classes < 2 {
            return Err(NetworkError::Config("at least two classes are required".into()));
        }
        if !(config.w_inh >= 0.0) || !config.w_inh.is_finite() {
            return Err(NetworkError::Config("w_inh must be finite and non-negative".into()));
        }
        if !(config.neuron.kappa > 0.0) || !(config.neuron.surrogate_width > 0.0) {
            return Err(NetworkError::Config(
                "kappa and surrogate_width must be positive".into(),
            ));
        }
        config
            .neuron
            .intrinsics()
            .validate()
            .map_err(|e| NetworkError::Config(e.to_string()))?;

        let ab = config.ablation;
        let mut layers = Vec::with_capacity(config.hidden.len() + 1);
        let mut fan_in = config.input_size;
        for (l, spec) in config.hidden.iter().enumerate() {
            if spec.size == 0 {
                return Err(NetworkError::Config(format!("layer {l} has zero neurons")));
            }
            let layout = match &spec.kind {
                LayerKind::Feedforward => None,
                LayerKind::ScMl { motif_sizes } => {
                    let sizes = if ab.no_motif || ab.fully_connected_fixed {
                        vec![spec.size]
                    } else {
                        motif_sizes.clone()
                    };
                    let topo = |source| NetworkError::Topology { layer: l, source };
                    let set = MotifSizeSet::new(sizes, spec.size).map_err(topo)?;
                    Some(LayerLayout::new(spec.size, &set, !ab.no_inter_motif).map_err(topo)?)
                }
            };
            layers.push(LayerInfo {
                size: spec.size,
                fan_in,
                layout,
            });
            fan_in = spec.size;
        }
        layers.push(LayerInfo {
            size: config.classes,
            fan_in,
            layout: None,
        });
        Ok(Self { config, layers })
    }

    pub fn readout_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Indices of the SC-ML layers.
    pub fn recurrent_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&l| self.layers[l].layout.is_some())
            .collect()
    }

    /// Whether the architecture parameters take part in the search.
    pub fn arch_trainable(&self) -> bool {
        !self.config.ablation.fully_connected_fixed
    }

    /// Uniform-prior architecture; in fully connected mode every edge is
    /// forced excitatory.
    pub fn initial_arch(&self) -> Architecture {
        Architecture {
            layers: self
                .layers
                .iter()
                .map(|info| {
                    info.layout.as_ref().map(|lay| {
                        if self.config.ablation.fully_connected_fixed {
                            let n = lay.options[0].edges.len();
                            ArchParams::one_hot(lay, 0, vec![ConnType::Excitatory; n])
                        } else {
                            ArchParams::uniform(lay)
                        }
                    })
                })
                .collect(),
        }
    }

    pub fn default_intrinsics(&self) -> Intrinsics {
        let p = self.config.neuron.intrinsics();
        self.layers.iter().map(|info| vec![p; info.size]).collect()
    }

    /// Fresh weights drawn uniformly from `[0, gain / sqrt(fan_in)]`.
    pub fn init_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> Weights {
        let ff = self
            .layers
            .iter()
            .map(|info| {
                let bound = self.config.ff_init_gain / (info.fan_in as f64).sqrt();
                let mut m = Matrix::zeros(info.size, info.fan_in);
                for w in m.data.iter_mut() {
                    *w = rng.random::<f64>() * bound;
                }
                m
            })
            .collect();
        let rec = self
            .layers
            .iter()
            .map(|info| {
                info.layout.as_ref().map(|lay| {
                    let mut w = RecurrentWeights::zeros(lay, self.config.w_inh);
                    for (o, opt) in lay.options.iter().enumerate() {
                        for (k, e) in opt.edges.iter().enumerate() {
                            let fan = opt.incoming(e.to).len() as f64;
                            w.excitatory[o][k] = rng.random::<f64>() * self.config.rec_init_gain / fan.sqrt();
                        }
                    }
                    w
                })
            })
            .collect();
        Weights { ff, rec }
    }

    pub fn check_shapes(
        &self,
        arch: &Architecture,
        weights: &Weights,
        intr: &Intrinsics,
    ) -> Result<(), NetworkError> {
        let n_layers = self.layers.len();
        if weights.ff.len() != n_layers
            || weights.rec.len() != n_layers
            || arch.layers.len() != n_layers
            || intr.len() != n_layers
        {
            return Err(NetworkError::ShapeMismatch(format!(
                "expected parameters for {n_layers} layers"
            )));
        }
        for (l, info) in self.layers.iter().enumerate() {
            let m = &weights.ff[l];
            if m.rows != info.size || m.cols != info.fan_in || m.data.len() != m.rows * m.cols {
                return Err(NetworkError::ShapeMismatch(format!(
                    "layer {l}: feedforward matrix is {}x{}, expected {}x{}",
                    m.rows, m.cols, info.size, info.fan_in
                )));
            }
            if intr[l].len() != info.size {
                return Err(NetworkError::ShapeMismatch(format!(
                    "layer {l}: {} intrinsics for {} neurons",
                    intr[l].len(),
                    info.size
                )));
            }
            match (&info.layout, &weights.rec[l], &arch.layers[l]) {
                (None, None, None) => {}
                (Some(lay), Some(w), Some(a)) => {
                    let counts: Vec<usize> = lay.options.iter().map(|o| o.edges.len()).collect();
                    let ok = a.motif_logits.len() == counts.len()
                        && a.conn_logits.iter().map(Vec::len).eq(counts.iter().copied())
                        && w.excitatory.iter().map(Vec::len).eq(counts.iter().copied())
                        && a.motif_fixed.is_none_or(|k| k < counts.len())
                        && a.conn_fixed
                            .as_ref()
                            .is_none_or(|f| f.iter().map(Vec::len).eq(counts.iter().copied()));
                    if !ok {
                        return Err(NetworkError::ShapeMismatch(format!(
                            "layer {l}: recurrent parameters do not match the layout"
                        )));
                    }
                }
                _ => {
                    return Err(NetworkError::ShapeMismatch(format!(
                        "layer {l}: recurrent parameters present on a feedforward layer or missing on an SC-ML layer"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Dense effective recurrent matrices of every SC-ML layer.
    pub fn effective_matrices(&self, arch: &Architecture, weights: &Weights) -> Vec<Option<Vec<f64>>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, info)| {
                info.layout.as_ref().map(|lay| {
                    let sel = arch.layers[l].as_ref().expect("checked").selection();
                    relax::effective_matrix(&sel, weights.rec[l].as_ref().expect("checked"), lay)
                })
            })
            .collect()
    }

    /// Binary input raster (`horizon x input_size`).
    pub fn raster(&self, events: &[SpikeEvent]) -> Result<Trace, NetworkError> {
        let mut r = Trace::zeros(self.config.horizon, self.config.input_size);
        for e in events {
            let (j, t) = (e.neuron as usize, e.t as usize);
            if j >= self.config.input_size || t >= self.config.horizon {
                return Err(NetworkError::ShapeMismatch(format!(
                    "event ({j}, {t}) outside {} inputs x {} steps",
                    self.config.input_size, self.config.horizon
                )));
            }
            r.set(t, j, 1.0);
        }
        Ok(r)
    }

    pub(crate) fn simulate(
        &self,
        ff: &[Matrix],
        kernels: &[Option<RecurrentKernel>],
        intr: &Intrinsics,
        events: &[SpikeEvent],
        mode: Mode,
        probe: Option<MembraneProbe>,
    ) -> Result<ActivityRecord, NetworkError> {
        let steps = self.config.horizon;
        let raster = self.raster(events)?;
        let tau_s_in = self.config.neuron.tau_s;
        let mut input = Trace::zeros(steps, self.config.input_size);
        for t in 0..steps {
            for j in 0..self.config.input_size {
                let prev = if t == 0 { 0.0 } else { input.get(t - 1, j) };
                input.set(t, j, neuron::psc_step(prev, raster.get(t, j), tau_s_in));
            }
        }

        let mut layers: Vec<LayerTrace> = self
            .layers
            .iter()
            .map(|info| LayerTrace {
                u: Trace::zeros(steps, info.size),
                s: Trace::zeros(steps, info.size),
                a: Trace::zeros(steps, info.size),
                current: Trace::zeros(steps, info.size),
            })
            .collect();
        let mut carried: Vec<Vec<f64>> = self.layers.iter().map(|info| vec![0.0; info.size]).collect();
        let zeros: Vec<Vec<f64>> = self.layers.iter().map(|info| vec![0.0; info.size]).collect();

        for t in 0..steps {
            for l in 0..self.layers.len() {
                let (done, rest) = layers.split_at_mut(l);
                let this = &mut rest[0];
                let pre: &[f64] = if l == 0 { input.row(t) } else { done[l - 1].a.row(t) };
                let a_prev: Vec<f64> = if t == 0 { zeros[l].clone() } else { this.a.row(t - 1).to_vec() };
                let w = &ff[l];
                for i in 0..self.layers[l].size {
                    let mut cur = 0.0;
                    for (wij, aj) in w.row(i).iter().zip(pre) {
                        cur += wij * aj;
                    }
                    if let Some(kernel) = &kernels[l] {
                        cur += kernel.current(i, &a_prev);
                    }
                    let p = &intr[l][i];
                    let mut u = neuron::integrate(carried[l][i], cur, p);
                    if let Some(pr) = probe {
                        if pr.layer == l && pr.neuron == i && pr.t == t {
                            u += pr.delta;
                        }
                    }
                    let s = neuron::fire(u, p.theta, mode);
                    carried[l][i] = neuron::reset(u, s, mode);
                    let a = neuron::psc_step(a_prev[i], s, p.tau_s);
                    this.u.set(t, i, u);
                    this.s.set(t, i, s);
                    this.a.set(t, i, a);
                    this.current.set(t, i, cur);
                }
            }
        }
        Ok(ActivityRecord {
            horizon: steps,
            input,
            layers,
        })
    }
}

/// Simulate the relaxed network on one example.
pub fn forward(
    net: &Network,
    arch: &Architecture,
    weights: &Weights,
    intr: &Intrinsics,
    events: &[SpikeEvent],
    mode: Mode,
) -> Result<ActivityRecord, NetworkError> {
    forward_probed(net, arch, weights, intr, events, mode, None)
}

/// [`forward`] with an optional membrane perturbation.
pub fn forward_probed(
    net: &Network,
    arch: &Architecture,
    weights: &Weights,
    intr: &Intrinsics,
    events: &[SpikeEvent],
    mode: Mode,
    probe: Option<MembraneProbe>,
) -> Result<ActivityRecord, NetworkError> {
    net.check_shapes(arch, weights, intr)?;
    let kernels: Vec<Option<RecurrentKernel>> = net
        .effective_matrices(arch, weights)
        .into_iter()
        .map(|m| m.map(RecurrentKernel::Dense))
        .collect();
    net.simulate(&weights.ff, &kernels, intr, events, mode, probe)
}

/// Softmax cross-entropy of the time-summed readout traces.
pub fn loss(activity: &ActivityRecord, label: usize) -> Result<f64, NetworkError> {
    let z = activity.scores();
    cross_entropy(&z, label)
}

pub fn cross_entropy(z: &[f64], label: usize) -> Result<f64, NetworkError> {
    if label >= z.len() {
        return Err(NetworkError::InvalidLabel {
            label,
            classes: z.len(),
        });
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok((lse - z[label]).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_config() -> NetworkConfig {
        NetworkConfig {
            input_size: 4,
            horizon: 8,
            classes: 3,
            hidden: vec![LayerSpec {
                size: 8,
                kind: LayerKind::ScMl {
                    motif_sizes: vec![2, 4],
                },
            }],
            neuron: NeuronDefaults::default(),
            w_inh: 1.0,
            ff_init_gain: 3.0,
            rec_init_gain: 0.3,
            ablation: Ablation::default(),
        }
    }

    fn events(list: &[(u32, u32)]) -> Vec<SpikeEvent> {
        list.iter().map(|&(neuron, t)| SpikeEvent { neuron, t }).collect()
    }

    #[test]
    fn zero_input_is_silent() {
        let net = Network::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = net.init_weights(&mut rng);
        let act = forward(
            &net,
            &net.initial_arch(),
            &w,
            &net.default_intrinsics(),
            &[],
            Mode::Spiking,
        )
        .unwrap();
        for layer in &act.layers {
            assert!(layer.u.data.iter().chain(&layer.s.data).chain(&layer.a.data).all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_spike_through_single_neuron() {
        // input -> one feedforward neuron -> readout. A spike at t = 0 gives
        // input trace 1 at t = 0, decaying by 1/2 each step afterwards.
        let cfg = NetworkConfig {
            input_size: 1,
            horizon: 6,
            classes: 2,
            hidden: vec![LayerSpec {
                size: 1,
                kind: LayerKind::Feedforward,
            }],
            ..small_config()
        };
        let net = Network::new(cfg).unwrap();
        let p = net.config.neuron.intrinsics();
        let w_crit = p.tau * p.theta / p.r + 1e-3;
        let weights = Weights {
            ff: vec![
                Matrix {
                    rows: 1,
                    cols: 1,
                    data: vec![w_crit],
                },
                Matrix::zeros(2, 1),
            ],
            rec: vec![None, None],
        };
        let arch = net.initial_arch();
        let act = forward(&net, &arch, &weights, &net.default_intrinsics(), &events(&[(0, 0)]), Mode::Spiking)
            .unwrap();
        let spikes = act.layers[0].s.column(0);
        assert_eq!(spikes, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        // after reset: u[1] = (R/tau) * w * 0.5 < theta, and it keeps decaying
        let u1 = act.layers[0].u.get(1, 0);
        assert!((u1 - p.gain() * w_crit * 0.5).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_events_are_rejected() {
        let net = Network::new(small_config()).unwrap();
        let w = net.init_weights(&mut ChaCha8Rng::seed_from_u64(0));
        let r = forward(
            &net,
            &net.initial_arch(),
            &w,
            &net.default_intrinsics(),
            &events(&[(4, 0)]),
            Mode::Spiking,
        );
        assert!(matches!(r, Err(NetworkError::ShapeMismatch(_))));
        let r = forward(
            &net,
            &net.initial_arch(),
            &w,
            &net.default_intrinsics(),
            &events(&[(0, 8)]),
            Mode::Spiking,
        );
        assert!(matches!(r, Err(NetworkError::ShapeMismatch(_))));
    }

    #[test]
    fn loss_examples() {
        let l = cross_entropy(&[2.0, 2.0, 2.0], 1).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[1e4, 0.0, 0.0], 0).unwrap() < 1e-12);
        assert_eq!(
            cross_entropy(&[0.0, 0.0], 2),
            Err(NetworkError::InvalidLabel { label: 2, classes: 2 })
        );
        // independent scalar re-implementation
        let z: [f64; 3] = [0.37, -1.25, 2.5];
        let naive = -(z[2].exp() / (z[0].exp() + z[1].exp() + z[2].exp())).ln();
        assert!((cross_entropy(&z, 2).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.hidden[0].kind = LayerKind::ScMl {
            motif_sizes: vec![3],
        };
        assert!(matches!(
            Network::new(cfg),
            Err(NetworkError::Topology { layer: 0, .. })
        ));
        let mut cfg = small_config();
        cfg.horizon = 0;
        assert!(Network::new(cfg).is_err());
        let mut cfg = small_config();
        cfg.neuron.tau = 1.0;
        assert!(Network::new(cfg).is_err());
    }

    #[test]
    fn ablations_reshape_the_layout() {
        let mut cfg = small_config();
        cfg.ablation.no_motif = true;
        let net = Network::new(cfg).unwrap();
        let lay = net.layers[0].layout.as_ref().unwrap();
        assert_eq!(lay.motif_sizes(), vec![8]);

        let mut cfg = small_config();
        cfg.ablation.no_inter_motif = true;
        let net = Network::new(cfg).unwrap();
        let lay = net.layers[0].layout.as_ref().unwrap();
        assert_eq!(lay.options[0].edges.len(), 4 * 4);

        let mut cfg = small_config();
        cfg.ablation.fully_connected_fixed = true;
        let net = Network::new(cfg).unwrap();
        assert!(!net.arch_trainable());
        let arch = net.initial_arch();
        let a = arch.layers[0].as_ref().unwrap();
        assert_eq!(a.motif_fixed, Some(0));
        let sel = a.selection();
        assert_eq!(sel.conn[0].len(), 64);
        assert!(sel.conn[0].iter().all(|p| *p == [1.0, 0.0, 0.0]));
    }
}
