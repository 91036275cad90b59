//! Backpropagation through time and parameter updates.
//!
//! `delta[l][t][i]` is the derivative of the loss with respect to the
//! pre-reset membrane potential `u_i[t]`. Walking time backwards, the error
//! reaching the trace `a_i[t]` collects
//!
//! * the readout score gradient (readout layer only),
//! * the synaptic decay path into `a_i[t+1]`,
//! * the feedforward fan-out into layer `l + 1` at step `t`,
//! * the recurrent fan-out into layer `l` at step `t + 1`,
//!
//! and `delta[l][t][i] = g_a * ds/du + (1 - 1/tau) * dreset * delta[l][t+1][i]`,
//! where spiking mode uses the rectangular surrogate for `ds/du` and treats
//! the reset gate as a constant (`dreset = 1 - s`).
//!
//! Parameter gradients then follow from the membrane update: every input to
//! `u_i[t]` enters multiplied by `R_i / tau_i`.

use crate::data::Example;
use crate::network::{
    self, ActivityRecord, Architecture, Intrinsics, Matrix, Network, NetworkError, Trace, Weights,
};
use crate::neuron::{self, Mode};
use crate::relax;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error("activity record does not match the network: {0}")]
    StaleActivity(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackpropState {
    /// Per layer, `horizon x size`.
    pub delta: Vec<Trace>,
    /// Derivative of the loss w.r.t. the readout scores.
    pub score_grad: Vec<f64>,
    pub loss: f64,
}

/// Gradients of one SC-ML layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentGrads {
    pub excitatory: Vec<Vec<f64>>,
    /// W.r.t. the motif selection probabilities.
    pub motif_probs: Vec<f64>,
    /// W.r.t. the per-edge type selection probabilities.
    pub conn_probs: Vec<Vec<[f64; 3]>>,
    /// Chained through the softmax; zero while the motif size is fixed.
    pub motif_logits: Vec<f64>,
    /// Chained through the softmax; zero while the types are fixed.
    pub conn_logits: Vec<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub ff: Vec<Matrix>,
    pub rec: Vec<Option<RecurrentGrads>>,
}

/// Parameter classes, each clipped separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Feedforward,
    Recurrent,
    MotifLogits,
    ConnLogits,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Feedforward,
        ParamGroup::Recurrent,
        ParamGroup::MotifLogits,
        ParamGroup::ConnLogits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Feedforward => "w_ff",
            ParamGroup::Recurrent => "w_exc_rec",
            ParamGroup::MotifLogits => "motif_logits",
            ParamGroup::ConnLogits => "conn_logits",
        }
    }
}

impl Gradients {
    pub fn zeros(net: &Network) -> Self {
        let ff = net
            .layers
            .iter()
            .map(|info| Matrix::zeros(info.size, info.fan_in))
            .collect();
        let rec = net
            .layers
            .iter()
            .map(|info| {
                info.layout.as_ref().map(|lay| {
                    let per_opt = |x| lay.options.iter().map(|o| vec![x; o.edges.len()]).collect::<Vec<_>>();
                    RecurrentGrads {
                        excitatory: per_opt(0.0),
                        motif_probs: vec![0.0; lay.options.len()],
                        conn_probs: per_opt_arrays(lay),
                        motif_logits: vec![0.0; lay.options.len()],
                        conn_logits: per_opt_arrays(lay),
                    }
                })
            })
            .collect();
        Self { ff, rec }
    }

    fn for_each_pair(&mut self, other: &Gradients, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.ff.iter_mut().zip(&other.ff) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                f(x, *y);
            }
        }
        for (a, b) in self.rec.iter_mut().zip(&other.rec) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.excitatory.iter_mut().flatten().zip(b.excitatory.iter().flatten()) {
                    f(x, *y);
                }
                for (x, y) in a.motif_probs.iter_mut().zip(&b.motif_probs) {
                    f(x, *y);
                }
                for (x, y) in a.motif_logits.iter_mut().zip(&b.motif_logits) {
                    f(x, *y);
                }
                for (x, y) in a
                    .conn_probs
                    .iter_mut()
                    .flatten()
                    .flatten()
                    .zip(b.conn_probs.iter().flatten().flatten())
                {
                    f(x, *y);
                }
                for (x, y) in a
                    .conn_logits
                    .iter_mut()
                    .flatten()
                    .flatten()
                    .zip(b.conn_logits.iter().flatten().flatten())
                {
                    f(x, *y);
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.for_each_pair(other, |x, y| *x += y);
    }

    /// Trainable values of one group, in a fixed order.
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        match group {
            ParamGroup::Feedforward => self.ff.iter().flat_map(|m| m.data.iter().copied()).collect(),
            ParamGroup::Recurrent => self
                .rec
                .iter()
                .flatten()
                .flat_map(|r| r.excitatory.iter().flatten().copied())
                .collect(),
            ParamGroup::MotifLogits => self
                .rec
                .iter()
                .flatten()
                .flat_map(|r| r.motif_logits.iter().copied())
                .collect(),
            ParamGroup::ConnLogits => self
                .rec
                .iter()
                .flatten()
                .flat_map(|r| r.conn_logits.iter().flatten().flatten().copied())
                .collect(),
        }
    }

    fn group_values_mut(&mut self, group: ParamGroup) -> Vec<&mut f64> {
        match group {
            ParamGroup::Feedforward => self.ff.iter_mut().flat_map(|m| m.data.iter_mut()).collect(),
            ParamGroup::Recurrent => self
                .rec
                .iter_mut()
                .flatten()
                .flat_map(|r| r.excitatory.iter_mut().flatten())
                .collect(),
            ParamGroup::MotifLogits => self
                .rec
                .iter_mut()
                .flatten()
                .flat_map(|r| r.motif_logits.iter_mut())
                .collect(),
            ParamGroup::ConnLogits => self
                .rec
                .iter_mut()
                .flatten()
                .flat_map(|r| r.conn_logits.iter_mut().flatten().flatten())
                .collect(),
        }
    }

    pub fn scale(&mut self, c: f64) {
        for group in ParamGroup::ALL {
            for x in self.group_values_mut(group) {
                *x *= c;
            }
        }
    }

    pub fn group_norm(&self, group: ParamGroup) -> f64 {
        self.group_values(group).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        ParamGroup::ALL
            .iter()
            .all(|&g| self.group_values(g).iter().all(|x| x.is_finite()))
    }
}

fn per_opt_arrays(lay: &crate::topology::LayerLayout) -> Vec<Vec<[f64; 3]>> {
    lay.options.iter().map(|o| vec![[0.0; 3]; o.edges.len()]).collect()
}

fn check_activity(net: &Network, act: &ActivityRecord) -> Result<(), GradError> {
    let steps = net.config.horizon;
    let stale = |m: String| Err(GradError::StaleActivity(m));
    if act.horizon != steps || act.input.steps != steps || act.input.width != net.config.input_size {
        return stale("horizon or input width differs".into());
    }
    if act.layers.len() != net.layers.len() {
        return stale(format!("{} layers recorded, network has {}", act.layers.len(), net.layers.len()));
    }
    for (l, (tr, info)) in act.layers.iter().zip(&net.layers).enumerate() {
        for t in [&tr.u, &tr.s, &tr.a, &tr.current] {
            if t.steps != steps || t.width != info.size || t.data.len() != steps * info.size {
                return stale(format!("layer {l} trace shape differs"));
            }
        }
    }
    Ok(())
}

/// Reverse-time error recursion for one example.
pub fn backward(
    net: &Network,
    act: &ActivityRecord,
    label: usize,
    arch: &Architecture,
    weights: &Weights,
    intr: &Intrinsics,
    mode: Mode,
) -> Result<BackpropState, GradError> {
    net.check_shapes(arch, weights, intr)?;
    check_activity(net, act)?;
    let z = act.scores();
    let loss = network::cross_entropy(&z, label)?;
    let probs = relax::softmax_probs(&z).map_err(|_| GradError::NonFiniteGradient("readout scores"))?;
    let mut score_grad = probs;
    score_grad[label] -= 1.0;

    let steps = net.config.horizon;
    let n_layers = net.layers.len();
    let readout = net.readout_index();
    let width = net.config.neuron.surrogate_width;
    let mats = net.effective_matrices(arch, weights);

    let mut delta: Vec<Trace> = net.layers.iter().map(|info| Trace::zeros(steps, info.size)).collect();
    // dL/da at step t + 1, per layer
    let mut ga_next: Vec<Vec<f64>> = net.layers.iter().map(|info| vec![0.0; info.size]).collect();
    let mut ga_cur = ga_next.clone();

    for t in (0..steps).rev() {
        for l in (0..n_layers).rev() {
            let size = net.layers[l].size;
            for i in 0..size {
                let p = &intr[l][i];
                let mut g = if l == readout { score_grad[i] } else { 0.0 };
                g += (1.0 - 1.0 / p.tau_s) * ga_next[l][i];
                if l + 1 < n_layers {
                    let w = &weights.ff[l + 1];
                    for k in 0..net.layers[l + 1].size {
                        g += delta[l + 1].get(t, k) * intr[l + 1][k].gain() * w.get(k, i);
                    }
                }
                if let (Some(m), true) = (&mats[l], t + 1 < steps) {
                    for k in 0..size {
                        g += delta[l].get(t + 1, k) * intr[l][k].gain() * m[k * size + i];
                    }
                }
                let u = act.layers[l].u.get(t, i);
                let ds = neuron::spike_grad(u, p.theta, mode, width);
                let carry = if t + 1 < steps {
                    let gate = match mode {
                        Mode::Soft { .. } => 1.0,
                        Mode::Spiking => 1.0 - act.layers[l].s.get(t, i),
                    };
                    p.leak() * gate * delta[l].get(t + 1, i)
                } else {
                    0.0
                };
                delta[l].set(t, i, g * ds + carry);
                ga_cur[l][i] = g;
            }
        }
        std::mem::swap(&mut ga_next, &mut ga_cur);
    }
    Ok(BackpropState {
        delta,
        score_grad,
        loss,
    })
}

/// Parameter gradients from an error recursion, summed over time.
pub fn grads(
    net: &Network,
    bp: &BackpropState,
    act: &ActivityRecord,
    arch: &Architecture,
    weights: &Weights,
    intr: &Intrinsics,
) -> Gradients {
    let steps = net.config.horizon;
    let mut out = Gradients::zeros(net);
    for (l, info) in net.layers.iter().enumerate() {
        // error scaled by the membrane input gain
        let scaled: Vec<f64> = (0..steps)
            .flat_map(|t| (0..info.size).map(move |i| (t, i)))
            .map(|(t, i)| bp.delta[l].get(t, i) * intr[l][i].gain())
            .collect();
        let pre = act.presynaptic(l);
        let g = &mut out.ff[l];
        for t in 0..steps {
            let row = pre.row(t);
            for i in 0..info.size {
                let e = scaled[t * info.size + i];
                if e == 0.0 {
                    continue;
                }
                let dst = &mut g.data[i * info.fan_in..(i + 1) * info.fan_in];
                for (d, a) in dst.iter_mut().zip(row) {
                    *d += e * a;
                }
            }
        }

        let (Some(lay), Some(a_params), Some(w)) = (&info.layout, &arch.layers[l], &weights.rec[l]) else {
            continue;
        };
        let n = info.size;
        // outer[i * n + r] = sum_t scaled_i[t] * a_r[t - 1]
        let mut outer = vec![0.0; n * n];
        let a = &act.layers[l].a;
        for t in 1..steps {
            let prev = a.row(t - 1);
            for i in 0..n {
                let e = scaled[t * n + i];
                if e == 0.0 {
                    continue;
                }
                for (o, ar) in outer[i * n..(i + 1) * n].iter_mut().zip(prev) {
                    *o += e * ar;
                }
            }
        }
        let sel = a_params.selection();
        let rg = out.rec[l].as_mut().expect("SC-ML layer");
        for (o, opt) in lay.options.iter().enumerate() {
            let pv = sel.motif[o];
            let mut dpv = 0.0;
            for (k, edge) in opt.edges.iter().enumerate() {
                let gir = outer[edge.to * n + edge.from];
                let pc = sel.conn[o][k];
                let wt = w.typed(o, k);
                rg.excitatory[o][k] = pv * pc[0] * gir;
                dpv += (pc[0] * wt[0] + pc[1] * wt[1] + pc[2] * wt[2]) * gir;
                rg.conn_probs[o][k] = [pv * wt[0] * gir, pv * wt[1] * gir, pv * wt[2] * gir];
            }
            rg.motif_probs[o] = dpv;
        }
        if a_params.motif_fixed.is_none() {
            rg.motif_logits = relax::softmax_backward(&sel.motif, &rg.motif_probs);
        }
        if a_params.conn_fixed.is_none() {
            for o in 0..lay.options.len() {
                for k in 0..lay.options[o].edges.len() {
                    let p = sel.conn[o][k];
                    let g = relax::softmax_backward(&p, &rg.conn_probs[o][k]);
                    rg.conn_logits[o][k] = [g[0], g[1], g[2]];
                }
            }
        }
    }
    out
}

/// Forward, backward and parameter gradients for one example.
pub fn example_gradients(
    net: &Network,
    arch: &Architecture,
    weights: &Weights,
    intr: &Intrinsics,
    example: &Example,
    mode: Mode,
) -> Result<(f64, Gradients, ActivityRecord), GradError> {
    let act = network::forward(net, arch, weights, intr, &example.events, mode)?;
    let bp = backward(net, &act, example.label, arch, weights, intr, mode)?;
    let g = grads(net, &bp, &act, arch, weights, intr);
    Ok((bp.loss, g, act))
}

#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss_sum: f64,
    pub grads: Gradients,
    pub correct: usize,
    pub count: usize,
}

impl BatchGradients {
    pub fn mean_loss(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.loss_sum / self.count as f64
        }
    }
}

/// Gradients summed over a batch. Examples run in parallel; the reduction
/// is sequential in batch order, so the result does not depend on the
/// worker count.
pub fn batch_gradients(
    net: &Network,
    arch: &Architecture,
    weights: &Weights,
    intr: &Intrinsics,
    batch: &[&Example],
    mode: Mode,
) -> Result<BatchGradients, GradError> {
    let per: Vec<(f64, Gradients, bool)> = batch
        .par_iter()
        .map(|ex| {
            example_gradients(net, arch, weights, intr, ex, mode)
                .map(|(l, g, act)| (l, g, act.predict() == ex.label))
        })
        .collect::<Result<_, _>>()?;
    let mut total = Gradients::zeros(net);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for (l, g, ok) in &per {
        loss_sum += l;
        total.add_assign(g);
        correct += *ok as usize;
    }
    Ok(BatchGradients {
        loss_sum,
        grads: total,
        correct,
        count: batch.len(),
    })
}

/// Learning rates and clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimState {
    /// Architecture learning rate.
    pub lr_arch: f64,
    /// Weight learning rate.
    pub lr_weights: f64,
    /// L2 bound applied per parameter group.
    pub clip: f64,
}

impl Default for OptimState {
    fn default() -> Self {
        Self {
            lr_arch: 0.05,
            lr_weights: 0.05,
            clip: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateTarget {
    Weights,
    Architecture,
}

/// One clipped gradient-descent step on either the weights or the
/// architecture logits. Excitatory weights are projected back to `>= 0`;
/// inhibitory and absent weights are not parameters and never change.
pub fn apply_step(
    arch: &mut Architecture,
    weights: &mut Weights,
    grads: &Gradients,
    opt: &OptimState,
    target: UpdateTarget,
) -> Result<(), GradError> {
    let groups: &[ParamGroup] = match target {
        UpdateTarget::Weights => &[ParamGroup::Feedforward, ParamGroup::Recurrent],
        UpdateTarget::Architecture => &[ParamGroup::MotifLogits, ParamGroup::ConnLogits],
    };
    let mut g = grads.clone();
    for &group in groups {
        if g.group_values(group).iter().any(|x| !x.is_finite()) {
            return Err(GradError::NonFiniteGradient(group.name()));
        }
        let norm = g.group_norm(group);
        if norm > opt.clip {
            let c = opt.clip / norm;
            for x in g.group_values_mut(group) {
                *x *= c;
            }
        }
    }
    match target {
        UpdateTarget::Weights => {
            let lr = opt.lr_weights;
            for (w, d) in weights.ff.iter_mut().zip(&g.ff) {
                for (x, y) in w.data.iter_mut().zip(&d.data) {
                    *x -= lr * y;
                }
            }
            for (w, d) in weights.rec.iter_mut().zip(&g.rec) {
                if let (Some(w), Some(d)) = (w, d) {
                    for (x, y) in w.excitatory.iter_mut().flatten().zip(d.excitatory.iter().flatten()) {
                        *x -= lr * y;
                    }
                    w.clamp_excitatory();
                }
            }
        }
        UpdateTarget::Architecture => {
            let lr = opt.lr_arch;
            for (a, d) in arch.layers.iter_mut().zip(&g.rec) {
                if let (Some(a), Some(d)) = (a, d) {
                    if a.motif_fixed.is_none() {
                        for (x, y) in a.motif_logits.iter_mut().zip(&d.motif_logits) {
                            *x -= lr * y;
                        }
                    }
                    if a.conn_fixed.is_none() {
                        for (x, y) in a
                            .conn_logits
                            .iter_mut()
                            .flatten()
                            .flatten()
                            .zip(d.conn_logits.iter().flatten().flatten())
                        {
                            *x -= lr * y;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn weight_slots(weights: &mut Weights) -> Vec<&mut f64> {
    let mut out: Vec<&mut f64> = weights.ff.iter_mut().flat_map(|m| m.data.iter_mut()).collect();
    out.extend(
        weights
            .rec
            .iter_mut()
            .flatten()
            .flat_map(|r| r.excitatory.iter_mut().flatten()),
    );
    out
}

/// Adam moments over the weights (feedforward, then excitatory recurrent).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(weights: &Weights) -> Self {
        let n = weights.ff.iter().map(|m| m.data.len()).sum::<usize>()
            + weights
                .rec
                .iter()
                .flatten()
                .map(|r| r.excitatory.iter().map(Vec::len).sum::<usize>())
                .sum::<usize>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected Adam step on the weights after per-group
    /// clipping, with the same projection as [`apply_step`].
    pub fn step(&mut self, weights: &mut Weights, grads: &Gradients, lr: f64, clip: f64) -> Result<(), GradError> {
        let mut g = Vec::with_capacity(self.m.len());
        for group in [ParamGroup::Feedforward, ParamGroup::Recurrent] {
            let vals = grads.group_values(group);
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(GradError::NonFiniteGradient(group.name()));
            }
            let norm = vals.iter().map(|x| x * x).sum::<f64>().sqrt();
            let c = if norm > clip { clip / norm } else { 1.0 };
            g.extend(vals.into_iter().map(|x| x * c));
        }
        assert_eq!(g.len(), self.m.len(), "gradient layout differs from the optimizer state");
        self.t += 1;
        let b1 = 1.0 - self.beta1.powi(self.t);
        let b2 = 1.0 - self.beta2.powi(self.t);
        for (k, w) in weight_slots(weights).into_iter().enumerate() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g[k] * g[k];
            *w -= lr * (self.m[k] / b1) / ((self.v[k] / b2).sqrt() + self.eps);
        }
        for r in weights.rec.iter_mut().flatten() {
            r.clamp_excitatory();
        }
        Ok(())
    }
}
