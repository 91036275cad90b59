//! Intrinsic plasticity: unsupervised adaptation of each recurrent neuron's
//! resistance `R` and membrane time constant `tau`.
//!
//! The per-neuron objective is `y / mu - ln y`, the pointwise divergence of
//! an exponential rate density with mean `mu`, up to constants. Its rate
//! sensitivity `dy/d(ln R)`, `dy/d(ln tau)` is measured numerically: the
//! neuron's recorded input current is replayed with the parameter scaled by
//! `exp(+-h)` and the change in mean spike rate is taken as a central
//! difference. Steps are taken in log space and clamped to the bounds.

use crate::network::ActivityRecord;
use crate::neuron::{self, Mode, NeuronIntrinsics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum IpError {
    #[error("ip.{key}: {msg}")]
    InvalidConfig { key: &'static str, msg: String },
    #[error("window holds no activity")]
    EmptyWindow,
    #[error("layer {layer} has {got} neurons, intrinsics have {expected}")]
    ShapeMismatch {
        layer: usize,
        got: usize,
        expected: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpConfig {
    /// Target mean firing rate, spikes per step.
    pub mu: f64,
    pub eta_ip: f64,
    /// Training examples per window; `0` uses the whole training batch.
    pub window: usize,
    /// Time constant of the rate filter, in steps.
    pub smoothing: f64,
    /// Relative log-space offset of the sensitivity probe.
    pub probe: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for IpConfig {
    fn default() -> Self {
        Self {
            mu: 0.05,
            eta_ip: 0.02,
            window: 0,
            smoothing: 25.0,
            probe: 0.1,
            r_min: 0.1,
            r_max: 10.0,
            tau_min: 2.0,
            tau_max: 32.0,
        }
    }
}

impl IpConfig {
    pub fn validate(&self) -> Result<(), IpError> {
        let bad = |key, msg: &str| {
            Err(IpError::InvalidConfig {
                key,
                msg: msg.to_string(),
            })
        };
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return bad("mu", "must lie in (0, 1)");
        }
        if !(self.eta_ip >= 0.0) || !self.eta_ip.is_finite() {
            return bad("eta_ip", "must be finite and non-negative");
        }
        if !(self.smoothing >= 1.0) || !self.smoothing.is_finite() {
            return bad("smoothing", "must be finite and at least 1");
        }
        if !(self.probe > 0.0 && self.probe < 1.0) {
            return bad("probe", "must lie in (0, 1)");
        }
        if !(self.r_min > 0.0 && self.r_min < self.r_max) || !self.r_max.is_finite() {
            return bad("r_min", "bounds need 0 < r_min < r_max");
        }
        if !(self.tau_min > 1.0 && self.tau_min < self.tau_max) || !self.tau_max.is_finite() {
            return bad("tau_min", "bounds need 1 < tau_min < tau_max");
        }
        Ok(())
    }

    fn clamp(&self, p: &mut NeuronIntrinsics) {
        p.r = p.r.clamp(self.r_min, self.r_max);
        p.tau = p.tau.clamp(self.tau_min, self.tau_max);
    }
}

/// Low-pass filtered firing rate per neuron, always in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateEstimate {
    pub y: Vec<f64>,
}

/// `y[t] = (1 - 1/smoothing) y[t-1] + s[t] / smoothing`, from `y[-1] = 0`.
pub fn rate_trace(spikes: &[f64], smoothing: f64) -> Vec<f64> {
    let k = 1.0 / smoothing;
    let mut y = 0.0;
    spikes
        .iter()
        .map(|&s| {
            y += k * (s - y);
            y
        })
        .collect()
}

fn final_rate(spikes: &[f64], smoothing: f64) -> f64 {
    rate_trace(spikes, smoothing).last().copied().unwrap_or(0.0)
}

/// Final filtered rate of every neuron in `layer`.
pub fn estimate_rate(activity: &ActivityRecord, layer: usize, smoothing: f64) -> RateEstimate {
    let s = &activity.layers[layer].s;
    RateEstimate {
        y: (0..s.width).map(|i| final_rate(&s.column(i), smoothing)).collect(),
    }
}

/// Mean of the per-example estimates over a window.
pub fn window_rate(window: &[ActivityRecord], layer: usize, smoothing: f64) -> Result<RateEstimate, IpError> {
    let first = window.first().ok_or(IpError::EmptyWindow)?;
    let mut y = vec![0.0; first.layers[layer].s.width];
    for act in window {
        for (acc, v) in y.iter_mut().zip(estimate_rate(act, layer, smoothing).y) {
            *acc += v;
        }
    }
    for v in y.iter_mut() {
        *v /= window.len() as f64;
    }
    Ok(RateEstimate { y })
}

/// Spike count of a single neuron driven by a fixed current sequence.
pub fn replay_spikes(drive: &[f64], p: &NeuronIntrinsics) -> usize {
    let mut u = 0.0;
    let mut n = 0;
    for &i in drive {
        let (post, s) = neuron::lif_step(u, i, p, Mode::Spiking);
        u = post;
        n += (s > 0.0) as usize;
    }
    n
}

/// Rate derivatives with respect to `ln R` and `ln tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensitivity {
    pub d_log_r: f64,
    pub d_log_tau: f64,
}

/// Central-difference rate sensitivity over the replayed drives of one
/// neuron; each drive is one example's current sequence.
pub fn probe_sensitivity(drives: &[Vec<f64>], p: &NeuronIntrinsics, h: f64) -> Sensitivity {
    let steps: usize = drives.iter().map(Vec::len).sum();
    if steps == 0 {
        return Sensitivity {
            d_log_r: 0.0,
            d_log_tau: 0.0,
        };
    }
    let rate = |q: NeuronIntrinsics| drives.iter().map(|d| replay_spikes(d, &q)).sum::<usize>() as f64 / steps as f64;
    let scaled = |dr: f64, dt: f64| NeuronIntrinsics {
        r: p.r * dr.exp(),
        tau: p.tau * dt.exp(),
        ..*p
    };
    Sensitivity {
        d_log_r: (rate(scaled(h, 0.0)) - rate(scaled(-h, 0.0))) / (2.0 * h),
        d_log_tau: (rate(scaled(0.0, h)) - rate(scaled(0.0, -h))) / (2.0 * h),
    }
}

/// `d/dy (y / mu - ln y)`.
pub fn proxy_grad(y: f64, mu: f64) -> f64 {
    1.0 / mu - 1.0 / y
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpOutcome {
    /// Neurons skipped because they never fired in the window.
    pub degenerate: Vec<usize>,
}

/// One gradient step on the proxy loss for every neuron, in place.
pub fn ip_step(
    rates: &RateEstimate,
    sens: &[Sensitivity],
    intr: &mut [NeuronIntrinsics],
    cfg: &IpConfig,
) -> IpOutcome {
    let mut degenerate = Vec::new();
    for (i, p) in intr.iter_mut().enumerate() {
        let y = rates.y[i];
        if y <= 0.0 {
            degenerate.push(i);
            continue;
        }
        let g = proxy_grad(y, cfg.mu);
        p.r *= (-cfg.eta_ip * g * sens[i].d_log_r).exp();
        p.tau *= (-cfg.eta_ip * g * sens[i].d_log_tau).exp();
        cfg.clamp(p);
    }
    if !degenerate.is_empty() {
        log::debug!("ip: {} silent neurons skipped", degenerate.len());
    }
    IpOutcome { degenerate }
}

fn drives_of(window: &[ActivityRecord], layer: usize, i: usize) -> Vec<Vec<f64>> {
    window.iter().map(|act| act.layers[layer].current.column(i)).collect()
}

/// Adapt the intrinsics of one layer from a window of spiking-mode
/// activity. Only spike trains and input currents are read.
pub fn adapt_layer(
    window: &[ActivityRecord],
    layer: usize,
    intr: &mut [NeuronIntrinsics],
    cfg: &IpConfig,
) -> Result<IpOutcome, IpError> {
    let rates = window_rate(window, layer, cfg.smoothing)?;
    if rates.y.len() != intr.len() {
        return Err(IpError::ShapeMismatch {
            layer,
            got: rates.y.len(),
            expected: intr.len(),
        });
    }
    let sens: Vec<Sensitivity> = (0..intr.len())
        .map(|i| {
            if rates.y[i] > 0.0 {
                probe_sensitivity(&drives_of(window, layer, i), &intr[i], cfg.probe)
            } else {
                Sensitivity {
                    d_log_r: 0.0,
                    d_log_tau: 0.0,
                }
            }
        })
        .collect();
    Ok(ip_step(&rates, &sens, intr, cfg))
}

/// Discrete divergence between the histogram of `samples` and an
/// exponential density with mean `mu`, on `bins` equal bins over
/// `[0, upper)` plus one tail bin.
pub fn kl_to_exponential(samples: &[f64], mu: f64, bins: usize, upper: f64) -> f64 {
    let width = upper / bins as f64;
    let mut counts = vec![0usize; bins + 1];
    for &x in samples {
        let b = ((x / width) as usize).min(bins);
        counts[b] += 1;
    }
    let cdf = |x: f64| 1.0 - (-x / mu).exp();
    let n = samples.len() as f64;
    let mut kl = 0.0;
    for (b, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let q = if b == bins {
            1.0 - cdf(upper)
        } else {
            cdf((b + 1) as f64 * width) - cdf(b as f64 * width)
        };
        let p = c as f64 / n;
        kl += p * (p / q.max(f64::MIN_POSITIVE)).ln();
    }
    kl
}

/// Stochastic drive for the single-neuron benchmark: `inputs` Bernoulli
/// sources each firing with probability `p` per step through weight `w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonDrive {
    pub inputs: usize,
    pub p: f64,
    pub w: f64,
}

impl PoissonDrive {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, steps: usize) -> Vec<f64> {
        (0..steps)
            .map(|_| (0..self.inputs).filter(|_| rng.random::<f64>() < self.p).count() as f64 * self.w)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkSpec {
    pub drive: PoissonDrive,
    pub steps_per_example: usize,
    pub examples_per_window: usize,
    pub windows: usize,
    /// Windows simulated with frozen intrinsics to measure rate and divergence.
    pub eval_windows: usize,
    pub bins: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            drive: PoissonDrive {
                inputs: 20,
                p: 0.1,
                w: 0.6,
            },
            steps_per_example: 100,
            examples_per_window: 16,
            windows: 200,
            eval_windows: 20,
            bins: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkResult {
    pub rate_before: f64,
    pub rate_after: f64,
    pub kl_before: f64,
    pub kl_after: f64,
    pub final_intrinsics: NeuronIntrinsics,
}

fn evaluate_neuron(
    rng: &mut ChaCha8Rng,
    spec: &BenchmarkSpec,
    p: &NeuronIntrinsics,
    cfg: &IpConfig,
) -> (f64, f64) {
    let mut spikes = 0usize;
    let mut steps = 0usize;
    let mut trace = Vec::new();
    for _ in 0..spec.eval_windows * spec.examples_per_window {
        let drive = spec.drive.sample(rng, spec.steps_per_example);
        let mut u = 0.0;
        let mut s = Vec::with_capacity(drive.len());
        for &i in &drive {
            let (post, sp) = neuron::lif_step(u, i, p, Mode::Spiking);
            u = post;
            s.push(sp);
        }
        spikes += s.iter().filter(|&&x| x > 0.0).count();
        steps += s.len();
        trace.extend(rate_trace(&s, cfg.smoothing));
    }
    let rate = spikes as f64 / steps as f64;
    let kl = kl_to_exponential(&trace, cfg.mu, spec.bins, 10.0 * cfg.mu);
    (rate, kl)
}

/// A lone neuron under stochastic drive, adapted for `spec.windows` IP
/// windows; rate and divergence are measured before and after.
pub fn single_neuron_benchmark(
    seed: u64,
    start: NeuronIntrinsics,
    cfg: &IpConfig,
    spec: &BenchmarkSpec,
) -> BenchmarkResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rate_before, kl_before) = evaluate_neuron(&mut rng, spec, &start, cfg);
    let mut p = [start];
    for _ in 0..spec.windows {
        let drives: Vec<Vec<f64>> = (0..spec.examples_per_window)
            .map(|_| spec.drive.sample(&mut rng, spec.steps_per_example))
            .collect();
        let mut y = 0.0;
        for d in &drives {
            let mut u = 0.0;
            let s: Vec<f64> = d
                .iter()
                .map(|&i| {
                    let (post, sp) = neuron::lif_step(u, i, &p[0], Mode::Spiking);
                    u = post;
                    sp
                })
                .collect();
            y += final_rate(&s, cfg.smoothing);
        }
        let rates = RateEstimate {
            y: vec![y / drives.len() as f64],
        };
        let sens = if rates.y[0] > 0.0 {
            probe_sensitivity(&drives, &p[0], cfg.probe)
        } else {
            Sensitivity {
                d_log_r: 0.0,
                d_log_tau: 0.0,
            }
        };
        ip_step(&rates, &[sens], &mut p, cfg);
    }
    let (rate_after, kl_after) = evaluate_neuron(&mut rng, spec, &p[0], cfg);
    BenchmarkResult {
        rate_before,
        rate_after,
        kl_before,
        kl_after,
        final_intrinsics: p[0],
    }
}
