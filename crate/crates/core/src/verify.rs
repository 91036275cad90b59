//! Independent oracles for the analytic machinery.
//!
//! Nothing here calls into the relaxation or gradient code it checks: the
//! brute-force current recomputes its own softmaxes and scans every edge,
//! and the gradient check only uses forward simulations and the loss.

use crate::data::Example;
use crate::grad::{self, Gradients, ParamGroup};
use crate::network::{self, Architecture, Intrinsics, Network, NetworkError, Weights};
use crate::neuron::Mode;
use crate::relax::{ArchParams, ConnType, RecurrentWeights};
use crate::topology::LayerLayout;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("non-finite function value at x = {0}")]
    NonFinite(f64),
    #[error("brute-force enumeration limited to 32 neurons, layer has {0}")]
    TooLarge(usize),
    #[error("gradient checking requires soft mode; spiking mode is discontinuous at threshold")]
    SpikingMode,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Grad(#[from] grad::GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Central difference `(f(x + eps) - f(x - eps)) / (2 eps)`.
pub fn finite_diff(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> Result<f64, VerifyError> {
    let hi = f(x + eps);
    if !hi.is_finite() {
        return Err(VerifyError::NonFinite(x + eps));
    }
    let lo = f(x - eps);
    if !lo.is_finite() {
        return Err(VerifyError::NonFinite(x - eps));
    }
    Ok((hi - lo) / (2.0 * eps))
}

/// Relative error with an absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Naive triple enumeration of the mixture current into neuron `i`.
pub fn brute_force_current(
    i: usize,
    a_prev: &[f64],
    arch: &ArchParams,
    w: &RecurrentWeights,
    layout: &LayerLayout,
) -> Result<f64, VerifyError> {
    if layout.n > 32 {
        return Err(VerifyError::TooLarge(layout.n));
    }
    let n_opts = layout.options.len();
    let mut total = 0.0;
    for v in 0..n_opts {
        let p_v = match arch.motif_fixed {
            Some(k) => {
                if k == v {
                    1.0
                } else {
                    0.0
                }
            }
            None => {
                let mut z = 0.0;
                for l in &arch.motif_logits {
                    z += l.exp();
                }
                arch.motif_logits[v].exp() / z
            }
        };
        for (k, e) in layout.options[v].edges.iter().enumerate() {
            if e.to != i {
                continue;
            }
            for (ci, c) in ConnType::ALL.iter().enumerate() {
                let p_c = match &arch.conn_fixed {
                    Some(types) => {
                        if types[v][k] == *c {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    None => {
                        let logits = arch.conn_logits[v][k];
                        let z = logits[0].exp() + logits[1].exp() + logits[2].exp();
                        logits[ci].exp() / z
                    }
                };
                let weight = match c {
                    ConnType::Excitatory => w.excitatory[v][k],
                    ConnType::Inhibitory => -w.w_inh,
                    ConnType::Absent => 0.0,
                };
                total += p_v * p_c * weight * a_prev[e.from];
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: &'static str,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>8} {:>14} {:>14} {:>6}\n",
            "group", "checked", "max_rel_err", "mean_rel_err", "pass"
        );
        for g in &self.groups {
            let _ = writeln!(
                out,
                "{:<14} {:>8} {:>14.3e} {:>14.3e} {:>6}",
                g.group,
                g.checked,
                g.max_rel_err,
                g.mean_rel_err,
                if g.pass { "yes" } else { "NO" }
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), VerifyError> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        w.write_record(["group", "checked", "max_rel_err", "mean_rel_err", "pass"])
            .map_err(csv_io)?;
        for g in &self.groups {
            w.write_record([
                g.group.to_string(),
                g.checked.to_string(),
                format!("{:e}", g.max_rel_err),
                format!("{:e}", g.mean_rel_err),
                g.pass.to_string(),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub samples_per_group: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            floor: 1e-8,
            samples_per_group: 50,
            seed: 0,
        }
    }
}

fn group_len(arch: &Architecture, weights: &Weights, group: ParamGroup) -> usize {
    match group {
        ParamGroup::Feedforward => weights.ff.iter().map(|m| m.data.len()).sum(),
        ParamGroup::Recurrent => weights
            .rec
            .iter()
            .flatten()
            .map(|r| r.excitatory.iter().map(Vec::len).sum::<usize>())
            .sum(),
        ParamGroup::MotifLogits => arch.layers.iter().flatten().map(|a| a.motif_logits.len()).sum(),
        ParamGroup::ConnLogits => arch
            .layers
            .iter()
            .flatten()
            .map(|a| 3 * a.conn_logits.iter().map(Vec::len).sum::<usize>())
            .sum(),
    }
}

/// Mutable access to the `idx`-th parameter of `group`, in the same order
/// as [`Gradients::group_values`].
fn param_slot<'a>(
    arch: &'a mut Architecture,
    weights: &'a mut Weights,
    group: ParamGroup,
    idx: usize,
) -> &'a mut f64 {
    match group {
        ParamGroup::Feedforward => weights.ff.iter_mut().flat_map(|m| m.data.iter_mut()).nth(idx),
        ParamGroup::Recurrent => weights
            .rec
            .iter_mut()
            .flatten()
            .flat_map(|r| r.excitatory.iter_mut().flatten())
            .nth(idx),
        ParamGroup::MotifLogits => arch
            .layers
            .iter_mut()
            .flatten()
            .flat_map(|a| a.motif_logits.iter_mut())
            .nth(idx),
        ParamGroup::ConnLogits => arch
            .layers
            .iter_mut()
            .flatten()
            .flat_map(|a| a.conn_logits.iter_mut().flatten().flatten())
            .nth(idx),
    }
    .expect("index within group")
}

fn total_loss(
    net: &Network,
    arch: &Architecture,
    weights: &Weights,
    intr: &Intrinsics,
    batch: &[&Example],
    mode: Mode,
) -> f64 {
    batch
        .iter()
        .map(|ex| {
            network::forward(net, arch, weights, intr, &ex.events, mode)
                .and_then(|act| network::loss(&act, ex.label))
                .unwrap_or(f64::NAN)
        })
        .sum()
}

/// Compare `analytic` against finite differences of the summed batch loss.
#[allow(clippy::too_many_arguments)]
pub fn check_against(
    net: &Network,
    arch: &Architecture,
    weights: &Weights,
    intr: &Intrinsics,
    batch: &[&Example],
    mode: Mode,
    analytic: &Gradients,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, VerifyError> {
    if !mode.is_soft() {
        return Err(VerifyError::SpikingMode);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut groups = Vec::new();
    for group in ParamGroup::ALL {
        let len = group_len(arch, weights, group);
        let values = analytic.group_values(group);
        assert_eq!(values.len(), len, "gradient layout differs from parameter layout");
        let picks = sample(&mut rng, len, cfg.samples_per_group.min(len)).into_vec();
        let mut arch_probe = arch.clone();
        let mut w_probe = weights.clone();
        let mut errs = Vec::with_capacity(picks.len());
        for idx in picks {
            let x0 = *param_slot(&mut arch_probe, &mut w_probe, group, idx);
            let numeric = finite_diff(
                |x| {
                    *param_slot(&mut arch_probe, &mut w_probe, group, idx) = x;
                    total_loss(net, &arch_probe, &w_probe, intr, batch, mode)
                },
                x0,
                cfg.epsilon,
            )?;
            *param_slot(&mut arch_probe, &mut w_probe, group, idx) = x0;
            errs.push(relative_error(values[idx], numeric, cfg.floor));
        }
        let max = errs.iter().copied().fold(0.0, f64::max);
        let mean = if errs.is_empty() {
            0.0
        } else {
            errs.iter().sum::<f64>() / errs.len() as f64
        };
        groups.push(GroupReport {
            group: group.name(),
            max_rel_err: max,
            mean_rel_err: mean,
            checked: errs.len(),
            pass: max <= cfg.tolerance,
        });
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        groups,
    })
}

/// Analytic gradients of the summed batch loss checked against central
/// differences on a seeded sample of every parameter group.
pub fn gradcheck(
    net: &Network,
    arch: &Architecture,
    weights: &Weights,
    intr: &Intrinsics,
    batch: &[&Example],
    mode: Mode,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, VerifyError> {
    if !mode.is_soft() {
        return Err(VerifyError::SpikingMode);
    }
    let analytic = grad::batch_gradients(net, arch, weights, intr, batch, mode)?.grads;
    check_against(net, arch, weights, intr, batch, mode, &analytic, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relax::mixed_recurrent_current;
    use crate::topology::MotifSizeSet;
    use rand::Rng;

    #[test]
    fn finite_diff_examples() {
        let d = finite_diff(|x| x * x, 3.0, 1e-5).unwrap();
        assert!((d - 6.0).abs() < 1e-8);
        assert_eq!(finite_diff(|_| 4.2, 1.0, 1e-5).unwrap(), 0.0);
        assert!(matches!(
            finite_diff(|x| 1.0 / (x - 1e-5), 0.0, 1e-5),
            Err(VerifyError::NonFinite(_))
        ));
    }

    #[test]
    fn brute_force_small_cases() {
        let lay = LayerLayout::new(12, &MotifSizeSet::new(vec![2, 4], 12).unwrap(), true).unwrap();
        let arch = ArchParams::uniform(&lay);
        let w = RecurrentWeights::zeros(&lay, 1.0);
        assert_eq!(brute_force_current(3, &[0.0; 12], &arch, &w, &lay).unwrap(), 0.0);

        // one-hot: only edge 5 -> 4 of option 1, excitatory with weight 0.7
        let opt = &lay.options[1];
        let k = opt.find(5, 4).unwrap();
        let mut types = vec![ConnType::Absent; opt.edges.len()];
        types[k] = ConnType::Excitatory;
        let arch = ArchParams::one_hot(&lay, 1, types);
        let mut w = RecurrentWeights::zeros(&lay, 1.0);
        w.excitatory[1][k] = 0.7;
        let mut a = [0.1; 12];
        a[5] = 2.0;
        assert_eq!(brute_force_current(4, &a, &arch, &w, &lay).unwrap(), 0.7 * 2.0);

        let big = LayerLayout::new(40, &MotifSizeSet::new(vec![4], 40).unwrap(), true).unwrap();
        let arch = ArchParams::uniform(&big);
        let w = RecurrentWeights::zeros(&big, 1.0);
        assert!(matches!(
            brute_force_current(0, &[0.0; 40], &arch, &w, &big),
            Err(VerifyError::TooLarge(40))
        ));
    }

    #[test]
    fn brute_force_agrees_with_mixture_on_random_configurations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lay = LayerLayout::new(12, &MotifSizeSet::new(vec![2, 4], 12).unwrap(), true).unwrap();
        for _ in 0..200 {
            let mut arch = ArchParams::uniform(&lay);
            for x in arch.motif_logits.iter_mut() {
                *x = rng.random_range(-3.0..3.0);
            }
            for x in arch.conn_logits.iter_mut().flatten().flatten() {
                *x = rng.random_range(-3.0..3.0);
            }
            let mut w = RecurrentWeights::zeros(&lay, rng.random_range(0.1..2.0));
            for x in w.excitatory.iter_mut().flatten() {
                *x = rng.random_range(0.0..1.0);
            }
            let a: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..2.0)).collect();
            let sel = arch.selection();
            for i in 0..12 {
                let fast = mixed_recurrent_current(i, &a, &sel, &w, &lay).unwrap();
                let slow = brute_force_current(i, &a, &arch, &w, &lay).unwrap();
                assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
            }
        }
    }

    #[test]
    fn report_table_and_csv() {
        let report = GradCheckReport {
            tolerance: 1e-4,
            groups: vec![GroupReport {
                group: "w_ff",
                max_rel_err: 2e-5,
                mean_rel_err: 1e-6,
                checked: 50,
                pass: true,
            }],
        };
        assert!(report.pass());
        let table = report.table();
        assert!(table.starts_with("group"));
        assert!(table.contains("w_ff"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gc.csv");
        report.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("group,checked,max_rel_err,mean_rel_err,pass\n"));
    }
}
