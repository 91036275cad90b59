//! Discrete-time leaky integrate-and-fire dynamics with a first-order
//! synaptic trace.
//!
//! Every neuron integrates
//!
//! ```text
//! u[t] = (1 - 1/tau) * u[t-1] + (R/tau) * I[t]
//! ```
//!
//! and emits a spike when `u[t] >= theta`, after which the potential is
//! reset to zero. The spike train is low-pass filtered into a postsynaptic
//! current `a[t] = (1 - 1/tau_s) * a[t-1] + s[t]`, which is what downstream
//! weights multiply.
//!
//! A soft mode replaces the threshold with a logistic of sharpness `kappa`
//! and disables the reset. It exists only so that finite differences can
//! check the backward pass; the dataflow is otherwise identical.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NeuronError {
    #[error("membrane time constant must exceed 1, got {0}")]
    Tau(f64),
    #[error("synaptic time constant must exceed 1, got {0}")]
    TauSyn(f64),
    #[error("membrane resistance must be positive, got {0}")]
    Resistance(f64),
    #[error("threshold must be positive, got {0}")]
    Threshold(f64),
}

/// Per-neuron intrinsic parameters. Only `r` and `tau` are adapted by
/// intrinsic plasticity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronIntrinsics {
    pub r: f64,
    pub tau: f64,
    pub theta: f64,
    pub tau_s: f64,
}

impl Default for NeuronIntrinsics {
    fn default() -> Self {
        Self {
            r: 1.0,
            tau: 4.0,
            theta: 1.0,
            tau_s: 2.0,
        }
    }
}

impl NeuronIntrinsics {
    pub fn validate(&self) -> Result<(), NeuronError> {
        // Written as negated comparisons so NaN is rejected too.
        if !(self.tau > 1.0) {
            return Err(NeuronError::Tau(self.tau));
        }
        if !(self.tau_s > 1.0) {
            return Err(NeuronError::TauSyn(self.tau_s));
        }
        if !(self.r > 0.0) {
            return Err(NeuronError::Resistance(self.r));
        }
        if !(self.theta > 0.0) {
            return Err(NeuronError::Threshold(self.theta));
        }
        Ok(())
    }

    /// Membrane leak factor `1 - 1/tau`.
    #[inline]
    pub fn leak(&self) -> f64 {
        1.0 - 1.0 / self.tau
    }

    /// Input gain `R/tau`.
    #[inline]
    pub fn gain(&self) -> f64 {
        self.r / self.tau
    }
}

/// Simulation mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Mode {
    /// Hard threshold with reset-to-zero.
    Spiking,
    /// Logistic activation `sigma((u - theta)/kappa)`, no reset.
    Soft { kappa: f64 },
}

impl Mode {
    pub fn is_soft(&self) -> bool {
        matches!(self, Mode::Soft { .. })
    }
}

/// Advance a first-order synaptic trace by one step.
#[inline]
pub fn psc_step(a_prev: f64, spike: f64, tau_s: f64) -> f64 {
    (1.0 - 1.0 / tau_s) * a_prev + spike
}

/// Leaky integration without thresholding.
#[inline]
pub fn integrate(u_prev: f64, total_current: f64, intr: &NeuronIntrinsics) -> f64 {
    intr.leak() * u_prev + intr.gain() * total_current
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Spike output for a (pre-reset) membrane potential.
#[inline]
pub fn fire(u: f64, theta: f64, mode: Mode) -> f64 {
    match mode {
        Mode::Spiking => {
            if u >= theta {
                1.0
            } else {
                0.0
            }
        }
        Mode::Soft { kappa } => logistic((u - theta) / kappa),
    }
}

/// Potential carried into the next step.
#[inline]
pub fn reset(u: f64, spike: f64, mode: Mode) -> f64 {
    match mode {
        Mode::Spiking if spike > 0.0 => 0.0,
        _ => u,
    }
}

/// One LIF update. Returns the post-reset potential and the spike output.
pub fn lif_step(u_prev: f64, total_current: f64, intr: &NeuronIntrinsics, mode: Mode) -> (f64, f64) {
    let u = integrate(u_prev, total_current, intr);
    let s = fire(u, intr.theta, mode);
    (reset(u, s, mode), s)
}

/// Rectangular surrogate for `ds/du` in spiking mode.
#[inline]
pub fn surrogate_grad(u: f64, theta: f64, width: f64) -> f64 {
    if (u - theta).abs() < 0.5 * width {
        1.0 / width
    } else {
        0.0
    }
}

/// Exact `ds/du` of the soft activation.
#[inline]
pub fn soft_grad(u: f64, theta: f64, kappa: f64) -> f64 {
    let s = logistic((u - theta) / kappa);
    s * (1.0 - s) / kappa
}

/// `ds/du` for the given mode: surrogate in spiking mode, exact in soft mode.
#[inline]
pub fn spike_grad(u: f64, theta: f64, mode: Mode, surrogate_width: f64) -> f64 {
    match mode {
        Mode::Spiking => surrogate_grad(u, theta, surrogate_width),
        Mode::Soft { kappa } => soft_grad(u, theta, kappa),
    }
}

/// Mutable state of a single neuron.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NeuronState {
    pub u: f64,
    pub a: f64,
    pub s: f64,
}

impl NeuronState {
    /// Step the neuron with `total_current` and return the spike output.
    pub fn advance(&mut self, total_current: f64, intr: &NeuronIntrinsics, mode: Mode) -> f64 {
        let (u, s) = lif_step(self.u, total_current, intr, mode);
        self.u = u;
        self.s = s;
        self.a = psc_step(self.a, s, intr.tau_s);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn intr(tau: f64, r: f64, theta: f64) -> NeuronIntrinsics {
        NeuronIntrinsics {
            r,
            tau,
            theta,
            tau_s: 2.0,
        }
    }

    #[test]
    fn psc_examples() {
        assert_eq!(psc_step(0.0, 0.0, 4.0), 0.0);
        assert_eq!(psc_step(1.0, 0.0, 4.0), 0.75);
        assert_eq!(psc_step(0.75, 1.0, 4.0), 1.5625);
    }

    #[test]
    fn lif_examples() {
        let p = intr(2.0, 1.0, 1.0);
        assert_eq!(lif_step(0.0, 0.0, &p, Mode::Spiking), (0.0, 0.0));
        assert_eq!(lif_step(0.0, 1.0, &p, Mode::Spiking), (0.5, 0.0));
        // pre-reset potential is 0.9 + 0.2 = 1.1
        assert!((integrate(1.8, 0.4, &p) - 1.1).abs() < 1e-15);
        assert_eq!(lif_step(1.8, 0.4, &p, Mode::Spiking), (0.0, 1.0));
    }

    #[test]
    fn soft_mode_does_not_reset() {
        let p = intr(2.0, 1.0, 1.0);
        let (u, s) = lif_step(1.8, 0.4, &p, Mode::Soft { kappa: 0.2 });
        assert!((u - 1.1).abs() < 1e-15);
        assert!((s - logistic(0.5)).abs() < 1e-15);
    }

    #[test]
    fn validation_rejects_bad_intrinsics() {
        assert!(NeuronIntrinsics::default().validate().is_ok());
        assert_eq!(intr(1.0, 1.0, 1.0).validate(), Err(NeuronError::Tau(1.0)));
        assert!(matches!(
            intr(4.0, 0.0, 1.0).validate(),
            Err(NeuronError::Resistance(_))
        ));
        assert!(matches!(
            intr(4.0, 1.0, -1.0).validate(),
            Err(NeuronError::Threshold(_))
        ));
        let p = NeuronIntrinsics {
            tau_s: f64::NAN,
            ..Default::default()
        };
        assert!(matches!(p.validate(), Err(NeuronError::TauSyn(_))));
    }

    #[test]
    fn surrogate_window() {
        assert_eq!(surrogate_grad(1.0, 1.0, 1.0), 1.0);
        assert_eq!(surrogate_grad(0.4, 1.0, 1.0), 0.0);
        assert_eq!(surrogate_grad(0.0, 1.0, 1.0), 0.0);
        assert_eq!(surrogate_grad(1.2, 1.0, 0.5), 2.0);
    }

    #[test]
    fn soft_grad_matches_difference_quotient() {
        let kappa = 0.2;
        for &u in &[0.3, 0.9, 1.0, 1.4] {
            let h = 1e-6;
            let fd = (fire(u + h, 1.0, Mode::Soft { kappa }) - fire(u - h, 1.0, Mode::Soft { kappa }))
                / (2.0 * h);
            assert!((fd - soft_grad(u, 1.0, kappa)).abs() < 1e-8);
        }
    }

    #[test]
    fn reset_prevents_immediate_second_spike() {
        let p = NeuronIntrinsics::default();
        let mut st = NeuronState::default();
        assert_eq!(st.advance(10.0, &p, Mode::Spiking), 1.0);
        assert_eq!(st.u, 0.0);
        assert_eq!(st.advance(0.0, &p, Mode::Spiking), 0.0);
        assert_eq!(st.advance(0.0, &p, Mode::Spiking), 0.0);
    }

    proptest! {
        #[test]
        fn leak_contracts_without_input(u0 in -0.99f64..0.99, tau in 1.5f64..40.0) {
            let p = intr(tau, 1.0, 1.0);
            let mut u = u0;
            for _ in 0..20 {
                let (next, s) = lif_step(u, 0.0, &p, Mode::Spiking);
                prop_assert_eq!(s, 0.0);
                prop_assert!((next - (1.0 - 1.0 / tau) * u).abs() <= 1e-15);
                prop_assert!(next.abs() <= u.abs());
                u = next;
            }
        }

        #[test]
        fn psc_stays_non_negative(spikes in proptest::collection::vec(0u8..2, 1..60), tau_s in 1.01f64..20.0) {
            let mut a = 0.0;
            for s in spikes {
                a = psc_step(a, s as f64, tau_s);
                prop_assert!(a >= 0.0);
            }
        }

        #[test]
        fn soft_converges_to_hard(u in -3.0f64..3.0, kappa in 1e-4f64..0.3) {
            prop_assume!((u - 1.0).abs() > 10.0 * kappa);
            let hard = fire(u, 1.0, Mode::Spiking);
            let soft = fire(u, 1.0, Mode::Soft { kappa });
            prop_assert!((hard - soft).abs() < 1e-4);
        }
    }
}
