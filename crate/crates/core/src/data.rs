//! Spike datasets: a jittered-prototype synthetic generator, the `#SPK v1`
//! event file format, and stratified splitting.
//!
//! Event file layout:
//!
//! ```text
//! #SPK v1 inputs=<n> T=<t> classes=<c>
//! label <k>
//! <neuron_index> <timestep>
//! ...
//! <blank line>
//! ```

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {what} {value} out of range (limit {limit})")]
    IndexOutOfRange {
        line: usize,
        what: &'static str,
        value: usize,
        limit: usize,
    },
    #[error("invalid split ratios {0:?}: must be non-negative and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub neuron: u32,
    pub t: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    /// Position in the dataset the example was generated or loaded into;
    /// preserved by [`split`].
    pub id: usize,
    pub label: usize,
    pub events: Vec<SpikeEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeDataset {
    pub input_size: usize,
    pub horizon: usize,
    pub classes: usize,
    pub examples: Vec<Example>,
}

impl SpikeDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn with_examples(&self, examples: Vec<Example>) -> Self {
        Self {
            input_size: self.input_size,
            horizon: self.horizon,
            classes: self.classes,
            examples,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for e in &self.examples {
            c[e.label] += 1;
        }
        c
    }
}

/// Parameters of the synthetic jittered-prototype task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub input_size: usize,
    pub horizon: usize,
    /// Standard deviation of the Gaussian timing jitter, in steps.
    pub jitter: f64,
    pub drop_prob: f64,
    pub n_per_class: usize,
    /// Prototype spikes per input channel. Every class uses the same count,
    /// so per-channel spike counts carry no class information.
    pub events_per_input: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            input_size: 16,
            horizon: 50,
            jitter: 1.0,
            drop_prob: 0.05,
            n_per_class: 200,
            events_per_input: 3,
            seed: 0,
        }
    }
}

/// Generate the synthetic dataset. Examples are class-interleaved.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SpikeDataset, DataError> {
    let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
    if spec.classes == 0 || spec.input_size == 0 || spec.horizon == 0 || spec.n_per_class == 0 {
        return bad("classes, input_size, horizon and n_per_class must be positive");
    }
    if !(spec.jitter >= 0.0) || !spec.jitter.is_finite() {
        return bad("jitter must be finite and non-negative");
    }
    if !(0.0..1.0).contains(&spec.drop_prob) {
        return bad("drop_prob must lie in [0, 1)");
    }
    if spec.events_per_input == 0 || spec.events_per_input > spec.horizon {
        return bad("events_per_input must lie in [1, horizon]");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let times: Vec<u32> = (0..spec.horizon as u32).collect();
    let prototypes: Vec<Vec<SpikeEvent>> = (0..spec.classes)
        .map(|_| {
            let mut events = Vec::new();
            for j in 0..spec.input_size as u32 {
                for &t in times.choose_multiple(&mut rng, spec.events_per_input) {
                    events.push(SpikeEvent { neuron: j, t });
                }
            }
            events.sort();
            events
        })
        .collect();

    let normal = Normal::new(0.0, spec.jitter.max(f64::MIN_POSITIVE)).expect("valid std");
    let t_max = (spec.horizon - 1) as f64;
    let mut examples = Vec::with_capacity(spec.classes * spec.n_per_class);
    for k in 0..spec.n_per_class {
        for (label, proto) in prototypes.iter().enumerate() {
            let mut set = BTreeSet::new();
            for e in proto {
                if spec.drop_prob > 0.0 && rng.random::<f64>() < spec.drop_prob {
                    continue;
                }
                let t = if spec.jitter > 0.0 {
                    (e.t as f64 + normal.sample(&mut rng)).round().clamp(0.0, t_max) as u32
                } else {
                    e.t
                };
                set.insert(SpikeEvent { neuron: e.neuron, t });
            }
            examples.push(Example {
                id: k * spec.classes + label,
                label,
                events: set.into_iter().collect(),
            });
        }
    }
    Ok(SpikeDataset {
        input_size: spec.input_size,
        horizon: spec.horizon,
        classes: spec.classes,
        examples,
    })
}

/// Serialize to the event file format.
pub fn to_event_string(ds: &SpikeDataset) -> String {
    let mut out = format!(
        "#SPK v1 inputs={} T={} classes={}\n",
        ds.input_size, ds.horizon, ds.classes
    );
    for ex in &ds.examples {
        let _ = writeln!(out, "label {}", ex.label);
        for e in &ex.events {
            let _ = writeln!(out, "{} {}", e.neuron, e.t);
        }
        out.push('\n');
    }
    out
}

pub fn save_events(ds: &SpikeDataset, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, to_event_string(ds))?;
    Ok(())
}

pub fn load_events(path: &Path) -> Result<SpikeDataset, DataError> {
    parse_events(&std::fs::read_to_string(path)?)
}

fn parse_usize(tok: &str, line: usize) -> Result<usize, DataError> {
    if tok.is_empty() || !tok.bytes().all(|b| b.is_ascii_digit()) {
        return Err(DataError::Parse {
            line,
            msg: format!("expected a decimal integer, found {tok:?}"),
        });
    }
    tok.parse().map_err(|_| DataError::Parse {
        line,
        msg: format!("integer {tok:?} too large"),
    })
}

fn header_field(tok: Option<&str>, key: &str, line: usize) -> Result<usize, DataError> {
    let tok = tok.ok_or_else(|| DataError::Parse {
        line,
        msg: format!("missing header field {key}"),
    })?;
    let value = tok
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| DataError::Parse {
            line,
            msg: format!("expected {key}=<n>, found {tok:?}"),
        })?;
    parse_usize(value, line)
}

/// Parse the event file format. Events keep their file order.
pub fn parse_events(text: &str) -> Result<SpikeDataset, DataError> {
    let mut lines = text.split_inclusive('\n').enumerate().map(|(k, l)| {
        let content = l.strip_suffix('\n').unwrap_or(l);
        (k + 1, content, l.ends_with('\n'))
    });
    let (_, header, _) = lines.next().ok_or(DataError::Parse {
        line: 1,
        msg: "missing header".into(),
    })?;
    let mut toks = header.split(' ');
    if toks.next() != Some("#SPK") || toks.next() != Some("v1") {
        return Err(DataError::Parse {
            line: 1,
            msg: format!("expected '#SPK v1' header, found {header:?}"),
        });
    }
    let input_size = header_field(toks.next(), "inputs", 1)?;
    let horizon = header_field(toks.next(), "T", 1)?;
    let classes = header_field(toks.next(), "classes", 1)?;
    if toks.next().is_some() {
        return Err(DataError::Parse {
            line: 1,
            msg: "trailing header fields".into(),
        });
    }

    let mut examples = Vec::new();
    let mut current: Option<Example> = None;
    for (line, content, terminated) in lines {
        if !terminated {
            return Err(DataError::Parse {
                line,
                msg: "missing final newline".into(),
            });
        }
        match current.as_mut() {
            None => {
                let label = content
                    .strip_prefix("label ")
                    .ok_or_else(|| DataError::Parse {
                        line,
                        msg: format!("expected 'label <k>', found {content:?}"),
                    })
                    .and_then(|v| parse_usize(v, line))?;
                if label >= classes {
                    return Err(DataError::IndexOutOfRange {
                        line,
                        what: "label",
                        value: label,
                        limit: classes,
                    });
                }
                current = Some(Example {
                    id: examples.len(),
                    label,
                    events: Vec::new(),
                });
            }
            Some(_) if content.is_empty() => {
                examples.push(current.take().expect("present"));
            }
            Some(ex) => {
                let mut parts = content.split(' ');
                let (a, b) = match (parts.next(), parts.next(), parts.next()) {
                    (Some(a), Some(b), None) => (a, b),
                    _ => {
                        return Err(DataError::Parse {
                            line,
                            msg: format!("expected '<neuron> <timestep>', found {content:?}"),
                        })
                    }
                };
                let neuron = parse_usize(a, line)?;
                let t = parse_usize(b, line)?;
                if neuron >= input_size {
                    return Err(DataError::IndexOutOfRange {
                        line,
                        what: "neuron index",
                        value: neuron,
                        limit: input_size,
                    });
                }
                if t >= horizon {
                    return Err(DataError::IndexOutOfRange {
                        line,
                        what: "timestep",
                        value: t,
                        limit: horizon,
                    });
                }
                ex.events.push(SpikeEvent {
                    neuron: neuron as u32,
                    t: t as u32,
                });
            }
        }
    }
    if current.is_some() {
        return Err(DataError::Parse {
            line: text.lines().count(),
            msg: "last example is not terminated by a blank line".into(),
        });
    }
    Ok(SpikeDataset {
        input_size,
        horizon,
        classes,
        examples,
    })
}

/// Stratified shuffle split into (train, valid, test).
///
/// Per class, `floor(ratio * count)` examples go to train and valid (with the
/// fractional remainder assigned to the largest remainders), the rest to
/// test.
pub fn split(
    ds: &SpikeDataset,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(SpikeDataset, SpikeDataset, SpikeDataset), DataError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidRatios(ratios));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<Example>; 3] = Default::default();
    for class in 0..ds.classes {
        let mut members: Vec<&Example> = ds.examples.iter().filter(|e| e.label == class).collect();
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), ratios);
        let mut it = members.into_iter();
        for (part, &c) in parts.iter_mut().zip(&counts) {
            part.extend(it.by_ref().take(c).cloned());
        }
    }
    for part in parts.iter_mut() {
        part.sort_by_key(|e| e.id);
    }
    let [a, b, c] = parts;
    Ok((ds.with_examples(a), ds.with_examples(b), ds.with_examples(c)))
}

/// Largest-remainder apportionment of `n` items; ties favour earlier parts.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    // The small slack keeps 0.6 * 200 = 119.99999999999999 from flooring to 119.
    let mut counts: [usize; 3] = [0; 3];
    for k in 0..3 {
        counts[k] = (exact[k] + 1e-9).floor() as usize;
    }
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[k] > 0.0 {
            counts[k] += 1;
            left -= 1;
        }
    }
    counts
}
