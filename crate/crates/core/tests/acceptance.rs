//! Acceptance checks for the simulator and the search, one line per check.
//!
//! Runs without the libtest harness so every verdict reaches stdout; exits
//! non-zero if any check fails.

use hrmas::data::{gen_synthetic, split, Example, SyntheticSpec};
use hrmas::grad::OptimState;
use hrmas::ip::{single_neuron_benchmark, BenchmarkSpec, IpConfig};
use hrmas::network::{self, Ablation, LayerKind, LayerSpec, Network, NetworkConfig};
use hrmas::neuron::{Mode, NeuronIntrinsics};
use hrmas::relax::{argmax_first, mixed_recurrent_current, softmax_probs, ArchParams, ConnType, RecurrentWeights};
use hrmas::search::{
    self, discretize, fix_motif_size, random_architecture, run_search, simulate_discrete, GradTarget, Phase,
    RetrainConfig, SearchConfig, SearchState, Split,
};
use hrmas::topology::{LayerLayout, MotifSizeSet};
use hrmas::verify::{brute_force_current, gradcheck, GradCheckConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn gradient_fidelity() -> Verdict {
    let started = Instant::now();
    let scml = |size| LayerSpec {
        size,
        kind: LayerKind::ScMl {
            motif_sizes: vec![2, 4],
        },
    };
    let net = Network::new(NetworkConfig {
        input_size: 8,
        horizon: 10,
        classes: 3,
        hidden: vec![scml(8), scml(8)],
        neuron: Default::default(),
        w_inh: 0.5,
        ff_init_gain: 3.0,
        rec_init_gain: 0.6,
        ablation: Ablation::default(),
    })
    .unwrap();
    let neurons: usize = net.layers.iter().map(|l| l.size).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let weights = net.init_weights(&mut rng);
    let mut arch = net.initial_arch();
    for a in arch.layers.iter_mut().flatten() {
        for x in a.motif_logits.iter_mut().chain(a.conn_logits.iter_mut().flatten().flatten()) {
            *x = rng.random_range(-1.0..1.0);
        }
    }
    let ds = gen_synthetic(&SyntheticSpec {
        classes: 3,
        input_size: 8,
        horizon: 10,
        n_per_class: 1,
        events_per_input: 2,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let batch: Vec<&Example> = ds.examples.iter().collect();
    let cfg = GradCheckConfig::default();
    let report = gradcheck(
        &net,
        &arch,
        &weights,
        &net.default_intrinsics(),
        &batch,
        net.config.neuron.soft_mode(),
        &cfg,
    )
    .unwrap();
    let elapsed = started.elapsed();
    print!("{}", report.table());
    // groups smaller than the sample budget are checked exhaustively
    let covered = report.groups.len() == 4 && report.groups.iter().all(|g| g.checked >= 50 || g.group == "motif_logits");
    let worst = report.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    verdict(
        report.pass() && covered && neurons <= 20 && within(elapsed, 60),
        format!("{neurons} neurons, T=10, worst rel. err {worst:.2e} (tol 1e-4), {elapsed:.1?}"),
    )
}

fn mixture_equivalence() -> Verdict {
    let started = Instant::now();
    let lay = LayerLayout::new(12, &MotifSizeSet::new(vec![2, 4], 12).unwrap(), true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let mut arch = ArchParams::uniform(&lay);
        for x in arch.motif_logits.iter_mut().chain(arch.conn_logits.iter_mut().flatten().flatten()) {
            *x = rng.random_range(-4.0..4.0);
        }
        let mut w = RecurrentWeights::zeros(&lay, rng.random_range(0.1..2.0));
        for x in w.excitatory.iter_mut().flatten() {
            *x = rng.random_range(0.0..1.5);
        }
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..2.0)).collect();
        let sel = arch.selection();
        for i in 0..12 {
            let fast = mixed_recurrent_current(i, &a, &sel, &w, &lay).unwrap();
            let slow = brute_force_current(i, &a, &arch, &w, &lay).unwrap();
            worst = worst.max((fast - slow).abs());
        }
    }
    let elapsed = started.elapsed();
    verdict(
        worst <= 1e-12 && within(elapsed, 10),
        format!("1000 configs x 12 neurons, max |diff| {worst:.1e}, {elapsed:.1?}"),
    )
}

fn one_hot_collapse() -> Verdict {
    let net = Network::new(NetworkConfig {
        input_size: 10,
        horizon: 30,
        classes: 3,
        hidden: vec![
            LayerSpec {
                size: 12,
                kind: LayerKind::ScMl {
                    motif_sizes: vec![2, 3, 4, 6],
                },
            },
            LayerSpec {
                size: 8,
                kind: LayerKind::ScMl {
                    motif_sizes: vec![2, 4, 8],
                },
            },
        ],
        neuron: Default::default(),
        w_inh: 0.7,
        ff_init_gain: 4.0,
        rec_init_gain: 1.5,
        ablation: Ablation::default(),
    })
    .unwrap();
    let mut identical = 0;
    let mut active = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = net.init_weights(&mut rng);
        let mut disc = random_architecture(&net, &mut rng).with_weights(&net, &weights).unwrap();
        for l in disc.layers.iter_mut() {
            for p in l.intrinsics.iter_mut() {
                *p = NeuronIntrinsics {
                    r: rng.random_range(0.5..2.0),
                    tau: rng.random_range(2.0..8.0),
                    ..*p
                };
            }
        }
        let relaxed = disc.to_relaxed(&net).unwrap();
        let ds = gen_synthetic(&SyntheticSpec {
            classes: 3,
            input_size: 10,
            horizon: 30,
            n_per_class: 1,
            seed,
            ..Default::default()
        })
        .unwrap();
        let mut all = true;
        for ex in &ds.examples {
            let a = network::forward(&net, &relaxed, &weights, &disc.intrinsics(&net), &ex.events, Mode::Spiking).unwrap();
            let b = simulate_discrete(&net, &disc, &weights.ff, &ex.events, Mode::Spiking).unwrap();
            all &= a == b;
            active += a.layers[..2].iter().any(|l| l.s.data.iter().any(|&s| s > 0.0)) as usize;
        }
        identical += all as usize;
    }
    verdict(
        identical == 20 && active > 0,
        format!("{identical}/20 seeds bitwise identical, {active} active traces"),
    )
}

fn softmax_and_ties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_norm: f64 = 0.0;
    let mut shift_ok = true;
    for _ in 0..2000 {
        let n = rng.random_range(1..12);
        let scale = [1.0, 50.0, 700.0][rng.random_range(0..3)];
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let p = softmax_probs(&logits).unwrap();
        worst_norm = worst_norm.max((p.iter().sum::<f64>() - 1.0).abs());
        let c = rng.random_range(-1e3..1e3);
        let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
        shift_ok &= argmax_first(&p).0 == argmax_first(&softmax_probs(&shifted).unwrap()).0;
    }

    let net = Network::new(NetworkConfig {
        input_size: 4,
        horizon: 5,
        classes: 2,
        hidden: vec![LayerSpec {
            size: 8,
            kind: LayerKind::ScMl {
                motif_sizes: vec![2, 4, 8],
            },
        }],
        neuron: Default::default(),
        w_inh: 1.0,
        ff_init_gain: 3.0,
        rec_init_gain: 0.3,
        ablation: Ablation::default(),
    })
    .unwrap();
    let mut state = SearchState::initial(&net, &mut ChaCha8Rng::seed_from_u64(0));
    // sizes 4 and 8 tie for the top logit: the smaller one wins
    state.arch.layers[0].as_mut().unwrap().motif_logits = vec![-1.0, 2.0, 2.0];
    fix_motif_size(&net, &mut state).unwrap();
    let motif_tie = state.arch.layers[0].as_ref().unwrap().motif_fixed == Some(1);
    // edge logits cycle through a three-way tie, exc = inh, and inh = absent
    let patterns = [[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]];
    let expect = [
        Some(ConnType::Excitatory),
        Some(ConnType::Excitatory),
        Some(ConnType::Inhibitory),
        None,
    ];
    let a = state.arch.layers[0].as_mut().unwrap();
    for (k, l) in a.conn_logits[1].iter_mut().enumerate() {
        *l = patterns[k % 4];
    }
    let disc = discretize(&net, &state).unwrap();
    let opt = &net.layers[0].layout.as_ref().unwrap().options[1];
    let kinds: Vec<Option<ConnType>> = opt
        .edges
        .iter()
        .map(|e| disc.layers[0].edges.iter().find(|d| (d.from, d.to) == (e.from, e.to)).map(|d| d.kind))
        .collect();
    let edge_ties = kinds.iter().enumerate().all(|(k, kind)| *kind == expect[k % 4]);
    let argmax_tie = argmax_first(&[0.2, 0.5, 0.5]) == (1, true) && argmax_first(&[0.5, 0.2]) == (0, false);

    verdict(
        worst_norm <= 1e-12 && shift_ok && motif_tie && edge_ties && argmax_tie,
        format!(
            "max |sum-1| {worst_norm:.1e}, shift invariance {shift_ok}, motif tie {motif_tie}, edge ties {edge_ties}, argmax tie {argmax_tie}"
        ),
    )
}

fn ip_regulation() -> Verdict {
    let started = Instant::now();
    let cfg = IpConfig::default();
    let spec = BenchmarkSpec::default();
    let mut ok = 0;
    let mut rates = Vec::new();
    for seed in 0..10 {
        let r = single_neuron_benchmark(seed, NeuronIntrinsics::default(), &cfg, &spec);
        let in_band = (r.rate_after - cfg.mu).abs() <= 0.2 * cfg.mu;
        ok += (in_band && r.kl_after < r.kl_before) as usize;
        rates.push(format!("{:.3}", r.rate_after));
    }
    let elapsed = started.elapsed();
    verdict(
        ok >= 9 && within(elapsed, 60),
        format!("{ok}/10 seeds in band and closer to target, rates [{}], {elapsed:.1?}", rates.join(" ")),
    )
}

/// Toy task shared by the end-to-end, ablation and determinism checks.
struct Toy {
    train: Vec<Example>,
    valid: Vec<Example>,
    test: Vec<Example>,
}

impl Toy {
    fn new() -> Self {
        let ds = gen_synthetic(&SyntheticSpec {
            classes: 4,
            input_size: 16,
            horizon: 50,
            jitter: 1.0,
            drop_prob: 0.05,
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        let (train, valid, test) = split(&ds, [0.6, 0.2, 0.2], 7).unwrap();
        Self {
            train: train.examples,
            valid: valid.examples,
            test: test.examples,
        }
    }

    fn net(ablation: Ablation) -> Network {
        Network::new(NetworkConfig {
            input_size: 16,
            horizon: 50,
            classes: 4,
            hidden: vec![LayerSpec {
                size: 16,
                kind: LayerKind::ScMl {
                    motif_sizes: vec![2, 4, 8],
                },
            }],
            neuron: Default::default(),
            w_inh: 1.0,
            ff_init_gain: 3.0,
            rec_init_gain: 0.3,
            ablation,
        })
        .unwrap()
    }

    /// Search with `seed`, discretize, retrain with the same seed.
    fn hrmas(&self, ablation: Ablation, use_ip: bool, seed: u64) -> f64 {
        let net = Self::net(ablation);
        let cfg = SearchConfig {
            use_ip,
            ..Default::default()
        };
        let out = run_search(&net, &self.train, &self.valid, &cfg, &IpConfig::default(), &OptimState::default(), seed, None)
            .unwrap();
        self.retrain(&net, &out.arch, seed)
    }

    fn random(&self, seed: u64) -> f64 {
        let net = Self::net(Ablation::default());
        let arch = random_architecture(&net, &mut ChaCha8Rng::seed_from_u64(seed));
        self.retrain(&net, &arch, seed)
    }

    fn retrain(&self, net: &Network, arch: &search::DiscreteArchitecture, seed: u64) -> f64 {
        search::retrain_once(net, arch, &self.train, &self.test, &RetrainConfig::default(), seed)
            .unwrap()
            .test_accuracy
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt_accs(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{:.3}", x)).collect::<Vec<_>>().join(" ")
}

fn end_to_end(toy: &Toy) -> (Verdict, Vec<f64>) {
    let started = Instant::now();
    let full: Vec<f64> = SEEDS.iter().map(|&s| toy.hrmas(Ablation::default(), true, s)).collect();
    let random: Vec<f64> = SEEDS.iter().map(|&s| toy.random(s)).collect();
    let elapsed = started.elapsed();
    let (m, r) = (mean(&full), mean(&random));
    let v = verdict(
        m >= 0.90 && m >= r && within(elapsed, 600),
        format!(
            "hrmas mean {m:.4} [{}] vs random mean {r:.4} [{}], {elapsed:.1?}",
            fmt_accs(&full),
            fmt_accs(&random)
        ),
    );
    (v, full)
}

fn ablation_direction(toy: &Toy, full: &[f64]) -> Verdict {
    let no_ip: Vec<f64> = SEEDS.iter().map(|&s| toy.hrmas(Ablation::default(), false, s)).collect();
    let mut detail = format!("full {:.4} >= no_ip {:.4} [{}]", mean(full), mean(&no_ip), fmt_accs(&no_ip));
    let modes = [
        (
            "no_motif",
            Ablation {
                no_motif: true,
                ..Default::default()
            },
        ),
        (
            "no_inter_motif",
            Ablation {
                no_inter_motif: true,
                ..Default::default()
            },
        ),
        (
            "fully_connected",
            Ablation {
                fully_connected_fixed: true,
                ..Default::default()
            },
        ),
    ];
    let mut ran = true;
    for (name, ab) in modes {
        let accs: Vec<f64> = SEEDS.iter().map(|&s| toy.hrmas(ab, true, s)).collect();
        ran &= accs.iter().all(|a| a.is_finite());
        detail.push_str(&format!("; {name} {:.4}", mean(&accs)));
    }
    verdict(mean(full) >= mean(&no_ip) && ran, detail)
}

fn determinism_and_separation(toy: &Toy) -> Verdict {
    let net = Toy::net(Ablation::default());
    let cfg = SearchConfig {
        checkpoint_every: 50,
        ..Default::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs
        .iter()
        .map(|d| {
            run_search(&net, &toy.train, &toy.valid, &cfg, &IpConfig::default(), &OptimState::default(), 11, Some(d.path()))
                .unwrap()
        })
        .collect();
    let read = |i: usize, name: &str| std::fs::read(dirs[i].path().join(name)).unwrap();
    let same_metrics = read(0, "metrics.csv") == read(1, "metrics.csv");
    let same_arch = read(0, "arch.json") == read(1, "arch.json");

    let train_ids: HashSet<usize> = toy.train.iter().map(|e| e.id).collect();
    let valid_ids: HashSet<usize> = toy.valid.iter().map(|e| e.id).collect();
    let audit = runs[0].state.audit();
    let mut arch_uses = 0;
    let mut weight_uses = 0;
    let mut clean = train_ids.is_disjoint(&valid_ids);
    for u in audit {
        match u.target {
            GradTarget::Architecture => {
                arch_uses += 1;
                clean &= u.split == Split::Valid && u.ids.iter().all(|i| valid_ids.contains(i));
            }
            GradTarget::Weights | GradTarget::VirtualWeights => {
                weight_uses += 1;
                clean &= u.split == Split::Train && u.ids.iter().all(|i| train_ids.contains(i));
            }
        }
    }
    let finished = runs[0].state.phase == Phase::MotifFixed;
    verdict(
        same_metrics && same_arch && clean && arch_uses > 0 && weight_uses > 0 && finished,
        format!(
            "metrics identical {same_metrics}, arch identical {same_arch}, {arch_uses} architecture / {weight_uses} weight gradient uses, split-clean {clean}"
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut report = |name, v: Verdict| {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };
    report("gradient fidelity", gradient_fidelity());
    report("mixture equivalence", mixture_equivalence());
    report("one-hot collapse", one_hot_collapse());
    report("softmax and tie-breaking", softmax_and_ties());
    report("intrinsic plasticity", ip_regulation());
    let toy = Toy::new();
    let (v, full) = end_to_end(&toy);
    report("toy search and retrain", v);
    report("ablation direction", ablation_direction(&toy, &full));
    report("determinism and split separation", determinism_and_separation(&toy));
    let failed = results.iter().filter(|(_, v)| !v.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
