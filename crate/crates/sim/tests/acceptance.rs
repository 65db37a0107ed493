//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;

use abcast_core::pqueue::{PriorityQueue, SlotState};
use abcast_core::types::{Batch, ClientMessage, ReplicaId};
use abcast_sim::harness::{self, aba_trial, coin_values};
use abcast_sim::metrics::{log_log_slope, mean};
use abcast_sim::scenario::{Behavior, Faults, Policy, RunSpec, Workload};
use abcast_sim::simnet;
use abcast_sim::trace::Trace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SAFETY_NS: [usize; 3] = [4, 7, 10];
const SAFETY_SEEDS_PER_CELL: u64 = 12;
const SCALING_NS: [usize; 4] = [4, 7, 10, 13];
const SIGMA_SEEDS: u64 = 20;
const SIGMA_RANGE: (f64, f64) = (1.0, 1.2);
const SLOPE_RANGE: (f64, f64) = (0.8, 1.3);
const ADVERSARIAL_SIGMA_MIN: f64 = 1.5;
const ABA_SEEDS: u64 = 200;
const ABA_MAX_INTERNAL: u32 = 40;
const ABA_MEAN_INTERNAL: f64 = 4.0;
const COINS: u64 = 10_000;
const COIN_RANGE: (f64, f64) = (0.45, 0.55);
const PQUEUE_OPS: usize = 10_000;
const PQUEUE_CASES: u64 = 100;
const THROUGHPUT_TOLERANCE: f64 = 0.10;
const GOODPUT_SEEDS: u64 = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: u32, name: &str, o: &Outcome) {
    println!("{} criterion {n}: {name} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn policies() -> [Policy; 3] {
    [Policy::FairRandom, Policy::FifoPerLink, Policy::AdversarialVcbcDelay { target_fraction: 0.25 }]
}

const BEHAVIORS: [Option<Behavior>; 6] = [
    None,
    Some(Behavior::Crash),
    Some(Behavior::Silent),
    Some(Behavior::Equivocator),
    Some(Behavior::InvalidProposer),
    Some(Behavior::Fuzzer),
];

fn safety_specs() -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for n in SAFETY_NS {
        for policy in policies() {
            for behavior in BEHAVIORS {
                for seed in 0..SAFETY_SEEDS_PER_CELL {
                    let mut s = RunSpec::basic(n, 1 + (seed % 2) as usize, 1000 + seed);
                    s.policy = policy.clone();
                    s.workload = match seed % 3 {
                        0 => Workload::FullLoad { outstanding: 1, batches: 3 },
                        1 => Workload::SingleShot { count: 2 * n },
                        _ => Workload::FixedRate { every: 25, count: 2 * n },
                    };
                    if let Some(b) = behavior {
                        s.faults = Faults::last(n, s.f, b);
                    }
                    specs.push(s);
                }
            }
        }
    }
    specs
}

struct SafetySummary {
    spec: RunSpec,
    ok: bool,
    reread_ok: bool,
    quiescent: bool,
    findings: String,
}

/// Criteria 1 and 2.
fn safety_and_liveness() -> (Outcome, Outcome) {
    let specs = safety_specs();
    let results = harness::run_many_summarized(&specs, |r| {
        let reread = Trace::from_bytes(&r.trace.to_bytes()).expect("trace re-reads");
        SafetySummary {
            spec: r.spec.clone(),
            ok: r.report.ok(),
            reread_ok: abcast_sim::checker::check(&reread).ok(),
            quiescent: r.trace.outcome.quiescent,
            findings: r.report.to_string(),
        }
    });
    let mut per_n: BTreeMap<usize, usize> = BTreeMap::new();
    let mut unsafe_runs = Vec::new();
    let mut stuck = Vec::new();
    for r in results {
        let r = r.expect("valid scenario");
        *per_n.entry(r.spec.n).or_default() += 1;
        if !r.ok || !r.reread_ok {
            unsafe_runs.push(format!("{}: {}", r.spec, r.findings.trim()));
        }
        let must_finish = r.spec.faults.behavior.is_none_or(|b| b == Behavior::Crash);
        if must_finish && !r.quiescent {
            stuck.push(r.spec.to_string());
        }
    }
    let min_runs = per_n.values().copied().min().unwrap_or(0);
    let safety = Outcome {
        pass: unsafe_runs.is_empty() && min_runs >= 200,
        detail: format!(
            "{} runs, at least {min_runs} per n, {} with violations{}",
            per_n.values().sum::<usize>(),
            unsafe_runs.len(),
            unsafe_runs.first().map(|s| format!("; first: {s}")).unwrap_or_default()
        ),
    };
    let liveness = Outcome {
        pass: stuck.is_empty(),
        detail: format!(
            "{} fault-free or crash runs failed to deliver everything{}",
            stuck.len(),
            stuck.first().map(|s| format!("; first: {s}")).unwrap_or_default()
        ),
    };
    (safety, liveness)
}

fn full_load(n: usize, seed: u64) -> RunSpec {
    let mut s = RunSpec::basic(n, 1, seed);
    s.workload = Workload::FullLoad { outstanding: 1, batches: 6 };
    s
}

/// Criteria 3 and 4.
fn sigma_and_scaling() -> (Outcome, Outcome) {
    let specs: Vec<RunSpec> =
        SCALING_NS.iter().flat_map(|&n| (0..SIGMA_SEEDS).map(move |seed| full_load(n, seed))).collect();
    let results = harness::run_many_summarized(&specs, |r| {
        (r.spec.n, r.metrics.sigma_mean, r.metrics.messages_per_batch, r.trace.outcome.quiescent && r.report.ok())
    });
    let mut by_n: BTreeMap<usize, (Vec<f64>, Vec<f64>, bool)> = BTreeMap::new();
    for r in results {
        let (n, sigma, mpb, good) = r.expect("valid scenario");
        let e = by_n.entry(n).or_insert((Vec::new(), Vec::new(), true));
        e.0.extend(sigma);
        e.1.extend(mpb);
        e.2 &= good;
    }
    let mut sigma_pass = true;
    let mut sigma_detail = Vec::new();
    let mut points = Vec::new();
    for (n, (sig, mpb, good)) in &by_n {
        let s = mean(sig.iter().copied()).unwrap_or(f64::NAN);
        sigma_pass &= *good && sig.len() as u64 == SIGMA_SEEDS && s >= SIGMA_RANGE.0 && s <= SIGMA_RANGE.1;
        sigma_detail.push(format!("n={n}: {s:.3}"));
        points.push((*n as f64, mean(mpb.iter().copied()).unwrap_or(f64::NAN)));
    }
    let slope = log_log_slope(&points).unwrap_or(f64::NAN);

    let mut exact = true;
    let mut counts = Vec::new();
    for n in SCALING_NS {
        let mut s = RunSpec::basic(n, 1, 77);
        s.workload = Workload::SingleShot { count: 1 };
        let t = simnet::run(&s).expect("valid scenario");
        let c: u32 = t.steps().flat_map(|x| x.sent.iter()).filter(|(k, _)| k.is_vcbc()).map(|(_, c)| c).sum();
        exact &= c == 3 * n as u32 && t.outcome.quiescent;
        counts.push(format!("{n}:{c}"));
    }
    let sigma = Outcome {
        pass: sigma_pass,
        detail: format!("sigma_mean over {SIGMA_SEEDS} seeds, {}; band {:?}", sigma_detail.join(", "), SIGMA_RANGE),
    };
    let scaling = Outcome {
        pass: exact && slope >= SLOPE_RANGE.0 && slope <= SLOPE_RANGE.1,
        detail: format!(
            "slope {slope:.3} in {:?} over messages/replica/batch {}; broadcast messages per instance {}",
            SLOPE_RANGE,
            points.iter().map(|(n, y)| format!("{n}:{y:.1}")).collect::<Vec<_>>().join(" "),
            counts.join(" ")
        ),
    };
    (sigma, scaling)
}

/// Criterion 5.
fn adversarial() -> Outcome {
    let specs: Vec<RunSpec> = (0..SIGMA_SEEDS)
        .map(|seed| {
            let mut s = RunSpec::basic(4, 1, 500 + seed);
            s.policy = Policy::AdversarialVcbcDelay { target_fraction: 0.25 };
            s.workload = Workload::FullLoad { outstanding: 1, batches: 6 };
            s
        })
        .collect();
    let attacked: Vec<ReplicaId> = specs[0].policy.attacked(4);
    let results = harness::run_many_summarized(&specs, |r| {
        let sigmas: Vec<f64> = r
            .metrics
            .sigma_per_slot
            .iter()
            .filter(|s| attacked.contains(&ReplicaId(s.queue)))
            .map(|s| s.sigma as f64)
            .collect();
        (sigmas, r.report.ok(), r.trace.outcome.quiescent)
    });
    let mut all = Vec::new();
    let mut safe = true;
    let mut live = true;
    for r in results {
        let (s, ok, q) = r.expect("valid scenario");
        all.extend(s);
        safe &= ok;
        live &= q;
    }
    let s = mean(all.iter().copied()).unwrap_or(0.0);
    Outcome {
        pass: s > ADVERSARIAL_SIGMA_MIN && safe && live,
        detail: format!(
            "attacked-queue sigma_mean {s:.3} over {} slots (> {ADVERSARIAL_SIGMA_MIN}); safe {safe}; all delivered {live}",
            all.len()
        ),
    }
}

/// Criterion 6.
fn aba() -> Outcome {
    let mut unanimous_ok = 0;
    let mut unanimous_total = 0;
    for (n, f) in [(4, 1), (7, 2)] {
        for seed in 0..ABA_SEEDS / 2 {
            for b in [false, true] {
                let t = aba_trial(f, &vec![b; n], seed, 10_000_000);
                unanimous_total += 1;
                if t.decisions.iter().all(|d| d.map(|d| d.value) == Some(b)) {
                    unanimous_ok += 1;
                }
            }
        }
    }
    let mut internal = Vec::new();
    let mut agree = true;
    for (n, f) in [(4, 1), (7, 2)] {
        for seed in 0..ABA_SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut props: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            props[0] = true;
            props[1] = false;
            let t = aba_trial(f, &props, 10_000 + seed, 10_000_000);
            let first = t.decisions[0].map(|d| d.value);
            agree &= first.is_some() && t.decisions.iter().all(|d| d.map(|d| d.value) == first);
            internal.extend(t.decisions.iter().flatten().map(|d| d.internal_round + 1));
        }
    }
    let max = internal.iter().copied().max().unwrap_or(u32::MAX);
    let avg = mean(internal.iter().map(|&x| x as f64)).unwrap_or(f64::NAN);
    let coins = coin_values(4, 1, COINS, 2024);
    let coin_mean = coins.iter().filter(|&&b| b).count() as f64 / coins.len() as f64;
    Outcome {
        pass: unanimous_ok == unanimous_total
            && agree
            && max <= ABA_MAX_INTERNAL
            && avg <= ABA_MEAN_INTERNAL
            && coin_mean >= COIN_RANGE.0
            && coin_mean <= COIN_RANGE.1,
        detail: format!(
            "unanimous {unanimous_ok}/{unanimous_total}; mixed: agreement {agree}, max {max} internal rounds, mean {avg:.2}; \
             coin mean {coin_mean:.4} over {COINS}"
        ),
    }
}

/// Criterion 7.
fn replay() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let mut paths: Vec<_> = std::fs::read_dir(&dir)
        .map(|d| d.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.extension().is_some_and(|x| x == "trace")).collect())
        .unwrap_or_default();
    paths.sort();
    let mut mismatches = Vec::new();
    for p in &paths {
        let ok = Trace::load(p).ok().is_some_and(|t| {
            simnet::run(&t.manifest).is_ok_and(|again| again.digest == t.digest && again.to_bytes() == t.to_bytes())
        });
        if !ok {
            mismatches.push(p.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    Outcome {
        pass: !paths.is_empty() && mismatches.is_empty(),
        detail: format!("{} shipped traces, {} mismatched {:?}", paths.len(), mismatches.len(), mismatches),
    }
}

/// Plain slot map with a linear head scan.
#[derive(Default)]
struct ModelQueue {
    slots: BTreeMap<u64, Option<u8>>,
}

impl ModelQueue {
    fn head(&self) -> u64 {
        let mut h = 0;
        while let Some(None) = self.slots.get(&h) {
            h += 1;
        }
        h
    }
}

/// Criterion 8.
fn pqueue() -> Outcome {
    let payloads: Vec<Batch> = (0..32u8).map(|v| Batch::new(vec![ClientMessage::new(vec![v])]).unwrap()).collect();
    let mut failures = 0;
    for case in 0..PQUEUE_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let mut q = PriorityQueue::new(ReplicaId(0));
        let mut model = ModelQueue::default();
        let mut ok = true;
        for _ in 0..PQUEUE_OPS {
            let v = rng.gen_range(0..32u8);
            if rng.gen_bool(0.6) {
                let s = rng.gen_range(0..64u64);
                q.enqueue(s, payloads[v as usize].clone());
                model.slots.entry(s).or_insert(Some(v));
            } else {
                q.dequeue(&payloads[v as usize]);
                model.slots.values_mut().filter(|x| **x == Some(v)).for_each(|x| *x = None);
            }
            ok &= q.head() == model.head();
            for s in 0..66 {
                ok &= match (model.slots.get(&s), q.slot(s)) {
                    (None, SlotState::Empty) | (Some(None), SlotState::Used) => true,
                    (Some(Some(v)), SlotState::Filled(b)) => b == payloads[*v as usize],
                    _ => false,
                };
            }
            if !ok {
                break;
            }
        }
        failures += usize::from(!ok);
    }
    Outcome {
        pass: failures == 0,
        detail: format!("{PQUEUE_CASES} sequences of {PQUEUE_OPS} operations, {failures} diverged"),
    }
}

/// Criterion 9.
fn goodput() -> Outcome {
    let base: Vec<RunSpec> = (0..GOODPUT_SEEDS).map(|seed| full_load(4, 900 + seed)).collect();
    let faulty: Vec<RunSpec> = base
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.faults = Faults::last(4, 1, Behavior::InvalidProposer);
            s
        })
        .collect();
    let summarize = |specs: &[RunSpec]| {
        let rows = harness::run_many_summarized(specs, |r| (r.metrics.goodput, r.metrics.throughput, r.report.ok()));
        let rows: Vec<_> = rows.into_iter().map(|r| r.expect("valid scenario")).collect();
        (
            mean(rows.iter().map(|r| r.0)).unwrap_or(0.0),
            mean(rows.iter().map(|r| r.1)).unwrap_or(0.0),
            rows.iter().all(|r| r.2),
        )
    };
    let (g0, t0, ok0) = summarize(&base);
    let (g1, t1, ok1) = summarize(&faulty);
    let drift = (t1 - t0).abs() / t0;
    Outcome {
        pass: g1 < g0 && drift <= THROUGHPUT_TOLERANCE && ok0 && ok1,
        detail: format!(
            "goodput {g0:.3} -> {g1:.3} valid tx/kstep; throughput {t0:.3} -> {t1:.3} batches/kstep ({:.1}% change, limit {:.0}%)",
            drift * 100.0,
            THROUGHPUT_TOLERANCE * 100.0
        ),
    }
}

fn main() -> ExitCode {
    let (safety, liveness) = safety_and_liveness();
    let (sigma, scaling) = sigma_and_scaling();
    let results = [
        (1, "safety property suite", safety),
        (2, "liveness at quiescence", liveness),
        (3, "sigma under fair scheduling", sigma),
        (4, "message complexity scaling", scaling),
        (5, "adversarial sigma inflation", adversarial()),
        (6, "binary agreement behavior", aba()),
        (7, "deterministic replay", replay()),
        (8, "priority queue model equivalence", pqueue()),
        (9, "goodput accounting under invalid proposals", goodput()),
    ];
    let mut all = true;
    for (n, name, o) in &results {
        report(*n, name, o);
        all &= o.pass;
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
