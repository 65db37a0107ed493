//! Experiment runner: runs scenarios, checks and measures them, and renders
//! the results as JSON documents and CSV rows.

use std::collections::VecDeque;

use abcast_core::aba::{AbaContext, AbaDecision, AbaInstance};
use abcast_core::event::Effects;
use abcast_core::message::{AbaMessage, Body, Target};
use abcast_core::tcrypto::{coin_bit, CoinName, KeySet};
use abcast_core::types::{Config, ReplicaId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::checker::{self, Report};
use crate::metrics::{self, Metrics};
use crate::scenario::{RunSpec, ScenarioError};
use crate::simnet;
use crate::trace::Trace;

#[derive(Clone, Debug)]
pub struct RunResult {
    pub spec: RunSpec,
    pub trace: Trace,
    pub report: Report,
    pub metrics: Metrics,
}

pub fn run_one(spec: &RunSpec) -> Result<RunResult, ScenarioError> {
    let trace = simnet::run(spec)?;
    let report = checker::check(&trace);
    let metrics = metrics::measure(&trace);
    Ok(RunResult { spec: spec.clone(), trace, report, metrics })
}

/// Runs every spec in parallel. Results come back in input order.
pub fn run_many(specs: &[RunSpec]) -> Vec<Result<RunResult, ScenarioError>> {
    specs.par_iter().map(run_one).collect()
}

/// Like [`run_many`] but keeps only a summary per run, so large sweeps do not
/// hold every trace in memory.
pub fn run_many_summarized<T: Send>(
    specs: &[RunSpec],
    summarize: impl Fn(RunResult) -> T + Sync + Send,
) -> Vec<Result<T, ScenarioError>> {
    specs.par_iter().map(|s| run_one(s).map(&summarize)).collect()
}

impl RunResult {
    pub fn to_json(&self) -> Value {
        json!({
            "manifest": self.spec,
            "digest": self.trace.digest.to_hex(),
            "quiescent": self.trace.outcome.quiescent,
            "check": {
                "ok": self.report.ok(),
                "violations": self.report.total,
                "findings": self.report.findings.iter()
                    .map(|f| json!({"property": f.property.name(), "detail": f.detail}))
                    .collect::<Vec<_>>(),
            },
            "metrics": self.metrics,
        })
    }
}

pub const CSV_HEADER: &str = "n,f,batch_size,tx_size,policy,faults,workload,seed,steps,quiescent,check_ok,violations,\
batches_delivered,txs_delivered,valid_txs_delivered,messages_per_batch,sigma_mean,latency_mean,goodput,throughput,\
aba_internal_mean,aba_internal_max,analytic_sigma_1,analytic_sigma_2,analytic_sigma_n";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

pub fn csv_row(r: &RunResult) -> String {
    let s = &r.spec;
    let m = &r.metrics;
    let analytic = |sigma: f64| opt(m.aba_messages_per_peer.map(|a| metrics::analytic_messages_per_batch(s.n, sigma, a)));
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.4},{:.4},{},{},{},{},{}",
        s.n,
        s.f,
        s.batch_size,
        s.tx_size,
        s.policy.name(),
        s.faults.name().replace(',', ";"),
        s.workload.name(),
        s.seed,
        m.steps,
        m.quiescent,
        r.report.ok(),
        r.report.total,
        m.batches_delivered,
        m.txs_delivered,
        m.valid_txs_delivered,
        opt(m.messages_per_batch),
        opt(m.sigma_mean),
        opt(m.latency_mean),
        m.goodput,
        m.throughput,
        opt(m.aba_internal_mean),
        m.aba_internal_max,
        analytic(1.0),
        analytic(2.0),
        analytic(s.n as f64),
    )
}

/// Outcome of one standalone binary agreement.
#[derive(Clone, Debug)]
pub struct AbaTrial {
    pub decisions: Vec<Option<AbaDecision>>,
    pub coins: Vec<bool>,
}

/// Runs a single binary agreement among `proposals.len()` replicas over a
/// uniformly random scheduler until every replica has decided and the
/// network is drained, or `cap` deliveries.
pub fn aba_trial(f: usize, proposals: &[bool], seed: u64, cap: usize) -> AbaTrial {
    let n = proposals.len();
    let cfg = Config::new(n, f, 1, 1).expect("valid agreement configuration");
    let keys = KeySet::for_config(&cfg, seed).expect("dealer accepts the configuration");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inst: Vec<AbaInstance> = (0..n).map(|_| AbaInstance::new(0)).collect();
    let mut pending: VecDeque<(ReplicaId, ReplicaId, AbaMessage)> = VecDeque::new();
    let enqueue = |pending: &mut VecDeque<_>, from: ReplicaId, fx: Effects| {
        for o in fx.outgoing {
            let Body::Aba { msg, .. } = o.body else { continue };
            match o.to {
                Target::All => (0..n as u32).for_each(|d| pending.push_back((from, ReplicaId(d), msg.clone()))),
                Target::Node(d) => pending.push_back((from, d, msg)),
            }
        }
    };
    let replica_keys: Vec<_> = cfg.replicas().map(|r| keys.replica(r).expect("dealt")).collect();
    let ctx = |i: usize| AbaContext {
        me: ReplicaId(i as u32),
        n,
        f,
        coin_key: &replica_keys[i].coin_key,
        coin_share: &replica_keys[i].coin_share,
    };
    for (i, &b) in proposals.iter().enumerate() {
        let mut fx = Effects::default();
        let _ = inst[i].propose(ctx(i), b, &mut fx);
        enqueue(&mut pending, ReplicaId(i as u32), fx);
    }
    for _ in 0..cap {
        if pending.is_empty() {
            break;
        }
        let k = rng.gen_range(0..pending.len());
        let (from, to, msg) = pending.swap_remove_back(k).expect("index in range");
        let mut fx = Effects::default();
        inst[to.index()].handle(ctx(to.index()), from, &msg, &mut fx);
        enqueue(&mut pending, to, fx);
    }
    let coins = inst.iter().max_by_key(|i| i.coins().len()).map(|i| i.coins().to_vec()).unwrap_or_default();
    AbaTrial { decisions: inst.iter().map(AbaInstance::decision).collect(), coins }
}

/// Common-coin values for `count` distinct coin names, each combined from the
/// first `f + 1` shares.
pub fn coin_values(n: usize, f: usize, count: u64, seed: u64) -> Vec<bool> {
    let cfg = Config::new(n, f, 1, 1).expect("valid configuration");
    let keys = KeySet::for_config(&cfg, seed).expect("dealer accepts the configuration");
    let t = keys.coin.public_key.threshold();
    (0..count)
        .map(|i| {
            let name = CoinName { aba_round: i, coin_round: (i % 7) as u32 }.to_bytes();
            let shares: Vec<_> = keys.coin.shares[..t].iter().map(|s| s.sign(&name)).collect();
            coin_bit(&keys.coin.public_key.combine(&name, &shares).expect("threshold shares"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_row_matches_header() {
        let r = run_one(&RunSpec::basic(4, 1, 0)).unwrap();
        assert_eq!(csv_row(&r).split(',').count(), CSV_HEADER.split(',').count());
        let doc = r.to_json();
        assert_eq!(doc["check"]["ok"], true);
        assert_eq!(doc["manifest"]["n"], 4);
    }

    #[test]
    fn unanimous_agreement() {
        for seed in 0..10 {
            for b in [false, true] {
                let t = aba_trial(1, &[b; 4], seed, 100_000);
                assert!(t.decisions.iter().all(|d| d.map(|d| d.value) == Some(b)));
            }
        }
    }

    #[test]
    fn mixed_agreement_decides_once() {
        for seed in 0..20 {
            let t = aba_trial(2, &[true, false, true, false, true, false, false], seed, 1_000_000);
            let first = t.decisions[0].unwrap().value;
            assert!(t.decisions.iter().all(|d| d.map(|d| d.value) == Some(first)));
        }
    }

    #[test]
    fn coins_are_deterministic_and_mixed() {
        let a = coin_values(4, 1, 200, 3);
        assert_eq!(a, coin_values(4, 1, 200, 3));
        assert!(a.iter().any(|&b| b) && a.iter().any(|&b| !b));
    }
}
