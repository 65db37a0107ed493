//! Everything that determines a simulation run. A [`RunSpec`] is also the
//! manifest stored at the head of every trace, so a trace can be replayed from
//! its own header.

use std::fmt;
use std::str::FromStr;

use abcast_core::types::{Config, ConfigError, ReplicaId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// Uniformly random choice among pending messages.
    FairRandom,
    /// Random link, oldest message on that link first.
    FifoPerLink,
    /// Random delivery, except VCBC final messages from the attacked origins,
    /// which are withheld from `n - f` other replicas until those replicas
    /// have finished an agreement round on the origin's queue.
    AdversarialVcbcDelay { target_fraction: f64 },
}

impl Policy {
    pub fn name(&self) -> String {
        match self {
            Policy::FairRandom => "fair".into(),
            Policy::FifoPerLink => "fifo".into(),
            Policy::AdversarialVcbcDelay { target_fraction } => format!("adversarial:{target_fraction}"),
        }
    }

    /// Origins whose final messages the adversarial policy withholds.
    pub fn attacked(&self, n: usize) -> Vec<ReplicaId> {
        match self {
            Policy::AdversarialVcbcDelay { target_fraction } => {
                let k = ((target_fraction * n as f64).round() as usize).clamp(1, n);
                (0..k as u32).map(ReplicaId).collect()
            }
            _ => Vec::new(),
        }
    }
}

impl FromStr for Policy {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (head, arg) = s.split_once(':').map_or((s, None), |(h, a)| (h, Some(a)));
        match (head, arg) {
            ("fair", None) => Ok(Policy::FairRandom),
            ("fifo", None) => Ok(Policy::FifoPerLink),
            ("adversarial", a) => {
                let target_fraction = match a {
                    Some(a) => a.parse().map_err(|_| ScenarioError::Parse(format!("bad fraction in {s:?}")))?,
                    None => 0.25,
                };
                if !(0.0..=1.0).contains(&target_fraction) {
                    return Err(ScenarioError::Parse(format!("fraction out of range in {s:?}")));
                }
                Ok(Policy::AdversarialVcbcDelay { target_fraction })
            }
            _ => Err(ScenarioError::Parse(format!("unknown policy {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Runs correctly, then ignores every event from a seeded step on.
    Crash,
    /// Ignores every event from the start.
    Silent,
    /// Runs the protocol but proposes only invalid transactions.
    InvalidProposer,
    /// Sends a different batch to half of the replicas in each of its
    /// broadcasts.
    Equivocator,
    /// Mutates its outbound messages.
    Fuzzer,
}

impl Behavior {
    pub const ALL: [Behavior; 5] =
        [Behavior::Crash, Behavior::Silent, Behavior::InvalidProposer, Behavior::Equivocator, Behavior::Fuzzer];

    pub fn name(self) -> &'static str {
        match self {
            Behavior::Crash => "crash",
            Behavior::Silent => "silent",
            Behavior::InvalidProposer => "invalid",
            Behavior::Equivocator => "equivocator",
            Behavior::Fuzzer => "fuzzer",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Faults {
    pub faulty: Vec<u32>,
    pub behavior: Option<Behavior>,
}

impl Faults {
    pub fn none() -> Self {
        Faults::default()
    }

    /// The last `count` replicas, all with `behavior`.
    pub fn last(n: usize, count: usize, behavior: Behavior) -> Self {
        Faults { faulty: (n.saturating_sub(count)..n).map(|i| i as u32).collect(), behavior: Some(behavior) }
    }

    pub fn behavior_of(&self, id: ReplicaId) -> Option<Behavior> {
        self.faulty.contains(&id.0).then_some(self.behavior).flatten()
    }

    pub fn is_correct(&self, id: ReplicaId) -> bool {
        self.behavior_of(id).is_none()
    }

    pub fn name(&self) -> String {
        match self.behavior {
            None => "none".into(),
            Some(b) => format!("{}@{}", b.name(), self.faulty.iter().map(u32::to_string).collect::<Vec<_>>().join(",")),
        }
    }

    /// Parses `none`, `KIND`, `KIND:COUNT` (the last COUNT replicas) or
    /// `KIND@I,J` (explicit replicas). A bare kind means `f` replicas.
    pub fn parse(s: &str, n: usize, f: usize) -> Result<Self, ScenarioError> {
        if s == "none" {
            return Ok(Faults::none());
        }
        let behavior_of = |k: &str| {
            Behavior::ALL
                .into_iter()
                .find(|b| b.name() == k || (k == "invalid-proposer" && *b == Behavior::InvalidProposer))
                .ok_or_else(|| ScenarioError::Parse(format!("unknown fault kind {k:?}")))
        };
        if let Some((k, ids)) = s.split_once('@') {
            let faulty = ids
                .split(',')
                .map(|i| i.trim().parse::<u32>().map_err(|_| ScenarioError::Parse(format!("bad replica id in {s:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            return Ok(Faults { faulty, behavior: Some(behavior_of(k)?) });
        }
        let (k, count) = match s.split_once(':') {
            Some((k, c)) => (k, c.parse().map_err(|_| ScenarioError::Parse(format!("bad fault count in {s:?}")))?),
            None => (s, f),
        };
        Ok(Faults::last(n, count, behavior_of(k)?))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    /// `count` transactions spread round-robin over the replicas at the start.
    SingleShot { count: usize },
    /// One transaction every `every` steps, round-robin, `count` in total.
    FixedRate { every: u64, count: usize },
    /// Closed loop: every replica keeps `outstanding` of its own batches in
    /// flight and submits a fresh batch whenever one of its own is delivered,
    /// up to `batches` batches per replica.
    FullLoad { outstanding: usize, batches: usize },
}

impl Workload {
    pub fn name(&self) -> String {
        match self {
            Workload::SingleShot { count } => format!("single:{count}"),
            Workload::FixedRate { every, count } => format!("rate:{every}:{count}"),
            Workload::FullLoad { outstanding, batches } => format!("full:{outstanding}:{batches}"),
        }
    }
}

impl FromStr for Workload {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<u64, ScenarioError> {
            parts.get(i).and_then(|p| p.parse().ok()).ok_or_else(|| ScenarioError::Parse(format!("bad workload {s:?}")))
        };
        match parts[0] {
            "single" => Ok(Workload::SingleShot { count: num(1)? as usize }),
            "rate" => Ok(Workload::FixedRate { every: num(1)?.max(1), count: num(2)? as usize }),
            "full" => Ok(Workload::FullLoad { outstanding: num(1)?.max(1) as usize, batches: num(2)? as usize }),
            _ => Err(ScenarioError::Parse(format!("unknown workload {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stop {
    /// Run exactly this many steps.
    Steps { cap: u64 },
    /// Run until every transaction injected at a correct replica is delivered
    /// by every correct replica, or the cap is hit.
    Quiescence { cap: u64 },
}

impl Stop {
    pub fn cap(&self) -> u64 {
        match *self {
            Stop::Steps { cap } | Stop::Quiescence { cap } => cap,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Parse(String),
    #[error("{count} faulty replicas exceed f = {f}")]
    TooManyFaults { count: usize, f: usize },
    #[error("faulty replica {0} does not exist")]
    UnknownReplica(u32),
}

/// Default fairness bound: every message is delivered at most this many steps
/// after it was sent.
pub fn default_fairness_debt(n: usize) -> u64 {
    64 * (n * n) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub n: usize,
    pub f: usize,
    pub batch_size: usize,
    pub tx_size: usize,
    pub seed: u64,
    pub policy: Policy,
    pub faults: Faults,
    pub workload: Workload,
    pub stop: Stop,
    pub fairness_debt: u64,
}

impl RunSpec {
    /// A fault-free fair run on the reference configuration.
    pub fn basic(n: usize, batch_size: usize, seed: u64) -> Self {
        let f = (n - 1) / 3;
        RunSpec {
            n,
            f,
            batch_size,
            tx_size: abcast_core::types::DEFAULT_TX_SIZE,
            seed,
            policy: Policy::FairRandom,
            faults: Faults::none(),
            workload: Workload::FullLoad { outstanding: 1, batches: 4 },
            stop: Stop::Quiescence { cap: 2_000_000 },
            fairness_debt: default_fairness_debt(n),
        }
    }

    pub fn config(&self) -> Result<Config, ScenarioError> {
        Ok(Config::new(self.n, self.f, self.batch_size, self.tx_size)?)
    }

    pub fn validate(&self) -> Result<Config, ScenarioError> {
        let cfg = self.config()?;
        if self.faults.faulty.len() > self.f {
            return Err(ScenarioError::TooManyFaults { count: self.faults.faulty.len(), f: self.f });
        }
        if let Some(&bad) = self.faults.faulty.iter().find(|&&i| i as usize >= self.n) {
            return Err(ScenarioError::UnknownReplica(bad));
        }
        Ok(cfg)
    }

    pub fn correct(&self) -> Vec<ReplicaId> {
        (0..self.n as u32).map(ReplicaId).filter(|r| self.faults.is_correct(*r)).collect()
    }
}

impl fmt::Display for RunSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} f={} B={} policy={} faults={} workload={} seed={}",
            self.n,
            self.f,
            self.batch_size,
            self.policy.name(),
            self.faults.name(),
            self.workload.name(),
            self.seed
        )
    }
}
