//! Randomized binary agreement: BVAL/AUX/CONF rounds with a threshold-signature
//! common coin, plus a FINISH exchange that lets an instance halt.
//!
//! Messages for internal rounds ahead of the local one are stored and acted on
//! when the round is entered. Past rounds still relay BVALs so slower
//! replicas can fill their `bin_values`; their AUX, CONF and coin traffic is
//! ignored.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::event::{Effects, ViolationKind};
use crate::message::{AbaMessage, BinSet, Body};
use crate::tcrypto::{coin_bit, CoinName, PublicKey, SecretKeyShare, SignatureShare};
use crate::types::ReplicaId;

/// How many internal rounds ahead of the local one are stored.
pub const INTERNAL_LOOKAHEAD: u32 = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AbaError {
    #[error("ABA({0}) already has a proposal")]
    AlreadyProposed(u64),
    #[error("ABA({0}) already decided")]
    AlreadyDecided(u64),
}

#[derive(Clone, Copy)]
pub struct AbaContext<'a> {
    pub me: ReplicaId,
    pub n: usize,
    pub f: usize,
    pub coin_key: &'a PublicKey,
    pub coin_share: &'a SecretKeyShare,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AbaDecision {
    pub value: bool,
    pub internal_round: u32,
}

#[derive(Clone, Debug, Default)]
struct RoundState {
    bval_from: [BTreeSet<ReplicaId>; 2],
    bval_sent: BinSet,
    bin_values: BinSet,
    aux_sent: bool,
    aux_from: BTreeMap<ReplicaId, bool>,
    conf_sent: bool,
    conf_from: BTreeMap<ReplicaId, BinSet>,
    coin_shares: BTreeMap<ReplicaId, SignatureShare>,
    /// Union of the qualifying CONF sets, fixed when the CONF quorum first holds.
    view: Option<BinSet>,
    coin: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct AbaInstance {
    round: u64,
    started: bool,
    internal: u32,
    estimate: bool,
    rounds: BTreeMap<u32, RoundState>,
    decision: Option<AbaDecision>,
    finish_from: BTreeMap<ReplicaId, bool>,
    finish_sent: bool,
    halted: bool,
    coins: Vec<bool>,
}

fn idx(b: bool) -> usize {
    b as usize
}

impl AbaInstance {
    pub fn new(round: u64) -> Self {
        AbaInstance {
            round,
            started: false,
            internal: 0,
            estimate: false,
            rounds: BTreeMap::new(),
            decision: None,
            finish_from: BTreeMap::new(),
            finish_sent: false,
            halted: false,
            coins: Vec::new(),
        }
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn decision(&self) -> Option<AbaDecision> {
        self.decision
    }

    pub fn is_started(&self) -> bool {
        self.started
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn internal_round(&self) -> u32 {
        self.internal
    }

    /// Coin values computed so far, by internal round.
    pub fn coins(&self) -> &[bool] {
        &self.coins
    }

    fn coin_name(&self, internal: u32) -> [u8; 13] {
        CoinName { aba_round: self.round, coin_round: internal }.to_bytes()
    }

    /// Inputs this replica's proposal. Returns the decision if it is reached
    /// during this call (possible when enough messages were already stored).
    pub fn propose(&mut self, ctx: AbaContext<'_>, value: bool, fx: &mut Effects) -> Result<Option<AbaDecision>, AbaError> {
        if self.started {
            return Err(AbaError::AlreadyProposed(self.round));
        }
        if self.decision.is_some() {
            return Err(AbaError::AlreadyDecided(self.round));
        }
        self.started = true;
        self.enter(0, value, fx);
        Ok(self.progress(ctx, fx))
    }

    fn enter(&mut self, internal: u32, estimate: bool, fx: &mut Effects) {
        self.internal = internal;
        self.estimate = estimate;
        let st = self.rounds.entry(internal).or_default();
        st.bval_sent.insert(estimate);
        fx.send_all(Body::Aba { round: self.round, msg: AbaMessage::Bval { internal, value: estimate } });
    }

    /// Handles one message from `from`. Returns the decision if this call
    /// produced it.
    pub fn handle(&mut self, ctx: AbaContext<'_>, from: ReplicaId, msg: &AbaMessage, fx: &mut Effects) -> Option<AbaDecision> {
        if self.halted {
            return None;
        }
        match msg {
            AbaMessage::Finish { value } => match self.finish_from.get(&from) {
                Some(v) if v != value => fx.violation(ViolationKind::ConflictingFinish),
                Some(_) => {}
                None => {
                    self.finish_from.insert(from, *value);
                }
            },
            AbaMessage::Bval { internal, value } => {
                if !self.admit(*internal, fx) {
                    return None;
                }
                self.rounds.entry(*internal).or_default().bval_from[idx(*value)].insert(from);
                if self.started && *internal < self.internal {
                    self.relay(ctx, *internal, fx);
                    return None;
                }
            }
            AbaMessage::Aux { internal, value } => {
                if !self.admit(*internal, fx) || (self.started && *internal < self.internal) {
                    return None;
                }
                let st = self.rounds.entry(*internal).or_default();
                match st.aux_from.get(&from) {
                    Some(v) if v != value => fx.violation(ViolationKind::ConflictingAux),
                    Some(_) => {}
                    None => {
                        st.aux_from.insert(from, *value);
                    }
                }
            }
            AbaMessage::Conf { internal, values } => {
                if values.is_empty() {
                    fx.violation(ViolationKind::EmptyConf);
                    return None;
                }
                if !self.admit(*internal, fx) || (self.started && *internal < self.internal) {
                    return None;
                }
                self.rounds.entry(*internal).or_default().conf_from.entry(from).or_insert(*values);
            }
            AbaMessage::CoinShare { internal, share } => {
                if !self.admit(*internal, fx) || (self.started && *internal < self.internal) {
                    return None;
                }
                let name = self.coin_name(*internal);
                let st = self.rounds.entry(*internal).or_default();
                if st.coin_shares.contains_key(&from) {
                    return None;
                }
                if share.signer != from || !ctx.coin_key.verify_share(from, &name, share) {
                    fx.violation(ViolationKind::InvalidCoinShare);
                    return None;
                }
                st.coin_shares.insert(from, share.clone());
            }
        }
        if self.started {
            self.progress(ctx, fx)
        } else {
            None
        }
    }

    fn admit(&self, internal: u32, fx: &mut Effects) -> bool {
        if internal > self.internal.saturating_add(INTERNAL_LOOKAHEAD) {
            fx.violation(ViolationKind::RoundOverflow);
            return false;
        }
        true
    }

    /// BVAL amplification: relay a bit once `f + 1` replicas vouch for it.
    fn relay(&mut self, ctx: AbaContext<'_>, internal: u32, fx: &mut Effects) {
        let round = self.round;
        let st = self.rounds.entry(internal).or_default();
        for b in [false, true] {
            if st.bval_from[idx(b)].len() > ctx.f && !st.bval_sent.contains(b) {
                st.bval_sent.insert(b);
                fx.send_all(Body::Aba { round, msg: AbaMessage::Bval { internal, value: b } });
            }
        }
    }

    fn progress(&mut self, ctx: AbaContext<'_>, fx: &mut Effects) -> Option<AbaDecision> {
        let before = self.decision;
        loop {
            if self.check_finish(ctx, fx) {
                break;
            }
            let k = self.internal;
            self.relay(ctx, k, fx);
            let round = self.round;
            let quorum = ctx.n - ctx.f;
            let st = self.rounds.get_mut(&k).expect("current round exists");
            for b in [false, true] {
                if st.bval_from[idx(b)].len() > 2 * ctx.f && !st.bin_values.contains(b) {
                    st.bin_values.insert(b);
                    if !st.aux_sent {
                        st.aux_sent = true;
                        fx.send_all(Body::Aba { round, msg: AbaMessage::Aux { internal: k, value: b } });
                    }
                }
            }
            if !st.conf_sent {
                let support = st.aux_from.values().filter(|b| st.bin_values.contains(**b)).count();
                if support >= quorum {
                    st.conf_sent = true;
                    fx.send_all(Body::Aba { round, msg: AbaMessage::Conf { internal: k, values: st.bin_values } });
                }
            }
            if st.conf_sent && st.view.is_none() {
                let qualifying: Vec<BinSet> =
                    st.conf_from.values().copied().filter(|s| s.is_subset(st.bin_values)).collect();
                if qualifying.len() >= quorum {
                    st.view = Some(qualifying.into_iter().fold(BinSet::EMPTY, BinSet::union));
                    let share = ctx.coin_share.sign(&CoinName { aba_round: round, coin_round: k }.to_bytes());
                    fx.send_all(Body::Aba { round, msg: AbaMessage::CoinShare { internal: k, share } });
                }
            }
            let Some(view) = st.view else { break };
            if st.coin.is_none() && st.coin_shares.len() >= ctx.coin_key.threshold() {
                let shares: Vec<SignatureShare> = st.coin_shares.values().cloned().collect();
                let name = CoinName { aba_round: round, coin_round: k }.to_bytes();
                let sig = ctx.coin_key.combine(&name, &shares).expect("verified coin shares");
                st.coin = Some(coin_bit(&sig));
            }
            let Some(coin) = st.coin else { break };
            self.coins.push(coin);
            let next = match view.definite() {
                Some(b) => {
                    if b == coin && self.decision.is_none() {
                        self.decide(b, k, fx);
                    }
                    b
                }
                None => coin,
            };
            self.enter(k + 1, next, fx);
        }
        match (before, self.decision) {
            (None, Some(d)) => Some(d),
            _ => None,
        }
    }

    fn decide(&mut self, value: bool, internal_round: u32, fx: &mut Effects) {
        self.decision = Some(AbaDecision { value, internal_round });
        if !self.finish_sent {
            self.finish_sent = true;
            fx.send_all(Body::Aba { round: self.round, msg: AbaMessage::Finish { value } });
        }
    }

    /// Returns true once the instance has halted.
    fn check_finish(&mut self, ctx: AbaContext<'_>, fx: &mut Effects) -> bool {
        for b in [false, true] {
            let count = self.finish_from.values().filter(|v| **v == b).count();
            if count > ctx.f && !self.finish_sent {
                self.finish_sent = true;
                fx.send_all(Body::Aba { round: self.round, msg: AbaMessage::Finish { value: b } });
            }
            if count > 2 * ctx.f {
                if self.decision.is_none() {
                    self.decide(b, self.internal, fx);
                }
                self.halted = true;
                self.rounds.clear();
                return true;
            }
        }
        false
    }
}
