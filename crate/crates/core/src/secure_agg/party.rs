//! One privacy controller's view of the masking protocol.
//!
//! The pairwise masks between `p` and `q` enter `p`'s nonce with a negative
//! sign if `p > q` and a positive sign otherwise, so every mask cancels in
//! the sum over all participants.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::keys::PairwiseSecret;
use super::{MembershipDelta, OpCounters, SecAggError};
use crate::ids::PartyId;
use crate::ring_crypto::{KeyedPrf, Modulus, PrfKind, RingElement};

pub const PRF_OUTPUT_BITS: u32 = 128;
/// Largest epoch id that fits the PRF input layout.
pub const MAX_EPOCH_ID: u64 = (1 << 48) - 1;
/// Each PRF block yields two 64-bit ring elements.
pub const MAX_NONCE_WIDTH: usize = 2 * 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
enum Domain {
    Clique = 1,
    DreamSelect = 2,
    DreamMask = 3,
    EpochSetup = 4,
    EpochMask = 5,
}

/// `tag (4 bits) | block (12 bits) | hi (48 bits) | lo (64 bits)`
fn prf_input(domain: Domain, block: usize, hi: u64, lo: u64) -> u128 {
    ((domain as u128) << 124) | ((block as u128 & 0xfff) << 112) | ((hi as u128 & MAX_EPOCH_ID as u128) << 64) | lo as u128
}

/// Edge-selection threshold for the Dream protocol: an edge is selected
/// when the selection PRF output is below `c`, i.e. with probability
/// `c / 2^128`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DreamThreshold {
    /// `c = 2^128`: every edge is selected.
    All,
    Below(u128),
}

impl DreamThreshold {
    pub fn from_probability(p: f64) -> Self {
        if p >= 1.0 {
            DreamThreshold::All
        } else if p <= 0.0 {
            DreamThreshold::Below(0)
        } else {
            DreamThreshold::Below((p * 2f64.powi(128)) as u128)
        }
    }

    /// Probability `2^-b`.
    pub fn pow2(b: u32) -> Self {
        if b == 0 {
            DreamThreshold::All
        } else {
            DreamThreshold::Below(1u128 << (128 - b.min(128)))
        }
    }

    fn selects(self, v: u128) -> bool {
        match self {
            DreamThreshold::All => true,
            DreamThreshold::Below(c) => v < c,
        }
    }
}

/// Number of rounds covered by one epoch: `floor(128 / b) * 2^b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochShape {
    pub b: u32,
}

impl EpochShape {
    pub fn new(b: u32) -> Result<Self, SecAggError> {
        if (1..=PRF_OUTPUT_BITS).contains(&b) {
            Ok(EpochShape { b })
        } else {
            Err(SecAggError::SegmentWidth(b))
        }
    }

    pub fn segments(self) -> u32 {
        PRF_OUTPUT_BITS / self.b
    }

    /// `W`, or `None` when it does not fit in `u128` (only `b = 128`).
    pub fn rounds(self) -> Option<u128> {
        1u128.checked_shl(self.b).map(|g| g * self.segments() as u128)
    }

    pub fn rounds_f64(self) -> f64 {
        self.segments() as f64 * 2f64.powi(self.b as i32)
    }

    fn contains(self, r: u128) -> bool {
        self.rounds().is_none_or(|w| r < w)
    }
}

/// Assignment of pairwise edges to the rounds of one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub epoch_id: u64,
    pub shape: EpochShape,
    /// Sparse: rounds without active edges are absent.
    pub round_edges: BTreeMap<u128, Vec<PartyId>>,
}

impl EpochPlan {
    pub fn b(&self) -> u32 {
        self.shape.b
    }

    pub fn active_peers(&self, r: u128) -> &[PartyId] {
        self.round_edges.get(&r).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Rounds in which the edge to `peer` is active.
    pub fn rounds_of(&self, peer: &PartyId) -> Vec<u128> {
        self.round_edges
            .iter()
            .filter(|(_, ps)| ps.contains(peer))
            .map(|(r, _)| *r)
            .collect()
    }
}

/// Which nonce construction a transformation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Protocol {
    /// Every pairwise mask in every round.
    Clique,
    /// Per-round random edge selection by threshold.
    Dream { threshold: DreamThreshold },
    /// One PRF evaluation per edge per epoch assigns edges to rounds.
    Zeph { b: u32 },
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Clique => "clique",
            Protocol::Dream { .. } => "dream",
            Protocol::Zeph { .. } => "zeph",
        }
    }
}

struct Peer {
    id: PartyId,
    prf: KeyedPrf,
    /// `true` if this party is larger than the peer and subtracts the mask.
    negate: bool,
}

/// A controller's protocol state: keyed pairwise PRFs, the agreed
/// membership, operation counters and the cached epoch plan.
pub struct Party {
    id: PartyId,
    modulus: Modulus,
    peers: Vec<Peer>,
    index: HashMap<PartyId, usize>,
    membership: BTreeSet<PartyId>,
    counters: OpCounters,
    last_delta_round: Option<u64>,
    last_nonce_round: Option<u64>,
    epoch_cache: Option<EpochPlan>,
}

impl std::fmt::Debug for Party {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Party")
            .field("id", &self.id)
            .field("peers", &self.peers.len())
            .field("members", &self.membership.len())
            .field("counters", &self.counters)
            .finish_non_exhaustive()
    }
}

impl Party {
    /// Builds the party from its pairwise secrets. All peers start as
    /// members.
    pub fn new(id: PartyId, secrets: &[PairwiseSecret], prf: PrfKind, modulus: Modulus) -> Self {
        let mut peers: Vec<Peer> = secrets
            .iter()
            .filter(|s| s.peer != id)
            .map(|s| Peer {
                id: s.peer,
                prf: prf.keyed(&s.secret),
                negate: id > s.peer,
            })
            .collect();
        peers.sort_by_key(|p| p.id);
        let index = peers.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
        let membership = peers.iter().map(|p| p.id).collect();
        Party {
            id,
            modulus,
            peers,
            index,
            membership,
            counters: OpCounters::default(),
            last_delta_round: None,
            last_nonce_round: None,
            epoch_cache: None,
        }
    }

    pub fn id(&self) -> PartyId {
        self.id
    }

    pub fn peer_count(&self) -> usize {
        self.peers.len()
    }

    /// Peers currently agreed to participate (excluding this party).
    pub fn membership(&self) -> &BTreeSet<PartyId> {
        &self.membership
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = OpCounters::default();
    }

    fn peer(&self, id: &PartyId) -> Result<&Peer, SecAggError> {
        self.index
            .get(id)
            .map(|i| &self.peers[*i])
            .ok_or(SecAggError::UnknownPeer(*id))
    }

    /// Adds (or with `subtract`, removes) the signed mask of one edge.
    fn accumulate(
        &mut self,
        acc: &mut [RingElement],
        peer_idx: usize,
        domain: Domain,
        hi: u64,
        lo: u64,
        subtract: bool,
    ) {
        let m = self.modulus;
        let peer = &self.peers[peer_idx];
        let negate = peer.negate ^ subtract;
        let blocks = acc.len().div_ceil(2);
        for blk in 0..blocks {
            let out = peer.prf.eval(prf_input(domain, blk, hi, lo));
            for (k, word) in [out as u64, (out >> 64) as u64].into_iter().enumerate() {
                let Some(slot) = acc.get_mut(2 * blk + k) else { break };
                let v = m.reduce(word);
                *slot = if negate { m.sub(*slot, v) } else { m.add(*slot, v) };
            }
        }
        self.counters.prf_calls += blocks as u64;
        self.counters.additions += acc.len() as u64;
    }

    fn check_width(width: usize) -> Result<(), SecAggError> {
        if width == 0 || width > MAX_NONCE_WIDTH {
            return Err(SecAggError::NonceWidth(width));
        }
        Ok(())
    }

    fn member_indices(&self) -> Vec<usize> {
        self.membership.iter().map(|id| self.index[id]).collect()
    }

    /// Mask over every member edge: `N - 1` PRF calls and additions per
    /// round for scalar nonces.
    pub fn nonce_clique(&mut self, round: u64, width: usize) -> Result<Vec<RingElement>, SecAggError> {
        Self::check_width(width)?;
        let mut acc = vec![RingElement(0); width];
        for i in self.member_indices() {
            self.accumulate(&mut acc, i, Domain::Clique, 0, round, false);
        }
        Ok(acc)
    }

    fn dream_selected(&mut self, peer_idx: usize, round: u64, threshold: DreamThreshold) -> bool {
        self.counters.prf_calls += 1;
        let v = self.peers[peer_idx].prf.eval(prf_input(Domain::DreamSelect, 0, 0, round));
        threshold.selects(v)
    }

    /// Selection pass over all member edges with one public value, then one
    /// mask evaluation per selected edge with a second public value.
    pub fn nonce_dream(
        &mut self,
        round: u64,
        threshold: DreamThreshold,
        width: usize,
    ) -> Result<Vec<RingElement>, SecAggError> {
        Self::check_width(width)?;
        let mut acc = vec![RingElement(0); width];
        let selected: Vec<usize> = self
            .member_indices()
            .into_iter()
            .filter(|i| self.dream_selected(*i, round, threshold))
            .collect();
        for i in selected {
            self.accumulate(&mut acc, i, Domain::DreamMask, 0, round, false);
        }
        Ok(acc)
    }

    /// One PRF evaluation per peer; segment `s` of the output, read as a
    /// `b`-bit number `g` from the least significant end, activates the edge
    /// in round `s * 2^b + g`.
    pub fn plan_epoch(&mut self, epoch_id: u64, b: u32) -> Result<EpochPlan, SecAggError> {
        let shape = EpochShape::new(b)?;
        if epoch_id > MAX_EPOCH_ID {
            return Err(SecAggError::EpochId(epoch_id));
        }
        let mask: u128 = if b == 128 { u128::MAX } else { (1u128 << b) - 1 };
        let mut round_edges: BTreeMap<u128, Vec<PartyId>> = BTreeMap::new();
        for peer in &self.peers {
            let out = peer.prf.eval(prf_input(Domain::EpochSetup, 0, epoch_id, 0));
            for s in 0..shape.segments() {
                let g = (out >> (s * b)) & mask;
                let r = if b == 128 { g } else { ((s as u128) << b) | g };
                round_edges.entry(r).or_default().push(peer.id);
            }
        }
        self.counters.prf_calls += self.peers.len() as u64;
        Ok(EpochPlan {
            epoch_id,
            shape,
            round_edges,
        })
    }

    /// Mask over the member edges the plan activates in round `r`.
    pub fn nonce_zeph(&mut self, plan: &EpochPlan, r: u64, width: usize) -> Result<Vec<RingElement>, SecAggError> {
        Self::check_width(width)?;
        if !plan.shape.contains(r as u128) {
            return Err(SecAggError::RoundOutOfEpoch {
                round: r,
                rounds: plan.shape.rounds().unwrap_or(u128::MAX),
            });
        }
        let mut acc = vec![RingElement(0); width];
        let active: Vec<usize> = plan
            .active_peers(r as u128)
            .iter()
            .filter(|p| self.membership.contains(p))
            .map(|p| self.index[p])
            .collect();
        if active.is_empty() {
            log::warn!(
                "party {:?}: no active edges in epoch {} round {r}; emitting zero nonce",
                self.id,
                plan.epoch_id
            );
        }
        for i in active {
            self.accumulate(&mut acc, i, Domain::EpochMask, plan.epoch_id, r, false);
        }
        Ok(acc)
    }

    fn ensure_epoch(&mut self, epoch_id: u64, b: u32) -> Result<(), SecAggError> {
        let fresh = self
            .epoch_cache
            .as_ref()
            .is_none_or(|p| p.epoch_id != epoch_id || p.b() != b);
        if fresh {
            self.epoch_cache = Some(self.plan_epoch(epoch_id, b)?);
        }
        Ok(())
    }

    /// Splits a global round into (epoch, round within epoch).
    pub fn epoch_of(b: u32, global_round: u64) -> Result<(u64, u64), SecAggError> {
        let w = EpochShape::new(b)?.rounds().unwrap_or(u128::MAX);
        let w = u64::try_from(w).unwrap_or(u64::MAX);
        Ok((global_round / w, global_round % w))
    }

    /// Nonce for a global round under `protocol`, planning epochs on demand.
    pub fn nonce(&mut self, protocol: &Protocol, global_round: u64, width: usize) -> Result<Vec<RingElement>, SecAggError> {
        self.last_nonce_round = Some(self.last_nonce_round.map_or(global_round, |r| r.max(global_round)));
        match *protocol {
            Protocol::Clique => self.nonce_clique(global_round, width),
            Protocol::Dream { threshold } => self.nonce_dream(global_round, threshold, width),
            Protocol::Zeph { b } => {
                let (epoch, r) = Self::epoch_of(b, global_round)?;
                self.ensure_epoch(epoch, b)?;
                let plan = self.epoch_cache.take().unwrap();
                let out = self.nonce_zeph(&plan, r, width);
                self.epoch_cache = Some(plan);
                out
            }
        }
    }

    fn edge_active(&mut self, protocol: &Protocol, global_round: u64, peer_idx: usize) -> Result<Option<(Domain, u64, u64)>, SecAggError> {
        Ok(match *protocol {
            Protocol::Clique => Some((Domain::Clique, 0, global_round)),
            Protocol::Dream { threshold } => self
                .dream_selected(peer_idx, global_round, threshold)
                .then_some((Domain::DreamMask, 0, global_round)),
            Protocol::Zeph { b } => {
                let (epoch, r) = Self::epoch_of(b, global_round)?;
                self.ensure_epoch(epoch, b)?;
                let plan = self.epoch_cache.as_ref().unwrap();
                let id = self.peers[peer_idx].id;
                plan.active_peers(r as u128)
                    .contains(&id)
                    .then_some((Domain::EpochMask, epoch, r))
            }
        })
    }

    /// Applies a membership delta for `delta.round` and returns the
    /// correction to add to a nonce computed under the previous membership.
    ///
    /// Dropped peers' active masks are removed and joined peers' active
    /// masks are added; cost is linear in `|joined| + |dropped|`. Rejoining
    /// peers reuse their existing pairwise secrets.
    pub fn apply_delta(
        &mut self,
        protocol: &Protocol,
        delta: &MembershipDelta,
        width: usize,
    ) -> Result<Vec<RingElement>, SecAggError> {
        Self::check_width(width)?;
        delta.validate()?;
        if let Some(last) = self.last_delta_round.max(self.last_nonce_round) {
            if delta.round < last {
                return Err(SecAggError::StaleDelta {
                    round: delta.round,
                    last,
                });
            }
        }
        let mut acc = vec![RingElement(0); width];
        let dropped: Vec<PartyId> = delta.dropped.iter().filter(|p| **p != self.id).copied().collect();
        let joined: Vec<PartyId> = delta.joined.iter().filter(|p| **p != self.id).copied().collect();
        for (ids, subtract) in [(dropped, true), (joined, false)] {
            for id in ids {
                let idx = self.index.get(&id).copied().ok_or(SecAggError::UnknownPeer(id))?;
                let was_member = self.membership.contains(&id);
                // only change what the previous nonce actually contained
                if subtract != was_member {
                    continue;
                }
                if let Some((domain, hi, lo)) = self.edge_active(protocol, delta.round, idx)? {
                    self.accumulate(&mut acc, idx, domain, hi, lo, subtract);
                }
                if subtract {
                    self.membership.remove(&id);
                } else {
                    self.membership.insert(id);
                }
            }
        }
        self.last_delta_round = Some(delta.round);
        Ok(acc)
    }

    /// Replaces the membership without computing a correction.
    pub fn set_membership<I: IntoIterator<Item = PartyId>>(&mut self, members: I) -> Result<(), SecAggError> {
        let mut set = BTreeSet::new();
        for id in members {
            if id == self.id {
                continue;
            }
            self.peer(&id)?;
            set.insert(id);
        }
        self.membership = set;
        Ok(())
    }
}
