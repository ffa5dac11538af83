//! Cost measurement for one controller among `N` parties.
//!
//! Only the instrumented party computes; its peers exist as pairwise secrets.
//! Per-round dropout of peers is applied as membership deltas, so the
//! reported costs include the corrections.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{optimize_b, DreamThreshold, MembershipDelta, OpCounters, PairwiseSecret, Party, Protocol, SecAggError};
use super::PRF_OUTPUT_BITS;
use crate::ids::PartyId;
use crate::ring_crypto::{Modulus, PrfKind};

/// Which mask graph the controllers use for secure aggregation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolChoice {
    Clique,
    Dream,
    #[default]
    Zeph,
}

impl std::str::FromStr for ProtocolChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clique" => Ok(ProtocolChoice::Clique),
            "dream" => Ok(ProtocolChoice::Dream),
            "zeph" => Ok(ProtocolChoice::Zeph),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

impl std::fmt::Display for ProtocolChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProtocolChoice::Clique => "clique",
            ProtocolChoice::Dream => "dream",
            ProtocolChoice::Zeph => "zeph",
        })
    }
}

/// Concrete protocol for `parties` controllers. Dream selects edges with
/// the probability `2^-b` the optimizer picks for the epoch graph, so both
/// reach the same expected degree.
pub fn resolve_protocol(choice: ProtocolChoice, parties: u64, alpha: f64, delta: f64) -> Result<(Protocol, Option<u32>), SecAggError> {
    match choice {
        ProtocolChoice::Clique => Ok((Protocol::Clique, None)),
        ProtocolChoice::Dream => {
            let b = optimize_b(parties, alpha, delta, PRF_OUTPUT_BITS)?.b;
            Ok((
                Protocol::Dream {
                    threshold: DreamThreshold::pow2(b),
                },
                Some(b),
            ))
        }
        ProtocolChoice::Zeph => {
            let b = optimize_b(parties, alpha, delta, PRF_OUTPUT_BITS)?.b;
            Ok((Protocol::Zeph { b }, Some(b)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub parties: u64,
    pub rounds: u64,
    pub protocol: Protocol,
    /// Per-round probability that each peer is absent.
    pub dropout: f64,
    pub seed: u64,
    pub prf: PrfKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BenchRound {
    pub round: u64,
    /// Participants including the instrumented party.
    pub members: u64,
    pub prf_calls: u64,
    pub additions: u64,
}

impl BenchRound {
    pub const CSV_COLUMNS: [&'static str; 4] = ["round", "members", "prf_calls", "additions"];
}

fn peer_id(i: u64) -> PartyId {
    PartyId::from_public_key(&i.to_le_bytes())
}

/// Runs the instrumented party for `rounds` rounds at nonce width 1.
pub fn bench_party(cfg: &BenchConfig) -> Result<Vec<BenchRound>, SecAggError> {
    if cfg.parties < 2 {
        return Err(SecAggError::InvalidParameter("at least two parties are needed".into()));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(SecAggError::InvalidParameter(format!("dropout must be in [0, 1), got {}", cfg.dropout)));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let me = peer_id(0);
    let peers: Vec<PartyId> = (1..cfg.parties).map(peer_id).collect();
    let secrets: Vec<PairwiseSecret> = peers
        .iter()
        .map(|p| {
            let mut secret = [0u8; 16];
            rng.fill_bytes(&mut secret);
            PairwiseSecret { peer: *p, secret }
        })
        .collect();
    let mut party = Party::new(me, &secrets, cfg.prf, Modulus::DEFAULT);
    let mut absent = vec![false; peers.len()];
    let mut out = Vec::with_capacity(cfg.rounds as usize);
    for round in 0..cfg.rounds {
        party.nonce(&cfg.protocol, round, 1)?;
        if cfg.dropout > 0.0 {
            let mut delta = MembershipDelta::new(round);
            for (p, was_absent) in peers.iter().zip(absent.iter_mut()) {
                let now_absent = rng.gen_bool(cfg.dropout);
                match (*was_absent, now_absent) {
                    (false, true) => delta.dropped.insert(*p),
                    (true, false) => delta.joined.insert(*p),
                    _ => false,
                };
                *was_absent = now_absent;
            }
            if !delta.is_empty() {
                party.apply_delta(&cfg.protocol, &delta, 1)?;
            }
        }
        let OpCounters { prf_calls, additions } = party.counters();
        party.reset_counters();
        out.push(BenchRound {
            round,
            members: party.membership().len() as u64 + 1,
            prf_calls,
            additions,
        });
    }
    Ok(out)
}

/// Sum of the per-round counters.
pub fn bench_totals(rounds: &[BenchRound]) -> OpCounters {
    let mut total = OpCounters::default();
    for r in rounds {
        total += OpCounters {
            prf_calls: r.prf_calls,
            additions: r.additions,
        };
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(parties: u64, rounds: u64, protocol: Protocol) -> BenchConfig {
        BenchConfig {
            parties,
            rounds,
            protocol,
            dropout: 0.0,
            seed: 1,
            prf: PrfKind::Mix,
        }
    }

    #[test]
    fn clique_costs_one_prf_per_peer_per_round() {
        let rounds = bench_party(&cfg(50, 10, Protocol::Clique)).unwrap();
        assert!(rounds.iter().all(|r| r.prf_calls == 49 && r.additions == 49 && r.members == 50));
        assert_eq!(bench_totals(&rounds).prf_calls, 490);
    }

    #[test]
    fn zeph_setup_is_charged_to_the_first_round() {
        let rounds = bench_party(&cfg(101, 3, Protocol::Zeph { b: 1 })).unwrap();
        // setup plus active edges
        assert_eq!(rounds[0].prf_calls, 100 + rounds[0].additions);
        assert_eq!(rounds[1].prf_calls, rounds[1].additions);
    }

    #[test]
    fn dream_selects_then_masks() {
        let p = Protocol::Dream {
            threshold: DreamThreshold::pow2(2),
        };
        for r in bench_party(&cfg(41, 5, p)).unwrap() {
            assert_eq!(r.prf_calls, 40 + r.additions);
        }
    }

    #[test]
    fn dropout_shrinks_membership() {
        let c = BenchConfig {
            dropout: 0.2,
            ..cfg(200, 20, Protocol::Clique)
        };
        let rounds = bench_party(&c).unwrap();
        assert!(rounds.iter().all(|r| r.members < 200));
        assert_eq!(bench_party(&c).unwrap(), rounds);
    }

    #[test]
    fn resolves_each_choice() {
        assert_eq!(resolve_protocol(ProtocolChoice::Zeph, 10_000, 0.5, 1e-7).unwrap(), (Protocol::Zeph { b: 7 }, Some(7)));
        assert!(resolve_protocol(ProtocolChoice::Zeph, 2, 0.99, 1e-20).is_err());
        assert_eq!(resolve_protocol(ProtocolChoice::Clique, 2, 0.99, 1e-20).unwrap().0, Protocol::Clique);
        assert_eq!("dream".parse::<ProtocolChoice>().unwrap(), ProtocolChoice::Dream);
    }
}
