//! Discrete-event execution of producers, controllers and the server.
//!
//! Controllers react to a server message as soon as it arrives and nothing
//! else touches their state in between, so their work for one phase is
//! computed as a batch (optionally in parallel) when the server sends, and
//! their replies are scheduled at the arrival time.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::report::{
    measure_bandwidth, FieldResult, PhaseTimings, PlanInfo, PlanOutcome, PlanStatus, SimReport, WindowCounters,
    WindowResult,
};
use super::transport::{LinkClass, Micros, Scheduler, SimTransport};
use super::{ProtocolChoice, Scenario, SimConfig, SimError};
use crate::encoding::{decode_released, encode, EncodingKind, EncodingSpec};
use crate::ids::{PartyId, StreamId, StreamSetId};
use crate::policy::{
    ControllerPolicy, OptionKind, PlannerConfig, Query, QueryPlanner, Scope, StreamAnnotation, StreamSchema,
    TransformationPlan, Verdict,
};
use crate::ring_crypto::{
    AddMode, BoundStreamKey, Key128, MasterSecret, Modulus, RingElement, StreamCipher, StreamCiphertext, Timestamp,
};
use crate::secure_agg::{
    add_correction, optimize_b, setup_pairwise, unmask_aggregate, DreamThreshold, IdentityRegistry, MaskedToken,
    MembershipDelta, OpCounters, PairwiseSecret, Party, PartyKeypair, Protocol, PRF_OUTPUT_BITS,
};
use crate::token::{
    multi_stream_partial, single_stream_token, wire, NoiseSpec, OutputLayout, Slot, TransformationToken,
};

pub(crate) const HEARTBEAT_REQUEST_LEN: usize = 8;
pub const HEARTBEAT_REPLY_LEN: usize = 8 + 32;
const PLAN_ID_LEN: usize = 32;

fn derive_rng(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// The option an owner picks for each attribute: the one the queries need
/// if the schema offers it, else public if offered, else private.
pub fn default_annotation(schema: &StreamSchema, queries: &[Query], stream: StreamId, owner: PartyId) -> StreamAnnotation {
    let selected = schema
        .attributes
        .iter()
        .map(|attr| {
            let wanted = queries
                .iter()
                .find(|q| q.select.iter().any(|s| s.attribute == attr.name))
                .map(|q| match (q.scope, &q.dp) {
                    (Scope::PerStream, _) => OptionKind::StreamAggregate,
                    (_, Some(_)) => OptionKind::DpAggregate,
                    _ => OptionKind::Aggregate,
                });
            let kind = [wanted, Some(OptionKind::Public)]
                .into_iter()
                .flatten()
                .find(|k| attr.option(*k).is_some())
                .unwrap_or(OptionKind::Private);
            (attr.name.clone(), kind)
        })
        .collect();
    StreamAnnotation {
        stream_id: stream,
        schema: schema.name.clone(),
        owner,
        selected,
        metadata: BTreeMap::new(),
    }
}

pub fn run_preset(scenario: &Scenario) -> Result<SimReport, SimError> {
    run_scenario(&scenario.config, &scenario.schema, &scenario.queries)
}

/// Plans the queries against generated annotations, runs every window and
/// returns the per-window results.
pub fn run_scenario(config: &SimConfig, schema: &StreamSchema, queries: &[Query]) -> Result<SimReport, SimError> {
    config.validate()?;
    schema.validate()?;
    let mut engine = Engine::new(config, schema, queries)?;
    engine.sched.schedule(0, Event::WindowStart(0));
    while let Some((now, event)) = engine.sched.pop() {
        engine.handle(now, event)?;
    }
    let windows: Vec<WindowResult> = std::mem::take(&mut engine.done).into_values().collect();
    debug_assert_eq!(windows.len() as u64, config.windows);
    Ok(SimReport {
        scenario: schema.name.clone(),
        config: config.clone(),
        plans: engine.plan_infos(),
        windows,
        links: engine
            .transport
            .stats()
            .iter()
            .map(|(k, v)| (k.name().to_string(), *v))
            .collect(),
        bandwidth: measure_bandwidth(config, schema),
    })
}

struct ProducerRt {
    key: BoundStreamKey,
    controller: usize,
}

struct ControllerRt {
    id: PartyId,
    masters: BTreeMap<usize, MasterSecret>,
    /// Secure-aggregation state per plan.
    parties: BTreeMap<usize, Party>,
    /// Nonces precomputed at heartbeat time, per plan.
    nonces: BTreeMap<usize, Vec<RingElement>>,
}

struct SecureRt {
    protocol: Protocol,
    b: Option<u32>,
}

struct PlanRt {
    plan: TransformationPlan,
    layout: OutputLayout,
    streams: Vec<usize>,
    controllers: Vec<usize>,
    secure: Option<SecureRt>,
    released: usize,
    /// Fixed-point scale of the noise on each output slot, for noised plans.
    noise_scales: Vec<Option<u64>>,
    /// Membership of the last window whose deltas every member applied.
    prev: BTreeSet<usize>,
}

enum Membership {
    Delta(MembershipDelta),
    Resync(Vec<PartyId>),
    Direct,
}

struct Directive {
    plan: usize,
    streams: Vec<usize>,
    membership: Membership,
    party_count: u64,
}

enum TokenMsg {
    Masked(MaskedToken),
    Direct(TransformationToken),
}

enum ToServer {
    Ciphertext {
        window: u64,
        producer: usize,
        ct: StreamCiphertext,
    },
    Heartbeat {
        window: u64,
        controller: usize,
    },
    Token {
        window: u64,
        plan: usize,
        controller: usize,
        msg: TokenMsg,
        /// Noise the controller added; only the shadow run reads it.
        noise: Vec<Option<RingElement>>,
    },
    Correction {
        window: u64,
        plan: usize,
        controller: usize,
        attempt: u32,
        values: Vec<RingElement>,
    },
}

/// Plan index, token and the noise added to it.
type TokenReply = (usize, TokenMsg, Vec<Option<RingElement>>);

enum Event {
    WindowStart(u64),
    HeartbeatRound(u64),
    HeartbeatDeadline(u64),
    TokenDeadline(u64, u32),
    Arrive(LinkClass, Box<ToServer>),
}

struct Received {
    msg: TokenMsg,
    noise: Vec<Option<RingElement>>,
    corrections: BTreeSet<u32>,
}

enum Pending {
    Waiting {
        members: BTreeSet<usize>,
        streams: BTreeMap<usize, Vec<usize>>,
        attempt: u32,
        received: BTreeMap<usize, Received>,
    },
    Done(PlanOutcome),
}

struct WindowState {
    start: Micros,
    end: Micros,
    cts: Vec<Vec<StreamCiphertext>>,
    plain: Vec<Option<Vec<RingElement>>>,
    aggregates: Vec<Option<StreamCiphertext>>,
    heartbeat_open: bool,
    alive: BTreeSet<usize>,
    pending: Vec<Pending>,
    planned: bool,
    /// Streams included in at least one successful output.
    included: BTreeSet<usize>,
    counters: WindowCounters,
    timings: PhaseTimings,
}

struct ProducerOutput {
    events: Vec<(Micros, StreamCiphertext)>,
    plain: Option<Vec<RingElement>>,
    t_encode: f64,
    t_encrypt: f64,
    t_plain: f64,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    schema: &'a StreamSchema,
    m: Modulus,
    cipher: StreamCipher,
    specs: Vec<EncodingSpec>,
    producers: Vec<ProducerRt>,
    controllers: Vec<ControllerRt>,
    plans: Vec<PlanRt>,
    plan_controllers: BTreeSet<usize>,
    sched: Scheduler<Event>,
    transport: SimTransport,
    windows: BTreeMap<u64, WindowState>,
    done: BTreeMap<u64, WindowResult>,
}

fn choose_protocol(cfg: &SimConfig, n: usize) -> SecureRt {
    let opt = optimize_b(n as u64, cfg.alpha, cfg.delta, PRF_OUTPUT_BITS).ok();
    match (cfg.protocol, opt) {
        (ProtocolChoice::Clique, _) => SecureRt {
            protocol: Protocol::Clique,
            b: None,
        },
        (ProtocolChoice::Dream, Some(o)) => SecureRt {
            protocol: Protocol::Dream {
                threshold: DreamThreshold::pow2(o.b),
            },
            b: Some(o.b),
        },
        (ProtocolChoice::Dream, None) => SecureRt {
            protocol: Protocol::Dream {
                threshold: DreamThreshold::All,
            },
            b: None,
        },
        (ProtocolChoice::Zeph, Some(o)) => SecureRt {
            protocol: Protocol::Zeph { b: o.b },
            b: Some(o.b),
        },
        (ProtocolChoice::Zeph, None) => {
            log::warn!("no epoch parameter meets the failure bound for {n} controllers; using the clique graph");
            SecureRt {
                protocol: Protocol::Clique,
                b: None,
            }
        }
    }
}

fn plan_secret(base: &Key128, plan: &TransformationPlan) -> Key128 {
    let mut h = Sha256::new();
    h.update(b"plan-secret");
    h.update(base);
    h.update(plan.id.0);
    h.finalize()[..16].try_into().unwrap()
}

fn random_value<R: Rng>(spec: &EncodingSpec, rng: &mut R) -> f64 {
    match spec.kind {
        EncodingKind::Histogram { domain_min, bin_width, .. } => {
            let bin = rng.gen_range(0..spec.width());
            domain_min + (bin as f64 + 0.5) * bin_width
        }
        EncodingKind::OneHot { domain_min, domain_max } => rng.gen_range(domain_min..=domain_max) as f64,
        _ => rng.gen_range(0..200 * spec.scale) as f64 / spec.scale as f64,
    }
}

fn add_options(acc: &mut [Option<RingElement>], other: &[Option<RingElement>], m: Modulus) {
    for (a, b) in acc.iter_mut().zip(other) {
        if let (Some(a), Some(b)) = (a.as_mut(), b) {
            *a = m.add(*a, *b);
        }
    }
}

/// Zero in released slots, `None` in withheld ones.
fn zero_output(layout: &OutputLayout) -> Vec<Option<RingElement>> {
    layout
        .slots()
        .iter()
        .map(|s| (!matches!(s, Slot::Withheld(_))).then_some(RingElement::ZERO))
        .collect()
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Runs `f` for every controller with work, in controller order.
fn per_controller<W, T, F>(ctls: &mut [ControllerRt], work: &BTreeMap<usize, W>, parallel: bool, f: F) -> Vec<(usize, T)>
where
    W: Sync,
    T: Send,
    F: Fn(usize, &mut ControllerRt, &W) -> T + Sync,
{
    if parallel {
        ctls.par_iter_mut()
            .enumerate()
            .filter_map(|(i, c)| work.get(&i).map(|w| (i, f(i, c, w))))
            .collect()
    } else {
        ctls.iter_mut()
            .enumerate()
            .filter_map(|(i, c)| work.get(&i).map(|w| (i, f(i, c, w))))
            .collect()
    }
}

fn take_counters(c: &mut ControllerRt) -> OpCounters {
    let mut total = OpCounters::default();
    for p in c.parties.values_mut() {
        total += p.counters();
        p.reset_counters();
    }
    total
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig, schema: &'a StreamSchema, queries: &[Query]) -> Result<Self, SimError> {
        let m = Modulus::DEFAULT;
        let cipher = StreamCipher::new(m, cfg.prf);
        let n_ctl = cfg.controller_count();

        let keypairs: Vec<PartyKeypair> = (0..n_ctl)
            .map(|c| PartyKeypair::generate(cfg.key_agreement, &mut derive_rng(cfg.seed, "controller", c as u64, 0)))
            .collect();
        let mut registry = IdentityRegistry::new();
        for k in &keypairs {
            registry.register(k.public_key());
        }
        let mut controllers: Vec<ControllerRt> = keypairs
            .iter()
            .map(|k| ControllerRt {
                id: k.id(),
                masters: BTreeMap::new(),
                parties: BTreeMap::new(),
                nonces: BTreeMap::new(),
            })
            .collect();

        let mut producers = Vec::with_capacity(cfg.producers);
        let mut annotations = Vec::with_capacity(cfg.producers);
        let mut index_of = HashMap::new();
        for i in 0..cfg.producers {
            let stream = StreamId::new(format!("stream-{i:05}"));
            let master = MasterSecret::generate(&mut derive_rng(cfg.seed, "stream", i as u64, 0), stream.clone());
            let c = i % n_ctl;
            producers.push(ProducerRt {
                key: cipher.bind(&master),
                controller: c,
            });
            controllers[c].masters.insert(i, master);
            annotations.push(default_annotation(schema, queries, stream.clone(), controllers[c].id));
            index_of.insert(stream, i);
        }

        let pconfig = PlannerConfig {
            dp_delta: cfg.dp_delta,
            alpha: cfg.alpha,
            fault_tolerance: cfg.fault_tolerance,
            max_lifetime_ms: None,
        };
        let planner = QueryPlanner::new(pconfig.clone());
        let mut plans = Vec::new();
        for q in queries {
            plans.extend(planner.plan_query(q, schema, &annotations, 0)?);
        }

        let mut policies: Vec<ControllerPolicy> = controllers
            .iter()
            .map(|c| ControllerPolicy::new(c.id, pconfig.clone()))
            .collect();
        for (a, p) in annotations.iter().zip(&producers) {
            policies[p.controller].annotate(a.clone());
        }
        let by_id: HashMap<PartyId, usize> = controllers.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
        for plan in &plans {
            for owner in &plan.required_controllers {
                if let Verdict::Refuse(reason) = policies[by_id[owner]].accept(plan, schema, &registry) {
                    return Err(SimError::PlanRefused {
                        query: plan.query.clone(),
                        reason,
                    });
                }
            }
        }

        let mut rts = Vec::with_capacity(plans.len());
        for plan in plans {
            let layout = OutputLayout::from_directives(&plan.directives)?;
            let streams: Vec<usize> = plan.stream_ids().map(|s| index_of[s]).collect();
            let controllers_of: Vec<usize> = plan.required_controllers.iter().map(|id| by_id[id]).collect();
            let released = layout.slots().iter().filter(|s| !matches!(s, Slot::Withheld(_))).count();
            let mut noise_scales = vec![None; layout.output_width()];
            if plan.dp.is_some() {
                for f in &plan.outputs {
                    for (slot, scale) in noise_scales.iter_mut().enumerate().skip(f.slot_start).take(f.slot_len) {
                        if !matches!(layout.slots()[slot], Slot::Withheld(_)) {
                            *scale = Some(f.spec.scale);
                        }
                    }
                }
            }
            let secure = (controllers_of.len() > 1).then(|| choose_protocol(cfg, controllers_of.len()));
            rts.push(PlanRt {
                prev: controllers_of.iter().copied().collect(),
                plan,
                layout,
                streams,
                controllers: controllers_of,
                secure,
                released,
                noise_scales,
            });
        }

        // pairwise setup among controllers sharing a secure plan
        let secure_ctls: BTreeSet<usize> = rts
            .iter()
            .filter(|p| p.secure.is_some())
            .flat_map(|p| p.controllers.iter().copied())
            .collect();
        let secure_ids: Vec<PartyId> = secure_ctls.iter().map(|c| controllers[*c].id).collect();
        let setup = |c: &usize| -> Result<(usize, Vec<PairwiseSecret>), SimError> {
            Ok((*c, setup_pairwise(&keypairs[*c], &secure_ids, &registry)?))
        };
        let base: Vec<(usize, Vec<PairwiseSecret>)> = if cfg.parallel {
            secure_ctls.par_iter().map(setup).collect::<Result<_, _>>()?
        } else {
            secure_ctls.iter().map(setup).collect::<Result<_, _>>()?
        };
        let base: HashMap<usize, HashMap<PartyId, Key128>> = base
            .into_iter()
            .map(|(c, s)| (c, s.into_iter().map(|p| (p.peer, p.secret)).collect()))
            .collect();
        for (pi, rt) in rts.iter().enumerate() {
            if rt.secure.is_none() {
                continue;
            }
            for &c in &rt.controllers {
                let secrets: Vec<PairwiseSecret> = rt
                    .controllers
                    .iter()
                    .filter(|o| **o != c)
                    .map(|o| {
                        let peer = controllers[*o].id;
                        PairwiseSecret {
                            peer,
                            secret: plan_secret(&base[&c][&peer], &rt.plan),
                        }
                    })
                    .collect();
                let party = Party::new(controllers[c].id, &secrets, cfg.prf, m);
                controllers[c].parties.insert(pi, party);
            }
        }

        let plan_controllers = rts.iter().flat_map(|p| p.controllers.iter().copied()).collect();
        Ok(Engine {
            cfg,
            schema,
            m,
            cipher,
            specs: schema.attributes.iter().map(|a| a.encoding()).collect(),
            producers,
            controllers,
            plans: rts,
            plan_controllers,
            sched: Scheduler::default(),
            transport: SimTransport::new(cfg.transport.clone(), derive_rng(cfg.seed, "transport", 0, 0)),
            windows: BTreeMap::new(),
            done: BTreeMap::new(),
        })
    }

    fn plan_infos(&self) -> Vec<PlanInfo> {
        self.plans
            .iter()
            .map(|p| PlanInfo {
                query: p.plan.query.clone(),
                scope: p.plan.scope,
                population: p.plan.population(),
                controllers: p.controllers.len(),
                fault_tolerance: p.plan.fault_tolerance,
                protocol: p.secure.as_ref().map(|s| s.protocol.name().to_string()),
                epoch_bits: p.secure.as_ref().and_then(|s| s.b),
                released_slots: p.released,
                dp_sigma: p.plan.dp.as_ref().map(|d| d.sigma),
            })
            .collect()
    }

    fn handle(&mut self, now: Micros, event: Event) -> Result<(), SimError> {
        match event {
            Event::WindowStart(w) => self.window_start(now, w),
            Event::HeartbeatRound(w) => self.heartbeat_round(now, w),
            Event::HeartbeatDeadline(w) => self.heartbeat_deadline(now, w),
            Event::TokenDeadline(w, a) => self.token_deadline(now, w, a),
            Event::Arrive(class, msg) => {
                self.transport.delivered(class);
                self.arrive(*msg);
                Ok(())
            }
        }
    }

    fn produce(&self, i: usize, w: u64, start: Micros, end: Micros) -> Result<ProducerOutput, SimError> {
        let cfg = self.cfg;
        let mut rng = derive_rng(cfg.seed, "data", i as u64, w);
        let offline = cfg.producer_dropout > 0.0 && rng.gen_bool(cfg.producer_dropout);
        let mut out = ProducerOutput {
            events: Vec::new(),
            plain: None,
            t_encode: 0.0,
            t_encrypt: 0.0,
            t_plain: 0.0,
        };
        if offline {
            return Ok(out);
        }
        let window = end - start;
        let times: Vec<Micros> = match &cfg.values {
            Some(v) => (0..v.len() as u64).map(|k| start + (k + 1) * window / (v.len() as u64 + 1)).collect(),
            None => {
                let exp = Exp::new(cfg.event_rate_hz / 1e6).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
                let mut t = start;
                let mut times = Vec::new();
                loop {
                    t += (exp.sample(&mut rng).ceil() as u64).max(1);
                    if t >= end {
                        break times;
                    }
                    times.push(t);
                }
            }
        };
        let width = self.schema.event_width();
        let clock = Instant::now();
        let mut messages = Vec::with_capacity(times.len());
        for k in 0..times.len() {
            let mut msg = Vec::with_capacity(width);
            for spec in &self.specs {
                let v = match &cfg.values {
                    Some(v) => v[k],
                    None => random_value(spec, &mut rng),
                };
                msg.extend(encode(v, spec, self.m)?.elements);
            }
            messages.push(msg);
        }
        out.t_encode = elapsed(clock);

        let clock = Instant::now();
        let mut plain = vec![RingElement::ZERO; width];
        for msg in &messages {
            self.m.add_assign_vec(&mut plain, msg);
        }
        out.t_plain = elapsed(clock);
        out.plain = Some(plain);

        let clock = Instant::now();
        let key = &self.producers[i].key;
        let mut k_prev = key.derive(Timestamp(start), width);
        for (t, msg) in times.iter().zip(&messages) {
            let k_curr = key.derive(Timestamp(*t), width);
            out.events.push((*t, key.encrypt_with_keys(&k_prev, &k_curr, msg)?));
            k_prev = k_curr;
        }
        // neutral border event closes the window
        let k_end = key.derive(Timestamp(end), width);
        let zeros = vec![RingElement::ZERO; width];
        out.events.push((end, key.encrypt_with_keys(&k_prev, &k_end, &zeros)?));
        out.t_encrypt = elapsed(clock);
        Ok(out)
    }

    fn window_start(&mut self, now: Micros, w: u64) -> Result<(), SimError> {
        let (wl, grace) = (self.cfg.window_us(), self.cfg.grace_us());
        let (start, end) = (now, now + wl);
        if w + 1 < self.cfg.windows {
            self.sched.schedule(end, Event::WindowStart(w + 1));
        }
        self.sched.schedule(end + grace, Event::HeartbeatRound(w));

        let n = self.producers.len();
        let outputs: Vec<Result<ProducerOutput, SimError>> = if self.cfg.parallel {
            (0..n).into_par_iter().map(|i| self.produce(i, w, start, end)).collect()
        } else {
            (0..n).map(|i| self.produce(i, w, start, end)).collect()
        };
        let mut state = WindowState {
            start,
            end,
            cts: vec![Vec::new(); n],
            plain: vec![None; n],
            aggregates: vec![None; n],
            heartbeat_open: false,
            alive: BTreeSet::new(),
            pending: Vec::new(),
            planned: false,
            included: BTreeSet::new(),
            counters: WindowCounters::default(),
            timings: PhaseTimings::default(),
        };
        for (i, out) in outputs.into_iter().enumerate() {
            let out = out?;
            state.timings.encode += out.t_encode;
            state.timings.encrypt += out.t_encrypt;
            state.timings.plain += out.t_plain;
            state.plain[i] = out.plain;
            for (t, ct) in out.events {
                let bytes = ct.wire_len();
                state.counters.bytes_producer += bytes as u64;
                state.counters.messages += 1;
                let at = self
                    .transport
                    .send(LinkClass::ProducerToServer, t, bytes)
                    .expect("producer links are reliable");
                self.sched.schedule(
                    at,
                    Event::Arrive(
                        LinkClass::ProducerToServer,
                        Box::new(ToServer::Ciphertext {
                            window: w,
                            producer: i,
                            ct,
                        }),
                    ),
                );
            }
        }
        self.windows.insert(w, state);
        Ok(())
    }

    fn controller_dropped(&self, c: usize, w: u64) -> bool {
        self.cfg.dropout > 0.0 && derive_rng(self.cfg.seed, "dropout", c as u64, w).gen_bool(self.cfg.dropout)
    }

    fn send_to_controller(&mut self, w: u64, now: Micros, bytes: usize) -> Option<Micros> {
        let state = self.windows.get_mut(&w).expect("window state");
        state.counters.bytes_server += bytes as u64;
        state.counters.messages += 1;
        let at = self.transport.send(LinkClass::ServerToController, now, bytes);
        if at.is_some() {
            self.transport.delivered(LinkClass::ServerToController);
        }
        at
    }

    fn send_to_server(&mut self, w: u64, at: Micros, bytes: usize, msg: ToServer) {
        let state = self.windows.get_mut(&w).expect("window state");
        state.counters.bytes_controller += bytes as u64;
        state.counters.messages += 1;
        if let Some(arrival) = self.transport.send(LinkClass::ControllerToServer, at, bytes) {
            self.sched
                .schedule(arrival, Event::Arrive(LinkClass::ControllerToServer, Box::new(msg)));
        }
    }

    fn heartbeat_round(&mut self, now: Micros, w: u64) -> Result<(), SimError> {
        let clock = Instant::now();
        let state = self.windows.get_mut(&w).expect("window state");
        let (start, end) = (Timestamp(state.start), Timestamp(state.end));
        for (i, cts) in state.cts.iter_mut().enumerate() {
            cts.sort_by_key(|c| c.t_prev);
            let mut acc: Option<StreamCiphertext> = None;
            for ct in cts.drain(..) {
                acc = match acc {
                    None if ct.t_prev == start => Some(ct),
                    None => None,
                    Some(a) => self.cipher.add_ciphertexts(&a, &ct, AddMode::Chain).ok(),
                };
                if acc.is_none() {
                    break;
                }
            }
            // a stream without its border event counts as dropped
            state.aggregates[i] = acc.filter(|a| a.t_curr == end);
        }
        state.heartbeat_open = true;
        state.timings.unmask += elapsed(clock);

        let mut work = BTreeMap::new();
        for c in self.plan_controllers.clone() {
            if let Some(at) = self.send_to_controller(w, now, HEARTBEAT_REQUEST_LEN) {
                if !self.controller_dropped(c, w) {
                    work.insert(c, at);
                }
            }
        }
        let plans = &self.plans;
        let clock = Instant::now();
        let results = per_controller(&mut self.controllers, &work, self.cfg.parallel, |c, ctl, _| {
            let mut out = Ok(());
            for (pi, p) in plans.iter().enumerate() {
                let (Some(sec), Some(party)) = (&p.secure, ctl.parties.get_mut(&pi)) else {
                    continue;
                };
                if !p.prev.contains(&c) {
                    continue;
                }
                match party.nonce(&sec.protocol, w, p.released) {
                    Ok(n) => {
                        ctl.nonces.insert(pi, n);
                    }
                    Err(e) => out = Err(e),
                }
            }
            (out, take_counters(ctl))
        });
        self.add_token_time(w, elapsed(clock));
        for (c, (res, ops)) in results {
            res?;
            self.add_ops(w, ops);
            self.send_to_server(w, work[&c], HEARTBEAT_REPLY_LEN, ToServer::Heartbeat { window: w, controller: c });
        }
        self.sched
            .schedule(now + self.cfg.grace_us() / 2, Event::HeartbeatDeadline(w));
        Ok(())
    }

    fn add_ops(&mut self, w: u64, ops: OpCounters) {
        let s = self.windows.get_mut(&w).expect("window state");
        s.counters.prf_calls += ops.prf_calls;
        s.counters.additions += ops.additions;
    }

    fn add_token_time(&mut self, w: u64, t: f64) {
        self.windows.get_mut(&w).expect("window state").timings.token += t;
    }

    fn arrive(&mut self, msg: ToServer) {
        match msg {
            ToServer::Ciphertext { window, producer, ct } => {
                if let Some(s) = self.windows.get_mut(&window) {
                    if !s.heartbeat_open && !s.planned {
                        s.cts[producer].push(ct);
                    }
                }
            }
            ToServer::Heartbeat { window, controller } => {
                if let Some(s) = self.windows.get_mut(&window) {
                    if s.heartbeat_open {
                        s.alive.insert(controller);
                    }
                }
            }
            ToServer::Token {
                window,
                plan,
                controller,
                msg,
                noise,
            } => {
                let Some(s) = self.windows.get_mut(&window) else { return };
                if let Some(Pending::Waiting {
                    members,
                    attempt: 0,
                    received,
                    ..
                }) = s.pending.get_mut(plan)
                {
                    if members.contains(&controller) {
                        received.insert(
                            controller,
                            Received {
                                msg,
                                noise,
                                corrections: BTreeSet::new(),
                            },
                        );
                    }
                }
            }
            ToServer::Correction {
                window,
                plan,
                controller,
                attempt: a,
                values,
            } => {
                let m = self.m;
                let Some(s) = self.windows.get_mut(&window) else { return };
                if let Some(Pending::Waiting {
                    members,
                    attempt,
                    received,
                    ..
                }) = s.pending.get_mut(plan)
                {
                    if *attempt != a || !members.contains(&controller) {
                        return;
                    }
                    if let Some(r) = received.get_mut(&controller) {
                        if let TokenMsg::Masked(mt) = &mut r.msg {
                            if r.corrections.insert(a) {
                                add_correction(mt, &values, m);
                            }
                        }
                    }
                }
            }
        }
    }

    fn heartbeat_deadline(&mut self, now: Micros, w: u64) -> Result<(), SimError> {
        let state = self.windows.get_mut(&w).expect("window state");
        state.heartbeat_open = false;
        state.planned = true;
        let alive = state.alive.clone();
        let live: Vec<bool> = state.aggregates.iter().map(Option::is_some).collect();

        let mut pending = Vec::with_capacity(self.plans.len());
        let mut directives: Vec<(usize, usize, Directive, usize)> = Vec::new();
        for (pi, p) in self.plans.iter_mut().enumerate() {
            let mut streams: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &s in &p.streams {
                let c = self.producers[s].controller;
                if live[s] && alive.contains(&c) {
                    streams.entry(c).or_default().push(s);
                }
            }
            let included: usize = streams.values().map(Vec::len).sum();
            let dropped = p.streams.len() - included;
            if included == 0 {
                pending.push(Pending::Done(failed(pi, p, PlanStatus::NoMembers)));
                continue;
            }
            if dropped as u64 > p.plan.fault_tolerance {
                pending.push(Pending::Done(failed(
                    pi,
                    p,
                    PlanStatus::Quorum {
                        dropped,
                        tolerated: p.plan.fault_tolerance,
                    },
                )));
                continue;
            }
            let members: BTreeSet<usize> = streams.keys().copied().collect();
            let ids = |set: &mut dyn Iterator<Item = &usize>| -> BTreeSet<PartyId> {
                set.map(|c| self.controllers[*c].id).collect()
            };
            for (&c, s) in &streams {
                let list_len = 4 + s.iter().map(|i| 2 + format!("stream-{i:05}").len()).sum::<usize>();
                let (membership, size) = match &p.secure {
                    None => (Membership::Direct, PLAN_ID_LEN + list_len),
                    Some(_) if p.prev.contains(&c) => {
                        let delta = MembershipDelta {
                            round: w,
                            joined: ids(&mut members.difference(&p.prev)),
                            dropped: ids(&mut p.prev.difference(&members)),
                        };
                        let size = PLAN_ID_LEN + delta.wire_len() + list_len;
                        (Membership::Delta(delta), size)
                    }
                    Some(_) => {
                        let list: Vec<PartyId> = members.iter().map(|m| self.controllers[*m].id).collect();
                        let size = PLAN_ID_LEN + 4 + 32 * list.len() + list_len;
                        (Membership::Resync(list), size)
                    }
                };
                directives.push((
                    c,
                    pi,
                    Directive {
                        plan: pi,
                        streams: s.clone(),
                        membership,
                        party_count: members.len() as u64,
                    },
                    size,
                ));
            }
            pending.push(Pending::Waiting {
                members,
                streams,
                attempt: 0,
                received: BTreeMap::new(),
            });
        }
        let any_waiting = pending.iter().any(|p| matches!(p, Pending::Waiting { .. }));
        self.windows.get_mut(&w).expect("window state").pending = pending;

        let mut work: BTreeMap<usize, (Micros, Vec<Directive>)> = BTreeMap::new();
        for (c, _, d, size) in directives {
            if let Some(at) = self.send_to_controller(w, now, size) {
                work.entry(c).or_insert_with(|| (at, Vec::new())).1.push(d);
            }
        }
        let (start, end) = {
            let s = &self.windows[&w];
            (Timestamp(s.start), Timestamp(s.end))
        };
        let ctx = TokenContext {
            cfg: self.cfg,
            plans: &self.plans,
            cipher: &self.cipher,
            m: self.m,
            window: w,
            start,
            end,
        };
        let clock = Instant::now();
        let results = per_controller(&mut self.controllers, &work, self.cfg.parallel, |c, ctl, (_, ds)| {
            let out: Vec<Result<TokenReply, SimError>> =
                ds.iter().map(|d| ctx.token(c, ctl, d).map(|(m, n)| (d.plan, m, n))).collect();
            (out, take_counters(ctl))
        });
        self.add_token_time(w, elapsed(clock));
        for (c, (outs, ops)) in results {
            self.add_ops(w, ops);
            let at = work[&c].0;
            for r in outs {
                let (plan, msg, noise) = r?;
                let bytes = match &msg {
                    TokenMsg::Masked(mt) => mt.wire_len(),
                    TokenMsg::Direct(t) => PLAN_ID_LEN + wire::encoded_len(t),
                };
                self.send_to_server(
                    w,
                    at,
                    bytes,
                    ToServer::Token {
                        window: w,
                        plan,
                        controller: c,
                        msg,
                        noise,
                    },
                );
            }
        }
        if any_waiting {
            self.sched
                .schedule(now + self.cfg.grace_us() / 2, Event::TokenDeadline(w, 0));
        } else {
            self.try_complete(w);
        }
        Ok(())
    }

    fn token_deadline(&mut self, now: Micros, w: u64, a: u32) -> Result<(), SimError> {
        let next_deadline = now + self.cfg.grace_us() / 2;
        let limit = self.windows[&w].end + self.cfg.window_us() + self.cfg.grace_us();
        let mut retries: Vec<(usize, usize, MembershipDelta)> = Vec::new();
        let mut finalize = Vec::new();
        let n_plans = self.plans.len();
        for pi in 0..n_plans {
            let state = self.windows.get_mut(&w).expect("window state");
            let Pending::Waiting {
                members,
                streams,
                attempt,
                received,
            } = &mut state.pending[pi]
            else {
                continue;
            };
            if *attempt != a {
                continue;
            }
            let complete: BTreeSet<usize> = members
                .iter()
                .filter(|c| received.get(c).is_some_and(|r| (1..=a).all(|k| r.corrections.contains(&k))))
                .copied()
                .collect();
            let missing: BTreeSet<usize> = members.difference(&complete).copied().collect();
            if missing.is_empty() {
                finalize.push(pi);
                continue;
            }
            let p = &mut self.plans[pi];
            let can_retry = p.secure.is_some() && a < self.cfg.max_retries && next_deadline < limit;
            streams.retain(|c, _| complete.contains(c));
            let included: usize = streams.values().map(Vec::len).sum();
            let dropped = p.streams.len() - included;
            let status = if !can_retry {
                Some(PlanStatus::TokenTimeout { missing: missing.len() })
            } else if complete.is_empty() {
                Some(PlanStatus::NoMembers)
            } else if dropped as u64 > p.plan.fault_tolerance {
                Some(PlanStatus::Quorum {
                    dropped,
                    tolerated: p.plan.fault_tolerance,
                })
            } else {
                None
            };
            if let Some(status) = status {
                // members may hold diverging views now; resynchronize next window
                p.prev.clear();
                state.pending[pi] = Pending::Done(failed(pi, p, status));
                continue;
            }
            let dropped_ids: BTreeSet<PartyId> = missing.iter().map(|c| self.controllers[*c].id).collect();
            received.retain(|c, _| complete.contains(c));
            *members = complete.clone();
            *attempt = a + 1;
            for c in complete {
                retries.push((
                    c,
                    pi,
                    MembershipDelta {
                        round: w,
                        joined: BTreeSet::new(),
                        dropped: dropped_ids.clone(),
                    },
                ));
            }
        }
        for pi in finalize {
            self.finalize(w, pi)?;
        }

        if !retries.is_empty() {
            let mut work: BTreeMap<usize, (Micros, Vec<(usize, MembershipDelta)>)> = BTreeMap::new();
            for (c, pi, delta) in retries {
                let size = PLAN_ID_LEN + delta.wire_len();
                if let Some(at) = self.send_to_controller(w, now, size) {
                    work.entry(c).or_insert_with(|| (at, Vec::new())).1.push((pi, delta));
                }
            }
            let plans = &self.plans;
            let clock = Instant::now();
            let results = per_controller(&mut self.controllers, &work, self.cfg.parallel, |_, ctl, (_, ds)| {
                let out: Vec<Result<(usize, Vec<RingElement>), SimError>> = ds
                    .iter()
                    .map(|(pi, delta)| {
                        let p = &plans[*pi];
                        let sec = p.secure.as_ref().expect("retries only for secure plans");
                        let party = ctl.parties.get_mut(pi).expect("party state");
                        Ok((*pi, party.apply_delta(&sec.protocol, delta, p.released)?))
                    })
                    .collect();
                (out, take_counters(ctl))
            });
            self.add_token_time(w, elapsed(clock));
            for (c, (outs, ops)) in results {
                self.add_ops(w, ops);
                let at = work[&c].0;
                for r in outs {
                    let (plan, values) = r?;
                    let bytes = 8 + 32 + PLAN_ID_LEN + 8 * values.len();
                    self.send_to_server(
                        w,
                        at,
                        bytes,
                        ToServer::Correction {
                            window: w,
                            plan,
                            controller: c,
                            attempt: a + 1,
                            values,
                        },
                    );
                }
            }
            self.sched.schedule(next_deadline, Event::TokenDeadline(w, a + 1));
        }
        self.try_complete(w);
        Ok(())
    }

    fn finalize(&mut self, w: u64, pi: usize) -> Result<(), SimError> {
        let m = self.m;
        let state = self.windows.get_mut(&w).expect("window state");
        let Pending::Waiting {
            members,
            streams,
            attempt,
            received,
        } = std::mem::replace(&mut state.pending[pi], Pending::Done(failed(pi, &self.plans[pi], PlanStatus::NoMembers)))
        else {
            return Ok(());
        };
        let p = &mut self.plans[pi];
        let clock = Instant::now();
        let mut included: Vec<usize> = streams.values().flatten().copied().collect();
        included.sort_unstable();
        let set_id = StreamSetId::of(included.iter().map(|i| &p.plan.members[p.streams.binary_search(i).expect("plan stream")].stream));

        let mut agg: Option<StreamCiphertext> = None;
        for &i in &included {
            let ct = state.aggregates[i].as_ref().expect("live stream");
            let proj = p.layout.project_ciphertext(ct, m);
            agg = Some(match agg {
                None => proj,
                Some(a) => self.cipher.add_ciphertexts(&a, &proj, AddMode::CrossStream)?,
            });
        }
        let agg = agg.expect("at least one stream");
        let mut noise_total = zero_output(&p.layout);
        let mut masked = Vec::new();
        let mut direct = None;
        for (_, r) in received {
            add_options(&mut noise_total, &r.noise, m);
            match r.msg {
                TokenMsg::Masked(mt) => masked.push(mt),
                TokenMsg::Direct(t) => direct = Some(t),
            }
        }
        let token = match direct {
            Some(t) => t,
            None => unmask_aggregate(&masked, Some(set_id), m)?,
        };
        let values = self.cipher.apply_token(&agg, &set_id, &token)?;
        let mut fields = Vec::with_capacity(p.plan.outputs.len());
        for f in &p.plan.outputs {
            let slice = &values[f.slot_start..f.slot_start + f.slot_len];
            fields.push(FieldResult {
                attribute: f.attribute.clone(),
                function: f.function,
                stats: decode_released(slice, &f.spec, m)?,
            });
        }
        state.timings.unmask += elapsed(clock);

        let clock = Instant::now();
        let mut shadow = zero_output(&p.layout);
        for &i in &included {
            let plain = state.plain[i].as_ref().expect("live producer has plaintext");
            add_options(&mut shadow, &p.layout.project_plain(plain, m), m);
        }
        for (s, n) in shadow.iter_mut().zip(&noise_total) {
            if let (Some(s), Some(n)) = (s.as_mut(), n) {
                *s = m.add(*s, *n);
            }
        }
        state.timings.plain += elapsed(clock);

        if p.secure.is_some() {
            p.prev = members.clone();
        }
        state.included.extend(included.iter().copied());
        state.pending[pi] = Pending::Done(PlanOutcome {
            plan: pi,
            query: p.plan.query.clone(),
            status: PlanStatus::Success,
            streams: included.len(),
            controllers: members.len(),
            retries: attempt,
            fields,
            shadow_equal: shadow == values,
        });
        Ok(())
    }

    fn try_complete(&mut self, w: u64) {
        let Some(state) = self.windows.get(&w) else { return };
        if !state.planned || state.pending.iter().any(|p| matches!(p, Pending::Waiting { .. })) {
            return;
        }
        let state = self.windows.remove(&w).expect("window state");
        let outcomes = state
            .pending
            .into_iter()
            .map(|p| match p {
                Pending::Done(o) => o,
                Pending::Waiting { .. } => unreachable!("checked above"),
            })
            .collect();
        self.done.insert(
            w,
            WindowResult {
                window: w,
                outcomes,
                members: state.included.len(),
                counters: state.counters,
                timings: state.timings,
            },
        );
    }
}

fn failed(pi: usize, p: &PlanRt, status: PlanStatus) -> PlanOutcome {
    PlanOutcome {
        plan: pi,
        query: p.plan.query.clone(),
        status,
        streams: 0,
        controllers: 0,
        retries: 0,
        fields: Vec::new(),
        shadow_equal: false,
    }
}

/// Read-only inputs of a controller's token computation.
struct TokenContext<'e> {
    cfg: &'e SimConfig,
    plans: &'e [PlanRt],
    cipher: &'e StreamCipher,
    m: Modulus,
    window: u64,
    start: Timestamp,
    end: Timestamp,
}

impl TokenContext<'_> {
    fn token(
        &self,
        c: usize,
        ctl: &mut ControllerRt,
        d: &Directive,
    ) -> Result<(TokenMsg, Vec<Option<RingElement>>), SimError> {
        let p = &self.plans[d.plan];
        let m = self.m;
        let mut rng = derive_rng(self.cfg.seed, "token", c as u64, self.window * self.plans.len() as u64 + d.plan as u64);
        let mut tokens = Vec::with_capacity(d.streams.len());
        for s in &d.streams {
            let master = ctl.masters.get(s).ok_or(SimError::InvalidConfig(format!("stream {s} not held by controller {c}")))?;
            tokens.push(single_stream_token(self.cipher, master, (self.start, self.end), &p.plan.directives, &mut rng)?);
        }
        let mut partial = if tokens.len() == 1 {
            tokens.pop().unwrap()
        } else {
            multi_stream_partial(&tokens, m)?
        };

        let mut noise = vec![None; partial.elements.len()];
        if let Some(dp) = &p.plan.dp {
            for ((slot, scale), n) in partial.elements.iter_mut().zip(&p.noise_scales).zip(noise.iter_mut()) {
                if let (Some(v), Some(scale)) = (slot.as_mut(), scale) {
                    let spec = NoiseSpec::gaussian(dp.sigma, dp.honest_fraction, d.party_count, *scale);
                    let share = spec.sample(&mut rng, m)?;
                    *v = m.add(*v, share);
                    *n = Some(share);
                }
            }
            partial.noised = true;
        }

        let Some(sec) = &p.secure else {
            return Ok((TokenMsg::Direct(partial), noise));
        };
        let party = ctl.parties.get_mut(&d.plan).expect("party state");
        let (nonce, correction) = match &d.membership {
            Membership::Delta(delta) => {
                let nonce = match ctl.nonces.remove(&d.plan) {
                    Some(n) => n,
                    None => party.nonce(&sec.protocol, self.window, p.released)?,
                };
                let correction = party.apply_delta(&sec.protocol, delta, p.released)?;
                (nonce, correction)
            }
            Membership::Resync(list) => {
                ctl.nonces.remove(&d.plan);
                party.set_membership(list.iter().copied())?;
                (party.nonce(&sec.protocol, self.window, p.released)?, Vec::new())
            }
            Membership::Direct => unreachable!("secure plans carry membership"),
        };
        let epoch_id = match sec.protocol {
            Protocol::Zeph { b } => Party::epoch_of(b, self.window)?.0,
            _ => 0,
        };
        let mut masked = MaskedToken {
            round: self.window,
            epoch_id,
            party: ctl.id,
            token: partial,
        };
        add_correction(&mut masked, &nonce, m);
        add_correction(&mut masked, &correction, m);
        Ok((TokenMsg::Masked(masked), noise))
    }
}
