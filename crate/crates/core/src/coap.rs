//! Confirmable CoAP exchanges: retransmission with exponential backoff,
//! duplicate suppression, and observe-mode notification streams.
//!
//! Endpoints are sans-IO state machines. Every call takes the current
//! simulation time and appends [`Action`]s for the caller to carry out:
//! transmissions to hand to the network, timers to arm on the simulation
//! clock, deliveries to pass upward, and exchange completions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::messages::{Code, CoapMessage, MessageKind, NodeId, Token};
use crate::time::{nanos, SimTime};

/// Largest retransmission count accepted; keeps `2^C` spans representable.
pub const MAX_RETRANSMIT_LIMIT: u32 = 20;

#[derive(Debug, Error, PartialEq)]
pub enum CoapError {
    #[error("ACK timeout must be positive")]
    ZeroTimeout,
    #[error("random factor must be a finite value >= 1, got {0}")]
    RandomFactor(f64),
    #[error("max retransmit {0} exceeds limit {MAX_RETRANSMIT_LIMIT}")]
    TooManyRetransmits(u32),
    #[error("only confirmable messages start an exchange, got {0:?}")]
    NotConfirmable(MessageKind),
}

/// Retransmission parameters: ACK timeout `T`, maximum retransmissions `C`
/// and random factor `F`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetransmitParams {
    pub ack_timeout: Duration,
    pub max_retransmit: u32,
    pub random_factor: f64,
}

impl RetransmitParams {
    pub fn new(ack_timeout: Duration, max_retransmit: u32, random_factor: f64) -> Result<Self, CoapError> {
        let p = RetransmitParams {
            ack_timeout,
            max_retransmit,
            random_factor,
        };
        p.validate()?;
        Ok(p)
    }

    /// T = 2 ms, C = 4, F = 1.5: tuned for a controlled industrial network.
    pub const fn controlled() -> Self {
        RetransmitParams {
            ack_timeout: Duration::from_millis(2),
            max_retransmit: 4,
            random_factor: 1.5,
        }
    }

    /// The RFC 7252 defaults (T = 2 s, C = 4, F = 1.5) used across the public
    /// internet.
    pub const fn internet() -> Self {
        RetransmitParams {
            ack_timeout: Duration::from_secs(2),
            max_retransmit: 4,
            random_factor: 1.5,
        }
    }

    pub fn validate(&self) -> Result<(), CoapError> {
        if self.ack_timeout.is_zero() {
            return Err(CoapError::ZeroTimeout);
        }
        if !self.random_factor.is_finite() || self.random_factor < 1.0 {
            return Err(CoapError::RandomFactor(self.random_factor));
        }
        if self.max_retransmit > MAX_RETRANSMIT_LIMIT {
            return Err(CoapError::TooManyRetransmits(self.max_retransmit));
        }
        Ok(())
    }

    fn max_initial_timeout_ns(&self) -> u64 {
        (nanos(self.ack_timeout) as f64 * self.random_factor).floor() as u64
    }
}

/// Worst-case time span of a confirmable exchange, `T * (2^C - 1) * F`,
/// rounded to the nanosecond.
pub fn expected_time_span(params: &RetransmitParams) -> Duration {
    let scaled = nanos(params.ack_timeout) as f64 * params.random_factor;
    let factor = ((1u64 << params.max_retransmit) - 1) as f64;
    Duration::from_nanos((scaled * factor).round() as u64)
}

/// Draws the initial timeout uniformly from `[T, F*T]`.
pub fn initial_timeout(params: &RetransmitParams, rng: &mut impl Rng) -> Duration {
    let lo = nanos(params.ack_timeout);
    let hi = params.max_initial_timeout_ns().max(lo);
    Duration::from_nanos(rng.gen_range(lo..=hi))
}

/// The `C` retransmission timeouts `[t0, 2 t0, ..., 2^(C-1) t0]`.
pub fn retransmit_schedule(params: &RetransmitParams, rng: &mut impl Rng) -> Vec<Duration> {
    let t0 = initial_timeout(params, rng);
    backoff(t0, params.max_retransmit)
}

fn backoff(t0: Duration, count: u32) -> Vec<Duration> {
    (0..count).map(|i| t0 * (1u32 << i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangeState {
    Waiting,
    Acked,
    TimedOut,
}

/// An outstanding (or finished) confirmable exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub request: CoapMessage,
    pub peer: NodeId,
    pub state: ExchangeState,
    pub transmissions_sent: u32,
    pub initial_timeout: Duration,
    pub started_at: SimTime,
    pub completed_at: Option<SimTime>,
    max_retransmit: u32,
}

impl Exchange {
    /// Wait after the `n`-th transmission (1-based) before acting again.
    fn wait_after(&self, n: u32) -> Duration {
        self.initial_timeout * (1u32 << (n - 1))
    }

    pub fn max_retransmit(&self) -> u32 {
        self.max_retransmit
    }
}

/// Identifies an armed retransmission timer. Stale timers (whose exchange
/// has resolved or moved on) are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimerToken {
    pub message_id: u16,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Transmit { to: NodeId, msg: CoapMessage },
    ArmTimer { at: SimTime, timer: TimerToken },
    Deliver { from: NodeId, msg: CoapMessage },
    /// Exchange reached `Acked` or `TimedOut`.
    Completed { exchange: Exchange, ack: Option<CoapMessage> },
    /// Peer answered with RST; the exchange is abandoned.
    Reset { exchange: Exchange },
}

/// Piggybacked response a responder attaches to the ACK of a fresh CON.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub code: Code,
    pub observe: Option<u32>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CoapCounters {
    pub exchanges: u64,
    pub transmissions: u64,
    pub retransmissions: u64,
    pub acked: u64,
    pub timeouts: u64,
    pub stray_acks: u64,
    pub duplicates: u64,
    pub rsts_sent: u64,
    pub resets_received: u64,
}

impl CoapCounters {
    pub fn merge(&mut self, o: &CoapCounters) {
        self.exchanges += o.exchanges;
        self.transmissions += o.transmissions;
        self.retransmissions += o.retransmissions;
        self.acked += o.acked;
        self.timeouts += o.timeouts;
        self.stray_acks += o.stray_acks;
        self.duplicates += o.duplicates;
        self.rsts_sent += o.rsts_sent;
        self.resets_received += o.resets_received;
    }
}

#[derive(Debug)]
struct DedupEntry {
    expires: SimTime,
    ack: CoapMessage,
}

/// One CoAP endpoint: client and server roles share the message-id space,
/// the pending exchange table and the duplicate cache.
#[derive(Debug)]
pub struct Endpoint {
    id: NodeId,
    params: RetransmitParams,
    dedup_window: Duration,
    rng: ChaCha8Rng,
    next_message_id: u16,
    next_token: u32,
    pending: BTreeMap<u16, Exchange>,
    dedup: HashMap<(NodeId, u16), DedupEntry>,
    prune_at: usize,
    known_tokens: HashSet<Token>,
    counters: CoapCounters,
}

impl Endpoint {
    pub fn new(id: NodeId, params: RetransmitParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let next_message_id = rng.gen();
        Endpoint {
            id,
            params,
            dedup_window: expected_time_span(&params),
            rng,
            next_message_id,
            next_token: 1,
            pending: BTreeMap::new(),
            dedup: HashMap::new(),
            prune_at: 1024,
            known_tokens: HashSet::new(),
            counters: CoapCounters::default(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn params(&self) -> &RetransmitParams {
        &self.params
    }

    pub fn counters(&self) -> &CoapCounters {
        &self.counters
    }

    pub fn pending(&self, message_id: u16) -> Option<&Exchange> {
        self.pending.get(&message_id)
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Fresh token, registered as one this endpoint expects responses and
    /// notifications on.
    pub fn new_token(&mut self) -> Token {
        let t = Token::from_u32(self.next_token);
        self.next_token = self.next_token.wrapping_add(1);
        self.known_tokens.insert(t);
        t
    }

    pub fn forget_token(&mut self, token: &Token) {
        self.known_tokens.remove(token);
    }

    fn allocate_message_id(&mut self) -> u16 {
        loop {
            let id = self.next_message_id;
            self.next_message_id = self.next_message_id.wrapping_add(1);
            if !self.pending.contains_key(&id) {
                return id;
            }
        }
    }

    /// Starts a confirmable exchange. The first transmission is emitted
    /// immediately; returns the assigned message id.
    pub fn send_confirmable(
        &mut self,
        now: SimTime,
        to: NodeId,
        mut msg: CoapMessage,
        out: &mut Vec<Action>,
    ) -> Result<u16, CoapError> {
        if msg.kind != MessageKind::Con {
            return Err(CoapError::NotConfirmable(msg.kind));
        }
        let mid = self.allocate_message_id();
        msg.message_id = mid;
        let t0 = initial_timeout(&self.params, &mut self.rng);
        let exchange = Exchange {
            request: msg.clone(),
            peer: to,
            state: ExchangeState::Waiting,
            transmissions_sent: 1,
            initial_timeout: t0,
            started_at: now,
            completed_at: None,
            max_retransmit: self.params.max_retransmit,
        };
        self.counters.exchanges += 1;
        self.counters.transmissions += 1;
        out.push(Action::Transmit { to, msg });
        out.push(Action::ArmTimer {
            at: now + t0,
            timer: TimerToken {
                message_id: mid,
                attempt: 1,
            },
        });
        self.pending.insert(mid, exchange);
        Ok(mid)
    }

    /// Retransmission timer expiry.
    pub fn on_timer(&mut self, now: SimTime, timer: TimerToken, out: &mut Vec<Action>) {
        let Some(ex) = self.pending.get_mut(&timer.message_id) else {
            return;
        };
        if ex.transmissions_sent != timer.attempt {
            return;
        }
        if ex.transmissions_sent <= ex.max_retransmit {
            ex.transmissions_sent += 1;
            let n = ex.transmissions_sent;
            let wait = ex.wait_after(n);
            self.counters.transmissions += 1;
            self.counters.retransmissions += 1;
            out.push(Action::Transmit {
                to: ex.peer,
                msg: ex.request.clone(),
            });
            out.push(Action::ArmTimer {
                at: now + wait,
                timer: TimerToken {
                    message_id: timer.message_id,
                    attempt: n,
                },
            });
        } else {
            let mut ex = self.pending.remove(&timer.message_id).expect("present");
            ex.state = ExchangeState::TimedOut;
            ex.completed_at = Some(now);
            self.counters.timeouts += 1;
            out.push(Action::Completed { exchange: ex, ack: None });
        }
    }

    /// Inbound message with an empty ACK for fresh confirmables.
    pub fn handle_inbound(&mut self, now: SimTime, from: NodeId, msg: CoapMessage, out: &mut Vec<Action>) {
        self.handle_inbound_with(now, from, msg, |_| None, out)
    }

    /// Inbound message. For a fresh CON, `respond` may supply a piggybacked
    /// response; the resulting ACK is cached and replayed for duplicates.
    pub fn handle_inbound_with<F>(&mut self, now: SimTime, from: NodeId, msg: CoapMessage, respond: F, out: &mut Vec<Action>)
    where
        F: FnOnce(&CoapMessage) -> Option<Response>,
    {
        match msg.kind {
            MessageKind::Con => {
                let key = (from, msg.message_id);
                if let Some(entry) = self.dedup.get_mut(&key) {
                    if entry.expires > now || (entry.expires == now && self.dedup_window.is_zero()) {
                        entry.expires = now + self.dedup_window;
                        self.counters.duplicates += 1;
                        out.push(Action::Transmit {
                            to: from,
                            msg: entry.ack.clone(),
                        });
                        return;
                    }
                }
                if self.addressed_to_unknown_token(&msg) {
                    self.counters.rsts_sent += 1;
                    out.push(Action::Transmit {
                        to: from,
                        msg: msg.reset_for(),
                    });
                    return;
                }
                let ack = match respond(&msg) {
                    Some(r) => msg.piggybacked_ack(r.code, r.observe, r.payload),
                    None => msg.empty_ack(),
                };
                self.remember(now, key, ack.clone());
                out.push(Action::Deliver { from, msg });
                out.push(Action::Transmit { to: from, msg: ack });
            }
            MessageKind::Non => {
                if self.addressed_to_unknown_token(&msg) {
                    self.counters.rsts_sent += 1;
                    out.push(Action::Transmit {
                        to: from,
                        msg: msg.reset_for(),
                    });
                    return;
                }
                out.push(Action::Deliver { from, msg });
            }
            MessageKind::Ack => match self.pending.get(&msg.message_id) {
                Some(ex) if ex.peer == from => {
                    let mut ex = self.pending.remove(&msg.message_id).expect("present");
                    ex.state = ExchangeState::Acked;
                    ex.completed_at = Some(now);
                    self.counters.acked += 1;
                    out.push(Action::Completed {
                        exchange: ex,
                        ack: Some(msg),
                    });
                }
                _ => self.counters.stray_acks += 1,
            },
            MessageKind::Rst => match self.pending.get(&msg.message_id) {
                Some(ex) if ex.peer == from => {
                    let mut ex = self.pending.remove(&msg.message_id).expect("present");
                    ex.completed_at = Some(now);
                    self.counters.resets_received += 1;
                    out.push(Action::Reset { exchange: ex });
                }
                _ => self.counters.stray_acks += 1,
            },
        }
    }

    /// Notifications must carry a token this endpoint handed out.
    fn addressed_to_unknown_token(&self, msg: &CoapMessage) -> bool {
        msg.observe.is_some() && msg.code == Code::Content && !self.known_tokens.contains(&msg.token)
    }

    fn remember(&mut self, now: SimTime, key: (NodeId, u16), ack: CoapMessage) {
        if self.dedup.len() >= self.prune_at {
            self.dedup.retain(|_, e| e.expires > now);
            self.prune_at = (self.dedup.len() * 2).max(1024);
        }
        self.dedup.insert(
            key,
            DedupEntry {
                expires: now + self.dedup_window,
                ack,
            },
        );
    }
}

/// Server-side observe relationship.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub resource: String,
    pub observer: NodeId,
    pub token: Token,
    pub last_sequence: u32,
    pub active: bool,
}

/// Observations held by a resource server and the notification exchanges
/// in flight for them.
#[derive(Debug, Default)]
pub struct ObserveRegistry {
    observations: Vec<Observation>,
    in_flight: BTreeMap<u16, (usize, Token)>,
}

impl ObserveRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers (or re-registers) `observer` on `resource`. Returns the
    /// current observe sequence.
    pub fn register(&mut self, resource: &str, observer: NodeId, token: Token) -> u32 {
        if let Some(o) = self
            .observations
            .iter_mut()
            .find(|o| o.resource == resource && o.observer == observer)
        {
            o.token = token;
            o.active = true;
            return o.last_sequence;
        }
        self.observations.push(Observation {
            resource: resource.to_string(),
            observer,
            token,
            last_sequence: 0,
            active: true,
        });
        0
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn observations_mut(&mut self) -> &mut [Observation] {
        &mut self.observations
    }

    pub fn active_count(&self, resource: &str) -> usize {
        self.observations
            .iter()
            .filter(|o| o.active && o.resource == resource)
            .count()
    }

    /// Sends one confirmable notification per active observer of
    /// `resource`, each with the next observe sequence number. Returns the
    /// emitted notifications.
    pub fn notify_observers(
        &mut self,
        endpoint: &mut Endpoint,
        now: SimTime,
        resource: &str,
        payload: &[u8],
        out: &mut Vec<Action>,
    ) -> Vec<CoapMessage> {
        let mut emitted = Vec::new();
        for (idx, o) in self.observations.iter_mut().enumerate() {
            if !o.active || o.resource != resource {
                continue;
            }
            o.last_sequence = o.last_sequence.wrapping_add(1);
            let msg = CoapMessage::confirmable(Code::Content, None, payload.to_vec())
                .with_token(o.token)
                .with_observe(o.last_sequence);
            let mid = endpoint
                .send_confirmable(now, o.observer, msg.clone(), out)
                .expect("notification is confirmable");
            self.in_flight.insert(mid, (idx, o.token));
            emitted.push(CoapMessage { message_id: mid, ..msg });
        }
        emitted
    }

    /// True if `message_id` is an in-flight notification.
    pub fn is_notification(&self, message_id: u16) -> bool {
        self.in_flight.contains_key(&message_id)
    }

    /// Feeds back the end of a notification exchange. A timed out or reset
    /// notification cancels its observation, unless the observer has since
    /// re-registered with a new token; returns the cancelled observer.
    pub fn on_exchange_done(&mut self, message_id: u16, state: Option<ExchangeState>) -> Option<NodeId> {
        let (idx, token) = self.in_flight.remove(&message_id)?;
        match state {
            Some(ExchangeState::Acked) => None,
            _ => {
                let o = &mut self.observations[idx];
                // a failure on a superseded registration leaves the new one alone
                if o.token != token {
                    return None;
                }
                let was_active = o.active;
                o.active = false;
                was_active.then_some(o.observer)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::EventLoop;
    use proptest::prelude::*;

    const CLIENT: NodeId = NodeId(1);
    const SERVER: NodeId = NodeId(2);

    #[test]
    fn span_examples() {
        let p = RetransmitParams::new(Duration::from_millis(2), 4, 1.5).unwrap();
        assert_eq!(expected_time_span(&p), Duration::from_millis(45));
        let p = RetransmitParams::new(Duration::from_millis(7), 0, 3.3).unwrap();
        assert_eq!(expected_time_span(&p), Duration::ZERO);
        let p = RetransmitParams::new(Duration::from_millis(3), 2, 2.0).unwrap();
        assert_eq!(expected_time_span(&p), Duration::from_millis(18));
    }

    #[test]
    fn params_validation() {
        assert_eq!(RetransmitParams::new(Duration::ZERO, 4, 1.5), Err(CoapError::ZeroTimeout));
        assert_eq!(
            RetransmitParams::new(Duration::from_millis(1), 4, 0.5),
            Err(CoapError::RandomFactor(0.5))
        );
        assert!(RetransmitParams::new(Duration::from_millis(1), 4, f64::NAN).is_err());
        assert_eq!(
            RetransmitParams::new(Duration::from_millis(1), 21, 1.0),
            Err(CoapError::TooManyRetransmits(21))
        );
    }

    #[test]
    fn schedule_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = RetransmitParams::new(Duration::from_millis(2), 4, 1.0).unwrap();
        let s = retransmit_schedule(&p, &mut rng);
        let ms: Vec<u128> = s.iter().map(|d| d.as_millis()).collect();
        assert_eq!(ms, vec![2, 4, 8, 16]);
        assert_eq!(s.iter().sum::<Duration>(), Duration::from_millis(30));

        let p = RetransmitParams::new(Duration::from_millis(5), 1, 1.0).unwrap();
        assert_eq!(retransmit_schedule(&p, &mut rng), vec![Duration::from_millis(5)]);

        let p = RetransmitParams::controlled();
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sum: Duration = retransmit_schedule(&p, &mut rng).iter().sum();
            assert!(sum <= Duration::from_millis(45));
        }
    }

    proptest! {
        #[test]
        fn schedule_never_exceeds_span(
            t_us in 1u64..5_000_000,
            c in 0u32..=12,
            f in 1.0f64..4.0,
            seed in any::<u64>(),
        ) {
            let p = RetransmitParams::new(Duration::from_micros(t_us), c, f).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = retransmit_schedule(&p, &mut rng);
            prop_assert_eq!(s.len() as u32, c);
            prop_assert!(s.iter().sum::<Duration>() <= expected_time_span(&p));
            for w in s.windows(2) {
                prop_assert_eq!(w[1], w[0] * 2);
            }
        }

        #[test]
        fn schedule_equals_span_without_randomness(t_us in 1u64..5_000_000, c in 0u32..=12, seed in any::<u64>()) {
            let p = RetransmitParams::new(Duration::from_micros(t_us), c, 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = retransmit_schedule(&p, &mut rng);
            prop_assert_eq!(s.iter().sum::<Duration>(), expected_time_span(&p));
        }
    }

    #[derive(Debug)]
    enum Ev {
        Arrive { to: usize, from: NodeId, msg: CoapMessage },
        Timer { ep: usize, timer: TimerToken },
    }

    /// Two endpoints joined by a fixed-delay path that drops transmissions
    /// according to `drop`, called with every message and the count of
    /// messages seen so far in that direction.
    struct Harness {
        eps: [Endpoint; 2],
        events: EventLoop<Ev>,
        delay: Duration,
        sent: [u32; 2],
        completions: Vec<(usize, Action)>,
        delivered: Vec<(usize, CoapMessage)>,
    }

    impl Harness {
        fn new(params: RetransmitParams) -> Self {
            Harness {
                eps: [Endpoint::new(CLIENT, params, 1), Endpoint::new(SERVER, params, 2)],
                events: EventLoop::new(),
                delay: Duration::from_micros(100),
                sent: [0; 2],
                completions: Vec::new(),
                delivered: Vec::new(),
            }
        }

        fn apply(&mut self, ep: usize, actions: Vec<Action>, drop: &mut dyn FnMut(usize, &CoapMessage, u32) -> bool) {
            let now = self.events.now();
            for a in actions {
                match a {
                    Action::Transmit { to, msg } => {
                        self.sent[ep] += 1;
                        if !drop(ep, &msg, self.sent[ep]) {
                            let to = if to == CLIENT { 0 } else { 1 };
                            let from = self.eps[ep].id();
                            self.events.schedule(now + self.delay, Ev::Arrive { to, from, msg });
                        }
                    }
                    Action::ArmTimer { at, timer } => self.events.schedule(at, Ev::Timer { ep, timer }),
                    Action::Deliver { msg, .. } => self.delivered.push((ep, msg)),
                    other => self.completions.push((ep, other)),
                }
            }
        }

        fn run(&mut self, drop: &mut dyn FnMut(usize, &CoapMessage, u32) -> bool) {
            while let Some((now, ev)) = self.events.pop() {
                let mut out = Vec::new();
                let ep = match ev {
                    Ev::Arrive { to, from, msg } => {
                        self.eps[to].handle_inbound(now, from, msg, &mut out);
                        to
                    }
                    Ev::Timer { ep, timer } => {
                        self.eps[ep].on_timer(now, timer, &mut out);
                        ep
                    }
                };
                self.apply(ep, out, drop);
            }
        }

        fn start(&mut self, msg: CoapMessage, drop: &mut dyn FnMut(usize, &CoapMessage, u32) -> bool) -> u16 {
            let mut out = Vec::new();
            let now = self.events.now();
            let mid = self.eps[0].send_confirmable(now, SERVER, msg, &mut out).unwrap();
            self.apply(0, out, drop);
            mid
        }

        fn completed(&self) -> &Exchange {
            match &self.completions.last().expect("completed").1 {
                Action::Completed { exchange, .. } => exchange,
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    fn put() -> CoapMessage {
        CoapMessage::confirmable(Code::Put, Some("x"), vec![1, 2, 3])
    }

    #[test]
    fn lossless_exchange_acks_after_one_transmission() {
        let mut h = Harness::new(RetransmitParams::controlled());
        let mut no_loss = |_: usize, _: &CoapMessage, _: u32| false;
        h.start(put(), &mut no_loss);
        h.run(&mut no_loss);
        let ex = h.completed();
        assert_eq!(ex.state, ExchangeState::Acked);
        assert_eq!(ex.transmissions_sent, 1);
        assert_eq!(h.delivered.len(), 1);
    }

    #[test]
    fn two_drops_then_ack() {
        let mut h = Harness::new(RetransmitParams::controlled());
        let mut drop_first_two = |ep: usize, _: &CoapMessage, n: u32| ep == 0 && n <= 2;
        h.start(put(), &mut drop_first_two);
        h.run(&mut drop_first_two);
        let ex = h.completed();
        assert_eq!(ex.state, ExchangeState::Acked);
        assert_eq!(ex.transmissions_sent, 3);
        assert_eq!(h.eps[0].counters().retransmissions, 2);
    }

    #[test]
    fn all_dropped_times_out_within_bound() {
        let params = RetransmitParams::controlled();
        let mut h = Harness::new(params);
        let mut drop_all = |ep: usize, _: &CoapMessage, _: u32| ep == 0;
        h.start(put(), &mut drop_all);
        h.run(&mut drop_all);
        let ex = h.completed().clone();
        assert_eq!(ex.state, ExchangeState::TimedOut);
        assert_eq!(ex.transmissions_sent, params.max_retransmit + 1);
        let final_timeout = ex.initial_timeout * (1 << params.max_retransmit);
        let done = ex.completed_at.unwrap();
        assert!(done <= ex.started_at + expected_time_span(&params) + final_timeout);
        // the state machine waits out the full backoff before giving up
        assert_eq!(done, ex.started_at + ex.initial_timeout * 31);
        assert_eq!(h.eps[0].counters().timeouts, 1);
    }

    #[test]
    fn lost_acks_cause_duplicates_but_single_delivery() {
        let mut h = Harness::new(RetransmitParams::controlled());
        // server's first three ACKs lost
        let mut drop_acks = |ep: usize, _: &CoapMessage, n: u32| ep == 1 && n <= 3;
        h.start(put(), &mut drop_acks);
        h.run(&mut drop_acks);
        assert_eq!(h.completed().state, ExchangeState::Acked);
        assert_eq!(h.completed().transmissions_sent, 4);
        assert_eq!(h.delivered.len(), 1);
        assert_eq!(h.eps[1].counters().duplicates, 3);
    }

    #[test]
    fn inbound_fresh_duplicate_and_stray() {
        let mut ep = Endpoint::new(SERVER, RetransmitParams::controlled(), 5);
        let mut m = put();
        m.message_id = 9;
        let mut out = Vec::new();
        ep.handle_inbound(SimTime::ZERO, CLIENT, m.clone(), &mut out);
        assert!(matches!(&out[0], Action::Deliver { msg, .. } if msg.message_id == 9));
        assert!(matches!(&out[1], Action::Transmit { msg, .. } if msg.kind == MessageKind::Ack && msg.message_id == 9));

        out.clear();
        ep.handle_inbound(SimTime::from_millis(1), CLIENT, m.clone(), &mut out);
        assert_eq!(out.len(), 1);
        assert!(matches!(&out[0], Action::Transmit { msg, .. } if msg.kind == MessageKind::Ack && msg.message_id == 9));

        out.clear();
        let mut ack = m.empty_ack();
        ack.message_id = 1234;
        ep.handle_inbound(SimTime::from_millis(2), CLIENT, ack, &mut out);
        assert!(out.is_empty());
        assert_eq!(ep.counters().stray_acks, 1);
    }

    #[test]
    fn dedup_window_expires() {
        let params = RetransmitParams::controlled();
        let mut ep = Endpoint::new(SERVER, params, 5);
        let mut m = put();
        m.message_id = 3;
        let mut out = Vec::new();
        ep.handle_inbound(SimTime::ZERO, CLIENT, m.clone(), &mut out);
        out.clear();
        let later = SimTime::ZERO + expected_time_span(&params) + Duration::from_micros(1);
        ep.handle_inbound(later, CLIENT, m, &mut out);
        assert!(matches!(out[0], Action::Deliver { .. }));
    }

    proptest! {
        #[test]
        fn repeated_con_delivered_once(n in 1usize..20, gap_us in 0u64..5_000) {
            let mut ep = Endpoint::new(SERVER, RetransmitParams::controlled(), 5);
            let mut m = put();
            m.message_id = 77;
            let mut delivered = 0;
            let mut acks = 0;
            for i in 0..n {
                let mut out = Vec::new();
                ep.handle_inbound(SimTime::from_micros(i as u64 * gap_us), CLIENT, m.clone(), &mut out);
                for a in out {
                    match a {
                        Action::Deliver { .. } => delivered += 1,
                        Action::Transmit { msg, .. } if msg.kind == MessageKind::Ack => acks += 1,
                        _ => {}
                    }
                }
            }
            prop_assert_eq!(delivered, 1);
            prop_assert_eq!(acks, n);
        }
    }

    #[test]
    fn notification_with_unknown_token_is_reset() {
        let mut client = Endpoint::new(CLIENT, RetransmitParams::controlled(), 1);
        let known = client.new_token();
        let mut out = Vec::new();
        let mut note = CoapMessage::confirmable(Code::Content, None, vec![]).with_observe(1).with_token(Token::from_u32(999));
        note.message_id = 5;
        client.handle_inbound(SimTime::ZERO, SERVER, note.clone(), &mut out);
        assert_eq!(out.len(), 1);
        assert!(matches!(&out[0], Action::Transmit { msg, .. } if msg.kind == MessageKind::Rst && msg.message_id == 5));

        out.clear();
        note.token = known;
        note.message_id = 6;
        client.handle_inbound(SimTime::ZERO, SERVER, note, &mut out);
        assert!(matches!(out[0], Action::Deliver { .. }));
    }

    #[test]
    fn reset_abandons_exchange() {
        let mut ep = Endpoint::new(CLIENT, RetransmitParams::controlled(), 1);
        let mut out = Vec::new();
        let mid = ep.send_confirmable(SimTime::ZERO, SERVER, put(), &mut out).unwrap();
        out.clear();
        let mut rst = put();
        rst.message_id = mid;
        ep.handle_inbound(SimTime::from_micros(10), SERVER, rst.reset_for(), &mut out);
        assert!(matches!(out[0], Action::Reset { .. }));
        assert_eq!(ep.pending_count(), 0);
    }

    #[test]
    fn non_confirmable_cannot_start_exchange() {
        let mut ep = Endpoint::new(CLIENT, RetransmitParams::controlled(), 1);
        let mut m = put();
        m.kind = MessageKind::Non;
        assert_eq!(
            ep.send_confirmable(SimTime::ZERO, SERVER, m, &mut Vec::new()),
            Err(CoapError::NotConfirmable(MessageKind::Non))
        );
    }

    #[test]
    fn message_ids_wrap_and_skip_pending() {
        let mut ep = Endpoint::new(CLIENT, RetransmitParams::controlled(), 1);
        ep.next_message_id = u16::MAX;
        let mut out = Vec::new();
        let a = ep.send_confirmable(SimTime::ZERO, SERVER, put(), &mut out).unwrap();
        let b = ep.send_confirmable(SimTime::ZERO, SERVER, put(), &mut out).unwrap();
        assert_eq!((a, b), (u16::MAX, 0));
        ep.next_message_id = u16::MAX;
        let c = ep.send_confirmable(SimTime::ZERO, SERVER, put(), &mut out).unwrap();
        assert_eq!(c, 1);
    }

    #[test]
    fn notify_zero_observers() {
        let mut reg = ObserveRegistry::new();
        let mut ep = Endpoint::new(SERVER, RetransmitParams::controlled(), 1);
        let mut out = Vec::new();
        assert!(reg.notify_observers(&mut ep, SimTime::ZERO, "pv", b"v", &mut out).is_empty());
        assert!(out.is_empty());
    }

    #[test]
    fn notify_increments_sequences() {
        let mut reg = ObserveRegistry::new();
        reg.register("pv", NodeId(10), Token::from_u32(1));
        reg.register("pv", NodeId(11), Token::from_u32(2));
        reg.register("other", NodeId(12), Token::from_u32(3));
        reg.observations_mut()[0].last_sequence = 5;
        reg.observations_mut()[1].last_sequence = 7;
        let mut ep = Endpoint::new(SERVER, RetransmitParams::controlled(), 1);
        let mut out = Vec::new();
        let sent = reg.notify_observers(&mut ep, SimTime::ZERO, "pv", b"v", &mut out);
        let seqs: Vec<_> = sent.iter().map(|m| m.observe.unwrap()).collect();
        assert_eq!(seqs, vec![6, 8]);
        assert!(sent.iter().all(|m| m.kind == MessageKind::Con));
        assert_eq!(ep.pending_count(), 2);
    }

    #[test]
    fn timed_out_notification_cancels_observation() {
        let params = RetransmitParams::controlled();
        let mut h = Harness::new(params);
        let token = h.eps[0].new_token();
        let mut reg = ObserveRegistry::new();
        reg.register("pv", CLIENT, token);
        // server is endpoint 1; drop everything it sends
        let mut drop_server = |ep: usize, _: &CoapMessage, _: u32| ep == 1;
        let mut out = Vec::new();
        let sent = reg.notify_observers(&mut h.eps[1], SimTime::ZERO, "pv", b"v", &mut out);
        h.apply(1, out, &mut drop_server);
        h.run(&mut drop_server);
        let Action::Completed { exchange, .. } = &h.completions[0].1 else { panic!() };
        assert_eq!(exchange.state, ExchangeState::TimedOut);
        assert_eq!(reg.on_exchange_done(sent[0].message_id, Some(exchange.state)), Some(CLIENT));
        assert!(!reg.observations()[0].active);
        assert_eq!(reg.active_count("pv"), 0);
        // further notifications go nowhere
        let mut out = Vec::new();
        assert!(reg.notify_observers(&mut h.eps[1], SimTime::ZERO, "pv", b"v", &mut out).is_empty());
    }

    proptest! {
        #[test]
        fn observe_sequences_strictly_increase(rounds in 1usize..50) {
            let mut reg = ObserveRegistry::new();
            reg.register("pv", CLIENT, Token::from_u32(1));
            let mut ep = Endpoint::new(SERVER, RetransmitParams::controlled(), 1);
            let mut last = 0;
            for _ in 0..rounds {
                let sent = reg.notify_observers(&mut ep, SimTime::ZERO, "pv", b"", &mut Vec::new());
                let seq = sent[0].observe.unwrap();
                prop_assert!(seq > last);
                last = seq;
            }
        }

        #[test]
        fn completed_exchange_invariants(drops in proptest::collection::vec(any::<bool>(), 0..8)) {
            let params = RetransmitParams::controlled();
            let mut h = Harness::new(params);
            let script = drops.clone();
            let mut drop = move |ep: usize, _: &CoapMessage, n: u32| ep == 0 && script.get(n as usize - 1).copied().unwrap_or(false);
            h.start(put(), &mut drop);
            h.run(&mut drop);
            let ex = h.completed();
            match ex.state {
                ExchangeState::Acked => prop_assert!(ex.transmissions_sent <= params.max_retransmit + 1),
                ExchangeState::TimedOut => prop_assert_eq!(ex.transmissions_sent, params.max_retransmit + 1),
                ExchangeState::Waiting => prop_assert!(false, "unresolved"),
            }
        }
    }
}
