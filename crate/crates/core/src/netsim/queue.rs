//! Strict-priority egress queues with per-queue token-bucket rate caps.

use std::collections::VecDeque;
use std::time::Duration;

use crate::messages::NetPacket;
use crate::qos::QUEUE_COUNT;
use crate::time::SimTime;

const UNITS_PER_BIT: u128 = 1_000_000_000;

/// Token bucket refilled continuously at `rate_bps`, holding at most
/// `burst_bytes`. Tokens are kept as integers (bit-nanoseconds) so refill
/// arithmetic is exact.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate_bps: u64,
    capacity: u128,
    tokens: u128,
    last: SimTime,
}

impl TokenBucket {
    /// A full bucket.
    pub fn new(rate_bps: u64, burst_bytes: u32) -> Self {
        assert!(rate_bps > 0, "token rate must be positive");
        let capacity = u128::from(burst_bytes) * 8 * UNITS_PER_BIT;
        TokenBucket {
            rate_bps,
            capacity,
            tokens: capacity,
            last: SimTime::ZERO,
        }
    }

    pub fn rate_bps(&self) -> u64 {
        self.rate_bps
    }

    fn refill(&mut self, now: SimTime) {
        if now > self.last {
            let elapsed = u128::from((now - self.last).as_nanos() as u64);
            self.tokens = (self.tokens + elapsed * u128::from(self.rate_bps)).min(self.capacity);
            self.last = now;
        }
    }

    fn cost(bytes: u32) -> u128 {
        u128::from(bytes) * 8 * UNITS_PER_BIT
    }

    /// True if `bytes` can be sent at `now`.
    pub fn allows(&mut self, now: SimTime, bytes: u32) -> bool {
        self.refill(now);
        self.tokens >= Self::cost(bytes).min(self.capacity)
    }

    /// Spends tokens for `bytes`; call after [`allows`](Self::allows).
    pub fn consume(&mut self, now: SimTime, bytes: u32) {
        self.refill(now);
        self.tokens = self.tokens.saturating_sub(Self::cost(bytes));
    }

    /// Time until `bytes` worth of tokens are available.
    pub fn wait_for(&mut self, now: SimTime, bytes: u32) -> Duration {
        self.refill(now);
        let need = Self::cost(bytes).min(self.capacity);
        if self.tokens >= need {
            return Duration::ZERO;
        }
        let deficit = need - self.tokens;
        let rate = u128::from(self.rate_bps);
        Duration::from_nanos(deficit.div_ceil(rate) as u64)
    }

    /// Available budget in whole bytes.
    pub fn available_bytes(&mut self, now: SimTime) -> u64 {
        self.refill(now);
        (self.tokens / (8 * UNITS_PER_BIT)) as u64
    }
}

#[derive(Debug, Clone)]
pub struct QueueConfig {
    /// Tail-drop limit per queue, in packets.
    pub depth_limit: usize,
    /// Rate cap per queue; `None` leaves the queue limited only by the link.
    pub rate_caps_bps: [Option<u64>; QUEUE_COUNT],
    pub burst_bytes: u32,
}

impl Default for QueueConfig {
    /// 256-packet queues; queues 0-2 capped at 100 Mbps, queue 3 takes the
    /// link residual.
    fn default() -> Self {
        QueueConfig {
            depth_limit: 256,
            rate_caps_bps: [Some(100_000_000), Some(100_000_000), Some(100_000_000), None],
            burst_bytes: 15_000,
        }
    }
}

/// Result of asking a queue set for the next packet to transmit.
#[derive(Debug)]
pub enum Serve {
    Packet(u8, Box<NetPacket>),
    /// Packets are waiting but every occupied queue is over its rate cap.
    WaitUntil(SimTime),
    Empty,
}

#[derive(Debug, Clone)]
pub struct PriorityQueueSet {
    queues: [VecDeque<Box<NetPacket>>; QUEUE_COUNT],
    buckets: [Option<TokenBucket>; QUEUE_COUNT],
    depth_limit: usize,
    pub enqueued: [u64; QUEUE_COUNT],
    pub dequeued: [u64; QUEUE_COUNT],
    pub overflow_drops: [u64; QUEUE_COUNT],
}

impl PriorityQueueSet {
    pub fn new(cfg: &QueueConfig) -> Self {
        PriorityQueueSet {
            queues: Default::default(),
            buckets: cfg
                .rate_caps_bps
                .map(|cap| cap.map(|rate| TokenBucket::new(rate, cfg.burst_bytes))),
            depth_limit: cfg.depth_limit,
            enqueued: [0; QUEUE_COUNT],
            dequeued: [0; QUEUE_COUNT],
            overflow_drops: [0; QUEUE_COUNT],
        }
    }

    /// Tail-drop enqueue. Hands the packet back if queue `q` is full.
    pub fn enqueue(&mut self, q: u8, packet: Box<NetPacket>) -> Result<(), Box<NetPacket>> {
        let q = q as usize;
        if self.queues[q].len() >= self.depth_limit {
            self.overflow_drops[q] += 1;
            return Err(packet);
        }
        self.enqueued[q] += 1;
        self.queues[q].push_back(packet);
        Ok(())
    }

    /// Dequeues from the lowest-index nonempty queue whose rate cap admits
    /// its head packet.
    pub fn serve(&mut self, now: SimTime) -> Serve {
        let mut wake: Option<SimTime> = None;
        for q in 0..QUEUE_COUNT {
            let Some(head) = self.queues[q].front() else {
                continue;
            };
            let size = head.size_bytes;
            if let Some(bucket) = &mut self.buckets[q] {
                if !bucket.allows(now, size) {
                    let at = now + bucket.wait_for(now, size);
                    wake = Some(wake.map_or(at, |w| w.min(at)));
                    continue;
                }
                bucket.consume(now, size);
            }
            let p = self.queues[q].pop_front().expect("nonempty");
            self.dequeued[q] += 1;
            return Serve::Packet(q as u8, p);
        }
        match wake {
            Some(at) => Serve::WaitUntil(at),
            None => Serve::Empty,
        }
    }

    pub fn len(&self, q: usize) -> usize {
        self.queues[q].len()
    }

    pub(crate) fn tail(&self, q: usize) -> Option<&NetPacket> {
        self.queues[q].back().map(|b| &**b)
    }

    pub fn total_len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    pub fn bucket_mut(&mut self, q: usize) -> Option<&mut TokenBucket> {
        self.buckets[q].as_mut()
    }
}
