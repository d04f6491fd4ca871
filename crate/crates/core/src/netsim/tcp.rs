//! A windowed, reliable, in-order transport: cumulative per-packet ACKs,
//! one retransmission timer with exponential backoff, window halved on
//! timeout and grown by one segment per acknowledged window.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use crate::messages::{ConnId, Segment, SegmentKind, WsFrame};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TcpParams {
    pub initial_window: u32,
    pub max_window: u32,
    pub rto: Duration,
    pub max_rto: Duration,
}

impl Default for TcpParams {
    fn default() -> Self {
        TcpParams {
            initial_window: 4,
            max_window: 32,
            rto: Duration::from_millis(20),
            max_rto: Duration::from_secs(2),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TcpStats {
    /// Segments transmitted, retransmissions included.
    pub segments_sent: u64,
    pub retransmissions: u64,
    pub timeouts: u64,
    pub acked: u64,
    /// Frames discarded from a full send buffer.
    pub buffer_drops: u64,
}

impl TcpStats {
    pub fn merge(&mut self, o: &TcpStats) {
        self.segments_sent += o.segments_sent;
        self.retransmissions += o.retransmissions;
        self.timeouts += o.timeouts;
        self.acked += o.acked;
        self.buffer_drops += o.buffer_drops;
    }

    pub fn retransmission_rate(&self) -> f64 {
        if self.segments_sent == 0 {
            0.0
        } else {
            self.retransmissions as f64 / self.segments_sent as f64
        }
    }
}

#[derive(Debug)]
pub enum TcpOutput {
    Send(Segment),
    /// (Re)arm the retransmission timer; timers carrying an older
    /// generation are stale.
    ArmTimer { after: Duration, generation: u64 },
}

#[derive(Debug, Clone)]
enum Backlog {
    /// Always has data (bulk transfer).
    Unlimited,
    Frames { queue: VecDeque<(WsFrame, SimTime)>, limit: usize },
}

#[derive(Debug, Clone)]
pub struct TcpSender {
    conn: ConnId,
    params: TcpParams,
    cwnd: u32,
    acked_in_round: u32,
    snd_una: u64,
    next_seq: u64,
    rto: Duration,
    generation: u64,
    unacked: VecDeque<Segment>,
    backlog: Backlog,
    stopped: bool,
    pub stats: TcpStats,
}

impl TcpSender {
    /// A sender that always has data to send.
    pub fn bulk(conn: ConnId, params: TcpParams) -> Self {
        Self::with_backlog(conn, params, Backlog::Unlimited)
    }

    /// A sender carrying WebSocket frames, buffering at most `limit` unsent
    /// frames (the oldest is dropped on overflow).
    pub fn framed(conn: ConnId, params: TcpParams, limit: usize) -> Self {
        Self::with_backlog(
            conn,
            params,
            Backlog::Frames {
                queue: VecDeque::new(),
                limit,
            },
        )
    }

    fn with_backlog(conn: ConnId, params: TcpParams, backlog: Backlog) -> Self {
        assert!(params.initial_window >= 1 && params.max_window >= params.initial_window);
        TcpSender {
            conn,
            params,
            cwnd: params.initial_window,
            acked_in_round: 0,
            snd_una: 0,
            next_seq: 0,
            rto: params.rto,
            generation: 0,
            unacked: VecDeque::new(),
            backlog,
            stopped: false,
            stats: TcpStats::default(),
        }
    }

    pub fn conn(&self) -> ConnId {
        self.conn
    }

    pub fn window(&self) -> u32 {
        self.cwnd
    }

    pub fn in_flight(&self) -> usize {
        self.unacked.len()
    }

    pub fn current_rto(&self) -> Duration {
        self.rto
    }

    /// True once everything handed to the sender has been acknowledged.
    pub fn is_idle(&self) -> bool {
        self.unacked.is_empty()
            && match &self.backlog {
                Backlog::Unlimited => self.stopped,
                Backlog::Frames { queue, .. } => queue.is_empty(),
            }
    }

    /// Stops new transmissions and retransmissions.
    pub fn stop(&mut self) {
        self.stopped = true;
        self.generation += 1;
    }

    /// Queues a frame; returns the frame evicted from a full buffer, if any.
    pub fn push_frame(&mut self, frame: WsFrame, now: SimTime, out: &mut Vec<TcpOutput>) -> Option<WsFrame> {
        let Backlog::Frames { queue, limit } = &mut self.backlog else {
            panic!("push_frame on a bulk sender");
        };
        let mut evicted = None;
        if queue.len() >= *limit {
            evicted = queue.pop_front().map(|(f, _)| f);
            self.stats.buffer_drops += 1;
        }
        queue.push_back((frame, now));
        self.fill(out);
        evicted
    }

    /// Starts transmitting (bulk senders).
    pub fn open(&mut self, out: &mut Vec<TcpOutput>) {
        self.fill(out);
    }

    fn fill(&mut self, out: &mut Vec<TcpOutput>) {
        if self.stopped {
            return;
        }
        let was_empty = self.unacked.is_empty();
        while self.next_seq - self.snd_una < u64::from(self.cwnd) {
            let kind = match &mut self.backlog {
                Backlog::Unlimited => SegmentKind::Data {
                    frame: None,
                    queued_at: SimTime::ZERO,
                },
                Backlog::Frames { queue, .. } => match queue.pop_front() {
                    Some((f, at)) => SegmentKind::Data {
                        frame: Some(f),
                        queued_at: at,
                    },
                    None => break,
                },
            };
            let seg = Segment {
                conn: self.conn,
                seq: self.next_seq,
                kind,
            };
            self.next_seq += 1;
            self.stats.segments_sent += 1;
            self.unacked.push_back(seg.clone());
            out.push(TcpOutput::Send(seg));
        }
        if was_empty && !self.unacked.is_empty() {
            self.arm(out);
        }
    }

    fn arm(&mut self, out: &mut Vec<TcpOutput>) {
        self.generation += 1;
        out.push(TcpOutput::ArmTimer {
            after: self.rto,
            generation: self.generation,
        });
    }

    pub fn on_ack(&mut self, next_expected: u64, out: &mut Vec<TcpOutput>) {
        if next_expected <= self.snd_una || next_expected > self.next_seq {
            return;
        }
        let newly = next_expected - self.snd_una;
        while self.unacked.front().is_some_and(|s| s.seq < next_expected) {
            self.unacked.pop_front();
        }
        self.snd_una = next_expected;
        self.stats.acked += newly;
        self.acked_in_round += newly as u32;
        while self.acked_in_round >= self.cwnd {
            self.acked_in_round -= self.cwnd;
            self.cwnd = (self.cwnd + 1).min(self.params.max_window);
        }
        self.rto = self.params.rto;
        if self.stopped {
            return;
        }
        if self.unacked.is_empty() {
            self.generation += 1;
        } else {
            self.arm(out);
        }
        self.fill(out);
    }

    pub fn on_timer(&mut self, generation: u64, out: &mut Vec<TcpOutput>) {
        if generation != self.generation || self.stopped {
            return;
        }
        let Some(oldest) = self.unacked.front().cloned() else {
            return;
        };
        self.stats.timeouts += 1;
        self.stats.retransmissions += 1;
        self.stats.segments_sent += 1;
        self.cwnd = (self.cwnd / 2).max(1);
        self.acked_in_round = 0;
        self.rto = (self.rto * 2).min(self.params.max_rto);
        out.push(TcpOutput::Send(oldest));
        self.arm(out);
    }
}

/// In-order receiver. Buffers out-of-order segments and acknowledges
/// every arrival cumulatively.
#[derive(Debug, Clone, Default)]
pub struct TcpReceiver {
    next_expected: u64,
    out_of_order: BTreeMap<u64, SegmentKind>,
    pub duplicates: u64,
}

impl TcpReceiver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_expected(&self) -> u64 {
        self.next_expected
    }

    /// Accepts a data segment. Returns the cumulative ACK value and the
    /// payloads that became deliverable in order.
    pub fn on_data(&mut self, seg: Segment) -> (u64, Vec<(u64, SegmentKind)>) {
        let mut delivered = Vec::new();
        if seg.seq < self.next_expected || self.out_of_order.contains_key(&seg.seq) {
            self.duplicates += 1;
        } else if seg.seq == self.next_expected {
            delivered.push((seg.seq, seg.kind));
            self.next_expected += 1;
            while let Some(k) = self.out_of_order.remove(&self.next_expected) {
                delivered.push((self.next_expected, k));
                self.next_expected += 1;
            }
        } else {
            self.out_of_order.insert(seg.seq, seg.kind);
        }
        (self.next_expected, delivered)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sends(out: &[TcpOutput]) -> Vec<u64> {
        out.iter()
            .filter_map(|o| match o {
                TcpOutput::Send(s) => Some(s.seq),
                _ => None,
            })
            .collect()
    }

    fn last_gen(out: &[TcpOutput]) -> u64 {
        out.iter()
            .rev()
            .find_map(|o| match o {
                TcpOutput::ArmTimer { generation, .. } => Some(*generation),
                _ => None,
            })
            .expect("timer armed")
    }

    fn params(w: u32) -> TcpParams {
        TcpParams {
            initial_window: w,
            max_window: 64,
            ..TcpParams::default()
        }
    }

    #[test]
    fn window_limits_outstanding() {
        let mut s = TcpSender::bulk(ConnId(1), params(4));
        let mut out = Vec::new();
        s.open(&mut out);
        assert_eq!(sends(&out), vec![0, 1, 2, 3]);
    }

    #[test]
    fn timeout_halves_window_and_counts_retransmission() {
        let mut s = TcpSender::bulk(ConnId(1), params(8));
        let mut out = Vec::new();
        s.open(&mut out);
        let g = last_gen(&out);
        out.clear();
        s.on_timer(g, &mut out);
        assert_eq!(s.window(), 4);
        assert_eq!(s.stats.retransmissions, 1);
        assert_eq!(sends(&out), vec![0]);
        assert_eq!(s.current_rto(), Duration::from_millis(40));
        // stale timer ignored
        out.clear();
        s.on_timer(g, &mut out);
        assert!(out.is_empty());
    }

    #[test]
    fn window_grows_by_one_per_acked_window() {
        let mut s = TcpSender::bulk(ConnId(1), params(4));
        let mut out = Vec::new();
        s.open(&mut out);
        for ack in 1..=4 {
            s.on_ack(ack, &mut out);
        }
        assert_eq!(s.window(), 5);
        assert_eq!(s.in_flight(), 5);
    }

    #[test]
    fn receiver_reorders() {
        let mut r = TcpReceiver::new();
        let seg = |seq| Segment {
            conn: ConnId(0),
            seq,
            kind: SegmentKind::Data {
                frame: None,
                queued_at: SimTime::ZERO,
            },
        };
        assert_eq!(r.on_data(seg(1)).0, 0);
        assert_eq!(r.on_data(seg(2)).0, 0);
        let (ack, got) = r.on_data(seg(0));
        assert_eq!(ack, 3);
        assert_eq!(got.iter().map(|g| g.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        r.on_data(seg(1));
        assert_eq!(r.duplicates, 1);
    }

    #[test]
    fn frame_buffer_drops_oldest() {
        let mut s = TcpSender::framed(ConnId(2), params(1), 2);
        let mut out = Vec::new();
        s.push_frame(WsFrame::text("a"), SimTime::ZERO, &mut out); // sent
        s.push_frame(WsFrame::text("b"), SimTime::ZERO, &mut out);
        s.push_frame(WsFrame::text("c"), SimTime::ZERO, &mut out);
        let ev = s.push_frame(WsFrame::text("d"), SimTime::ZERO, &mut out);
        assert_eq!(ev, Some(WsFrame::text("b")));
        assert_eq!(s.stats.buffer_drops, 1);
    }
}
