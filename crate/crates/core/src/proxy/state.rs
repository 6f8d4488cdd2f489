use std::collections::VecDeque;

use crate::proto::{CommQuery, CounterReport, Frame, MessageEnvelope, NackCode, RankId, Selector, SendRequest};

/// Side effect requested by a state transition. The runner executes them
/// in order while still holding the state lock.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    ToPlugin(Frame),
    ToPeer(RankId, MessageEnvelope),
    ToCoordinator(Frame),
}

/// A blocking plugin call waiting at the proxy for a matching arrival.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pending {
    Recv(Selector),
    Probe(Selector),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CkptStage {
    /// `CKPT_PREPARE` relayed; the plugin has not parked yet.
    AwaitPrepareAck,
    /// Every inbox or arriving envelope is pushed into the plugin cache.
    Draining,
    Committed,
    /// Resume or abort relayed; stale plugin requests are still dropped
    /// until the plugin confirms with `RESUMED`.
    AwaitResumed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Normal,
    Checkpoint { epoch: u64, stage: CkptStage },
    Halted,
    Released,
}

/// Transport state owned by one proxy. Never persisted: a restarted world
/// gets fresh proxies whose state is rebuilt by replay.
#[derive(Debug)]
pub struct ProxyState {
    rank: RankId,
    world_size: u32,
    inbox: VecDeque<MessageEnvelope>,
    pending: Option<Pending>,
    sent_total: u64,
    received_total: u64,
    next_seq: Vec<u64>,
    phase: Phase,
    finalize_pending: bool,
    drained: u64,
}

impl ProxyState {
    pub fn new(rank: RankId, world_size: u32) -> Self {
        ProxyState {
            rank,
            world_size,
            inbox: VecDeque::new(),
            pending: None,
            sent_total: 0,
            received_total: 0,
            next_seq: vec![0; world_size as usize],
            phase: Phase::Normal,
            finalize_pending: false,
            drained: 0,
        }
    }

    pub fn rank(&self) -> RankId {
        self.rank
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn inbox_len(&self) -> usize {
        self.inbox.len()
    }

    pub fn pending(&self) -> Option<Pending> {
        self.pending
    }

    /// Envelopes pushed into the plugin cache during the current (or last)
    /// checkpoint.
    pub fn drained(&self) -> u64 {
        self.drained
    }

    pub fn next_seq(&self) -> &[u64] {
        &self.next_seq
    }

    pub fn report_counters(&self) -> CounterReport {
        CounterReport { rank: self.rank, sent: self.sent_total, received: self.received_total }
    }

    fn nack(code: NackCode, detail: impl Into<String>) -> Vec<Action> {
        vec![Action::ToPlugin(Frame::Nack { code, detail: detail.into() })]
    }

    /// Stamps and acknowledges a send, then hands it to the transport.
    /// Custody passes to the proxy at the acknowledgement, before the peer
    /// has the envelope.
    pub fn forward_send(&mut self, req: SendRequest) -> Vec<Action> {
        if req.dest.0 >= self.world_size {
            return Self::nack(
                NackCode::InvalidRank,
                format!("rank {} outside world of {}", req.dest, self.world_size),
            );
        }
        if !req.tag.is_concrete() {
            return Self::nack(NackCode::InvalidTag, format!("tag {} is not sendable", req.tag.0));
        }
        if req.payload.len() != req.count as usize * req.datatype.width() {
            return Self::nack(NackCode::SizeMismatch, "payload length differs from count x width");
        }
        let slot = &mut self.next_seq[req.dest.index()];
        let seq = *slot;
        *slot += 1;
        self.sent_total += 1;
        let env = MessageEnvelope {
            source: self.rank,
            dest: req.dest,
            tag: req.tag,
            datatype: req.datatype,
            count: req.count,
            payload: req.payload,
            seq,
        };
        let mut out = vec![Action::ToPlugin(Frame::SendAck { seq })];
        if env.dest == self.rank {
            out.extend(self.on_envelope(env));
        } else {
            out.push(Action::ToPeer(env.dest, env));
        }
        out
    }

    /// Hands an arriving envelope to a parked receive when it matches,
    /// otherwise keeps it in arrival order.
    pub fn deliver_or_buffer(&mut self, env: MessageEnvelope) -> Vec<Action> {
        match self.pending {
            Some(Pending::Recv(sel)) if sel.matches(&env) => {
                self.pending = None;
                self.received_total += 1;
                vec![Action::ToPlugin(Frame::Deliver(env))]
            }
            Some(Pending::Probe(sel)) if sel.matches(&env) => {
                self.pending = None;
                let status = env.status();
                self.inbox.push_back(env);
                vec![Action::ToPlugin(Frame::ProbeResult(status))]
            }
            _ => {
                self.inbox.push_back(env);
                Vec::new()
            }
        }
    }

    /// Pushes every buffered envelope into the plugin cache.
    pub fn drain(&mut self) -> Vec<Action> {
        let n = self.inbox.len() as u64;
        self.received_total += n;
        self.drained += n;
        self.inbox.drain(..).map(|e| Action::ToPlugin(Frame::CachePut(e))).collect()
    }

    /// An envelope arrived from a peer (or from this rank to itself).
    pub fn on_envelope(&mut self, env: MessageEnvelope) -> Vec<Action> {
        debug_assert_eq!(env.dest, self.rank);
        match self.phase {
            Phase::Checkpoint { stage: CkptStage::Draining, .. } => {
                self.received_total += 1;
                self.drained += 1;
                vec![Action::ToPlugin(Frame::CachePut(env))]
            }
            _ => self.deliver_or_buffer(env),
        }
    }

    fn oldest_match(&self, sel: &Selector) -> Option<usize> {
        self.inbox.iter().position(|e| sel.matches(e))
    }

    pub fn on_plugin(&mut self, frame: Frame) -> Vec<Action> {
        if let Phase::Checkpoint { epoch, stage } = self.phase {
            // A plugin still joining or replaying its log has not seen the
            // checkpoint yet; its administrative requests are answered.
            let admin = matches!(frame, Frame::Init { .. } | Frame::CommQuery { .. } | Frame::RestoreCounters { .. });
            let parked = matches!(stage, CkptStage::AwaitPrepareAck | CkptStage::AwaitResumed);
            if !(admin && parked) {
                return self.on_plugin_during_checkpoint(epoch, stage, frame);
            }
        }
        if matches!(self.phase, Phase::Halted | Phase::Released) {
            log::debug!("proxy {}: ignoring {:?} after shutdown", self.rank, frame.opcode());
            return Vec::new();
        }
        match frame {
            Frame::Ping => vec![Action::ToPlugin(Frame::Pong)],
            Frame::Init { .. } => {
                vec![Action::ToPlugin(Frame::InitOk { rank: self.rank, world_size: self.world_size })]
            }
            Frame::CommQuery { query, comm } => {
                if comm != 0 {
                    return Self::nack(NackCode::InvalidComm, format!("unknown communicator {comm}"));
                }
                let value = match query {
                    CommQuery::Size => self.world_size,
                    CommQuery::Rank => self.rank.0,
                };
                vec![Action::ToPlugin(Frame::CommQueryResult { value })]
            }
            Frame::RestoreCounters { sent, received, next_seq } => {
                // Peers may already have sent to this rank; only plugin-side
                // activity makes a restore too late.
                let fresh = self.sent_total == 0 && self.received_total == 0;
                if !fresh || next_seq.len() != self.world_size as usize || next_seq.iter().sum::<u64>() != sent {
                    return Self::nack(NackCode::BadState, "counter restore rejected");
                }
                self.sent_total = sent;
                self.received_total = received;
                self.next_seq = next_seq;
                vec![Action::ToPlugin(Frame::RestoreOk)]
            }
            Frame::Send(req) => self.forward_send(req),
            Frame::RecvReq { selector, .. } => match self.oldest_match(&selector) {
                Some(idx) => {
                    let env = self.inbox.remove(idx).expect("index from position");
                    self.received_total += 1;
                    vec![Action::ToPlugin(Frame::Deliver(env))]
                }
                None => {
                    self.pending = Some(Pending::Recv(selector));
                    Vec::new()
                }
            },
            Frame::ProbeReq { selector } => match self.oldest_match(&selector) {
                Some(idx) => vec![Action::ToPlugin(Frame::ProbeResult(self.inbox[idx].status()))],
                None => {
                    self.pending = Some(Pending::Probe(selector));
                    Vec::new()
                }
            },
            Frame::IprobeReq { selector } => {
                let st = self.oldest_match(&selector).map(|i| self.inbox[i].status());
                vec![Action::ToPlugin(Frame::IprobeResult(st))]
            }
            Frame::Finalize => {
                self.finalize_pending = true;
                vec![Action::ToCoordinator(Frame::FinalizeEnter { rank: self.rank })]
            }
            Frame::CkptRequest => vec![Action::ToCoordinator(Frame::CkptNow)],
            // late confirmations from an aborted checkpoint
            Frame::PrepareAck { .. } | Frame::Resumed | Frame::WriteAck { .. } | Frame::WriteFail { .. } => Vec::new(),
            other => {
                log::warn!("proxy {}: unexpected plugin frame {:?}", self.rank, other.opcode());
                Vec::new()
            }
        }
    }

    fn on_plugin_during_checkpoint(&mut self, epoch: u64, stage: CkptStage, frame: Frame) -> Vec<Action> {
        match frame {
            Frame::PrepareAck { epoch: e, .. } if e == epoch && stage == CkptStage::AwaitPrepareAck => {
                self.phase = Phase::Checkpoint { epoch, stage: CkptStage::Draining };
                let mut out = self.drain();
                out.push(Action::ToCoordinator(Frame::PrepareAck { epoch, rank: self.rank }));
                out
            }
            f @ (Frame::WriteAck { .. } | Frame::WriteFail { .. }) => vec![Action::ToCoordinator(f)],
            Frame::Resumed if stage == CkptStage::AwaitResumed => {
                self.phase = Phase::Normal;
                Vec::new()
            }
            other => {
                // the plugin re-issues parked calls after resume
                log::debug!("proxy {}: dropping {:?} during checkpoint {epoch}", self.rank, other.opcode());
                Vec::new()
            }
        }
    }

    pub fn on_coordinator(&mut self, frame: Frame) -> Vec<Action> {
        match frame {
            Frame::CkptPrepare { epoch } => {
                self.phase = Phase::Checkpoint { epoch, stage: CkptStage::AwaitPrepareAck };
                self.pending = None;
                self.finalize_pending = false;
                self.drained = 0;
                vec![Action::ToPlugin(Frame::CkptPrepare { epoch })]
            }
            Frame::CounterReq { round } => {
                vec![Action::ToCoordinator(Frame::CounterReport { round, report: self.report_counters() })]
            }
            f @ Frame::CkptWrite { .. } => vec![Action::ToPlugin(f)],
            Frame::CkptCommit { epoch } => {
                self.set_stage(epoch, CkptStage::Committed);
                vec![Action::ToPlugin(Frame::CkptCommit { epoch })]
            }
            Frame::CkptResume { epoch } => {
                self.set_stage(epoch, CkptStage::AwaitResumed);
                vec![Action::ToPlugin(Frame::CkptResume { epoch })]
            }
            Frame::CkptAbort { epoch, reason } => {
                self.set_stage(epoch, CkptStage::AwaitResumed);
                vec![Action::ToPlugin(Frame::CkptAbort { epoch, reason })]
            }
            Frame::CkptHalt { epoch } => {
                self.phase = Phase::Halted;
                vec![Action::ToPlugin(Frame::CkptHalt { epoch })]
            }
            Frame::FinalizeRelease => {
                let mut out = Vec::new();
                if self.finalize_pending {
                    self.finalize_pending = false;
                    out.push(Action::ToPlugin(Frame::FinalizeAck));
                }
                self.phase = Phase::Released;
                out
            }
            other => {
                log::warn!("proxy {}: unexpected coordinator frame {:?}", self.rank, other.opcode());
                Vec::new()
            }
        }
    }

    fn set_stage(&mut self, epoch: u64, stage: CkptStage) {
        if let Phase::Checkpoint { epoch: e, .. } = self.phase {
            if e == epoch {
                self.phase = Phase::Checkpoint { epoch, stage };
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn inbox(&self) -> &VecDeque<MessageEnvelope> {
        &self.inbox
    }
}
