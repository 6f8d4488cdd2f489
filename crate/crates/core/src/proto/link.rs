use super::Opcode;

/// Direction-specific view of a socket. Each link accepts only a subset of
/// the shared opcode namespace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkKind {
    PluginToProxy,
    ProxyToPlugin,
    Peer,
    ProxyToCoordinator,
    CoordinatorToProxy,
    ControlToCoordinator,
    CoordinatorToControl,
}

impl LinkKind {
    pub fn accepts(self, op: Opcode) -> bool {
        use Opcode::*;
        match self {
            LinkKind::PluginToProxy => matches!(
                op,
                Ping | Init
                    | Send
                    | RecvReq
                    | ProbeReq
                    | IprobeReq
                    | Finalize
                    | CommQuery
                    | RestoreCounters
                    | CkptRequest
                    | PrepareAck
                    | WriteAck
                    | WriteFail
                    | Resumed
            ),
            LinkKind::ProxyToPlugin => matches!(
                op,
                Pong | InitOk
                    | SendAck
                    | Nack
                    | Deliver
                    | ProbeResult
                    | IprobeResult
                    | FinalizeAck
                    | CommQueryResult
                    | RestoreOk
                    | CachePut
                    | CkptPrepare
                    | CkptWrite
                    | CkptCommit
                    | CkptResume
                    | CkptAbort
                    | CkptHalt
            ),
            LinkKind::Peer => matches!(op, PeerHello | Envelope),
            LinkKind::ProxyToCoordinator => matches!(
                op,
                Register | PrepareAck | CounterReport | WriteAck | WriteFail | FinalizeEnter | CkptNow | PluginLost
            ),
            LinkKind::CoordinatorToProxy => matches!(
                op,
                World
                    | Reject
                    | CkptPrepare
                    | CounterReq
                    | CkptWrite
                    | CkptCommit
                    | CkptResume
                    | CkptAbort
                    | CkptHalt
                    | FinalizeRelease
            ),
            LinkKind::ControlToCoordinator => matches!(op, Ping | CkptNow | Status),
            LinkKind::CoordinatorToControl => matches!(op, Pong | CkptDone | CkptAborted | StatusReply),
        }
    }
}
