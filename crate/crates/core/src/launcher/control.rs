use std::io;
use std::net::{SocketAddr, TcpStream};
use std::path::PathBuf;

use crate::proto::{read_frame_on, write_frame, DrainSummary, Frame, FrameIoError, LinkKind, WorldState};

#[derive(Debug, thiserror::Error)]
pub enum ControlError {
    #[error("cannot reach coordinator at {addr}: {source}")]
    Connect { addr: SocketAddr, source: io::Error },
    #[error(transparent)]
    Frame(#[from] FrameIoError),
    #[error("coordinator closed the control link")]
    Closed,
    #[error("unexpected reply {0}")]
    Unexpected(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CkptOutcome {
    Done { epoch: u64, manifest: PathBuf, drain: DrainSummary },
    Aborted(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorldStatus {
    pub state: WorldState,
    pub world_size: u32,
    pub members: u32,
    pub epoch: u64,
}

fn request(addr: SocketAddr, frame: &Frame) -> Result<Frame, ControlError> {
    let mut s = TcpStream::connect(addr).map_err(|source| ControlError::Connect { addr, source })?;
    write_frame(&mut s, frame)?;
    read_frame_on(&mut s, LinkKind::CoordinatorToControl)?.ok_or(ControlError::Closed)
}

/// Asks the coordinator for a checkpoint and waits for its outcome.
pub fn checkpoint_now(addr: SocketAddr) -> Result<CkptOutcome, ControlError> {
    match request(addr, &Frame::CkptNow)? {
        Frame::CkptDone { epoch, drain, manifest } => {
            Ok(CkptOutcome::Done { epoch, manifest: PathBuf::from(manifest), drain })
        }
        Frame::CkptAborted { reason } => Ok(CkptOutcome::Aborted(reason)),
        other => Err(ControlError::Unexpected(format!("{:?}", other.opcode()))),
    }
}

pub fn status(addr: SocketAddr) -> Result<WorldStatus, ControlError> {
    match request(addr, &Frame::Status)? {
        Frame::StatusReply { state, world_size, members, epoch } => {
            Ok(WorldStatus { state, world_size, members, epoch })
        }
        other => Err(ControlError::Unexpected(format!("{:?}", other.opcode()))),
    }
}
