use std::collections::{BTreeMap, BTreeSet};

use crate::proto::{RankId, WorldState};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("{op} not allowed in state {state:?}")]
    WrongState { op: &'static str, state: WorldState },
    #[error("rank {0} already registered")]
    DuplicateRank(RankId),
    #[error("rank {rank} outside world of {expected}")]
    RankOutOfRange { rank: RankId, expected: u32 },
    #[error("rank {0} entered finalize twice")]
    DoubleFinalize(RankId),
    #[error("rank {0} is not a member")]
    NotMember(RankId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Member {
    pub endpoint: String,
    pub live: bool,
}

/// Rank registry and lifecycle of one world.
///
/// Legal transitions: FORMING→RUNNING, RESTARTING→RUNNING,
/// RUNNING→DRAINING→WRITING→RUNNING, RUNNING→DONE; a checkpoint may also be
/// aborted (DRAINING|WRITING→RUNNING) or end the run (WRITING→DONE).
#[derive(Debug, Clone)]
pub struct WorldRegistry {
    expected: u32,
    members: BTreeMap<RankId, Member>,
    state: WorldState,
    finalized: BTreeSet<RankId>,
    epoch: u64,
}

impl WorldRegistry {
    pub fn new(expected: u32) -> Self {
        WorldRegistry {
            expected,
            members: BTreeMap::new(),
            state: WorldState::Forming,
            finalized: BTreeSet::new(),
            epoch: 0,
        }
    }

    /// A world being rebuilt from the checkpoint of `epoch`.
    pub fn restarting(expected: u32, epoch: u64) -> Self {
        WorldRegistry { state: WorldState::Restarting, epoch, ..Self::new(expected) }
    }

    pub fn state(&self) -> WorldState {
        self.state
    }

    pub fn expected(&self) -> u32 {
        self.expected
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn members(&self) -> &BTreeMap<RankId, Member> {
        &self.members
    }

    fn require(&self, op: &'static str, allowed: &[WorldState]) -> Result<(), RegistryError> {
        if allowed.contains(&self.state) {
            Ok(())
        } else {
            Err(RegistryError::WrongState { op, state: self.state })
        }
    }

    /// Records a member. Returns the endpoint table once every expected rank
    /// is present.
    pub fn register(&mut self, rank: RankId, endpoint: String) -> Result<Option<Vec<String>>, RegistryError> {
        self.require("register", &[WorldState::Forming, WorldState::Restarting])?;
        if rank.0 >= self.expected {
            return Err(RegistryError::RankOutOfRange { rank, expected: self.expected });
        }
        if self.members.contains_key(&rank) {
            return Err(RegistryError::DuplicateRank(rank));
        }
        self.members.insert(rank, Member { endpoint, live: true });
        if self.members.len() as u32 == self.expected {
            self.state = WorldState::Running;
            return Ok(Some(self.members.values().map(|m| m.endpoint.clone()).collect()));
        }
        Ok(None)
    }

    /// RUNNING→DRAINING. Pending finalize entries are cancelled: the plugins
    /// re-issue their parked calls after the checkpoint.
    pub fn begin_checkpoint(&mut self) -> Result<u64, RegistryError> {
        self.require("begin_checkpoint", &[WorldState::Running])?;
        self.epoch += 1;
        self.finalized.clear();
        self.state = WorldState::Draining;
        Ok(self.epoch)
    }

    pub fn begin_write(&mut self) -> Result<(), RegistryError> {
        self.require("begin_write", &[WorldState::Draining])?;
        self.state = WorldState::Writing;
        Ok(())
    }

    pub fn complete_checkpoint(&mut self) -> Result<(), RegistryError> {
        self.require("complete_checkpoint", &[WorldState::Writing])?;
        self.state = WorldState::Running;
        Ok(())
    }

    /// WRITING→DONE: the world stops right after a committed checkpoint.
    pub fn halt_after_checkpoint(&mut self) -> Result<(), RegistryError> {
        self.require("halt", &[WorldState::Writing])?;
        self.state = WorldState::Done;
        Ok(())
    }

    pub fn abort_checkpoint(&mut self) -> Result<(), RegistryError> {
        self.require("abort_checkpoint", &[WorldState::Draining, WorldState::Writing])?;
        self.state = WorldState::Running;
        Ok(())
    }

    /// Returns `true` when this entry releases the barrier.
    pub fn finalize_enter(&mut self, rank: RankId) -> Result<bool, RegistryError> {
        self.require("finalize", &[WorldState::Running])?;
        if !self.members.contains_key(&rank) {
            return Err(RegistryError::NotMember(rank));
        }
        if !self.finalized.insert(rank) {
            return Err(RegistryError::DoubleFinalize(rank));
        }
        if self.finalized.len() as u32 == self.expected {
            self.state = WorldState::Done;
            return Ok(true);
        }
        Ok(false)
    }

    pub fn mark_lost(&mut self, rank: RankId) {
        if let Some(m) = self.members.get_mut(&rank) {
            m.live = false;
        }
    }
}
