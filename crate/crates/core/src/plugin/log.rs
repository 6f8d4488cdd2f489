use crate::proto::{CommQuery, RankId};

/// One administrative call and the answer it produced. The log never holds
/// message traffic; replaying it against a fresh proxy must yield the same
/// answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayLogEntry {
    /// World formation: the proxy's answer to `INIT`.
    Init { rank: RankId, world_size: u32 },
    /// A configuration query against a virtual communicator handle.
    CommQuery { query: CommQuery, comm: u32, result: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ReplayKind {
    Init = 0,
    CommQuery = 1,
}

impl ReplayLogEntry {
    pub fn kind(&self) -> ReplayKind {
        match self {
            ReplayLogEntry::Init { .. } => ReplayKind::Init,
            ReplayLogEntry::CommQuery { .. } => ReplayKind::CommQuery,
        }
    }
}

/// Ordered administrative log with duplicate suppression for pure queries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayLog {
    entries: Vec<ReplayLogEntry>,
}

impl ReplayLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<ReplayLogEntry>) -> Self {
        ReplayLog { entries }
    }

    pub fn entries(&self) -> &[ReplayLogEntry] {
        &self.entries
    }

    pub fn push(&mut self, entry: ReplayLogEntry) {
        self.entries.push(entry);
    }

    /// Records a query once; stable answers need only one witness.
    pub fn record_query(&mut self, query: CommQuery, comm: u32, result: u32) {
        let seen = self
            .entries
            .iter()
            .any(|e| matches!(e, ReplayLogEntry::CommQuery { query: q, comm: c, .. } if *q == query && *c == comm));
        if !seen {
            self.entries.push(ReplayLogEntry::CommQuery { query, comm, result });
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
