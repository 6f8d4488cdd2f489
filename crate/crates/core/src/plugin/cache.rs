use std::collections::VecDeque;

use crate::proto::{MessageEnvelope, Selector};

/// Drained messages held on the plugin side, in arrival order.
///
/// Matching always picks the oldest arrival among matching entries, which
/// keeps `(source, tag)` channels in send order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReceiveCache {
    entries: VecDeque<MessageEnvelope>,
}

impl ReceiveCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = MessageEnvelope>) -> Self {
        ReceiveCache { entries: entries.into_iter().collect() }
    }

    pub fn push(&mut self, env: MessageEnvelope) {
        self.entries.push_back(env);
    }

    pub fn peek(&self, sel: &Selector) -> Option<&MessageEnvelope> {
        self.entries.iter().find(|e| sel.matches(e))
    }

    pub fn take(&mut self, sel: &Selector) -> Option<MessageEnvelope> {
        let idx = self.entries.iter().position(|e| sel.matches(e))?;
        self.entries.remove(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MessageEnvelope> {
        self.entries.iter()
    }

    pub fn to_vec(&self) -> Vec<MessageEnvelope> {
        self.entries.iter().cloned().collect()
    }
}
