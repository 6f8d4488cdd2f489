use std::collections::BTreeSet;

use crate::proto::{CounterReport, RankId};

/// World-wide message totals of one complete round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Totals {
    pub sent: u64,
    pub received: u64,
}

pub fn totals(reports: &[CounterReport]) -> Totals {
    reports.iter().fold(Totals::default(), |t, r| Totals { sent: t.sent + r.sent, received: t.received + r.received })
}

/// Termination predicate: the current round balances and repeats the
/// previous complete round exactly.
pub fn is_quiescent(previous: Option<Totals>, current: Totals) -> bool {
    current.sent == current.received && previous == Some(current)
}

/// Source of one complete counter round.
pub trait CounterSource {
    /// Returns one report per rank for `round`.
    fn collect(&mut self, round: u64) -> Result<Vec<CounterReport>, DrainError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuiescenceProof {
    /// Rounds collected, including the confirming one.
    pub rounds: u32,
    /// Totals of the first round.
    pub first: Totals,
    /// The witnessing reports.
    pub reports: Vec<CounterReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DrainError {
    #[error("no quiescence after {rounds} rounds")]
    Stuck { rounds: u32, last: Vec<CounterReport> },
    #[error("incomplete round {round}: {reason}")]
    Incomplete { round: u64, reason: String },
    #[error("{0}")]
    Collect(String),
}

pub const DEFAULT_MAX_ROUNDS: u32 = 1000;

/// Polls `source` until [`is_quiescent`] holds for `world_size` ranks.
pub fn drain_loop(
    source: &mut impl CounterSource,
    world_size: u32,
    max_rounds: u32,
) -> Result<QuiescenceProof, DrainError> {
    let mut previous = None;
    let mut first = None;
    let mut last = Vec::new();
    for n in 1..=max_rounds {
        let round = u64::from(n);
        let reports = source.collect(round)?;
        let ranks: BTreeSet<RankId> = reports.iter().map(|r| r.rank).collect();
        if reports.len() != world_size as usize
            || ranks.len() != reports.len()
            || ranks.iter().any(|r| r.0 >= world_size)
        {
            return Err(DrainError::Incomplete {
                round,
                reason: format!("{} reports for {world_size} ranks", reports.len()),
            });
        }
        let current = totals(&reports);
        first.get_or_insert(current);
        ::log::debug!("drain round {round}: sent {} received {}", current.sent, current.received);
        if is_quiescent(previous, current) {
            return Ok(QuiescenceProof { rounds: n, first: first.unwrap_or_default(), reports });
        }
        previous = Some(current);
        last = reports;
    }
    Err(DrainError::Stuck { rounds: max_rounds, last })
}
