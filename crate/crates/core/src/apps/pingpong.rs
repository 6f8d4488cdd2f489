use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{bytes_to_i32s, emit, i32s_to_bytes, App};
use crate::plugin::{get_count, Context, Count, PluginError};
use crate::proto::{Datatype, RankId, SourceSelector, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Stage {
    Rank,
    Size,
    Exchange,
    Report,
    Finalize,
}

/// Two ranks pass an incrementing counter back and forth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PingPong {
    round_trips: u32,
    count: i32,
    rank: u32,
    size: u32,
    stage: Stage,
}

impl PingPong {
    pub fn new(round_trips: u32) -> Self {
        PingPong { round_trips, count: 0, rank: 0, size: 0, stage: Stage::Rank }
    }

    pub fn from_args(args: &[String]) -> Result<Self, String> {
        match args {
            [] => Ok(Self::new(10)),
            [n] => n.parse().map(Self::new).map_err(|_| "pingpong [ROUND_TRIPS]".to_string()),
            _ => Err("pingpong [ROUND_TRIPS]".into()),
        }
    }
}

impl App for PingPong {
    fn step(&mut self, ctx: &mut Context, out: &mut dyn Write) -> Result<bool, PluginError> {
        let world = ctx.comm_world();
        match self.stage {
            Stage::Rank => {
                self.rank = ctx.comm_rank(world)?.0;
                self.stage = Stage::Size;
            }
            Stage::Size => {
                self.size = ctx.comm_size(world)?;
                if self.size != 2 {
                    return Err(PluginError::Usage("pingpong needs exactly two ranks"));
                }
                self.stage = Stage::Exchange;
            }
            Stage::Exchange => {
                if self.count >= 2 * self.round_trips as i32 {
                    self.stage = Stage::Report;
                    return Ok(true);
                }
                let partner = 1 - self.rank;
                if self.rank == self.count as u32 % 2 {
                    self.count += 1;
                    let payload = i32s_to_bytes(&[self.count]);
                    ctx.send(&payload, 1, Datatype::Int32, RankId(partner), Tag(0), world)?;
                    emit(
                        out,
                        format_args!("{} sent and incremented ping_pong_count {} to {partner}", self.rank, self.count),
                    );
                } else {
                    let (payload, status) =
                        ctx.recv(1, Datatype::Int32, SourceSelector::Rank(RankId(partner)), Tag(0), world)?;
                    if get_count(&status, Datatype::Int32) != Count::Exact(1) {
                        return Err(PluginError::Protocol("ping_pong_count message of wrong size".into()));
                    }
                    self.count = bytes_to_i32s(&payload)[0];
                    emit(out, format_args!("{} received ping_pong_count {} from {partner}", self.rank, self.count));
                }
            }
            Stage::Report => {
                emit(out, format_args!("rank {} of {} done after {} messages", self.rank, self.size, self.count));
                self.stage = Stage::Finalize;
            }
            Stage::Finalize => {
                ctx.finalize()?;
                return Ok(false);
            }
        }
        Ok(true)
    }
}
