use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{bytes_to_i32s, emit, i32s_to_bytes, App};
use crate::plugin::{Context, PluginError};
use crate::proto::{Datatype, RankId, SourceSelector, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Stage {
    Rank,
    Size,
    Send,
    Recv,
    Report,
    Finalize,
}

/// A token travels rank 0 → 1 → … → n-1 → 0, once per lap, gaining one
/// per hop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ring {
    laps: u32,
    lap: u32,
    token: i32,
    rank: u32,
    size: u32,
    stage: Stage,
}

impl Ring {
    pub fn new(laps: u32) -> Self {
        Ring { laps, lap: 0, token: 0, rank: 0, size: 0, stage: Stage::Rank }
    }

    pub fn from_args(args: &[String]) -> Result<Self, String> {
        match args {
            [] => Ok(Self::new(10)),
            [n] => n.parse().map(Self::new).map_err(|_| "ring [LAPS]".to_string()),
            _ => Err("ring [LAPS]".into()),
        }
    }

    fn after_lap(&mut self) {
        self.lap += 1;
        self.stage = if self.lap == self.laps {
            Stage::Report
        } else if self.rank == 0 {
            Stage::Send
        } else {
            Stage::Recv
        };
    }
}

impl App for Ring {
    fn step(&mut self, ctx: &mut Context, out: &mut dyn Write) -> Result<bool, PluginError> {
        let world = ctx.comm_world();
        match self.stage {
            Stage::Rank => {
                self.rank = ctx.comm_rank(world)?.0;
                self.stage = Stage::Size;
            }
            Stage::Size => {
                self.size = ctx.comm_size(world)?;
                self.stage = match (self.laps, self.rank) {
                    (0, _) => Stage::Report,
                    (_, 0) => Stage::Send,
                    _ => Stage::Recv,
                };
            }
            Stage::Send => {
                let next = (self.rank + 1) % self.size;
                ctx.send(&i32s_to_bytes(&[self.token + 1]), 1, Datatype::Int32, RankId(next), Tag(0), world)?;
                if self.rank == 0 {
                    self.stage = Stage::Recv;
                } else {
                    self.after_lap();
                }
            }
            Stage::Recv => {
                let prev = (self.rank + self.size - 1) % self.size;
                let (payload, _) = ctx.recv(1, Datatype::Int32, SourceSelector::Rank(RankId(prev)), Tag(0), world)?;
                self.token = bytes_to_i32s(&payload)[0];
                emit(
                    out,
                    format_args!(
                        "rank {} received token {} from rank {prev} in lap {}",
                        self.rank,
                        self.token,
                        self.lap + 1
                    ),
                );
                if self.rank == 0 {
                    self.after_lap();
                } else {
                    self.stage = Stage::Send;
                }
            }
            Stage::Report => {
                emit(out, format_args!("rank {} of {} completed {} laps", self.rank, self.size, self.lap));
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
