use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{emit, App};
use crate::plugin::{Context, PluginError};
use crate::proto::{Datatype, SourceSelector, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Stage {
    Rank,
    Send,
    Probe,
    Recv,
    Finalize,
}

/// Every rank sends one message to itself and reads it back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfSend {
    rank: u32,
    bytes: u64,
    stage: Stage,
}

impl SelfSend {
    pub fn new() -> Self {
        SelfSend { rank: 0, bytes: 0, stage: Stage::Rank }
    }

    pub fn from_args(args: &[String]) -> Result<Self, String> {
        if args.is_empty() {
            Ok(Self::new())
        } else {
            Err("selfsend".into())
        }
    }
}

impl Default for SelfSend {
    fn default() -> Self {
        Self::new()
    }
}

impl App for SelfSend {
    fn step(&mut self, ctx: &mut Context, out: &mut dyn Write) -> Result<bool, PluginError> {
        let world = ctx.comm_world();
        let me = ctx.rank();
        let text = format!("hello from rank {me}");
        match self.stage {
            Stage::Rank => {
                self.rank = ctx.comm_rank(world)?.0;
                self.stage = Stage::Send;
            }
            Stage::Send => {
                ctx.send(text.as_bytes(), text.len() as u32, Datatype::Char, me, Tag(1), world)?;
                self.stage = Stage::Probe;
            }
            Stage::Probe => {
                self.bytes = ctx.probe(SourceSelector::Rank(me), Tag(1), world)?.payload_bytes;
                self.stage = Stage::Recv;
            }
            Stage::Recv => {
                let (payload, st) =
                    ctx.recv(self.bytes as u32, Datatype::Char, SourceSelector::Rank(me), Tag(1), world)?;
                emit(
                    out,
                    format_args!(
                        "rank {} got {:?} from rank {}",
                        self.rank,
                        String::from_utf8_lossy(&payload),
                        st.source
                    ),
                );
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
