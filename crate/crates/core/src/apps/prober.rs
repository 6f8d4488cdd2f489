use std::io::Write;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{bytes_to_i32s, emit, i32s_to_bytes, App};
use crate::plugin::{get_count, Context, Count, PluginError};
use crate::proto::{Datatype, RankId, SourceSelector, Status, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Stage {
    Rank,
    Size,
    Send,
    Probe,
    Poll,
    Recv,
    Report,
    Finalize,
}

/// Rank 1 sends messages of varying length; rank 0 discovers each with
/// probe or an iprobe polling loop and sizes its buffer from the status.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prober {
    messages: u32,
    done: u32,
    rank: u32,
    size: u32,
    /// (source, tag, element count) of the probed message.
    probed: Option<(u32, i32, u32)>,
    stage: Stage,
}

/// Element count of message `i`.
pub fn message_len(i: u32) -> u32 {
    (i * 7) % 13 + 1
}

impl Prober {
    pub fn new(messages: u32) -> Self {
        Prober { messages, done: 0, rank: 0, size: 0, probed: None, stage: Stage::Rank }
    }

    pub fn from_args(args: &[String]) -> Result<Self, String> {
        match args {
            [] => Ok(Self::new(6)),
            [n] => n.parse().map(Self::new).map_err(|_| "prober [MESSAGES]".to_string()),
            _ => Err("prober [MESSAGES]".into()),
        }
    }

    fn note(&mut self, st: Status) -> Result<(), PluginError> {
        let Count::Exact(n) = get_count(&st, Datatype::Int32) else {
            return Err(PluginError::Protocol("probed message is not a whole number of ints".into()));
        };
        self.probed = Some((st.source.0, st.tag.0, n as u32));
        self.stage = Stage::Recv;
        Ok(())
    }
}

impl App for Prober {
    fn step(&mut self, ctx: &mut Context, out: &mut dyn Write) -> Result<bool, PluginError> {
        let world = ctx.comm_world();
        let any = (SourceSelector::Any, Tag::ANY);
        match self.stage {
            Stage::Rank => {
                self.rank = ctx.comm_rank(world)?.0;
                self.stage = Stage::Size;
            }
            Stage::Size => {
                self.size = ctx.comm_size(world)?;
                if self.size < 2 {
                    return Err(PluginError::Usage("prober needs at least two ranks"));
                }
                self.stage = match self.rank {
                    _ if self.messages == 0 => Stage::Report,
                    0 => Stage::Probe,
                    1 => Stage::Send,
                    _ => Stage::Report,
                };
            }
            Stage::Send => {
                let i = self.done;
                let data: Vec<i32> = (0..message_len(i)).map(|j| (i * 100 + j) as i32).collect();
                ctx.send(
                    &i32s_to_bytes(&data),
                    data.len() as u32,
                    Datatype::Int32,
                    RankId(0),
                    Tag((i % 3) as i32),
                    world,
                )?;
                self.done += 1;
                if self.done == self.messages {
                    self.stage = Stage::Report;
                }
            }
            Stage::Probe => {
                let st = ctx.probe(any.0, any.1, world)?;
                self.note(st)?;
            }
            Stage::Poll => match ctx.iprobe(any.0, any.1, world)? {
                Some(st) => self.note(st)?,
                None => thread::sleep(Duration::from_millis(1)),
            },
            Stage::Recv => {
                let (src, tag, n) = self.probed.expect("probed before receive");
                let (payload, _) = ctx.recv(n, Datatype::Int32, SourceSelector::Rank(RankId(src)), Tag(tag), world)?;
                let sum: i64 = bytes_to_i32s(&payload).iter().map(|&x| i64::from(x)).sum();
                emit(out, format_args!("received {n} ints with tag {tag} from rank {src}, sum {sum}"));
                self.probed = None;
                self.done += 1;
                self.stage = if self.done == self.messages { Stage::Report } else { Stage::Poll };
            }
            Stage::Report => {
                emit(out, format_args!("rank {} of {} handled {} messages", self.rank, self.size, self.done));
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
