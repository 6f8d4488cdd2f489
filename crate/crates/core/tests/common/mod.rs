//! Helpers shared by the integration tests: CLI wrappers, a randomized
//! traffic application with an audit over its checkpoint images, and
//! random generators for frames and images.

#![allow(dead_code)]

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use pmpcr::apps::{drive, App};
use pmpcr::ckpt::{read_image, CheckpointImage, Counters, Manifest};
use pmpcr::launcher::local::{LocalOutcome, LocalWorld};
use pmpcr::plugin::{Context, PluginError, ReplayLogEntry};
use pmpcr::proto::*;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------- CLI

pub fn pmpcr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmpcr"))
}

pub fn run_cli(args: &[&str]) -> Output {
    pmpcr().args(args).output().expect("spawn pmpcr")
}

pub fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Per-rank captured stdout written by `--output-dir`; a missing file reads
/// as empty.
pub fn read_outputs(dir: &Path, world_size: u32) -> Vec<String> {
    (0..world_size).map(|r| fs::read_to_string(dir.join(format!("rank{r}.out"))).unwrap_or_default()).collect()
}

/// Manifests present in `dir`, ordered by epoch.
pub fn manifests_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<(u64, PathBuf)> = fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter_map(|e| {
                    let name = e.file_name().to_string_lossy().into_owned();
                    name.strip_prefix("manifest.e").and_then(|n| n.parse().ok()).map(|n| (n, e.path()))
                })
                .collect()
        })
        .unwrap_or_default();
    v.sort();
    v.into_iter().map(|(_, p)| p).collect()
}

/// Processes (other than ours) whose command line mentions `needle`.
pub fn processes_mentioning(needle: &str) -> Vec<u32> {
    let me = std::process::id();
    let mut found = Vec::new();
    for entry in fs::read_dir("/proc").into_iter().flatten().flatten() {
        let Ok(pid) = entry.file_name().to_string_lossy().parse::<u32>() else { continue };
        if pid == me {
            continue;
        }
        let cmd = fs::read(entry.path().join("cmdline")).unwrap_or_default();
        let env = fs::read(entry.path().join("environ")).unwrap_or_default();
        let hay = [cmd, env].concat();
        if String::from_utf8_lossy(&hay).contains(needle) {
            found.push(pid);
        }
    }
    found
}

// ---------------------------------------------------------------- traffic app

/// Tags used by generated traffic.
pub const TAGS: usize = 8;
/// Largest message, in Int32 elements.
pub const MAX_LEN: u32 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Send {
        dest: u32,
        tag: i32,
        len: u32,
    },
    /// `None` means wildcard.
    Recv {
        src: Option<u32>,
        tag: Option<i32>,
    },
    Compute {
        micros: u64,
    },
    Finalize,
}

impl Op {
    pub fn is_call(&self) -> bool {
        !matches!(self, Op::Compute { .. })
    }
}

/// Executes a fixed plan. Payloads carry their index on the
/// `(source, dest, tag)` stream so the receiver can check ordering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Traffic {
    pub rank: u32,
    pub plan: Vec<Op>,
    pub next: usize,
    pub sent_to: Vec<Vec<u64>>,
    pub consumed: Vec<Vec<u64>>,
    /// First ordering violation seen, as `(source, tag, expected, got)`.
    pub disorder: Option<(u32, i32, u64, u64)>,
}

impl Traffic {
    pub fn new(rank: u32, world_size: u32, plan: Vec<Op>) -> Self {
        let grid = vec![vec![0; TAGS]; world_size as usize];
        Traffic { rank, plan, next: 0, sent_to: grid.clone(), consumed: grid, disorder: None }
    }

    pub fn consumed_from(&self, src: usize) -> u64 {
        self.consumed[src].iter().sum()
    }
}

fn payload_of(index: u64, sender: u32, len: u32) -> Vec<u8> {
    let mut v = vec![index as i32];
    v.resize(len as usize, sender as i32);
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

impl App for Traffic {
    fn step(&mut self, ctx: &mut Context, _out: &mut dyn io::Write) -> Result<bool, PluginError> {
        let Some(op) = self.plan.get(self.next).cloned() else { return Ok(false) };
        let world = ctx.comm_world();
        match op {
            Op::Send { dest, tag, len } => {
                let index = self.sent_to[dest as usize][tag as usize];
                let payload = payload_of(index, self.rank, len);
                ctx.send(&payload, len, Datatype::Int32, RankId(dest), Tag(tag), world)?;
                self.sent_to[dest as usize][tag as usize] += 1;
            }
            Op::Recv { src, tag } => {
                let src = src.map_or(SourceSelector::Any, |s| SourceSelector::Rank(RankId(s)));
                let tag = tag.map_or(Tag::ANY, Tag);
                let (payload, st) = ctx.recv(MAX_LEN, Datatype::Int32, src, tag, world)?;
                let got = i32::from_le_bytes(payload[..4].try_into().unwrap()) as u64;
                let slot = &mut self.consumed[st.source.index()][st.tag.0 as usize];
                if got != *slot && self.disorder.is_none() {
                    self.disorder = Some((st.source.0, st.tag.0, *slot, got));
                }
                *slot += 1;
            }
            Op::Compute { micros } => thread::sleep(Duration::from_micros(micros)),
            Op::Finalize => ctx.finalize()?,
        }
        self.next += 1;
        Ok(self.next < self.plan.len())
    }
}

/// Random all-to-all plans: every rank sends first, then receives exactly
/// what is addressed to it with wildcard receives.
pub fn traffic_plans(rng: &mut StdRng, world_size: u32) -> Vec<Vec<Op>> {
    let n = world_size as usize;
    let mut plans = vec![Vec::new(); n];
    let mut incoming = vec![0usize; n];
    for plan in plans.iter_mut() {
        for _ in 0..rng.gen_range(4..=20) {
            if rng.gen_bool(0.25) {
                plan.push(Op::Compute { micros: rng.gen_range(0..800) });
            }
            let dest = rng.gen_range(0..world_size);
            incoming[dest as usize] += 1;
            plan.push(Op::Send { dest, tag: rng.gen_range(0..TAGS as i32), len: rng.gen_range(1..=MAX_LEN) });
        }
    }
    for (plan, count) in plans.iter_mut().zip(&incoming) {
        for _ in 0..*count {
            if rng.gen_bool(0.2) {
                plan.push(Op::Compute { micros: rng.gen_range(0..800) });
            }
            plan.push(Op::Recv { src: None, tag: None });
        }
        plan.push(Op::Finalize);
    }
    plans
}

/// Two ranks: rank 0 streams messages on several tags to rank 1, which
/// receives them with explicit `(source, tag)` selectors in random order.
pub fn fifo_plans(rng: &mut StdRng, messages: usize) -> Vec<Vec<Op>> {
    let mut sender = Vec::new();
    let mut per_tag = vec![0usize; TAGS];
    for _ in 0..messages {
        let tag = if rng.gen_bool(0.5) { 7 } else { rng.gen_range(1..5) };
        per_tag[tag as usize] += 1;
        if rng.gen_bool(0.2) {
            sender.push(Op::Compute { micros: rng.gen_range(0..500) });
        }
        sender.push(Op::Send { dest: 1, tag, len: rng.gen_range(1..=MAX_LEN) });
    }
    sender.push(Op::Finalize);
    let mut pending: Vec<i32> = per_tag.iter().enumerate().flat_map(|(t, c)| vec![t as i32; *c]).collect();
    pending.shuffle(rng);
    let mut receiver = Vec::new();
    for tag in pending {
        if rng.gen_bool(0.2) {
            receiver.push(Op::Compute { micros: rng.gen_range(0..500) });
        }
        receiver.push(Op::Recv { src: Some(0), tag: Some(tag) });
    }
    receiver.push(Op::Finalize);
    vec![sender, receiver]
}

/// Number of API calls rank 0 makes under `plan`, not counting init.
pub fn calls_in(plan: &[Op]) -> u64 {
    plan.iter().filter(|op| op.is_call()).count() as u64
}

pub type RankResult = Result<Traffic, PluginError>;

/// Runs `plans` on an in-process world built by `world`.
pub fn run_traffic(world: LocalWorld, plans: Arc<Vec<Vec<Op>>>) -> LocalOutcome<RankResult> {
    let ws = plans.len() as u32;
    world.run(move |rank, env| drive(&env, Traffic::new(rank.0, ws, plans[rank.index()].clone()), &mut io::sink()))
}

/// Message accounting over one committed cut.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CutAudit {
    pub sent: u64,
    pub consumed: u64,
    pub cached: u64,
    /// Sent on a channel but neither consumed nor cached at the receiver.
    pub in_flight: i64,
    /// Channels where consumed plus cached exceeds sent.
    pub duplicated_channels: usize,
}

/// Reads every image of `manifest` and checks, channel by channel, that
/// each message sent before the cut is either consumed by the receiver's
/// saved state or held in its cache.
pub fn audit_cut(manifest: &Path) -> Result<CutAudit, String> {
    let (_, m) = Manifest::resolve(manifest).map_err(|e| e.to_string())?;
    let images: Vec<CheckpointImage> =
        m.images.iter().map(|p| read_image(p).map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    let states: Vec<Traffic> = images
        .iter()
        .map(|img| serde_json::from_slice(&img.app_blob).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let mut a = CutAudit::default();
    for (s, simg) in images.iter().enumerate() {
        for (d, dimg) in images.iter().enumerate() {
            let sent = simg.counters.per_dest_sent[d];
            let consumed = states[d].consumed_from(s);
            let cached = dimg.cache.iter().filter(|e| e.source.index() == s).count() as u64;
            a.sent += sent;
            a.consumed += consumed;
            a.cached += cached;
            let gap = sent as i64 - consumed as i64 - cached as i64;
            if gap < 0 {
                a.duplicated_channels += 1;
            }
            a.in_flight += gap;
        }
    }
    Ok(a)
}

// ---------------------------------------------------------------- generators

fn gen_string(rng: &mut StdRng, max: usize) -> String {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| *b"abcxyz0123456789:._ -/".choose(rng).unwrap() as char).collect()
}

fn gen_rank(rng: &mut StdRng) -> RankId {
    RankId(rng.gen_range(0..64))
}

fn gen_concrete_tag(rng: &mut StdRng) -> Tag {
    Tag(if rng.gen_bool(0.1) { i32::MAX } else { rng.gen_range(0..100) })
}

fn gen_selector(rng: &mut StdRng) -> Selector {
    let source = if rng.gen_bool(0.3) { SourceSelector::Any } else { SourceSelector::Rank(gen_rank(rng)) };
    let tag = if rng.gen_bool(0.3) { Tag::ANY } else { gen_concrete_tag(rng) };
    Selector::new(source, tag)
}

fn gen_datatype(rng: &mut StdRng) -> Datatype {
    *Datatype::ALL.choose(rng).unwrap()
}

pub fn gen_envelope(rng: &mut StdRng, dest: Option<RankId>) -> MessageEnvelope {
    let datatype = gen_datatype(rng);
    let count = rng.gen_range(0..24u32);
    let payload = (0..count as usize * datatype.width()).map(|_| rng.gen()).collect();
    MessageEnvelope {
        source: gen_rank(rng),
        dest: dest.unwrap_or_else(|| gen_rank(rng)),
        tag: gen_concrete_tag(rng),
        datatype,
        count,
        payload,
        seq: rng.gen_range(0..1 << 40),
    }
}

fn gen_status(rng: &mut StdRng) -> Status {
    Status {
        source: gen_rank(rng),
        tag: gen_concrete_tag(rng),
        payload_bytes: rng.gen_range(0..1 << 20),
        datatype: gen_datatype(rng),
    }
}

fn gen_report(rng: &mut StdRng) -> CounterReport {
    CounterReport { rank: gen_rank(rng), sent: rng.gen(), received: rng.gen() }
}

/// A random frame with the given opcode.
pub fn gen_frame(rng: &mut StdRng, op: Opcode) -> Frame {
    let v = PROTOCOL_VERSION;
    match op {
        Opcode::Ping => Frame::Ping,
        Opcode::Pong => Frame::Pong,
        Opcode::Init => Frame::Init { version: v },
        Opcode::InitOk => {
            let world_size = rng.gen_range(1..64);
            Frame::InitOk { rank: RankId(rng.gen_range(0..world_size)), world_size }
        }
        Opcode::Send => {
            let datatype = gen_datatype(rng);
            let count = rng.gen_range(0..24u32);
            Frame::Send(SendRequest {
                dest: gen_rank(rng),
                tag: gen_concrete_tag(rng),
                datatype,
                count,
                payload: (0..count as usize * datatype.width()).map(|_| rng.gen()).collect(),
            })
        }
        Opcode::SendAck => Frame::SendAck { seq: rng.gen() },
        Opcode::Nack => Frame::Nack {
            code: *[
                NackCode::InvalidRank,
                NackCode::InvalidTag,
                NackCode::SizeMismatch,
                NackCode::InvalidComm,
                NackCode::BadState,
            ]
            .choose(rng)
            .unwrap(),
            detail: gen_string(rng, 30),
        },
        Opcode::RecvReq => Frame::RecvReq { selector: gen_selector(rng), capacity: rng.gen_range(0..1 << 30) },
        Opcode::Deliver => Frame::Deliver(gen_envelope(rng, None)),
        Opcode::ProbeReq => Frame::ProbeReq { selector: gen_selector(rng) },
        Opcode::ProbeResult => Frame::ProbeResult(gen_status(rng)),
        Opcode::IprobeReq => Frame::IprobeReq { selector: gen_selector(rng) },
        Opcode::IprobeResult => Frame::IprobeResult(rng.gen_bool(0.5).then(|| gen_status(rng))),
        Opcode::Finalize => Frame::Finalize,
        Opcode::FinalizeAck => Frame::FinalizeAck,
        Opcode::CommQuery => Frame::CommQuery {
            query: if rng.gen() { CommQuery::Size } else { CommQuery::Rank },
            comm: rng.gen_range(0..4),
        },
        Opcode::CommQueryResult => Frame::CommQueryResult { value: rng.gen() },
        Opcode::RestoreCounters => {
            let next_seq: Vec<u64> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(0..1000)).collect();
            Frame::RestoreCounters { sent: next_seq.iter().sum(), received: rng.gen_range(0..1000), next_seq }
        }
        Opcode::RestoreOk => Frame::RestoreOk,
        Opcode::CkptRequest => Frame::CkptRequest,
        Opcode::CachePut => Frame::CachePut(gen_envelope(rng, None)),
        Opcode::Resumed => Frame::Resumed,
        Opcode::CkptPrepare => Frame::CkptPrepare { epoch: rng.gen() },
        Opcode::PrepareAck => Frame::PrepareAck { epoch: rng.gen(), rank: gen_rank(rng) },
        Opcode::CounterReq => Frame::CounterReq { round: rng.gen() },
        Opcode::CounterReport => Frame::CounterReport { round: rng.gen(), report: gen_report(rng) },
        Opcode::CkptWrite => Frame::CkptWrite { epoch: rng.gen(), dir: gen_string(rng, 40) },
        Opcode::WriteAck => Frame::WriteAck { epoch: rng.gen(), rank: gen_rank(rng), path: gen_string(rng, 40) },
        Opcode::WriteFail => Frame::WriteFail { epoch: rng.gen(), rank: gen_rank(rng), reason: gen_string(rng, 40) },
        Opcode::CkptCommit => Frame::CkptCommit { epoch: rng.gen() },
        Opcode::CkptResume => Frame::CkptResume { epoch: rng.gen() },
        Opcode::CkptAbort => Frame::CkptAbort { epoch: rng.gen(), reason: gen_string(rng, 40) },
        Opcode::CkptHalt => Frame::CkptHalt { epoch: rng.gen() },
        Opcode::Register => Frame::Register { version: v, rank: gen_rank(rng), endpoint: gen_string(rng, 21) },
        Opcode::World => Frame::World { endpoints: (0..rng.gen_range(0..8)).map(|_| gen_string(rng, 21)).collect() },
        Opcode::Reject => Frame::Reject { reason: gen_string(rng, 40) },
        Opcode::FinalizeEnter => Frame::FinalizeEnter { rank: gen_rank(rng) },
        Opcode::FinalizeRelease => Frame::FinalizeRelease,
        Opcode::PluginLost => Frame::PluginLost { rank: gen_rank(rng) },
        Opcode::PeerHello => Frame::PeerHello { version: v, rank: gen_rank(rng) },
        Opcode::Envelope => Frame::Envelope(gen_envelope(rng, None)),
        Opcode::CkptNow => Frame::CkptNow,
        Opcode::CkptDone => Frame::CkptDone {
            epoch: rng.gen(),
            drain: DrainSummary { rounds: rng.gen(), first_sent: rng.gen(), first_received: rng.gen() },
            manifest: gen_string(rng, 40),
        },
        Opcode::CkptAborted => Frame::CkptAborted { reason: gen_string(rng, 40) },
        Opcode::Status => Frame::Status,
        Opcode::StatusReply => Frame::StatusReply {
            state: WorldState::try_from(rng.gen_range(0..6u8)).unwrap(),
            world_size: rng.gen(),
            members: rng.gen(),
            epoch: rng.gen(),
        },
    }
}

/// A random image that satisfies every image invariant.
pub fn gen_image(rng: &mut StdRng) -> CheckpointImage {
    let world_size = rng.gen_range(1..9u32);
    let rank = RankId(rng.gen_range(0..world_size));
    let per_dest_sent: Vec<u64> = (0..world_size).map(|_| rng.gen_range(0..10_000)).collect();
    let counters = Counters { sent: per_dest_sent.iter().sum(), received: rng.gen_range(0..10_000), per_dest_sent };
    let mut replay_log = vec![ReplayLogEntry::Init { rank, world_size }];
    if rng.gen() {
        replay_log.push(ReplayLogEntry::CommQuery { query: CommQuery::Size, comm: 0, result: world_size });
    }
    if rng.gen() {
        replay_log.push(ReplayLogEntry::CommQuery { query: CommQuery::Rank, comm: 0, result: rank.0 });
    }
    let cache = (0..rng.gen_range(0..6))
        .map(|_| {
            let mut e = gen_envelope(rng, Some(rank));
            e.source = RankId(rng.gen_range(0..world_size));
            e
        })
        .collect();
    let app_blob = (0..rng.gen_range(0..256)).map(|_| rng.gen()).collect();
    CheckpointImage { rank, world_size, counters, replay_log, cache, app_blob }
}
