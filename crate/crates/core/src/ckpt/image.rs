//! Per-rank checkpoint image.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8   "PMPCRIMG"
//! version    2
//! rank       4
//! world_size 4
//! sent       8
//! received   8
//! per-dest   4 + 8 * n   sent count per destination rank
//! log        4 + entries
//! cache      4 + envelopes
//! app_blob   4 + bytes
//! crc32      4   over every preceding byte
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::plugin::ReplayLogEntry;
use crate::proto::{CommQuery, DecodeError, EncodeError, MessageEnvelope, RankId, WireReader, WireWriter};

pub const IMAGE_MAGIC: &[u8; 8] = b"PMPCRIMG";
pub const IMAGE_VERSION: u16 = 1;

const HEADER_LEN: usize = 8 + 2;
const TRAILER_LEN: usize = 4;

/// Plugin-side message totals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    pub sent: u64,
    pub received: u64,
    /// Envelopes acknowledged per destination; the next sequence number on
    /// each outgoing channel.
    pub per_dest_sent: Vec<u64>,
}

impl Counters {
    pub fn new(world_size: u32) -> Self {
        Counters { sent: 0, received: 0, per_dest_sent: vec![0; world_size as usize] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointImage {
    pub rank: RankId,
    pub world_size: u32,
    pub counters: Counters,
    pub replay_log: Vec<ReplayLogEntry>,
    pub cache: Vec<MessageEnvelope>,
    pub app_blob: Vec<u8>,
}

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("writing image {path}: {source}")]
    Write { path: String, source: io::Error },
    #[error("reading image {path}: {source}")]
    Read { path: String, source: io::Error },
    #[error("not a checkpoint image: {0}")]
    Format(String),
    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Corrupt { stored: u32, computed: u32 },
    #[error("image version {0} is newer than supported version {IMAGE_VERSION}")]
    Version(u16),
    #[error("image violates invariant: {0}")]
    Invalid(String),
}

impl From<EncodeError> for ImageError {
    fn from(e: EncodeError) -> Self {
        ImageError::Invalid(e.to_string())
    }
}

impl From<DecodeError> for ImageError {
    fn from(e: DecodeError) -> Self {
        ImageError::Format(e.to_string())
    }
}

impl CheckpointImage {
    pub fn empty(rank: RankId, world_size: u32) -> Self {
        CheckpointImage {
            rank,
            world_size,
            counters: Counters::new(world_size),
            replay_log: Vec::new(),
            cache: Vec::new(),
            app_blob: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        if self.world_size == 0 || self.rank.0 >= self.world_size {
            return Err(ImageError::Invalid(format!("rank {} outside world of {}", self.rank, self.world_size)));
        }
        if self.counters.per_dest_sent.len() != self.world_size as usize {
            return Err(ImageError::Invalid("per-destination table does not match world size".into()));
        }
        if self.counters.per_dest_sent.iter().sum::<u64>() != self.counters.sent {
            return Err(ImageError::Invalid("per-destination totals do not sum to sent".into()));
        }
        if let Some(e) = self.cache.iter().find(|e| e.dest != self.rank || !e.is_well_formed()) {
            return Err(ImageError::Invalid(format!("cached envelope {:?} not addressed to this rank", e.seq)));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, ImageError> {
        self.validate()?;
        let mut w = WireWriter::new();
        w.raw(IMAGE_MAGIC);
        w.u16(IMAGE_VERSION);
        w.u32(self.rank.0);
        w.u32(self.world_size);
        w.u64(self.counters.sent);
        w.u64(self.counters.received);
        w.u32(self.counters.per_dest_sent.len() as u32);
        for n in &self.counters.per_dest_sent {
            w.u64(*n);
        }
        w.u32(self.replay_log.len() as u32);
        for entry in &self.replay_log {
            match entry {
                ReplayLogEntry::Init { rank, world_size } => {
                    w.u8(0);
                    w.u32(rank.0);
                    w.u32(*world_size);
                }
                ReplayLogEntry::CommQuery { query, comm, result } => {
                    w.u8(1);
                    w.u8(*query as u8);
                    w.u32(*comm);
                    w.u32(*result);
                }
            }
        }
        w.u32(self.cache.len() as u32);
        for env in &self.cache {
            w.envelope(env)?;
        }
        w.bytes(&self.app_blob)?;
        let crc = crc32fast::hash(w.as_slice());
        w.u32(crc);
        Ok(w.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ImageError> {
        if bytes.len() < HEADER_LEN + TRAILER_LEN {
            return Err(ImageError::Format(format!("{} bytes is shorter than any image", bytes.len())));
        }
        if &bytes[..8] != IMAGE_MAGIC {
            return Err(ImageError::Format("bad magic".into()));
        }
        let (content, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4-byte trailer"));
        let computed = crc32fast::hash(content);
        if stored != computed {
            return Err(ImageError::Corrupt { stored, computed });
        }
        let mut r = WireReader::new(&content[8..]);
        let version = r.u16()?;
        if version > IMAGE_VERSION {
            return Err(ImageError::Version(version));
        }
        if version == 0 {
            return Err(ImageError::Format("version 0".into()));
        }
        let rank = r.rank()?;
        let world_size = r.u32()?;
        let sent = r.u64()?;
        let received = r.u64()?;
        let n = r.u32()? as usize;
        if n.saturating_mul(8) > r.remaining() {
            return Err(ImageError::Format("per-destination table overruns image".into()));
        }
        let per_dest_sent = (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?;
        let n_log = r.u32()? as usize;
        let mut replay_log = Vec::with_capacity(n_log.min(r.remaining()));
        for _ in 0..n_log {
            let entry = match r.u8()? {
                0 => ReplayLogEntry::Init { rank: r.rank()?, world_size: r.u32()? },
                1 => {
                    let raw = r.u8()?;
                    let query =
                        CommQuery::try_from(raw).map_err(|q| ImageError::Format(format!("unknown query kind {q}")))?;
                    ReplayLogEntry::CommQuery { query, comm: r.u32()?, result: r.u32()? }
                }
                k => return Err(ImageError::Format(format!("unknown log entry kind {k}"))),
            };
            replay_log.push(entry);
        }
        let n_cache = r.u32()? as usize;
        let mut cache = Vec::with_capacity(n_cache.min(r.remaining()));
        for _ in 0..n_cache {
            cache.push(r.envelope()?);
        }
        let app_blob = r.bytes()?;
        r.finish()?;
        let img = CheckpointImage {
            rank,
            world_size,
            counters: Counters { sent, received, per_dest_sent },
            replay_log,
            cache,
            app_blob,
        };
        img.validate()?;
        Ok(img)
    }
}

/// Writes `img` to `path` via a temporary file and rename.
pub fn write_image(img: &CheckpointImage, path: &Path) -> Result<(), ImageError> {
    let bytes = img.encode()?;
    let werr = |source| ImageError::Write { path: path.display().to_string(), source };
    let file_name = path
        .file_name()
        .ok_or_else(|| werr(io::Error::new(io::ErrorKind::InvalidInput, "image path has no file name")))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(werr)?;
    f.write_all(&bytes).map_err(werr)?;
    f.sync_all().map_err(werr)?;
    drop(f);
    fs::rename(&tmp, path).map_err(werr)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<CheckpointImage, ImageError> {
    let bytes = fs::read(path).map_err(|source| ImageError::Read { path: path.display().to_string(), source })?;
    CheckpointImage::decode(&bytes)
}
