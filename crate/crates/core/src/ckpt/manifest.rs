use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::SystemTime;

/// World-level index of one complete checkpoint.
///
/// On disk it is a text file: the epoch, the world size, then one
/// `rank<TAB>path` line per rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub epoch: u64,
    pub world_size: u32,
    /// Image path per rank, indexed by rank.
    pub images: Vec<PathBuf>,
    pub created: SystemTime,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("manifest {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("manifest line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("no manifest found in {0}")]
    NotFound(String),
}

const FILE_PREFIX: &str = "manifest.e";

impl Manifest {
    pub fn new(epoch: u64, images: Vec<PathBuf>) -> Self {
        Manifest { epoch, world_size: images.len() as u32, images, created: SystemTime::now() }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n{}\n", self.epoch, self.world_size);
        for (rank, path) in self.images.iter().enumerate() {
            s.push_str(&format!("{rank}\t{}\n", path.display()));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let perr = |line: usize, reason: &str| ManifestError::Parse { line, reason: reason.to_string() };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, epoch) = lines.next().ok_or_else(|| perr(1, "missing epoch"))?;
        let epoch: u64 = epoch.trim().parse().map_err(|_| perr(1, "epoch is not an integer"))?;
        let (_, ws) = lines.next().ok_or_else(|| perr(2, "missing world size"))?;
        let world_size: u32 = ws.trim().parse().map_err(|_| perr(2, "world size is not an integer"))?;
        if world_size == 0 {
            return Err(perr(2, "world size must be positive"));
        }
        let mut images: Vec<Option<PathBuf>> = vec![None; world_size as usize];
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (rank, path) = line.split_once('\t').ok_or_else(|| perr(n, "expected rank<TAB>path"))?;
            let rank: usize = rank.parse().map_err(|_| perr(n, "rank is not an integer"))?;
            let slot = images.get_mut(rank).ok_or_else(|| perr(n, "rank outside world"))?;
            if slot.replace(PathBuf::from(path)).is_some() {
                return Err(perr(n, "duplicate rank"));
            }
        }
        let images = images
            .into_iter()
            .enumerate()
            .map(|(r, p)| p.ok_or_else(|| perr(0, &format!("rank {r} missing"))))
            .collect::<Result<_, _>>()?;
        Ok(Manifest { epoch, world_size, images, created: SystemTime::now() })
    }

    /// Canonical file name for an epoch inside an image directory.
    pub fn file_name(epoch: u64) -> String {
        format!("{FILE_PREFIX}{epoch}")
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        let ioerr = |source| ManifestError::Io { path: path.display().to_string(), source };
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        let mut f = fs::File::create(&tmp).map_err(ioerr)?;
        f.write_all(self.to_text().as_bytes()).map_err(ioerr)?;
        f.sync_all().map_err(ioerr)?;
        drop(f);
        fs::rename(&tmp, path).map_err(ioerr)
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let ioerr = |source| ManifestError::Io { path: path.display().to_string(), source };
        let text = fs::read_to_string(path).map_err(ioerr)?;
        let mut m = Self::parse(&text)?;
        if let Ok(modified) = fs::metadata(path).and_then(|md| md.modified()) {
            m.created = modified;
        }
        Ok(m)
    }

    /// Resolves `path`: a manifest file is read directly, a directory
    /// yields its highest-epoch manifest.
    pub fn resolve(path: &Path) -> Result<(PathBuf, Self), ManifestError> {
        if !path.is_dir() {
            return Ok((path.to_path_buf(), Self::read(path)?));
        }
        let ioerr = |source| ManifestError::Io { path: path.display().to_string(), source };
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in fs::read_dir(path).map_err(ioerr)? {
            let entry = entry.map_err(ioerr)?;
            let name = entry.file_name();
            let Some(epoch) = name.to_str().and_then(|n| n.strip_prefix(FILE_PREFIX)).and_then(|e| e.parse().ok())
            else {
                continue;
            };
            if best.as_ref().is_none_or(|(b, _)| epoch > *b) {
                best = Some((epoch, entry.path()));
            }
        }
        let (_, file) = best.ok_or_else(|| ManifestError::NotFound(path.display().to_string()))?;
        let m = Self::read(&file)?;
        Ok((file, m))
    }
}
