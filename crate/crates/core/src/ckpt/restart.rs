use std::net::SocketAddr;
use std::path::PathBuf;

use super::{read_image, Manifest};
use crate::plugin::LaunchEnv;
use crate::proto::RankId;

#[derive(Debug, thiserror::Error)]
#[error("cannot restart rank {rank}: {reason}")]
pub struct RestartError {
    pub rank: RankId,
    pub reason: String,
}

/// One process of a restart, in spawn order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlannedProcess {
    /// Coordinator in RESTARTING state, continuing after `epoch`.
    Coordinator { world_size: u32, epoch: u64 },
    /// A fresh proxy; proxies carry no state across restart.
    Proxy { rank: RankId },
    /// An application process restored from its image.
    App { rank: RankId, image: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestartPlan {
    pub epoch: u64,
    pub world_size: u32,
    pub steps: Vec<PlannedProcess>,
}

impl RestartPlan {
    pub fn images(&self) -> impl Iterator<Item = (RankId, &PathBuf)> {
        self.steps.iter().filter_map(|s| match s {
            PlannedProcess::App { rank, image } => Some((*rank, image)),
            _ => None,
        })
    }

    /// Environment for a restored application once its fresh proxy's
    /// endpoint is known.
    pub fn app_env(&self, rank: RankId, proxy_endpoint: SocketAddr) -> Option<LaunchEnv> {
        self.images().find(|(r, _)| *r == rank).map(|(_, image)| LaunchEnv::restored(proxy_endpoint, image.clone()))
    }
}

/// Checks every image named by `manifest` and lays out the restart:
/// coordinator, then proxies, then applications.
pub fn assemble_restart(manifest: &Manifest) -> Result<RestartPlan, RestartError> {
    if manifest.images.len() != manifest.world_size as usize {
        let rank = RankId(manifest.images.len() as u32);
        return Err(RestartError { rank, reason: "manifest lists fewer images than ranks".into() });
    }
    for (r, path) in manifest.images.iter().enumerate() {
        let rank = RankId(r as u32);
        let img = read_image(path).map_err(|e| RestartError { rank, reason: e.to_string() })?;
        if img.rank != rank || img.world_size != manifest.world_size {
            return Err(RestartError {
                rank,
                reason: format!("image belongs to rank {} of {}", img.rank, img.world_size),
            });
        }
    }
    let ws = manifest.world_size;
    let mut steps = vec![PlannedProcess::Coordinator { world_size: ws, epoch: manifest.epoch }];
    steps.extend((0..ws).map(|r| PlannedProcess::Proxy { rank: RankId(r) }));
    steps.extend(
        manifest
            .images
            .iter()
            .enumerate()
            .map(|(r, p)| PlannedProcess::App { rank: RankId(r as u32), image: p.clone() }),
    );
    Ok(RestartPlan { epoch: manifest.epoch, world_size: ws, steps })
}
