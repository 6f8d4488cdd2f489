use std::net::SocketAddr;
use std::path::PathBuf;

pub const ENV_PROXY_ENDPOINT: &str = "PMPCR_PROXY_ENDPOINT";
pub const ENV_MODE: &str = "PMPCR_MODE";
pub const ENV_IMAGE_PATH: &str = "PMPCR_IMAGE_PATH";
/// Test hook: rank requests a checkpoint once this many API calls have
/// completed.
pub const ENV_CKPT_AFTER_CALL: &str = "PMPCR_CKPT_AFTER_CALL";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LaunchMode {
    Fresh,
    Restored { image_path: PathBuf },
}

/// Everything the facade needs from its launcher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchEnv {
    pub proxy_endpoint: SocketAddr,
    pub mode: LaunchMode,
    pub ckpt_after_call: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("{0} is not set")]
    Missing(&'static str),
    #[error("{var} has invalid value {value:?}")]
    Invalid { var: &'static str, value: String },
}

impl LaunchEnv {
    pub fn fresh(proxy_endpoint: SocketAddr) -> Self {
        LaunchEnv { proxy_endpoint, mode: LaunchMode::Fresh, ckpt_after_call: None }
    }

    pub fn restored(proxy_endpoint: SocketAddr, image_path: impl Into<PathBuf>) -> Self {
        LaunchEnv {
            proxy_endpoint,
            mode: LaunchMode::Restored { image_path: image_path.into() },
            ckpt_after_call: None,
        }
    }

    pub fn with_ckpt_after_call(mut self, k: Option<u64>) -> Self {
        self.ckpt_after_call = k;
        self
    }

    pub fn from_env() -> Result<Self, EnvError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, EnvError> {
        let raw = get(ENV_PROXY_ENDPOINT).ok_or(EnvError::Missing(ENV_PROXY_ENDPOINT))?;
        let proxy_endpoint =
            raw.parse().map_err(|_| EnvError::Invalid { var: ENV_PROXY_ENDPOINT, value: raw.clone() })?;
        let mode = match get(ENV_MODE).as_deref() {
            None | Some("FRESH") => LaunchMode::Fresh,
            Some("RESTORED") => LaunchMode::Restored {
                image_path: get(ENV_IMAGE_PATH).ok_or(EnvError::Missing(ENV_IMAGE_PATH))?.into(),
            },
            Some(other) => return Err(EnvError::Invalid { var: ENV_MODE, value: other.to_string() }),
        };
        let ckpt_after_call = match get(ENV_CKPT_AFTER_CALL) {
            None => None,
            Some(v) => Some(v.parse().map_err(|_| EnvError::Invalid { var: ENV_CKPT_AFTER_CALL, value: v.clone() })?),
        };
        Ok(LaunchEnv { proxy_endpoint, mode, ckpt_after_call })
    }

    /// The variables a launcher exports for this environment.
    pub fn to_vars(&self) -> Vec<(String, String)> {
        let mut vars = vec![(ENV_PROXY_ENDPOINT.to_string(), self.proxy_endpoint.to_string())];
        match &self.mode {
            LaunchMode::Fresh => vars.push((ENV_MODE.into(), "FRESH".into())),
            LaunchMode::Restored { image_path } => {
                vars.push((ENV_MODE.into(), "RESTORED".into()));
                vars.push((ENV_IMAGE_PATH.into(), image_path.display().to_string()));
            }
        }
        if let Some(k) = self.ckpt_after_call {
            vars.push((ENV_CKPT_AFTER_CALL.into(), k.to_string()));
        }
        vars
    }
}
