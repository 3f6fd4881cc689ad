use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunConfig;

/// Tool version, effective-config digest and seed stamped on every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_digest: String,
    pub seed: u64,
}

/// SHA-256 of the effective config (after flag overrides), as hex. Worker
/// count and output directory do not change results and are left out.
pub fn config_digest(config: &RunConfig) -> String {
    let mut effective = config.clone();
    effective.workers = None;
    effective.output_dir = Default::default();
    let canonical = serde_json::to_string(&effective).expect("config serializes");
    Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Provenance {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_digest: config_digest(config),
            seed: config.seed,
        }
    }

    /// Single-line form used as a CSV comment.
    pub fn comment(&self) -> String {
        format!(
            "{} {} config={} seed={}",
            self.tool, self.version, self.config_digest, self.seed
        )
    }
}

/// JSON artifact: provenance plus payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub provenance: Provenance,
    pub data: T,
}

impl<T: Serialize> Artifact<T> {
    pub fn new(provenance: Provenance, data: T) -> Self {
        Self { provenance, data }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("artifact serializes");
        s.push('\n');
        s
    }
}

impl<T: for<'de> Deserialize<'de>> Artifact<T> {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::LoadedConfig;
    use std::path::Path;

    #[test]
    fn digest_tracks_effective_config() {
        let a = LoadedConfig::parse("seed = 1\n", Path::new(".")).unwrap().config;
        let mut b = a.clone();
        assert_eq!(config_digest(&a), config_digest(&b));
        b.seed = 2;
        assert_ne!(config_digest(&a), config_digest(&b));
        assert_eq!(config_digest(&a).len(), 64);
        let mut c = a.clone();
        c.workers = Some(3);
        c.output_dir = "elsewhere".into();
        assert_eq!(config_digest(&a), config_digest(&c));
        let p = Provenance::new(&a);
        assert!(p.comment().starts_with("stopeval "));
        assert!(p.comment().ends_with(" seed=1"));
    }
}
