use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use spatial_spde::lgm::SCHEMA_VERSION;

/// Provenance block attached to every output file. It carries no paths,
/// timestamps or thread counts, so identical inputs give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<InputDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    /// `settings` is any serialisable description of the options that
    /// affect the numeric output.
    pub fn new<S: Serialize>(command: &str, settings: &S, seed: Option<u64>, inputs: Vec<InputDigest>) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(command.as_bytes());
        hasher.update(serde_json::to_vec(settings).expect("settings serialise"));
        for i in &inputs {
            hasher.update(i.role.as_bytes());
            hasher.update(i.sha256.as_bytes());
        }
        if let Some(s) = seed {
            hasher.update(s.to_le_bytes());
        }
        Self {
            tool: "spde".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            config_hash: hex::encode(hasher.finalize()),
            seed,
            inputs,
        }
    }

    /// `#` comment lines for CSV outputs.
    pub fn comment_lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("{} {} schema_version={}", self.tool, self.version, self.schema_version),
            format!("command={}", self.command),
            format!("config_hash={}", self.config_hash),
        ];
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        out.extend(self.inputs.iter().map(|i| format!("input {}={}", i.role, i.sha256)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_settings_and_seed() {
        let a = Manifest::new("fit", &("stationary",), None, vec![]);
        let b = Manifest::new("fit", &("nonstationary",), None, vec![]);
        let c = Manifest::new("fit", &("stationary",), Some(1), vec![]);
        assert_ne!(a.config_hash, b.config_hash);
        assert_ne!(a.config_hash, c.config_hash);
        assert_eq!(a, Manifest::new("fit", &("stationary",), None, vec![]));
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
