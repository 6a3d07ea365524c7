use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// First 16 hex digits of the SHA-256 of the effective configuration text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Metadata embedded in every output.
pub fn run_meta(command: &str, seed: u64, config_text: &str) -> Value {
    json!({
        "command": command,
        "seed": seed,
        "config_hash": config_hash(config_text),
        "git_revision": env!("CTSAN_GIT_REV"),
        "version": env!("CARGO_PKG_VERSION"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        assert_eq!(config_hash("a = 1\n"), config_hash("a = 1\n"));
        assert_ne!(config_hash("a = 1\n"), config_hash("a = 2\n"));
        assert_eq!(config_hash("").len(), 16);
    }
}
