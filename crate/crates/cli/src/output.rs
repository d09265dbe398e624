use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// Provenance stamped on every output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
}

impl Meta {
    pub fn new(config_hash: String) -> Self {
        Self {
            tool: "cardiored".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: config_hash,
        }
    }

    /// `# cardiored <version> config-sha256 <hash>`
    pub fn comment_line(&self) -> String {
        format!("# {} {} config-sha256 {}\n", self.tool, self.version, self.config_sha256)
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// CSV preceded by the metadata comment line.
pub fn write_csv(path: &Path, meta: &Meta, body: &str) -> Result<()> {
    let mut s = meta.comment_line();
    s.push_str(body);
    write_atomic(path, s.as_bytes())
}
