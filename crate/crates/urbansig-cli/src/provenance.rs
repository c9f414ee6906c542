//! Provenance headers: every output file starts with one `#` comment line
//! carrying the tool version and a hash of the config it was produced from.
//! Readers of the pipeline's own formats skip `#` lines, and byte-level
//! comparisons in tests strip the first line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use sha2::{Digest, Sha256};

/// Truncated hex digest of the config file bytes.
pub fn config_hash(config_bytes: &[u8]) -> String {
    let digest = Sha256::digest(config_bytes);
    let mut out = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// The header line content (without the leading `#`).
pub fn provenance_line(config_hash: &str) -> String {
    format!("urbansig {} config={config_hash}", env!("CARGO_PKG_VERSION"))
}

/// Create `path`, write the provenance header, then let `body` stream the
/// actual payload.
pub fn write_output<F>(path: &Path, provenance: &str, body: F) -> anyhow::Result<()>
where
    F: FnOnce(&mut dyn Write) -> urbansig::Result<()>,
{
    let file = File::create(path)
        .with_context(|| format!("cannot create `{}`", path.display()))?;
    let mut writer = BufWriter::new(file);
    writeln!(writer, "# {provenance}")?;
    body(&mut writer).with_context(|| format!("while writing `{}`", path.display()))?;
    writer.flush()?;
    Ok(())
}
