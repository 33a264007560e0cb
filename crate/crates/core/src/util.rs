//! Run-directory bookkeeping: SHA-256 hashes of the inputs that produced an
//! output directory.

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Write `run_manifest.json` recording the command, seed, and input hashes.
pub fn write_run_manifest(
    out_dir: &Path,
    command: &str,
    seed: Option<u64>,
    inputs: &[(&str, &Path)],
    extra: serde_json::Value,
) -> std::io::Result<()> {
    let mut hashes = serde_json::Map::new();
    for (name, path) in inputs {
        let h = if path.is_file() {
            sha256_file(path)?
        } else {
            // hash the manifest file of a dataset directory when given a dir
            let mf = path.join("manifest.json");
            if mf.is_file() {
                sha256_file(&mf)?
            } else {
                "missing".to_string()
            }
        };
        hashes.insert(name.to_string(), serde_json::Value::String(h));
    }
    let manifest = serde_json::json!({
        "command": command,
        "seed": seed,
        "input_hashes": hashes,
        "extra": extra,
    });
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )
}
