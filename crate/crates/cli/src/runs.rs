//! Run directories under the output root and lookup of earlier stages' artifacts.

use std::path::{Path, PathBuf};

use eclf_core::{EclfError, Result};

pub const OUT_ENV: &str = "ECLF_OUT";
pub const DEFAULT_ROOT: &str = "eclf-runs";

pub const DATASET_DIR: &str = "dataset";
pub const VAE_FILE: &str = "vae.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

/// `--out`, else `$ECLF_OUT`, else `./eclf-runs`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT))
}

/// Creates `<root>/<timestamp>-<command>`, never reusing an existing directory.
pub fn new_run_dir(root: &Path, command: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| EclfError::io(root, e))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f").to_string();
    let base = format!("{stamp}-{command}");
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(EclfError::io(&dir, e)),
        }
    }
    unreachable!("run directory names are unbounded")
}

/// The newest run directory (by name) holding `artifact`.
pub fn latest(root: &Path, artifact: &str) -> Option<PathBuf> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(artifact).exists())
        .collect();
    dirs.sort();
    dirs.pop().map(|d| d.join(artifact))
}

/// An explicit path, or the newest one in the root, or an error naming the stage that makes it.
pub fn resolve(explicit: Option<&Path>, root: &Path, artifact: &str, what: &str, producer: &str) -> Result<PathBuf> {
    if let Some(p) = explicit {
        if p.exists() {
            return Ok(p.to_path_buf());
        }
        return Err(EclfError::Invalid(format!("missing artifact: {what} {} does not exist", p.display())));
    }
    latest(root, artifact).ok_or_else(|| {
        EclfError::Invalid(format!(
            "missing artifact: no {what} under {}; run `eclf {producer}` first or pass its path",
            root.display()
        ))
    })
}
