use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FEDMETANAS_OUT";
const FALLBACK_ROOT: &str = "runs";

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.fmnc";
pub const ARCHITECTURE_FILE: &str = "architecture.json";

/// Flag, then config, then environment, then `./runs`.
pub fn output_root(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(FALLBACK_ROOT))
}

/// Creates `root/run-<timestamp>-s<seed>`, adding a numeric suffix if the
/// name is taken.
pub fn create(root: &Path, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(root).with_context(|| format!("creating output root {}", root.display()))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("run-{stamp}-s{seed}");
    for i in 0.. {
        let name = if i == 0 { base.clone() } else { format!("{base}-{i}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}
