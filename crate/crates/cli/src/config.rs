use std::fs;
use std::path::{Path, PathBuf};

use citseg::pipeline::ExperimentConfig;

use crate::Failure;

pub const OUTPUT_ENV: &str = "CIT_CSS_OUTPUT";

/// Reads a TOML experiment config; every section and key is optional.
pub fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

/// Flag, then environment, then the config file.
pub fn output_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
    flag.or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| {
            Failure::config(format!(
                "no output directory: set output_dir, {OUTPUT_ENV} or --output-dir"
            ))
        })
}

/// Refuses a non-empty directory unless `force`, in which case it is cleared.
pub fn claim_output(dir: &Path, force: bool) -> Result<(), Failure> {
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(Failure::config(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Failure::other(format!("{}: {e}", dir.display())))?;
    }
    fs::create_dir_all(dir).map_err(|e| Failure::other(format!("{}: {e}", dir.display())))?;
    Ok(())
}
