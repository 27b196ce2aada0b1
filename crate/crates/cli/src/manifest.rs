use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub argv: Vec<String>,
    /// Every resolved setting; writing these back as `key=value` lines and
    /// passing the file to `--config` repeats the run.
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_secs: f64,
    /// SHA-256 of each output, keyed by its path relative to the run directory.
    pub checksums: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = fs::File::open(path).map_err(petsynth::Error::from)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(petsynth::Error::from)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Collects inputs and outputs while a command runs.
pub struct Run {
    pub command: String,
    pub out: PathBuf,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn start(command: &str, out: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&out).map_err(petsynth::Error::from)?;
        Ok(Run { command: command.to_string(), out, started: Instant::now(), inputs: Vec::new(), outputs: Vec::new() })
    }

    /// Records an input. Inputs may not live in the output directory, so a
    /// run never overwrites what it reads.
    pub fn input(&mut self, p: impl Into<PathBuf>) -> Result<(), CliError> {
        let p = p.into();
        let parent = match p.parent() {
            Some(d) if d.as_os_str().is_empty() => Path::new("."),
            Some(d) => d,
            None => Path::new("."),
        };
        if let (Ok(a), Ok(b)) = (fs::canonicalize(parent), fs::canonicalize(&self.out)) {
            if a == b {
                return Err(CliError::Usage(format!(
                    "input {} is inside the output directory {}",
                    p.display(),
                    self.out.display()
                )));
            }
        }
        if !self.inputs.contains(&p) {
            self.inputs.push(p);
        }
        Ok(())
    }

    /// Path of an output file inside the run directory, recorded for the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    /// Both files of an MVOL volume named `stem`.
    pub fn volume(&mut self, stem: &str) -> PathBuf {
        self.output(&format!("{stem}.mvol.json"));
        self.output(&format!("{stem}.mvol.raw"));
        self.out.join(stem)
    }

    pub fn finish(self, config: &BTreeMap<String, String>, seed: Option<u64>) -> Result<RunManifest, CliError> {
        let mut checksums = BTreeMap::new();
        for p in &self.outputs {
            let rel = p.strip_prefix(&self.out).unwrap_or(p);
            checksums.insert(rel.display().to_string(), sha256_file(p)?);
        }
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            argv: std::env::args().collect(),
            config: config.clone(),
            seed,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            checksums,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(self.out.join(MANIFEST_NAME), json + "\n").map_err(petsynth::Error::from)?;
        Ok(manifest)
    }
}
