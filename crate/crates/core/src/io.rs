//! Run configuration files, output directories with a hashed manifest,
//! field snapshots and plot-data series.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attractor::{dimension_csv, DimensionReport};
use crate::error::{FpiError, Result};
use crate::grid::Grid;
use crate::spectral::{spectrum_csv, SpectrumReport};
use crate::state::SystemState;
use crate::stepper::{DecayFit, EnergyLedger, RunConfig};

/// Parses and validates a JSON run configuration; defaults fill absent keys
/// and unknown keys are rejected.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| FpiError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| FpiError::io(path, e))?;
    parse_config_str(&text)
}

/// Fully resolved configuration as pretty JSON.
pub fn config_to_json(cfg: &RunConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("configuration serializes")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub fpi_core: String,
    pub manifest_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Versions {
            fpi_core: env!("CARGO_PKG_VERSION").to_string(),
            manifest_format: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_seconds: f64,
    pub elapsed_seconds: f64,
}

/// Record of one invocation: what was run, with which inputs, and what it
/// wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: RunConfig,
    pub versions: Versions,
    pub seed: u64,
    pub timing: Timing,
    pub status: String,
    pub exit_code: i32,
    pub outputs: Vec<OutputEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes files into one directory and keeps their hashes for the manifest.
#[derive(Debug)]
pub struct OutputWriter {
    dir: PathBuf,
    entries: Vec<OutputEntry>,
}

impl OutputWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| FpiError::io(&dir, e))?;
        Ok(OutputWriter {
            dir,
            entries: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entries(&self) -> &[OutputEntry] {
        &self.entries
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        if name == MANIFEST_FILE {
            return Err(FpiError::validation("output", "the manifest name is reserved"));
        }
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| FpiError::io(&path, e))?;
        let entry = OutputEntry {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        };
        match self.entries.iter_mut().find(|e| e.path == name) {
            Some(old) => *old = entry,
            None => self.entries.push(entry),
        }
        Ok(path)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| FpiError::validation("output", format!("cannot serialize {name}: {e}")))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    /// Writes `manifest.json` listing every file written so far.
    pub fn finish(self, mut manifest: RunManifest) -> Result<RunManifest> {
        manifest.outputs = self.entries;
        let path = self.dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| FpiError::io(&path, e))?;
        Ok(manifest)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| FpiError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| FpiError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Paths whose current content does not match the manifest hash.
pub fn verify_manifest(dir: &Path, manifest: &RunManifest) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for entry in &manifest.outputs {
        let path = dir.join(&entry.path);
        let bytes = fs::read(&path).map_err(|e| FpiError::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 || bytes.len() as u64 != entry.bytes {
            bad.push(entry.path.clone());
        }
    }
    Ok(bad)
}

pub const SNAPSHOT_DTYPE: &str = "f64-le";

/// JSON sidecar describing a flat binary snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotHeader {
    /// Lengths of the stored blocks, in order.
    pub shape: Vec<usize>,
    /// Names of the stored blocks, in order.
    pub blocks: Vec<String>,
    pub dtype: String,
    pub time: f64,
    pub cells_per_axis: Vec<usize>,
}

/// Writes `<name>.bin` (`v`, `u`, `u_t` as little-endian f64) and
/// `<name>.json`.
pub fn write_snapshot(out: &mut OutputWriter, name: &str, grid: &Grid, state: &SystemState) -> Result<()> {
    state.check(grid)?;
    let flat = state.flatten();
    let mut bytes = Vec::with_capacity(8 * flat.len());
    for x in flat.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let header = SnapshotHeader {
        shape: vec![grid.n_fluid(), grid.n_plate(), grid.n_plate()],
        blocks: vec!["v".into(), "u".into(), "u_t".into()],
        dtype: SNAPSHOT_DTYPE.into(),
        time: state.t,
        cells_per_axis: grid.spec().cells_per_axis.clone(),
    };
    out.write_bytes(&format!("{name}.bin"), &bytes)?;
    out.write_json(&format!("{name}.json"), &header)?;
    Ok(())
}

/// Reads a snapshot pair written by [`write_snapshot`]; `stem` has no
/// extension.
pub fn read_snapshot(stem: &Path) -> Result<(SnapshotHeader, SystemState)> {
    let hpath = stem.with_extension("json");
    let bpath = stem.with_extension("bin");
    let text = fs::read_to_string(&hpath).map_err(|e| FpiError::io(&hpath, e))?;
    let header: SnapshotHeader = serde_json::from_str(&text).map_err(|e| FpiError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if header.dtype != SNAPSHOT_DTYPE || header.shape.len() != 3 {
        return Err(FpiError::validation("snapshot", format!("unsupported layout in {}", hpath.display())));
    }
    let bytes = fs::read(&bpath).map_err(|e| FpiError::io(&bpath, e))?;
    let total: usize = header.shape.iter().sum();
    if bytes.len() != 8 * total {
        return Err(FpiError::GridMismatch(format!(
            "{} holds {} bytes, header expects {}",
            bpath.display(),
            bytes.len(),
            8 * total
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let (nf, np) = (header.shape[0], header.shape[1]);
    let state = SystemState::new(
        DVector::from_column_slice(&vals[..nf]),
        DVector::from_column_slice(&vals[nf..nf + np]),
        DVector::from_column_slice(&vals[nf + np..]),
        header.time,
    );
    Ok((header, state))
}

/// Fit parameters written next to the log-norm series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySidecar {
    /// `log ‖U(t)‖_𝓗 ≈ intercept - alpha t` for `t ≥ t_start`.
    pub alpha: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub samples: usize,
    pub t_start: f64,
}

impl From<&DecayFit> for DecaySidecar {
    fn from(f: &DecayFit) -> Self {
        DecaySidecar {
            alpha: f.alpha,
            intercept: f.intercept,
            r_squared: f.r_squared,
            samples: f.samples,
            t_start: f.t_start,
        }
    }
}

/// Two-column `t,log_norm` series; rows with a zero norm are skipped.
pub fn log_norm_csv(ledger: &EnergyLedger) -> String {
    let mut out = String::from("t,log_norm\n");
    for r in ledger.rows.iter().filter(|r| r.norm_h > 0.0) {
        out.push_str(&format!("{:.12e},{:.12e}\n", r.t, r.norm_h.ln()));
    }
    out
}

/// Data for [`emit_plot_data`].
pub enum PlotData<'a> {
    Ledger(&'a EnergyLedger),
    Decay(&'a EnergyLedger, &'a DecayFit),
    Spectrum(&'a SpectrumReport),
    Distance(&'a DimensionReport),
}

/// Writes the CSV series (and sidecar) for `data`; returns the file names.
pub fn emit_plot_data(out: &mut OutputWriter, data: PlotData<'_>) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let mut put = |out: &mut OutputWriter, name: &str, text: String| -> Result<()> {
        out.write_text(name, &text)?;
        names.push(name.to_string());
        Ok(())
    };
    match data {
        PlotData::Ledger(l) => put(out, "energy.csv", l.to_csv())?,
        PlotData::Decay(l, fit) => {
            put(out, "log_norm.csv", log_norm_csv(l))?;
            let mut text = serde_json::to_string_pretty(&DecaySidecar::from(fit)).expect("fit serializes");
            text.push('\n');
            put(out, "log_norm_fit.json", text)?;
        }
        PlotData::Spectrum(s) => put(out, "spectrum.csv", spectrum_csv(s))?,
        PlotData::Distance(d) => put(out, "correlation.csv", dimension_csv(d))?,
    }
    Ok(names)
}
