//! On-disk fit artifacts.
//!
//! A fit is a JSON document holding the configuration, dataset identity,
//! per-draw scalars and acceptance counters, next to a binary sidecar with
//! the `g` and `f` grids. The sidecar layout is the magic `BPCALGR1`, then
//! little-endian `u64` rows, columns and block count, then each block as
//! row-major little-endian `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::breakpoints::{BreakpointAnalysis, LossGrid, PosteriorRow, SearchRange};
use crate::curves::CurveModel;
use crate::data::{AssayDataset, DiaBreakpoints, MicBreakpoints};
use crate::sampler::{
    posterior_summary, AcceptanceRates, ChainTrace, ModelKind, PosteriorSummary, SamplerConfig, TraceSample,
};
use crate::{Error, Result};

pub const SIDECAR_MAGIC: &[u8; 8] = b"BPCALGR1";
pub const FIT_FILE: &str = "fit.json";
pub const GRIDS_FILE: &str = "grids.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FILE: &str = "dataset.csv";

/// Scalars kept per retained draw; the grids live in the sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub curve: CurveModel,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_knots: Option<usize>,
    pub alpha: f64,
    pub n_clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub fit_id: String,
    pub config: SamplerConfig,
    pub dataset_name: String,
    pub dataset_digest: String,
    pub n_isolates: usize,
    pub sigma_m: f64,
    pub sigma_d: f64,
    pub grid: Vec<f64>,
    pub samples: Vec<SampleRecord>,
    pub acceptance: AcceptanceRates,
    pub grids_file: String,
    pub dataset_file: String,
}

/// Content address of a fit: dataset digest plus canonical configuration.
pub fn fit_id(config: &SamplerConfig, dataset_digest: &str) -> String {
    let mut h = Sha256::new();
    h.update(dataset_digest.as_bytes());
    h.update(b"\n");
    h.update(serde_json::to_vec(config).expect("config serializes"));
    hex::encode(&h.finalize()[..16])
}

impl FitArtifact {
    pub fn from_trace(config: &SamplerConfig, data: &AssayDataset, trace: &ChainTrace) -> Self {
        let digest = data.digest();
        Self {
            fit_id: fit_id(config, &digest),
            config: config.clone(),
            dataset_name: data.name.clone(),
            dataset_digest: digest,
            n_isolates: data.n_isolates(),
            sigma_m: data.sigma_m(),
            sigma_d: data.sigma_d(),
            grid: trace.grid.clone(),
            samples: trace
                .samples
                .iter()
                .map(|s| SampleRecord {
                    curve: s.curve.clone(),
                    lambda: s.lambda,
                    n_knots: s.n_knots,
                    alpha: s.alpha,
                    n_clusters: s.n_clusters,
                })
                .collect(),
            acceptance: trace.acceptance.clone(),
            grids_file: GRIDS_FILE.to_string(),
            dataset_file: DATASET_FILE.to_string(),
        }
    }

    pub fn model(&self) -> ModelKind {
        self.config.model
    }

    /// Write `fit.json`, the grid sidecar and a canonical copy of the dataset
    /// into `dir`, creating it if needed. Returns the written paths.
    pub fn save(&self, dir: impl AsRef<Path>, trace: &ChainTrace, data: &AssayDataset) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        if data.digest() != self.dataset_digest {
            return Err(Error::Artifact("dataset does not match artifact".into()));
        }
        if trace.samples.len() != self.samples.len() || trace.grid.len() != self.grid.len() {
            return Err(Error::Artifact("trace does not match artifact".into()));
        }
        write_grids(&dir.join(&self.grids_file), &trace.g_matrix(), &trace.f_matrix(), self.samples.len(), self.grid.len())?;
        data.save(dir.join(&self.dataset_file))?;
        let path = dir.join(FIT_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(vec![path, dir.join(&self.grids_file), dir.join(&self.dataset_file)])
    }

    /// The dataset stored next to a fit, checked against the recorded digest.
    pub fn load_dataset(&self, dir: impl AsRef<Path>) -> Result<AssayDataset> {
        let data = AssayDataset::load_canonical(
            dir.as_ref().join(&self.dataset_file),
            &self.dataset_name,
            self.sigma_m,
            self.sigma_d,
        )?;
        if data.digest() != self.dataset_digest {
            return Err(Error::Artifact("stored dataset does not match the fit's digest".into()));
        }
        Ok(data)
    }

    /// Directory holding a fit, given the directory or its `fit.json`.
    pub fn dir_of(path: &Path) -> PathBuf {
        if path.is_dir() {
            path.to_path_buf()
        } else {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        }
    }

    /// Read a fit from its directory or from the path of `fit.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<(FitArtifact, ChainTrace)> {
        let path = path.as_ref();
        let dir = Self::dir_of(path);
        let json = if path.is_dir() { path.join(FIT_FILE) } else { path.to_path_buf() };
        let art: FitArtifact = serde_json::from_slice(&fs::read(&json)?)?;
        let (rows, cols, g, f) = read_grids(&dir.join(&art.grids_file))?;
        if rows != art.samples.len() || cols != art.grid.len() {
            return Err(Error::Artifact(format!(
                "sidecar is {rows}×{cols}, expected {}×{}",
                art.samples.len(),
                art.grid.len()
            )));
        }
        let samples = art
            .samples
            .iter()
            .enumerate()
            .map(|(r, s)| TraceSample {
                curve: s.curve.clone(),
                lambda: s.lambda,
                n_knots: s.n_knots,
                alpha: s.alpha,
                n_clusters: s.n_clusters,
                g: g[r * cols..(r + 1) * cols].to_vec(),
                f: f[r * cols..(r + 1) * cols].to_vec(),
            })
            .collect();
        let trace = ChainTrace {
            model: art.config.model,
            grid: art.grid.clone(),
            samples,
            acceptance: art.acceptance.clone(),
        };
        Ok((art, trace))
    }
}

pub fn write_grids(path: &Path, g: &[f64], f: &[f64], rows: usize, cols: usize) -> Result<()> {
    if g.len() != rows * cols || f.len() != rows * cols {
        return Err(Error::Artifact("grid blocks have the wrong size".into()));
    }
    let mut buf = Vec::with_capacity(32 + 16 * rows * cols);
    buf.extend_from_slice(SIDECAR_MAGIC);
    for v in [rows as u64, cols as u64, 2] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in g.iter().chain(f) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Returns `(rows, cols, g, f)`.
pub fn read_grids(path: &Path) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_grids(&bytes)
}

pub fn parse_grids(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
    if bytes.len() < 32 || &bytes[..8] != SIDECAR_MAGIC {
        return Err(Error::Artifact("not a grid sidecar".into()));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize;
    let (rows, cols, blocks) = (word(0), word(1), word(2));
    let n = rows.checked_mul(cols).ok_or_else(|| Error::Artifact("sidecar dimensions overflow".into()))?;
    if blocks != 2 || bytes.len() != 32 + 16 * n {
        return Err(Error::Artifact("sidecar is truncated or has an unexpected layout".into()));
    }
    let vals: Vec<f64> =
        bytes[32..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let (g, f) = vals.split_at(n);
    Ok((rows, cols, g.to_vec(), f.to_vec()))
}

/// Run bookkeeping kept apart from the artifact so artifacts stay
/// byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: Vec<String>,
    pub config_digest: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dataset_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    /// Every file the command wrote, with its SHA-256.
    pub files: Vec<ManifestFile>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(command: Vec<String>, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command,
            config_digest: sha256_hex(&serde_json::to_vec(config)?),
            dataset_digest: None,
            seed: None,
            files: Vec::new(),
            wall_seconds: 0.0,
        })
    }

    /// Record a written file; `path` is stored relative to `base`.
    pub fn add_file(&mut self, base: &Path, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(base).unwrap_or(path);
        self.files.push(ManifestFile { path: rel.display().to_string(), sha256: sha256_hex(&fs::read(path)?) });
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }
}

/// Breakpoint posterior for one MIC breakpoint pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakpointReport {
    pub fit_id: String,
    pub mic_breakpoints: MicBreakpoints,
    pub search: SearchRange,
    pub n_samples: u64,
    pub map: DiaBreakpoints,
    /// Rows until cumulative probability reaches 95%.
    pub table: Vec<PosteriorRow>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_loss: Option<LossGrid>,
}

impl BreakpointReport {
    pub fn new(fit_id: &str, bp: MicBreakpoints, search: SearchRange, analysis: &BreakpointAnalysis, with_loss: bool) -> Result<Self> {
        let map = analysis
            .posterior
            .map_set()
            .ok_or_else(|| Error::Contract("empty breakpoint posterior".into()))?;
        Ok(Self {
            fit_id: fit_id.to_string(),
            mic_breakpoints: bp,
            search,
            n_samples: analysis.posterior.total(),
            map,
            table: analysis.posterior.table(),
            mean_loss: with_loss.then(|| analysis.mean_loss.clone()),
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.table {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Artifact(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}


impl LossGrid {
    /// `d_lower,d_upper,loss` for every admissible pair.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("d_lower,d_upper,loss\n");
        for (set, v) in self.iter() {
            s.push_str(&format!("{},{},{}\n", set.lower, set.upper, v));
        }
        s
    }
}

/// Everything needed to draw the fitted curve, its band, the density and
/// the observed scatter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub summary: PosteriorSummary,
    /// `(mic, dia, count)` cells of the dataset.
    pub scatter: Vec<(i32, i32, u32)>,
}

impl PlotData {
    pub fn new(trace: &ChainTrace, data: &AssayDataset) -> Result<Self> {
        Ok(Self {
            summary: posterior_summary(trace)?,
            scatter: data.observations().iter().map(|o| (o.mic, o.dia, o.count)).collect(),
        })
    }

    pub fn curve_csv(&self) -> String {
        let s = &self.summary;
        let mut out = String::from("grid,g_median,g_lo,g_hi\n");
        for i in 0..s.grid.len() {
            out.push_str(&format!("{},{},{},{}\n", s.grid[i], s.g_median[i], s.g_lo[i], s.g_hi[i]));
        }
        out
    }

    pub fn density_csv(&self) -> String {
        let s = &self.summary;
        let mut out = String::from("grid,f_median,f_lo,f_hi\n");
        for i in 0..s.grid.len() {
            out.push_str(&format!("{},{},{},{}\n", s.grid[i], s.f_median[i], s.f_lo[i], s.f_hi[i]));
        }
        out
    }

    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("mic,dia,count\n");
        for (m, d, c) in &self.scatter {
            out.push_str(&format!("{m},{d},{c}\n"));
        }
        out
    }
}
