//! Assay observations, dataset ingestion and breakpoint conventions.
//!
//! MIC values are stored on the log2 dilution scale, DIA values in whole
//! millimetres. A dataset is a list of aggregated cells, each carrying the
//! number of isolates observed at that (MIC, DIA, censoring) combination.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// MIC measurement-error SD (log2 units) used when none is supplied.
pub const DEFAULT_SIGMA_M: f64 = 0.707;
/// DIA measurement-error SD (mm) used when none is supplied.
pub const DEFAULT_SIGMA_D: f64 = 2.121;

/// Accepted DIA range on ingestion. The lower bound is the disk diameter.
pub const DIA_MIN_MM: i32 = 6;
pub const DIA_MAX_MM: i32 = 60;

const CSV_HEADER: [&str; 5] = ["mic", "dia", "count", "mic_censored", "dia_censored"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Censor {
    #[default]
    None,
    /// Observed value is at or below the reported value.
    Left,
    /// Observed value is at or above the reported value.
    Right,
}

impl Censor {
    pub fn as_str(self) -> &'static str {
        match self {
            Censor::None => "none",
            Censor::Left => "left",
            Censor::Right => "right",
        }
    }
}

impl fmt::Display for Censor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Censor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "" | "none" | "0" | "false" => Ok(Censor::None),
            "left" => Ok(Censor::Left),
            "right" => Ok(Censor::Right),
            other => Err(format!("unknown censor token {other:?} (expected none, left or right)")),
        }
    }
}

/// One aggregated scatterplot cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub mic: i32,
    pub dia: i32,
    pub count: u32,
    #[serde(default)]
    pub mic_censor: Censor,
    #[serde(default)]
    pub dia_censor: Censor,
}

impl Observation {
    pub fn new(mic: i32, dia: i32, count: u32) -> Self {
        Self { mic, dia, count, mic_censor: Censor::None, dia_censor: Censor::None }
    }

    fn cell_key(&self) -> (i32, i32, Censor, Censor) {
        (self.mic, self.dia, self.mic_censor, self.dia_censor)
    }
}

/// A single isolate, i.e. one unit of an [`Observation`]'s count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Isolate {
    pub mic: i32,
    pub dia: i32,
    pub mic_censor: Censor,
    pub dia_censor: Censor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssayDataset {
    pub name: String,
    observations: Vec<Observation>,
    sigma_m: f64,
    sigma_d: f64,
}

impl AssayDataset {
    /// Builds a dataset, summing duplicate cells and sorting into canonical
    /// order.
    pub fn new(
        name: impl Into<String>,
        observations: Vec<Observation>,
        sigma_m: f64,
        sigma_d: f64,
    ) -> Result<Self> {
        if !(sigma_m > 0.0 && sigma_m.is_finite()) {
            return Err(Error::Validation(format!("sigma_m must be positive, got {sigma_m}")));
        }
        if !(sigma_d > 0.0 && sigma_d.is_finite()) {
            return Err(Error::Validation(format!("sigma_d must be positive, got {sigma_d}")));
        }
        let mut cells: BTreeMap<(i32, i32, Censor, Censor), u32> = BTreeMap::new();
        for obs in &observations {
            if obs.count == 0 {
                return Err(Error::Validation("count must be ≥ 1".into()));
            }
            let slot = cells.entry(obs.cell_key()).or_insert(0);
            *slot = slot
                .checked_add(obs.count)
                .ok_or_else(|| Error::Validation("isolate count overflow".into()))?;
        }
        if cells.is_empty() {
            return Err(Error::Validation("dataset has no isolates".into()));
        }
        let observations: Vec<Observation> = cells
            .into_iter()
            .map(|((mic, dia, mic_censor, dia_censor), count)| Observation {
                mic,
                dia,
                count,
                mic_censor,
                dia_censor,
            })
            .collect();

        let min_mic = observations.iter().map(|o| o.mic).min().unwrap();
        let max_mic = observations.iter().map(|o| o.mic).max().unwrap();
        let min_dia = observations.iter().map(|o| o.dia).min().unwrap();
        let max_dia = observations.iter().map(|o| o.dia).max().unwrap();
        for o in &observations {
            if o.mic_censor == Censor::Left && o.mic != min_mic {
                return Err(Error::Validation(format!(
                    "left-censored MIC {} is not the lowest tested concentration {min_mic}",
                    o.mic
                )));
            }
            if o.mic_censor == Censor::Right && o.mic != max_mic {
                return Err(Error::Validation(format!(
                    "right-censored MIC {} is not the highest tested concentration {max_mic}",
                    o.mic
                )));
            }
            if o.dia_censor == Censor::Left && o.dia != min_dia {
                return Err(Error::Validation(format!(
                    "left-censored DIA {} is not the smallest reported diameter {min_dia}",
                    o.dia
                )));
            }
            if o.dia_censor == Censor::Right && o.dia != max_dia {
                return Err(Error::Validation(format!(
                    "right-censored DIA {} is not the largest reported diameter {max_dia}",
                    o.dia
                )));
            }
        }

        Ok(Self { name: name.into(), observations, sigma_m, sigma_d })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn sigma_m(&self) -> f64 {
        self.sigma_m
    }

    pub fn sigma_d(&self) -> f64 {
        self.sigma_d
    }

    /// Total number of isolates, N.
    pub fn n_isolates(&self) -> usize {
        self.observations.iter().map(|o| o.count as usize).sum()
    }

    /// One entry per isolate, in canonical cell order.
    pub fn isolates(&self) -> Vec<Isolate> {
        let mut out = Vec::with_capacity(self.n_isolates());
        for o in &self.observations {
            let iso = Isolate {
                mic: o.mic,
                dia: o.dia,
                mic_censor: o.mic_censor,
                dia_censor: o.dia_censor,
            };
            out.extend(std::iter::repeat_n(iso, o.count as usize));
        }
        out
    }

    /// Smallest and largest observed MIC (censored cells included).
    pub fn mic_range(&self) -> (i32, i32) {
        let lo = self.observations.iter().map(|o| o.mic).min().unwrap();
        let hi = self.observations.iter().map(|o| o.mic).max().unwrap();
        (lo, hi)
    }

    pub fn has_censoring(&self) -> bool {
        self.observations
            .iter()
            .any(|o| o.mic_censor != Censor::None || o.dia_censor != Censor::None)
    }

    /// Reads a dataset from CSV with header `mic,dia,count[,mic_censored,dia_censored]`.
    ///
    /// The `mic` and `dia` columns also accept `<=V`, `<V`, `>=V` and `>V`,
    /// which are translated into censoring flags. DIA values must lie in
    /// [`DIA_MIN_MM`, `DIA_MAX_MM`].
    pub fn from_csv_reader<R: Read>(
        name: impl Into<String>,
        reader: R,
        sigma_m: f64,
        sigma_d: f64,
    ) -> Result<Self> {
        Self::read_csv(name, reader, sigma_m, sigma_d, true)
    }

    /// Reads a canonical copy written by [`AssayDataset::save`], without the
    /// DIA range check (simulated data may fall outside it).
    pub fn load_canonical(path: impl AsRef<Path>, name: &str, sigma_m: f64, sigma_d: f64) -> Result<Self> {
        Self::read_csv(name, std::fs::File::open(path)?, sigma_m, sigma_d, false)
    }

    fn read_csv<R: Read>(
        name: impl Into<String>,
        reader: R,
        sigma_m: f64,
        sigma_d: f64,
        check_range: bool,
    ) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
        let (mic_col, dia_col) = match (col("mic"), col("dia")) {
            (Some(m), Some(d)) => (m, d),
            _ => {
                return Err(Error::Parse {
                    row: 1,
                    message: "header must contain mic and dia columns".into(),
                })
            }
        };
        let count_col = col("count");
        let mic_cens_col = col("mic_censored");
        let dia_cens_col = col("dia_censored");

        let mut observations = Vec::new();
        for (idx, record) in rdr.records().enumerate() {
            // Header is line 1.
            let row = idx + 2;
            let record = record.map_err(|e| Error::Parse { row, message: e.to_string() })?;
            if record.iter().all(|f| f.is_empty()) {
                continue;
            }
            let field = |c: Option<usize>| c.and_then(|c| record.get(c)).unwrap_or("");

            let (mic, mic_prefix) = parse_assay_value(field(Some(mic_col)), AssayKind::Mic)
                .map_err(|message| Error::Parse { row, message })?;
            let (dia, dia_prefix) = parse_assay_value(field(Some(dia_col)), AssayKind::Dia)
                .map_err(|message| Error::Parse { row, message })?;
            let count = match field(count_col) {
                "" if count_col.is_none() => 1,
                raw => {
                    let c: i64 = raw.parse().map_err(|_| Error::Parse {
                        row,
                        message: format!("count {raw:?} is not an integer"),
                    })?;
                    if c < 1 {
                        return Err(Error::Parse { row, message: "count must be ≥ 1".into() });
                    }
                    u32::try_from(c).map_err(|_| Error::Parse {
                        row,
                        message: format!("count {c} too large"),
                    })?
                }
            };
            let mic_censor = merge_censor(mic_prefix, field(mic_cens_col))
                .map_err(|message| Error::Parse { row, message: format!("mic_censored: {message}") })?;
            let dia_censor = merge_censor(dia_prefix, field(dia_cens_col))
                .map_err(|message| Error::Parse { row, message: format!("dia_censored: {message}") })?;
            if check_range && !(DIA_MIN_MM..=DIA_MAX_MM).contains(&dia) {
                return Err(Error::Parse {
                    row,
                    message: format!("DIA {dia} mm outside [{DIA_MIN_MM}, {DIA_MAX_MM}]"),
                });
            }
            observations.push(Observation { mic, dia, count, mic_censor, dia_censor });
        }
        Self::new(name, observations, sigma_m, sigma_d)
    }

    pub fn load(path: impl AsRef<Path>, sigma_m: f64, sigma_d: f64) -> Result<Self> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(name, file, sigma_m, sigma_d)
    }

    /// Canonical CSV: full header, one line per aggregated cell, sorted.
    pub fn to_csv_string(&self) -> String {
        let mut out = CSV_HEADER.join(",");
        out.push('\n');
        for o in &self.observations {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                o.mic, o.dia, o.count, o.mic_censor, o.dia_censor
            ));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    /// SHA-256 over the canonical CSV and the error SDs.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_csv_string().as_bytes());
        h.update(format!("sigma_m={:?};sigma_d={:?}", self.sigma_m, self.sigma_d).as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy)]
enum AssayKind {
    Mic,
    Dia,
}

/// Parses an assay cell, returning the value and any censoring implied by an
/// inequality prefix. `>V` on an integer scale means at least `V + 1`.
fn parse_assay_value(raw: &str, kind: AssayKind) -> std::result::Result<(i32, Option<Censor>), String> {
    let label = match kind {
        AssayKind::Mic => "mic",
        AssayKind::Dia => "dia",
    };
    let (prefix, rest) = if let Some(r) = raw.strip_prefix("<=") {
        (Some(("<=", Censor::Left)), r)
    } else if let Some(r) = raw.strip_prefix(">=") {
        (Some((">=", Censor::Right)), r)
    } else if let Some(r) = raw.strip_prefix('<') {
        (Some(("<", Censor::Left)), r)
    } else if let Some(r) = raw.strip_prefix('>') {
        (Some((">", Censor::Right)), r)
    } else {
        (None, raw)
    };
    let value: i32 = rest
        .trim()
        .parse()
        .map_err(|_| format!("{label} value {raw:?} is not an integer"))?;
    Ok(match prefix {
        None => (value, None),
        Some(("<", c)) => (value - 1, Some(c)),
        Some((">", c)) => (value + 1, Some(c)),
        Some((_, c)) => (value, Some(c)),
    })
}

fn merge_censor(prefix: Option<Censor>, column: &str) -> std::result::Result<Censor, String> {
    let col: Censor = column.parse()?;
    match (prefix, col) {
        (None, c) => Ok(c),
        (Some(p), Censor::None) => Ok(p),
        (Some(p), c) if p == c => Ok(p),
        (Some(p), c) => Err(format!("inequality prefix implies {p} but column says {c}")),
    }
}

/// Assay MIC breakpoints (M_L, M_U) on the log2 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicBreakpoints {
    pub lower: i32,
    pub upper: i32,
}

impl MicBreakpoints {
    pub fn new(lower: i32, upper: i32) -> Result<Self> {
        if lower >= upper {
            return Err(Error::Validation(format!(
                "MIC breakpoints must satisfy lower < upper, got ({lower}, {upper})"
            )));
        }
        Ok(Self { lower, upper })
    }

    /// The assay rounds MIC upward, so the true breakpoints sit half a
    /// dilution below the assay ones.
    pub fn true_breakpoints(&self) -> TrueMicBreakpoints {
        TrueMicBreakpoints { lower: self.lower as f64 - 0.5, upper: self.upper as f64 - 0.5 }
    }
}

impl fmt::Display for MicBreakpoints {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lower, self.upper)
    }
}

/// True-scale MIC breakpoints (M_L*, M_U*).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueMicBreakpoints {
    pub lower: f64,
    pub upper: f64,
}

pub fn true_mic_breakpoints(bp: MicBreakpoints) -> TrueMicBreakpoints {
    bp.true_breakpoints()
}

/// DIA breakpoints in mm: `lower` is the resistant boundary (D_L), `upper`
/// the susceptible boundary (D_U).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DiaBreakpoints {
    pub lower: i32,
    pub upper: i32,
}

impl DiaBreakpoints {
    pub fn new(lower: i32, upper: i32) -> Result<Self> {
        if lower >= upper {
            return Err(Error::Validation(format!(
                "DIA breakpoints must satisfy lower < upper, got ({lower}, {upper})"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn width(&self) -> i32 {
        self.upper - self.lower
    }
}

impl fmt::Display for DiaBreakpoints {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lower, self.upper)
    }
}
