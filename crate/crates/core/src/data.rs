//! Readings, covariates and site geometry.
//!
//! Three CSV files make up a dataset:
//!
//! * sites: `site_id,x_km,y_km`
//! * readings: `site_id,kind,start_day,span_days,log_value`
//! * covariates: `site_id,day,<named columns>`
//!
//! Coordinates arrive pre-projected to planar kilometres and days are integer
//! offsets from an external epoch. Interaction covariates are computed here from
//! the base columns and never read from disk.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Integer day index relative to the dataset epoch.
pub type Day = u32;

/// Length of the periodic year used by the seasonal trend (leap days ignored).
pub const DAYS_PER_YEAR: u32 = 365;

/// Expected range of multiday aggregation windows; values outside only warn.
pub const AGGREGATE_SPAN_RANGE: (u32, u32) = (3, 14);

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("missing covariate row for site `{site}` on day {day}")]
    MissingCovariate { site: String, day: Day },
    #[error("unknown site `{0}`")]
    UnknownSite(String),
    #[error("duplicate site id `{0}`")]
    DuplicateSite(String),
    #[error("invalid reading: {0}")]
    InvalidReading(String),
    #[error("schema error: {0}")]
    Schema(String),
}

/// Day of the seasonal year, `t mod 365`.
pub fn day_of_year(t: Day) -> u32 {
    t % DAYS_PER_YEAR
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId(pub String);

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Planar location in kilometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacePoint {
    pub x_km: f64,
    pub y_km: f64,
}

impl SpacePoint {
    pub fn new(x_km: f64, y_km: f64) -> Self {
        Self { x_km, y_km }
    }

    pub fn distance(&self, other: &SpacePoint) -> f64 {
        (self.x_km - other.x_km).hypot(self.y_km - other.y_km)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: SiteId,
    pub point: SpacePoint,
}

/// Source of a reading: outdoor daily, indoor daily, or indoor multiday aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReadingKind {
    Bco,
    Bci,
    Bca,
}

impl ReadingKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReadingKind::Bco => "BCO",
            ReadingKind::Bci => "BCI",
            ReadingKind::Bca => "BCA",
        }
    }

    pub fn is_daily(&self) -> bool {
        !matches!(self, ReadingKind::Bca)
    }
}

impl std::str::FromStr for ReadingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BCO" => Ok(ReadingKind::Bco),
            "BCI" => Ok(ReadingKind::Bci),
            "BCA" => Ok(ReadingKind::Bca),
            other => Err(format!("unknown reading kind `{other}`")),
        }
    }
}

/// One log-concentration reading. `site` indexes into [`Dataset::sites`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorReading {
    pub site: usize,
    pub kind: ReadingKind,
    pub start_day: Day,
    pub span_days: u32,
    pub y: f64,
}

impl MonitorReading {
    /// Days of the latent process this reading depends on.
    pub fn days(&self) -> std::ops::Range<Day> {
        self.start_day..self.start_day + self.span_days
    }

    pub fn end_day(&self) -> Day {
        self.start_day + self.span_days - 1
    }
}

/// Names of the base covariate columns and the products computed from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    /// Prepend a constant column (the global intercept).
    pub intercept: bool,
    pub base: Vec<String>,
    /// Each entry names base columns whose product forms one predictor.
    pub interactions: Vec<Vec<String>>,
}

impl CovariateSchema {
    pub fn intercept_only() -> Self {
        Self {
            intercept: true,
            base: Vec::new(),
            interactions: Vec::new(),
        }
    }

    /// Predictor layout used for the Boston black-carbon analysis.
    pub fn boston() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            intercept: true,
            base: s(&[
                "log_pop_sqkm",
                "log_adtxlth100m",
                "nlcd",
                "loghsph",
                "wind_sp",
                "log_pbl",
            ]),
            interactions: vec![
                s(&["log_pop_sqkm", "wind_sp"]),
                s(&["log_adtxlth100m", "wind_sp"]),
                s(&["log_pbl", "wind_sp"]),
                s(&["log_pop_sqkm", "log_pbl", "wind_sp"]),
                s(&["log_adtxlth100m", "log_pbl", "wind_sp"]),
            ],
        }
    }

    /// Number of predictors in an expanded row.
    pub fn width(&self) -> usize {
        usize::from(self.intercept) + self.base.len() + self.interactions.len()
    }

    pub fn predictor_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.width());
        if self.intercept {
            names.push("1".to_string());
        }
        names.extend(self.base.iter().cloned());
        names.extend(self.interactions.iter().map(|t| t.join("*")));
        names
    }

    fn interaction_indices(&self) -> Result<Vec<Vec<usize>>, DataError> {
        self.interactions
            .iter()
            .map(|term| {
                term.iter()
                    .map(|name| {
                        self.base.iter().position(|b| b == name).ok_or_else(|| {
                            DataError::Schema(format!("interaction uses unknown column `{name}`"))
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// Expand base values to the full predictor row.
    pub fn expand(&self, base: &[f64]) -> Result<Vec<f64>, DataError> {
        if base.len() != self.base.len() {
            return Err(DataError::Schema(format!(
                "expected {} base covariates, got {}",
                self.base.len(),
                base.len()
            )));
        }
        let mut row = Vec::with_capacity(self.width());
        if self.intercept {
            row.push(1.0);
        }
        row.extend_from_slice(base);
        for term in self.interaction_indices()? {
            row.push(term.iter().map(|&i| base[i]).product());
        }
        Ok(row)
    }
}

/// Covariate rows keyed by `(site index, day)`, holding base and expanded values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateTable {
    base: BTreeMap<(usize, Day), Vec<f64>>,
    expanded: HashMap<(usize, Day), Vec<f64>>,
}

impl CovariateTable {
    pub fn insert(
        &mut self,
        schema: &CovariateSchema,
        site: usize,
        day: Day,
        base: Vec<f64>,
    ) -> Result<(), DataError> {
        let row = schema.expand(&base)?;
        self.expanded.insert((site, day), row);
        self.base.insert((site, day), base);
        Ok(())
    }

    /// Expanded predictor row `x(s, t)`.
    pub fn row(&self, site: usize, day: Day) -> Option<&[f64]> {
        self.expanded.get(&(site, day)).map(|v| v.as_slice())
    }

    pub fn base_row(&self, site: usize, day: Day) -> Option<&[f64]> {
        self.base.get(&(site, day)).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &(usize, Day)> {
        self.base.keys()
    }
}

/// Validated, immutable collection of sites, readings and covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: CovariateSchema,
    pub sites: Vec<Site>,
    pub readings: Vec<MonitorReading>,
    pub covariates: CovariateTable,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub sites: PathBuf,
    pub readings: PathBuf,
    pub covariates: PathBuf,
}

impl DatasetPaths {
    /// Conventional file names inside one directory.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            sites: dir.join("sites.csv"),
            readings: dir.join("readings.csv"),
            covariates: dir.join("covariates.csv"),
        }
    }
}

impl Dataset {
    /// Validate and assemble a dataset from in-memory parts.
    pub fn new(
        schema: CovariateSchema,
        sites: Vec<Site>,
        readings: Vec<MonitorReading>,
        covariates: CovariateTable,
    ) -> Result<Self, DataError> {
        let mut warnings = Vec::new();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, site) in sites.iter().enumerate() {
            if !site.point.x_km.is_finite() || !site.point.y_km.is_finite() {
                return Err(DataError::InvalidReading(format!(
                    "site `{}` has non-finite coordinates",
                    site.id
                )));
            }
            if seen.insert(site.id.0.as_str(), i).is_some() {
                return Err(DataError::DuplicateSite(site.id.0.clone()));
            }
        }
        // Co-located sites keep separate ids; the covariance sees one location.
        let mut by_coord: HashMap<(u64, u64), &SiteId> = HashMap::new();
        for site in &sites {
            let key = (site.point.x_km.to_bits(), site.point.y_km.to_bits());
            if let Some(other) = by_coord.insert(key, &site.id) {
                let msg = format!(
                    "sites `{other}` and `{}` share coordinates; treated as one location",
                    site.id
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }

        for r in &readings {
            let site = sites
                .get(r.site)
                .ok_or_else(|| DataError::UnknownSite(format!("#{}", r.site)))?;
            if !r.y.is_finite() {
                return Err(DataError::InvalidReading(format!(
                    "non-finite value at site `{}` day {}",
                    site.id, r.start_day
                )));
            }
            match r.kind {
                ReadingKind::Bco | ReadingKind::Bci if r.span_days != 1 => {
                    return Err(DataError::InvalidReading(format!(
                        "{} reading at site `{}` day {} must span one day, got {}",
                        r.kind.as_str(),
                        site.id,
                        r.start_day,
                        r.span_days
                    )));
                }
                ReadingKind::Bca => {
                    if r.span_days == 0 {
                        return Err(DataError::InvalidReading(format!(
                            "BCA reading at site `{}` has zero span",
                            site.id
                        )));
                    }
                    let (lo, hi) = AGGREGATE_SPAN_RANGE;
                    if r.span_days < lo || r.span_days > hi {
                        let msg = format!(
                            "BCA reading at site `{}` day {} spans {} days, outside the expected {lo}-{hi}",
                            site.id, r.start_day, r.span_days
                        );
                        log::warn!("{msg}");
                        warnings.push(msg);
                    }
                }
                _ => {}
            }
            for day in r.days() {
                if covariates.row(r.site, day).is_none() {
                    return Err(DataError::MissingCovariate {
                        site: site.id.0.clone(),
                        day,
                    });
                }
            }
        }

        Ok(Self {
            schema,
            sites,
            readings,
            covariates,
            warnings,
        })
    }

    /// Read and validate the three CSV files.
    pub fn load(paths: &DatasetPaths, schema: &CovariateSchema) -> Result<Self, DataError> {
        let sites = read_sites(&paths.sites)?;
        let index: HashMap<String, usize> = sites
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.0.clone(), i))
            .collect();
        let readings = read_readings(&paths.readings, &index)?;
        let covariates = read_covariates(&paths.covariates, schema, &index)?;
        Self::new(schema.clone(), sites, readings, covariates)
    }

    /// Write the canonical CSV form. Loading the result reproduces this dataset.
    pub fn write(&self, paths: &DatasetPaths) -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(&paths.sites).map_err(io(&paths.sites))?);
        writeln!(w, "site_id,x_km,y_km").map_err(io(&paths.sites))?;
        for s in &self.sites {
            writeln!(w, "{},{},{}", s.id, s.point.x_km, s.point.y_km).map_err(io(&paths.sites))?;
        }
        w.flush().map_err(io(&paths.sites))?;

        let mut w = BufWriter::new(File::create(&paths.readings).map_err(io(&paths.readings))?);
        writeln!(w, "site_id,kind,start_day,span_days,log_value").map_err(io(&paths.readings))?;
        for r in &self.readings {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.sites[r.site].id,
                r.kind.as_str(),
                r.start_day,
                r.span_days,
                r.y
            )
            .map_err(io(&paths.readings))?;
        }
        w.flush().map_err(io(&paths.readings))?;

        let mut w =
            BufWriter::new(File::create(&paths.covariates).map_err(io(&paths.covariates))?);
        let mut header = String::from("site_id,day");
        for name in &self.schema.base {
            header.push(',');
            header.push_str(name);
        }
        writeln!(w, "{header}").map_err(io(&paths.covariates))?;
        for (&(site, day), base) in &self.covariates.base {
            write!(w, "{},{}", self.sites[site].id, day).map_err(io(&paths.covariates))?;
            for v in base {
                write!(w, ",{v}").map_err(io(&paths.covariates))?;
            }
            writeln!(w).map_err(io(&paths.covariates))?;
        }
        w.flush().map_err(io(&paths.covariates))?;
        Ok(())
    }

    pub fn site_index(&self, id: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.id.0 == id)
    }

    pub fn count(&self, kind: ReadingKind) -> usize {
        self.readings.iter().filter(|r| r.kind == kind).count()
    }

    /// Expanded covariate row `x(s, t)`; errors name the missing pair.
    pub fn covariate_row(&self, site: usize, day: Day) -> Result<&[f64], DataError> {
        self.covariates
            .row(site, day)
            .ok_or_else(|| DataError::MissingCovariate {
                site: self.sites[site].id.0.clone(),
                day,
            })
    }

    /// Copy of this dataset keeping only readings accepted by `keep`.
    pub fn filter_readings(&self, mut keep: impl FnMut(&MonitorReading) -> bool) -> Self {
        let mut out = self.clone();
        out.readings.retain(|r| keep(r));
        out
    }

    /// Indices of sites that carry at least one reading.
    pub fn active_sites(&self) -> Vec<usize> {
        let mut used = vec![false; self.sites.len()];
        for r in &self.readings {
            used[r.site] = true;
        }
        (0..self.sites.len()).filter(|&i| used[i]).collect()
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_err(path: &Path, err: csv::Error) -> DataError {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: err.to_string(),
    }
}

fn field<T: std::str::FromStr>(
    path: &Path,
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> Result<T, DataError> {
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    let raw = record.get(idx).ok_or_else(|| DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("missing column `{name}`"),
    })?;
    raw.parse().map_err(|_| DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("cannot parse `{raw}` as {name}"),
    })
}

fn check_header(path: &Path, reader: &mut csv::Reader<File>, expected: &[&str]) -> Result<csv::StringRecord, DataError> {
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    for (i, name) in expected.iter().enumerate() {
        if header.get(i) != Some(*name) {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected column {} to be `{name}`", i + 1),
            });
        }
    }
    Ok(header)
}

fn read_sites(path: &Path) -> Result<Vec<Site>, DataError> {
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &["site_id", "x_km", "y_km"])?;
    let mut sites = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let id: String = field(path, &record, 0, "site_id")?;
        let x: f64 = field(path, &record, 1, "x_km")?;
        let y: f64 = field(path, &record, 2, "y_km")?;
        sites.push(Site {
            id: SiteId(id),
            point: SpacePoint::new(x, y),
        });
    }
    Ok(sites)
}

fn read_readings(
    path: &Path,
    index: &HashMap<String, usize>,
) -> Result<Vec<MonitorReading>, DataError> {
    let mut reader = open_csv(path)?;
    check_header(
        path,
        &mut reader,
        &["site_id", "kind", "start_day", "span_days", "log_value"],
    )?;
    let mut readings = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let id: String = field(path, &record, 0, "site_id")?;
        let site = *index.get(&id).ok_or(DataError::UnknownSite(id))?;
        let kind: ReadingKind = field(path, &record, 1, "kind")?;
        readings.push(MonitorReading {
            site,
            kind,
            start_day: field(path, &record, 2, "start_day")?,
            span_days: field(path, &record, 3, "span_days")?,
            y: field(path, &record, 4, "log_value")?,
        });
    }
    Ok(readings)
}

fn read_covariates(
    path: &Path,
    schema: &CovariateSchema,
    index: &HashMap<String, usize>,
) -> Result<CovariateTable, DataError> {
    let mut reader = open_csv(path)?;
    let header = check_header(path, &mut reader, &["site_id", "day"])?;
    let columns: Vec<usize> = schema
        .base
        .iter()
        .map(|name| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::Schema(format!("covariate column `{name}` not found")))
        })
        .collect::<Result<_, _>>()?;
    let mut table = CovariateTable::default();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let id: String = field(path, &record, 0, "site_id")?;
        let site = *index.get(&id).ok_or(DataError::UnknownSite(id))?;
        let day: Day = field(path, &record, 1, "day")?;
        let base = columns
            .iter()
            .zip(&schema.base)
            .map(|(&c, name)| field::<f64>(path, &record, c, name))
            .collect::<Result<Vec<_>, _>>()?;
        table.insert(schema, site, day, base)?;
    }
    Ok(table)
}


fn io(path: &Path) -> impl Fn(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}
