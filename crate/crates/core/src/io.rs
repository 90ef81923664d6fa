//! File formats: CSV for tabular data, JSON for configs and models.
//!
//! Every writer goes through [`write_atomic`], so readers never see a
//! partially written file.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cluster::PolarTrainingSet;
use crate::eval::MonteCarloReport;
use crate::error::{Error, Result};
use crate::geometry::{IncidencePoint, NoiseCov, PathKind, PathMeasurement, Vec2};
use crate::gp::{Contours, GpModelSummary, RadialPrediction};
use crate::scene::ScenePath;

/// Angles above this in magnitude cannot be radians.
const ANGLE_LIMIT: f64 = PI + 1e-9;
/// A delay this long (a 300 km path) means the column holds nanoseconds.
const TOA_LIMIT: f64 = 1e-3;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })
}

fn csv_bytes<T: Serialize>(comments: &[String], rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for c in comments {
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Config(format!("csv encode: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::Config(format!("csv encode: {}", e.error())))
}

/// Comment lines (`# ...`) before the header, and the CSV body.
fn split_comments(text: &str) -> (Vec<&str>, usize) {
    let mut comments = Vec::new();
    let mut skipped = 0;
    for line in text.lines() {
        let t = line.trim_start();
        if let Some(rest) = t.strip_prefix('#') {
            comments.push(rest.trim());
            skipped += 1;
        } else if t.is_empty() {
            skipped += 1;
        } else {
            break;
        }
    }
    (comments, skipped)
}

/// Deserializes every data row; errors name the 1-based data row and the
/// file line.
fn parse_rows<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let (_, skipped) = split_comments(text);
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Parse {
        row: 0,
        line: skipped as u64 + 1,
        msg: e.to_string(),
    })?;
    let headers = headers.clone();
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i as u64 + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let value = record.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            row,
            line,
            msg: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

/// `key=value` pairs from comment lines, e.g. `# units=deg,ns`.
fn comment_value<'a>(comments: &[&'a str], key: &str) -> Option<&'a str> {
    comments.iter().find_map(|c| {
        c.split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Units {
    Si,
    DegNs,
}

impl Units {
    fn from_flag(flag: Option<&str>) -> Result<Self> {
        match flag {
            None => Ok(Units::Si),
            Some(v) => {
                let mut parts: Vec<&str> = v.split(',').map(str::trim).collect();
                parts.sort_unstable();
                match parts.as_slice() {
                    ["rad", "s"] => Ok(Units::Si),
                    ["deg", "ns"] => Ok(Units::DegNs),
                    _ => Err(Error::Config(format!(
                        "unknown units flag `{v}`; use `units=deg,ns` or `units=rad,s`"
                    ))),
                }
            }
        }
    }
}

/// One measurement row with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    pub measurement: PathMeasurement,
    pub truth: Option<Vec2>,
    pub is_outlier: bool,
}

impl From<&ScenePath> for MeasurementRecord {
    fn from(p: &ScenePath) -> Self {
        Self {
            measurement: p.measurement,
            truth: p.truth,
            is_outlier: p.is_outlier,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MeasurementRow {
    path_id: u32,
    #[serde(alias = "toa_ns")]
    toa_s: f64,
    #[serde(alias = "aod_deg")]
    aod_rad: f64,
    #[serde(alias = "aoa_deg")]
    aoa_rad: f64,
    #[serde(default)]
    truth_x: Option<f64>,
    #[serde(default)]
    truth_y: Option<f64>,
    #[serde(default)]
    is_outlier: Option<bool>,
    #[serde(default)]
    toa_var: Option<f64>,
    #[serde(default)]
    aod_var: Option<f64>,
    #[serde(default)]
    aoa_var: Option<f64>,
    #[serde(default)]
    kind: Option<PathKind>,
}

pub fn measurements_csv(records: &[MeasurementRecord]) -> Result<Vec<u8>> {
    csv_bytes(
        &[],
        records.iter().map(|r| {
            let m = &r.measurement;
            MeasurementRow {
                path_id: m.path_id,
                toa_s: m.toa,
                aod_rad: m.aod,
                aoa_rad: m.aoa,
                truth_x: r.truth.map(|t| t.x),
                truth_y: r.truth.map(|t| t.y),
                is_outlier: Some(r.is_outlier),
                toa_var: Some(m.noise_cov.var[0]),
                aod_var: Some(m.noise_cov.var[1]),
                aoa_var: Some(m.noise_cov.var[2]),
                kind: Some(m.kind_hint),
            }
        }),
    )
}

pub fn write_measurements(path: &Path, records: &[MeasurementRecord]) -> Result<()> {
    write_atomic(path, &measurements_csv(records)?)
}

/// Parses a measurement CSV. Columns `path_id, toa_s, aod_rad, aoa_rad`
/// are required; truth, outlier flag, per-path variances and kind are
/// optional. Values are SI unless a `# units=deg,ns` comment precedes the
/// header, in which case delays are nanoseconds, angles degrees, and
/// variances ns² / deg². The headers `toa_ns`, `aod_deg`, `aoa_deg` are
/// accepted as spellings of the three value columns; the flag alone sets
/// the units. Rows missing variances get `default_cov`.
pub fn parse_measurements(text: &str, default_cov: NoiseCov) -> Result<Vec<MeasurementRecord>> {
    let (comments, _) = split_comments(text);
    let units = Units::from_flag(comment_value(&comments, "units"))?;
    let rows: Vec<MeasurementRow> = parse_rows(text)?;
    let (t_scale, a_scale) = match units {
        Units::Si => (1.0, 1.0),
        Units::DegNs => (1e-9, PI / 180.0),
    };
    let mut out = Vec::with_capacity(rows.len());
    for (i, r) in rows.into_iter().enumerate() {
        let row = i as u64 + 1;
        let fail = |msg: String| Error::Parse { row, line: 0, msg };
        if !(r.toa_s.is_finite() && r.aod_rad.is_finite() && r.aoa_rad.is_finite()) {
            return Err(fail("non-finite measurement".into()));
        }
        if units == Units::Si {
            if r.aod_rad.abs() > ANGLE_LIMIT || r.aoa_rad.abs() > ANGLE_LIMIT {
                return Err(fail(format!(
                    "angle ({}, {}) exceeds π; if these are degrees add `# units=deg,ns`",
                    r.aod_rad, r.aoa_rad
                )));
            }
            if r.toa_s.abs() > TOA_LIMIT {
                return Err(fail(format!(
                    "toa {} s is implausibly large; if this is nanoseconds add `# units=deg,ns`",
                    r.toa_s
                )));
            }
        }
        let cov = match (r.toa_var, r.aod_var, r.aoa_var) {
            (None, None, None) => default_cov,
            (Some(t), Some(d), Some(a)) => NoiseCov::from_var([
                t * t_scale * t_scale,
                d * a_scale * a_scale,
                a * a_scale * a_scale,
            ])
            .map_err(|e| fail(e.to_string()))?,
            _ => return Err(fail("give all three variance columns or none".into())),
        };
        let truth = match (r.truth_x, r.truth_y) {
            (Some(x), Some(y)) => Some(Vec2::new(x, y)),
            (None, None) => None,
            _ => return Err(fail("truth_x and truth_y must both be set or both empty".into())),
        };
        let z = nalgebra::Vector3::new(r.toa_s * t_scale, r.aod_rad * a_scale, r.aoa_rad * a_scale);
        let mut measurement = PathMeasurement::new(r.path_id, z, cov);
        measurement.kind_hint = r.kind.unwrap_or_default();
        out.push(MeasurementRecord {
            measurement,
            truth,
            is_outlier: r.is_outlier.unwrap_or(false),
        });
    }
    Ok(out)
}

pub fn read_measurements(path: &Path, default_cov: NoiseCov) -> Result<Vec<MeasurementRecord>> {
    parse_measurements(&read_text(path)?, default_cov).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { row, line, msg } => Error::Parse {
            row,
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IpRow {
    path_id: u32,
    x: f64,
    y: f64,
    residual_cost: f64,
    converged: bool,
}

pub fn incidence_points_csv(ips: &[IncidencePoint]) -> Result<Vec<u8>> {
    csv_bytes(
        &[],
        ips.iter().map(|p| IpRow {
            path_id: p.source_path_id,
            x: p.position.x,
            y: p.position.y,
            residual_cost: p.residual_cost,
            converged: p.converged,
        }),
    )
}

pub fn write_incidence_points(path: &Path, ips: &[IncidencePoint]) -> Result<()> {
    write_atomic(path, &incidence_points_csv(ips)?)
}

pub fn parse_incidence_points(text: &str) -> Result<Vec<IncidencePoint>> {
    let rows: Vec<IpRow> = parse_rows(text)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if !(r.x.is_finite() && r.y.is_finite()) {
                return Err(Error::Parse {
                    row: i as u64 + 1,
                    line: 0,
                    msg: "non-finite position".into(),
                });
            }
            Ok(IncidencePoint {
                position: Vec2::new(r.x, r.y),
                source_path_id: r.path_id,
                residual_cost: r.residual_cost,
                converged: r.converged,
            })
        })
        .collect()
}

pub fn read_incidence_points(path: &Path) -> Result<Vec<IncidencePoint>> {
    parse_incidence_points(&read_text(path)?).map_err(|e| with_path(e, path))
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainingRow {
    theta_rad: f64,
    r_m: f64,
}

pub fn training_csv(set: &PolarTrainingSet) -> Result<Vec<u8>> {
    csv_bytes(
        &[format!(
            "cluster_id={} origin_x={} origin_y={}",
            set.cluster_id, set.origin.x, set.origin.y
        )],
        set.angles.iter().zip(&set.radii).map(|(t, r)| TrainingRow {
            theta_rad: *t,
            r_m: *r,
        }),
    )
}

pub fn write_training(path: &Path, set: &PolarTrainingSet) -> Result<()> {
    write_atomic(path, &training_csv(set)?)
}

/// Parses a training CSV; the cluster id and origin come from its comment
/// line and default to 0 and the coordinate origin.
pub fn parse_training(text: &str) -> Result<PolarTrainingSet> {
    let (comments, _) = split_comments(text);
    let num = |key: &str| -> Result<Option<f64>> {
        comment_value(&comments, key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad `{key}` in training header: {e}")))
            })
            .transpose()
    };
    let cluster_id = comment_value(&comments, "cluster_id")
        .map(|v| v.parse::<usize>())
        .transpose()
        .map_err(|e| Error::Config(format!("bad `cluster_id` in training header: {e}")))?
        .unwrap_or(0);
    let origin = Vec2::new(num("origin_x")?.unwrap_or(0.0), num("origin_y")?.unwrap_or(0.0));
    let rows: Vec<TrainingRow> = parse_rows(text)?;
    PolarTrainingSet::new(
        cluster_id,
        origin,
        rows.iter().map(|r| r.theta_rad).collect(),
        rows.iter().map(|r| r.r_m).collect(),
    )
}

pub fn read_training(path: &Path) -> Result<PolarTrainingSet> {
    parse_training(&read_text(path)?).map_err(|e| with_path(e, path))
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    theta_rad: f64,
    mean_m: f64,
    var_m2: f64,
    ci_lo: f64,
    ci_hi: f64,
}

pub fn prediction_csv(pred: &RadialPrediction) -> Result<Vec<u8>> {
    csv_bytes(
        &[],
        (0..pred.test_angles.len()).map(|i| PredictionRow {
            theta_rad: pred.test_angles[i],
            mean_m: pred.mean[i],
            var_m2: pred.variance[i],
            ci_lo: pred.mean[i] - pred.ci95_half_width[i],
            ci_hi: pred.mean[i] + pred.ci95_half_width[i],
        }),
    )
}

pub fn write_prediction(path: &Path, pred: &RadialPrediction) -> Result<()> {
    write_atomic(path, &prediction_csv(pred)?)
}

pub fn parse_prediction(text: &str) -> Result<RadialPrediction> {
    let rows: Vec<PredictionRow> = parse_rows(text)?;
    Ok(RadialPrediction {
        test_angles: rows.iter().map(|r| r.theta_rad).collect(),
        mean: rows.iter().map(|r| r.mean_m).collect(),
        variance: rows.iter().map(|r| r.var_m2).collect(),
        ci95_half_width: rows.iter().map(|r| 0.5 * (r.ci_hi - r.ci_lo)).collect(),
    })
}

pub fn read_prediction(path: &Path) -> Result<RadialPrediction> {
    parse_prediction(&read_text(path)?).map_err(|e| with_path(e, path))
}

/// Model file: fitted hyperparameters plus where the polar frame sits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub cluster_id: usize,
    pub origin: Vec2,
    #[serde(flatten)]
    pub summary: GpModelSummary,
}

#[derive(Debug, Serialize)]
struct ContourRow {
    contour: &'static str,
    x: f64,
    y: f64,
}

pub fn contour_csv(contours: &Contours) -> Result<Vec<u8>> {
    let tagged = |name: &'static str, pts: &[Vec2]| -> Vec<ContourRow> {
        pts.iter()
            .map(|p| ContourRow {
                contour: name,
                x: p.x,
                y: p.y,
            })
            .collect()
    };
    let mut rows = tagged("mean", &contours.mean);
    rows.extend(tagged("inner", &contours.inner));
    rows.extend(tagged("outer", &contours.outer));
    csv_bytes(&[], rows)
}

pub fn write_contours(path: &Path, contours: &Contours) -> Result<()> {
    write_atomic(path, &contour_csv(contours)?)
}

/// One row of the per-M evaluation table.
#[derive(Debug, Serialize)]
pub struct EvalRow {
    pub shape: String,
    pub m: usize,
    pub mean_rmse: f64,
    pub failures: usize,
}

pub fn write_eval_table(path: &Path, reports: &[MonteCarloReport]) -> Result<()> {
    let rows = reports.iter().flat_map(|r| {
        (0..r.m_values.len()).map(|i| EvalRow {
            shape: r.shape.name().to_string(),
            m: r.m_values[i],
            mean_rmse: r.mean_rmse[i],
            failures: r.failures[i],
        })
    });
    write_atomic(path, &csv_bytes(&[format!("noise_std={}", reports.first().map_or(0.0, |r| r.noise_std))], rows)?)
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolves `p` against `base` unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
