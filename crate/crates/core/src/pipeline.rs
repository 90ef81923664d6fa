//! End-to-end runs: measurements → incidence points → clusters → GP
//! contours, one file-backed stage at a time.
//!
//! Each stage reads only files written by earlier stages, so any of them
//! can be rerun on its own. Every run ends with `manifest.json`, which
//! lists the artifacts with their SHA-256 and, on failure, the stage that
//! failed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{apply_biases, dbscan, to_polar, DbscanParams};
use crate::error::{Error, Result};
use crate::geometry::{IncidencePoint, NoiseCov, TxState, Vec2};
use crate::gp::{
    fit, predict, reconstruct_contour, uniform_angles, GpHyperParams, OptimizerConfig, RadialPrediction,
};
use crate::io::{self, MeasurementRecord, ModelFile};
use crate::mapping::{estimate_all, MappingConfig};
use crate::scene::{synthesize_scene, SceneConfig};
use crate::shapes::{rmse, Shape};
use crate::slam::{snapshot_slam, SlamConfig, SlamResult, CHI2_3_99};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Mapping,
    Slam,
}

/// Starting hyperparameters for every cluster fit. `mean_radius` defaults
/// to the cluster's mean observed radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpInit {
    pub length_scale: f64,
    pub signal_std: f64,
    pub noise_std: f64,
    pub mean_radius: Option<f64>,
}

impl Default for GpInit {
    fn default() -> Self {
        Self {
            length_scale: 2.0,
            signal_std: 2.0,
            noise_std: 2.0,
            mean_radius: None,
        }
    }
}

impl GpInit {
    pub fn hyper_for(&self, radii: &[f64]) -> GpHyperParams {
        let mut h = GpHyperParams::initial_for(radii);
        h.length_scale_sq = self.length_scale * self.length_scale;
        h.signal_var = self.signal_std * self.signal_std;
        h.noise_var = self.noise_std * self.noise_std;
        if let Some(mu) = self.mean_radius {
            h.mean_radius = mu;
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gp_init.length_scale", self.length_scale),
            ("gp_init.signal_std", self.signal_std),
            ("gp_init.noise_std", self.noise_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be positive and finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Scene JSON; ignored when `scene` is given inline.
    pub scene_file: Option<PathBuf>,
    pub scene: Option<SceneConfig>,
    /// Measurement CSV to use instead of synthesizing from the scene.
    pub measurements: Option<PathBuf>,
    /// Incidence-point CSV; skips the measurement and estimation stages.
    pub incidence_points: Option<PathBuf>,
    pub dbscan: DbscanParams,
    /// Centroid offsets keyed by cluster id.
    pub biases: BTreeMap<usize, Vec2>,
    pub gp_init: GpInit,
    pub optimizer: OptimizerConfig,
    pub mapping: MappingConfig,
    pub slam: SlamConfig,
    /// Incidence points above this cost are left out of clustering.
    pub max_ip_cost: Option<f64>,
    pub prediction_points: usize,
    pub output_dir: PathBuf,
    /// Overrides the scene seed and the RANSAC seed.
    pub seed: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Mapping,
            scene_file: None,
            scene: None,
            measurements: None,
            incidence_points: None,
            dbscan: DbscanParams::default(),
            biases: BTreeMap::new(),
            gp_init: GpInit::default(),
            optimizer: OptimizerConfig::default(),
            mapping: MappingConfig::default(),
            slam: SlamConfig::default(),
            max_ip_cost: Some(CHI2_3_99),
            prediction_points: 360,
            output_dir: PathBuf::from("out"),
            seed: None,
        }
    }
}

impl PipelineConfig {
    /// Rebases every relative path onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.scene_file,
            &mut self.measurements,
            &mut self.incidence_points,
        ]
        .into_iter()
        .flatten()
        {
            *p = io::resolve(base, p);
        }
        self.output_dir = io::resolve(base, &self.output_dir);
    }

    /// The scene with the seed override applied.
    pub fn load_scene(&self) -> Result<Option<SceneConfig>> {
        let scene = match (&self.scene, &self.scene_file) {
            (Some(s), _) => Some(s.clone()),
            (None, Some(path)) => Some(io::read_json::<SceneConfig>(path)?),
            (None, None) => None,
        };
        Ok(scene.map(|mut s| {
            if let Some(seed) = self.seed {
                s.seed = seed;
            }
            s
        }))
    }

    pub fn slam_config(&self) -> SlamConfig {
        let mut cfg = self.slam;
        if let Some(seed) = self.seed {
            cfg.rng_seed = seed;
        }
        cfg
    }

    /// Checks that the inputs the chosen mode needs are present, and
    /// returns the loaded scene.
    pub fn validate(&self) -> Result<Option<SceneConfig>> {
        self.dbscan.validate()?;
        self.gp_init.validate()?;
        self.optimizer.validate()?;
        self.mapping.validate()?;
        self.slam.validate()?;
        if self.prediction_points < 1 {
            return Err(Error::invalid("prediction_points", "must be at least 1"));
        }
        if let Some(c) = self.max_ip_cost {
            if !(c > 0.0) {
                return Err(Error::invalid("max_ip_cost", "must be positive"));
            }
        }
        for (id, b) in &self.biases {
            if !(b.x.is_finite() && b.y.is_finite()) {
                return Err(Error::Config(format!("bias for cluster {id} is not finite")));
            }
        }
        let scene = self.load_scene()?;
        if self.incidence_points.is_some() {
            return Ok(scene);
        }
        let Some(sc) = &scene else {
            return Err(Error::Config(
                "a scene (inline or scene_file) is needed for the tx state".into(),
            ));
        };
        if self.mode == Mode::Mapping && sc.rx.is_none() {
            return Err(Error::Config("mapping mode needs the rx state in the scene".into()));
        }
        if self.measurements.is_none() {
            sc.validate()?;
        } else {
            sc.noise.to_cov()?;
        }
        Ok(scene)
    }
}

/// One written file, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: RunStatus,
    pub mode: Mode,
    pub seed: Option<u64>,
    pub stages_completed: Vec<String>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub artifacts: Vec<Artifact>,
}

/// Contour error of one cluster against the scene object nearest to its
/// origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEvaluation {
    pub cluster_id: usize,
    pub object: usize,
    pub shape: String,
    /// Radial RMSE about the cluster origin, over the prediction angles
    /// whose ray hits the object; `None` when the origin is outside it.
    pub rmse: Option<f64>,
    /// Same, after moving the object by the mean offset between the
    /// members' estimated and true incidence points. Removes a global map
    /// shift, as left by a receiver error.
    pub registered_rmse: Option<f64>,
    /// Length of that offset, meters.
    pub centroid_offset: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub clusters: Vec<ClusterEvaluation>,
    pub rx_position_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub id: usize,
    /// Positions in `ips.csv` (0-based data rows).
    pub indices: Vec<usize>,
    pub path_ids: Vec<u32>,
    pub centroid: Vec2,
    pub bias: Vec2,
    pub member_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClustersFile {
    pub eps: f64,
    pub min_pts: usize,
    pub max_ip_cost: Option<f64>,
    pub clusters: Vec<ClusterEntry>,
    /// Rows of `ips.csv` left out by the cost gate.
    pub gated: Vec<usize>,
    /// Rows DBSCAN labelled noise.
    pub noise: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: Manifest,
    pub evaluation: Option<Evaluation>,
    pub slam: Option<SlamResult>,
}

pub const MEASUREMENTS_FILE: &str = "measurements.csv";
pub const IPS_FILE: &str = "ips.csv";
pub const SLAM_FILE: &str = "slam.json";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn training_file(id: usize) -> String {
    format!("training_cluster_{id}.csv")
}
pub fn model_file(id: usize) -> String {
    format!("model_cluster_{id}.json")
}
pub fn prediction_file(id: usize) -> String {
    format!("prediction_cluster_{id}.csv")
}
pub fn contour_file(id: usize) -> String {
    format!("contour_cluster_{id}.csv")
}

/// Synthesizes the scene and writes its measurement CSV.
pub fn synth_stage(scene: &SceneConfig, out: &Path) -> Result<Vec<MeasurementRecord>> {
    let records: Vec<MeasurementRecord> =
        synthesize_scene(scene)?.iter().map(MeasurementRecord::from).collect();
    io::write_measurements(out, &records)?;
    Ok(records)
}

/// Known-receiver estimation of every path in `measurements`.
pub fn map_stage(
    measurements: &Path,
    scene: &SceneConfig,
    cfg: &MappingConfig,
    out: &Path,
) -> Result<Vec<IncidencePoint>> {
    let rx = scene
        .rx
        .ok_or_else(|| Error::Config("mapping needs the rx state in the scene".into()))?;
    let z: Vec<_> = io::read_measurements(measurements, scene.noise.to_cov()?)?
        .into_iter()
        .map(|r| r.measurement)
        .collect();
    let ips = estimate_all(&z, &rx, &scene.tx, cfg)?;
    io::write_incidence_points(out, &ips)?;
    Ok(ips)
}

/// Unknown-receiver estimation; writes the result JSON and the inlier
/// incidence points.
pub fn slam_stage(
    measurements: &Path,
    tx: &TxState,
    default_cov: NoiseCov,
    cfg: &SlamConfig,
    json_out: &Path,
    ips_out: &Path,
) -> Result<SlamResult> {
    let z: Vec<_> = io::read_measurements(measurements, default_cov)?
        .into_iter()
        .map(|r| r.measurement)
        .collect();
    let res = snapshot_slam(&z, tx, cfg)?;
    io::write_json(json_out, &res)?;
    io::write_incidence_points(ips_out, &res.incidence_points)?;
    Ok(res)
}

/// DBSCAN over the gated incidence points, then one training CSV per
/// cluster. Returns the written files.
pub fn cluster_stage(
    ips_path: &Path,
    params: &DbscanParams,
    biases: &BTreeMap<usize, Vec2>,
    max_ip_cost: Option<f64>,
    out_dir: &Path,
) -> Result<(ClustersFile, Vec<PathBuf>)> {
    let ips = io::read_incidence_points(ips_path)?;
    let (kept, gated): (Vec<usize>, Vec<usize>) = (0..ips.len())
        .partition(|&i| max_ip_cost.is_none_or(|c| ips[i].residual_cost <= c));
    if kept.is_empty() {
        return Err(Error::Empty("incidence points under the cost gate"));
    }
    let points: Vec<Vec2> = kept.iter().map(|&i| ips[i].position).collect();
    let mut clustering = dbscan(&points, params)?;
    apply_biases(&mut clustering.clusters, biases);
    for id in biases.keys() {
        if *id >= clustering.clusters.len() {
            log::warn!("bias given for cluster {id}, but only {} clusters", clustering.clusters.len());
        }
    }

    let mut written = Vec::new();
    let mut entries = Vec::with_capacity(clustering.clusters.len());
    for c in &clustering.clusters {
        let set = to_polar(c, &points, c.bias)?;
        let path = out_dir.join(training_file(c.id));
        io::write_training(&path, &set)?;
        written.push(path);
        entries.push(ClusterEntry {
            id: c.id,
            indices: c.indices.iter().map(|&i| kept[i]).collect(),
            path_ids: c.indices.iter().map(|&i| ips[kept[i]].source_path_id).collect(),
            centroid: c.centroid,
            bias: c.bias,
            member_count: c.member_count,
        });
    }
    let file = ClustersFile {
        eps: params.eps,
        min_pts: params.min_pts,
        max_ip_cost,
        clusters: entries,
        gated,
        noise: clustering.noise.iter().map(|&i| kept[i]).collect(),
    };
    let path = out_dir.join(CLUSTERS_FILE);
    io::write_json(&path, &file)?;
    written.insert(0, path);
    Ok((file, written))
}

pub struct FitOutputs<'a> {
    pub model: &'a Path,
    pub prediction: &'a Path,
    pub contour: &'a Path,
}

/// Fits one training CSV and writes the model, the prediction on
/// `prediction_points` equally spaced angles, and the contours.
pub fn fit_stage(
    training: &Path,
    init: &GpInit,
    optimizer: &OptimizerConfig,
    prediction_points: usize,
    out: &FitOutputs<'_>,
) -> Result<ModelFile> {
    let data = io::read_training(training)?;
    let model = fit(&data, init.hyper_for(&data.radii), optimizer)?;
    let pred = predict(&model, &uniform_angles(prediction_points))?;
    let file = ModelFile {
        cluster_id: data.cluster_id,
        origin: data.origin,
        summary: model.summary(),
    };
    io::write_json(out.model, &file)?;
    io::write_prediction(out.prediction, &pred)?;
    io::write_contours(out.contour, &reconstruct_contour(&pred, data.origin))?;
    Ok(file)
}

fn radial_rmse(shape: &Shape, origin: &Vec2, pred: &RadialPrediction) -> Result<Option<f64>> {
    let (truth, est): (Vec<f64>, Vec<f64>) = pred
        .test_angles
        .iter()
        .zip(&pred.mean)
        .filter_map(|(t, m)| shape.radial_about(origin, *t).map(|r| (r, *m)))
        .unzip();
    if truth.is_empty() {
        return Ok(None);
    }
    rmse(&truth, &est).map(Some)
}

/// Scores each fitted cluster against the scene object whose center is
/// closest to the cluster origin. Truth incidence points are taken from
/// `measurements.csv` in `out_dir` when it exists.
pub fn evaluate_stage(
    scene: &SceneConfig,
    clusters: &ClustersFile,
    out_dir: &Path,
    slam: Option<&SlamResult>,
) -> Result<Evaluation> {
    let shapes: Vec<Shape> = scene
        .objects
        .iter()
        .map(|s| Shape::new(*s))
        .collect::<Result<_>>()?;
    if shapes.is_empty() {
        return Err(Error::Empty("scene objects"));
    }
    let meas_path = out_dir.join(MEASUREMENTS_FILE);
    let truth: BTreeMap<u32, Vec2> = if meas_path.exists() {
        io::read_measurements(&meas_path, scene.noise.to_cov()?)?
            .into_iter()
            .filter_map(|r| r.truth.map(|t| (r.measurement.path_id, t)))
            .collect()
    } else {
        BTreeMap::new()
    };
    let ips: BTreeMap<u32, Vec2> = io::read_incidence_points(&out_dir.join(IPS_FILE))
        .map(|v| v.into_iter().map(|p| (p.source_path_id, p.position)).collect())
        .unwrap_or_default();

    let mut out = Vec::with_capacity(clusters.clusters.len());
    for c in &clusters.clusters {
        let model: ModelFile = io::read_json(&out_dir.join(model_file(c.id)))?;
        let pred = io::read_prediction(&out_dir.join(prediction_file(c.id)))?;
        let origin = model.origin;
        let (object, shape) = shapes
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da = (a.1.spec().center - origin).norm();
                let db = (b.1.spec().center - origin).norm();
                da.total_cmp(&db)
            })
            .expect("non-empty");

        let pairs: Vec<(Vec2, Vec2)> = c
            .path_ids
            .iter()
            .filter_map(|id| Some((*ips.get(id)?, *truth.get(id)?)))
            .collect();
        let offset = (!pairs.is_empty()).then(|| {
            pairs.iter().fold(Vec2::zeros(), |acc, (e, t)| acc + (e - t)) / pairs.len() as f64
        });
        let registered_rmse = match offset {
            Some(off) => radial_rmse(shape, &(origin - off), &pred)?,
            None => None,
        };
        out.push(ClusterEvaluation {
            cluster_id: c.id,
            object,
            shape: shape.spec().name().to_string(),
            rmse: radial_rmse(shape, &origin, &pred)?,
            registered_rmse,
            centroid_offset: offset.map(|o| o.norm()),
        });
    }
    let rx_position_error = match (slam, scene.rx) {
        (Some(s), Some(rx)) => Some((s.rx_estimate.position - rx.position).norm()),
        _ => None,
    };
    Ok(Evaluation {
        clusters: out,
        rx_position_error,
    })
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    written: BTreeSet<PathBuf>,
    stages: Vec<String>,
}

impl Run<'_> {
    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        let r = f(self).map_err(|e| Error::Stage {
            stage: name,
            source: Box::new(e),
        })?;
        self.stages.push(name.to_string());
        Ok(r)
    }

    fn file(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.written.insert(p.clone());
        p
    }

    fn manifest(&self, failure: Option<&Error>) -> Result<Manifest> {
        let mut artifacts = Vec::new();
        for p in &self.written {
            // A stage may fail before producing a file it reserved.
            let Ok(bytes) = fs::read(p) else { continue };
            let rel = p.strip_prefix(&self.out).unwrap_or(p);
            artifacts.push(Artifact {
                path: rel.display().to_string(),
                sha256: io::sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        let failed_stage = failure.and_then(|e| match e {
            Error::Stage { stage, .. } => Some(stage.to_string()),
            _ => None,
        });
        Ok(Manifest {
            status: if failure.is_some() { RunStatus::Failed } else { RunStatus::Ok },
            mode: self.cfg.mode,
            seed: self.cfg.seed,
            stages_completed: self.stages.clone(),
            failed_stage,
            error: failure.map(|e| e.to_string()),
            artifacts,
        })
    }
}

/// Runs every stage into `cfg.output_dir`. The config is validated before
/// any work; on a stage failure the manifest is still written, and the
/// returned error names the stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let scene = cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let mut run = Run {
        cfg,
        out: cfg.output_dir.clone(),
        written: BTreeSet::new(),
        stages: Vec::new(),
    };
    let result = run_stages(&mut run, scene.as_ref());
    let manifest = run.manifest(result.as_ref().err())?;
    io::write_json(&cfg.output_dir.join(MANIFEST_FILE), &manifest)?;
    let (evaluation, slam) = result?;
    Ok(PipelineOutcome {
        manifest,
        evaluation,
        slam,
    })
}

fn run_stages(
    run: &mut Run<'_>,
    scene: Option<&SceneConfig>,
) -> Result<(Option<Evaluation>, Option<SlamResult>)> {
    let cfg = run.cfg;
    let mut slam = None;
    let ips_path = match &cfg.incidence_points {
        Some(p) => p.clone(),
        None => {
            let scene = scene.expect("validated");
            let meas = run.stage("measurements", |run| {
                let out = run.file(MEASUREMENTS_FILE);
                match &cfg.measurements {
                    Some(src) => {
                        let records = io::read_measurements(src, scene.noise.to_cov()?)?;
                        io::write_measurements(&out, &records)?;
                    }
                    None => {
                        synth_stage(scene, &out)?;
                    }
                }
                Ok(out)
            })?;
            run.stage("incidence_points", |run| {
                let ips = run.file(IPS_FILE);
                match cfg.mode {
                    Mode::Mapping => {
                        map_stage(&meas, scene, &cfg.mapping, &ips)?;
                    }
                    Mode::Slam => {
                        let json = run.file(SLAM_FILE);
                        let res = slam_stage(
                            &meas,
                            &scene.tx,
                            scene.noise.to_cov()?,
                            &cfg.slam_config(),
                            &json,
                            &ips,
                        )?;
                        slam = Some(res);
                    }
                }
                Ok(ips)
            })?
        }
    };

    let clusters = run.stage("cluster", |run| {
        let out = run.out.clone();
        let (file, written) = cluster_stage(&ips_path, &cfg.dbscan, &cfg.biases, cfg.max_ip_cost, &out)?;
        run.written.extend(written);
        Ok(file)
    })?;

    run.stage("fit", |run| {
        for c in &clusters.clusters {
            let training = run.out.join(training_file(c.id));
            let model = run.file(&model_file(c.id));
            let prediction = run.file(&prediction_file(c.id));
            let contour = run.file(&contour_file(c.id));
            let outs = FitOutputs {
                model: &model,
                prediction: &prediction,
                contour: &contour,
            };
            if let Err(e) = fit_stage(&training, &cfg.gp_init, &cfg.optimizer, cfg.prediction_points, &outs) {
                log::error!("cluster {}: {e}", c.id);
                return Err(e);
            }
        }
        Ok(())
    })?;

    let evaluation = match scene {
        Some(sc) if !sc.objects.is_empty() => Some(run.stage("evaluate", |run| {
            let out = run.out.clone();
            let ev = evaluate_stage(sc, &clusters, &out, slam.as_ref())?;
            io::write_json(&run.file(EVALUATION_FILE), &ev)?;
            Ok(ev)
        })?),
        _ => None,
    };
    Ok((evaluation, slam))
}
