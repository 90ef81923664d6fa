//! DBSCAN over incidence points and conversion of each cluster into a polar
//! training set about its (optionally biased) centroid.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Vec2, DEGENERACY_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    /// Neighbourhood radius, meters.
    pub eps: f64,
    /// Neighbours (the point itself included) needed for a core point.
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self {
            eps: 0.5,
            min_pts: 4,
        }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid("eps", "must be positive and finite"));
        }
        if self.min_pts < 1 {
            return Err(Error::invalid("min_pts", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    /// Member indices into the clustered point list, ascending.
    pub indices: Vec<usize>,
    /// Mean of the member positions. Never includes the bias.
    pub centroid: Vec2,
    /// Offset applied to the centroid to form the polar origin.
    pub bias: Vec2,
    pub member_count: usize,
}

impl Cluster {
    pub fn origin(&self) -> Vec2 {
        self.centroid + self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub clusters: Vec<Cluster>,
    pub noise: Vec<usize>,
    /// Cluster id per input point, `None` for noise.
    pub labels: Vec<Option<usize>>,
}

/// Uniform grid with cell size `eps`; a radius query touches 3×3 cells.
struct GridIndex<'a> {
    points: &'a [Vec2],
    eps: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> GridIndex<'a> {
    fn new(points: &'a [Vec2], eps: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::cell(p, eps)).or_default().push(i);
        }
        Self { points, eps, cells }
    }

    fn cell(p: &Vec2, eps: f64) -> (i64, i64) {
        ((p.x / eps).floor() as i64, (p.y / eps).floor() as i64)
    }

    fn neighbours(&self, i: usize) -> Vec<usize> {
        let p = &self.points[i];
        let (cx, cy) = Self::cell(p, self.eps);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy)) {
                    out.extend(
                        bucket
                            .iter()
                            .copied()
                            .filter(|&j| (self.points[j] - p).norm() <= self.eps),
                    );
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Density-based clustering with a Euclidean metric.
///
/// Core points (at least `min_pts` points within `eps`, self included) that
/// are density-connected form a cluster. A border point joins the cluster
/// of its nearest core neighbour, which keeps the partition independent of
/// input order. Cluster ids follow the lowest core index in each cluster.
pub fn dbscan(points: &[Vec2], params: &DbscanParams) -> Result<Clustering> {
    params.validate()?;
    if points.is_empty() {
        return Err(Error::Empty("dbscan input points"));
    }
    if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(Error::invalid("points", "all coordinates must be finite"));
    }
    let index = GridIndex::new(points, params.eps);
    let neighbours: Vec<Vec<usize>> = (0..points.len()).map(|i| index.neighbours(i)).collect();
    let core: Vec<bool> = neighbours.iter().map(|n| n.len() >= params.min_pts).collect();

    let mut labels: Vec<Option<usize>> = vec![None; points.len()];
    let mut n_clusters = 0;
    for seed in 0..points.len() {
        if !core[seed] || labels[seed].is_some() {
            continue;
        }
        let id = n_clusters;
        n_clusters += 1;
        labels[seed] = Some(id);
        let mut queue = VecDeque::from([seed]);
        while let Some(q) = queue.pop_front() {
            for &r in &neighbours[q] {
                if core[r] && labels[r].is_none() {
                    labels[r] = Some(id);
                    queue.push_back(r);
                }
            }
        }
    }

    for i in 0..points.len() {
        if core[i] {
            continue;
        }
        let nearest_core = neighbours[i]
            .iter()
            .copied()
            .filter(|&j| core[j])
            .min_by(|&a, &b| {
                let da = (points[a] - points[i]).norm_squared();
                let db = (points[b] - points[i]).norm_squared();
                da.total_cmp(&db).then(a.cmp(&b))
            });
        labels[i] = nearest_core.and_then(|j| labels[j]);
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    let mut noise = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        match label {
            Some(c) => members[*c].push(i),
            None => noise.push(i),
        }
    }
    let clusters = members
        .into_iter()
        .enumerate()
        .map(|(id, indices)| {
            let centroid = indices.iter().fold(Vec2::zeros(), |acc, &i| acc + points[i])
                / indices.len() as f64;
            Cluster {
                id,
                member_count: indices.len(),
                indices,
                centroid,
                bias: Vec2::zeros(),
            }
        })
        .collect();
    Ok(Clustering {
        clusters,
        noise,
        labels,
    })
}

/// Sets per-cluster centroid biases; clusters not in the map keep zero.
pub fn apply_biases(clusters: &mut [Cluster], biases: &BTreeMap<usize, Vec2>) {
    for c in clusters {
        c.bias = biases.get(&c.id).copied().unwrap_or_else(Vec2::zeros);
    }
}

/// Per-cluster GP regression data: polar angle and radius of each member
/// about the cluster origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarTrainingSet {
    pub cluster_id: usize,
    pub origin: Vec2,
    pub angles: Vec<f64>,
    pub radii: Vec<f64>,
}

impl PolarTrainingSet {
    pub fn new(cluster_id: usize, origin: Vec2, angles: Vec<f64>, radii: Vec<f64>) -> Result<Self> {
        if angles.len() != radii.len() {
            return Err(Error::LengthMismatch {
                left: angles.len(),
                right: radii.len(),
            });
        }
        if radii.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::invalid("radii", "must be finite and non-negative"));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("angles", "must be finite"));
        }
        Ok(Self {
            cluster_id,
            origin,
            angles,
            radii,
        })
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    /// Cartesian positions `origin + r·(cos θ, sin θ)`.
    pub fn to_cartesian(&self) -> Vec<Vec2> {
        self.angles
            .iter()
            .zip(&self.radii)
            .map(|(t, r)| self.origin + Vec2::new(t.cos(), t.sin()) * *r)
            .collect()
    }
}

/// Converts the members of `cluster` to polar coordinates about
/// `centroid + bias`, preserving member order.
pub fn to_polar(cluster: &Cluster, points: &[Vec2], bias: Vec2) -> Result<PolarTrainingSet> {
    let origin = cluster.centroid + bias;
    let mut angles = Vec::with_capacity(cluster.indices.len());
    let mut radii = Vec::with_capacity(cluster.indices.len());
    for &i in &cluster.indices {
        let p = points.get(i).ok_or_else(|| {
            Error::invalid("cluster", format!("member index {i} out of range"))
        })?;
        let d = p - origin;
        let r = d.norm();
        if r <= DEGENERACY_TOL {
            return Err(Error::DegenerateGeometry(format!(
                "cluster {} member {i} coincides with the polar origin",
                cluster.id
            )));
        }
        angles.push(d.y.atan2(d.x));
        radii.push(r);
    }
    PolarTrainingSet::new(cluster.id, origin, angles, radii)
}
