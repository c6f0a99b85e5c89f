//! Voxel-hashed point map with incremental adaptive plane extraction.
//!
//! World points are routed into 1 m voxels. Once a voxel holds more than
//! `t_s` points its statistics are computed; a voxel whose smallest covariance
//! eigenvalue is below `t_lambda` is planar, otherwise it is split by a
//! three-layer octree whose nodes are evaluated the same way. After
//! initialization, batches of at least `m_min` new points update the plane
//! statistics incrementally. A batch that shifts the mean by `t_delta` or more
//! marks the voxel as holding dynamic points and removes it.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Write};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::fmt_sig;

/// Deepest octree level below the voxel root.
pub const MAX_OCTREE_DEPTH: u8 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlaneMapError {
    #[error("no points given")]
    EmptyInput,
    #[error("non-finite point coordinate")]
    NonFinite,
    #[error("voxel {0:?} is not initialized")]
    Uninitialized(VoxelKey),
    #[error("update batch of {got} points is below the minimum of {need}")]
    BatchTooSmall { got: usize, need: usize },
    #[error("invalid plane map config: {0}")]
    InvalidConfig(String),
}

pub type VoxelKey = [i64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaneMapConfig {
    /// Voxel edge length (m).
    pub voxel_size: f64,
    /// Point count a voxel must exceed before initialization (`t_s`).
    pub min_points: usize,
    /// Planarity threshold on the smallest eigenvalue (`t_lambda`, m²).
    pub plane_threshold: f64,
    /// Mean-shift threshold separating updates from dynamic removal (`t_delta`, m).
    pub mean_shift_threshold: f64,
    /// Minimum batch size that triggers an incremental update (`m_min`).
    pub min_update_batch: usize,
    /// Drop voxels farther than this from the current position. Disabled when `None`.
    pub window_radius: Option<f64>,
}

impl Default for PlaneMapConfig {
    fn default() -> Self {
        Self {
            voxel_size: 1.0,
            min_points: 10,
            plane_threshold: 0.01,
            mean_shift_threshold: 0.1,
            min_update_batch: 5,
            window_radius: None,
        }
    }
}

impl PlaneMapConfig {
    pub fn validate(&self) -> Result<(), PlaneMapError> {
        let bad = |m: &str| Err(PlaneMapError::InvalidConfig(m.to_string()));
        if !(self.voxel_size > 0.0) {
            return bad("voxel_size must be positive");
        }
        if self.min_points < 4 {
            return bad("min_points must be at least 4");
        }
        if !(self.plane_threshold > 0.0) || !(self.mean_shift_threshold > 0.0) {
            return bad("thresholds must be positive");
        }
        if self.min_update_batch == 0 {
            return bad("min_update_batch must be positive");
        }
        if let Some(r) = self.window_radius {
            if !(r > 0.0) {
                return bad("window_radius must be positive");
            }
        }
        Ok(())
    }
}

/// Point statistics of a voxel or octree node. Covariance is normalized by N.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneStats {
    pub count: usize,
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    /// Ascending.
    pub eigenvalues: Vector3<f64>,
    /// Eigenvector of the smallest eigenvalue, oriented with a non-negative
    /// z component (ties broken on y, then x).
    pub normal: Vector3<f64>,
}

impl PlaneStats {
    pub fn from_moments(count: usize, mean: Vector3<f64>, cov: Matrix3<f64>) -> Self {
        let cov = 0.5 * (cov + cov.transpose());
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigenvalues = Vector3::new(
            eig.eigenvalues[order[0]],
            eig.eigenvalues[order[1]],
            eig.eigenvalues[order[2]],
        );
        let normal = orient_normal(eig.eigenvectors.column(order[0]).normalize());
        Self {
            count,
            mean,
            cov,
            eigenvalues,
            normal,
        }
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// Statistics over the union of the absorbed points and `points`.
    ///
    /// Carries the mean-shift term `N (p̄ − p̌)(p̄ − p̌)ᵀ`, so the result equals
    /// a batch recomputation over the union.
    pub fn merged(&self, points: &[Vector3<f64>]) -> PlaneStats {
        if points.is_empty() {
            return self.clone();
        }
        let n = self.count as f64;
        let m = points.len() as f64;
        let sum: Vector3<f64> = points.iter().sum();
        let mean = (self.mean * n + sum) / (n + m);
        let shift = self.mean - mean;
        let mut scatter = (self.cov + shift * shift.transpose()) * n;
        for p in points {
            let d = p - mean;
            scatter += d * d.transpose();
        }
        PlaneStats::from_moments(self.count + points.len(), mean, scatter / (n + m))
    }
}

fn orient_normal(n: Vector3<f64>) -> Vector3<f64> {
    const TIE: f64 = 1e-9;
    for axis in [2, 1, 0] {
        if n[axis] > TIE {
            return n;
        }
        if n[axis] < -TIE {
            return -n;
        }
    }
    n
}

/// Mean and N-normalized covariance of a point set.
pub fn batch_stats(points: &[Vector3<f64>]) -> Result<PlaneStats, PlaneMapError> {
    if points.is_empty() {
        return Err(PlaneMapError::EmptyInput);
    }
    let n = points.len() as f64;
    let mean: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    Ok(PlaneStats::from_moments(points.len(), mean, cov / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Planarity {
    Planar,
    NotPlanar,
}

pub fn classify(stats: &PlaneStats, cfg: &PlaneMapConfig) -> Planarity {
    if stats.lambda_min() < cfg.plane_threshold {
        Planarity::Planar
    } else {
        Planarity::NotPlanar
    }
}

pub fn voxel_key(point: &Vector3<f64>, voxel_size: f64) -> Result<VoxelKey, PlaneMapError> {
    if !point.iter().all(|c| c.is_finite()) {
        return Err(PlaneMapError::NonFinite);
    }
    Ok([
        (point.x / voxel_size).floor() as i64,
        (point.y / voxel_size).floor() as i64,
        (point.z / voxel_size).floor() as i64,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellState {
    Accumulating,
    Planar,
    Subdivided,
    Removed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeState {
    Accumulating,
    Planar,
    Subdivided,
    /// Deepest level reached without passing the plane test.
    NonPlanar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Updated,
    KeptInitial,
    Removed,
    /// Points were buffered; no node had a full batch yet.
    Pending,
}

#[derive(Debug, Clone)]
pub struct OctreeNode {
    pub depth: u8,
    pub origin: Vector3<f64>,
    pub size: f64,
    pub state: NodeState,
    pub stats: Option<PlaneStats>,
    pub pending: Vec<Vector3<f64>>,
    pub children: Option<Box<[OctreeNode; 8]>>,
}

impl OctreeNode {
    fn new(depth: u8, origin: Vector3<f64>, size: f64) -> Self {
        Self {
            depth,
            origin,
            size,
            state: NodeState::Accumulating,
            stats: None,
            pending: Vec::new(),
            children: None,
        }
    }

    fn child_index(&self, p: &Vector3<f64>) -> usize {
        let half = self.size * 0.5;
        let mut idx = 0;
        for axis in 0..3 {
            if p[axis] >= self.origin[axis] + half {
                idx |= 1 << axis;
            }
        }
        idx
    }

    fn subdivide(&mut self) {
        let half = self.size * 0.5;
        let children: [OctreeNode; 8] = std::array::from_fn(|i| {
            let offset = Vector3::new(
                (i & 1) as f64 * half,
                ((i >> 1) & 1) as f64 * half,
                ((i >> 2) & 1) as f64 * half,
            );
            OctreeNode::new(self.depth + 1, self.origin + offset, half)
        });
        let mut children = Box::new(children);
        for p in self.pending.drain(..) {
            let idx = {
                let mut idx = 0;
                for axis in 0..3 {
                    if p[axis] >= self.origin[axis] + half {
                        idx |= 1 << axis;
                    }
                }
                idx
            };
            children[idx].pending.push(p);
        }
        self.children = Some(children);
        self.state = NodeState::Subdivided;
    }

    /// Plane test on the buffered points, subdividing on failure until one
    /// of the termination conditions holds.
    fn initialize(&mut self, cfg: &PlaneMapConfig) {
        let stats = batch_stats(&self.pending).expect("initialize on empty node");
        let planar = classify(&stats, cfg) == Planarity::Planar;
        self.stats = Some(stats);
        if planar {
            self.pending.clear();
            self.state = NodeState::Planar;
        } else if self.depth >= MAX_OCTREE_DEPTH {
            self.pending.clear();
            self.state = NodeState::NonPlanar;
        } else {
            self.subdivide();
            for child in self.children.as_mut().unwrap().iter_mut() {
                if child.pending.len() >= cfg.min_points {
                    child.initialize(cfg);
                }
            }
        }
    }

    /// Incremental update of a planar node from its pending buffer.
    fn update_from_pending(&mut self, cfg: &PlaneMapConfig) -> UpdateOutcome {
        let batch = std::mem::take(&mut self.pending);
        let stats = self.stats.as_mut().expect("planar node without stats");
        let merged = stats.merged(&batch);
        let shift = (merged.mean - stats.mean).norm();
        if shift < cfg.mean_shift_threshold {
            if merged.lambda_min() < cfg.plane_threshold {
                *stats = merged;
                UpdateOutcome::Updated
            } else {
                UpdateOutcome::KeptInitial
            }
        } else {
            UpdateOutcome::Removed
        }
    }

    /// Route `points` (all inside this node) to leaves and run whatever
    /// initialization or update their buffers now allow.
    fn absorb(&mut self, points: Vec<Vector3<f64>>, cfg: &PlaneMapConfig) -> Vec<UpdateOutcome> {
        match self.state {
            NodeState::NonPlanar => Vec::new(),
            NodeState::Accumulating => {
                self.pending.extend(points);
                if self.pending.len() > cfg.min_points {
                    self.initialize(cfg);
                }
                Vec::new()
            }
            NodeState::Planar => {
                self.pending.extend(points);
                if self.pending.len() >= cfg.min_update_batch {
                    vec![self.update_from_pending(cfg)]
                } else {
                    Vec::new()
                }
            }
            NodeState::Subdivided => {
                let mut routed: [Vec<Vector3<f64>>; 8] = Default::default();
                for p in points {
                    routed[self.child_index(&p)].push(p);
                }
                let children = self.children.as_mut().unwrap();
                let mut outcomes = Vec::new();
                for (child, pts) in children.iter_mut().zip(routed) {
                    if !pts.is_empty() {
                        outcomes.extend(child.absorb(pts, cfg));
                    }
                }
                outcomes
            }
        }
    }

    fn collect_centroids(&self, key: VoxelKey, path: &mut String, out: &mut Vec<PlaneCentroid>) {
        match self.state {
            NodeState::Planar => {
                let s = self.stats.as_ref().unwrap();
                out.push(PlaneCentroid {
                    position: s.mean,
                    normal: s.normal,
                    key,
                    octree_path: path.clone(),
                });
            }
            NodeState::Subdivided => {
                for (i, child) in self.children.as_ref().unwrap().iter().enumerate() {
                    path.push(char::from(b'0' + i as u8));
                    child.collect_centroids(key, path, out);
                    path.pop();
                }
            }
            _ => {}
        }
    }

    pub fn max_depth(&self) -> u8 {
        match &self.children {
            Some(ch) => ch.iter().map(|c| c.max_depth()).max().unwrap_or(self.depth),
            None => self.depth,
        }
    }

    /// Visit this node and all descendants.
    pub fn for_each(&self, f: &mut impl FnMut(&OctreeNode)) {
        f(self);
        if let Some(ch) = &self.children {
            for c in ch.iter() {
                c.for_each(f);
            }
        }
    }
}

/// One voxel of the map. The root octree node holds the voxel-level
/// statistics and pending buffer.
#[derive(Debug, Clone)]
pub struct VoxelCell {
    pub key: VoxelKey,
    pub state: CellState,
    pub root: OctreeNode,
}

impl VoxelCell {
    pub fn new(key: VoxelKey, voxel_size: f64) -> Self {
        let origin = Vector3::new(key[0] as f64, key[1] as f64, key[2] as f64) * voxel_size;
        Self {
            key,
            state: CellState::Accumulating,
            root: OctreeNode::new(0, origin, voxel_size),
        }
    }

    pub fn stats(&self) -> Option<&PlaneStats> {
        self.root.stats.as_ref()
    }

    pub fn pending(&self) -> &[Vector3<f64>] {
        &self.root.pending
    }

    pub fn octree(&self) -> Option<&[OctreeNode; 8]> {
        self.root.children.as_deref()
    }

    pub fn is_initialized(&self) -> bool {
        matches!(self.state, CellState::Planar | CellState::Subdivided)
    }

    fn sync_state(&mut self) {
        self.state = match self.root.state {
            NodeState::Accumulating => CellState::Accumulating,
            NodeState::Planar => CellState::Planar,
            NodeState::Subdivided | NodeState::NonPlanar => CellState::Subdivided,
        };
    }

    fn mark_removed(&mut self) {
        self.state = CellState::Removed;
        self.root.children = None;
        self.root.pending.clear();
    }
}

/// Initialize an accumulating cell from its pending buffer.
///
/// Requires more than `t_s` pending points; otherwise the cell is returned
/// unchanged.
pub fn init_voxel(mut cell: VoxelCell, cfg: &PlaneMapConfig) -> VoxelCell {
    if cell.state == CellState::Accumulating && cell.root.pending.len() > cfg.min_points {
        cell.root.initialize(cfg);
        cell.sync_state();
    }
    cell
}

/// Apply a batch of new points to an initialized cell.
///
/// Planar cells are updated directly. Subdivided cells route points to their
/// leaves and update each planar leaf whose buffer reaches `m_min`; any
/// removal outcome removes the whole voxel.
pub fn update_plane(
    cell: &mut VoxelCell,
    new_points: &[Vector3<f64>],
    cfg: &PlaneMapConfig,
) -> Result<UpdateOutcome, PlaneMapError> {
    if !cell.is_initialized() {
        return Err(PlaneMapError::Uninitialized(cell.key));
    }
    if new_points.len() < cfg.min_update_batch {
        return Err(PlaneMapError::BatchTooSmall {
            got: new_points.len(),
            need: cfg.min_update_batch,
        });
    }
    let outcomes = cell.root.absorb(new_points.to_vec(), cfg);
    Ok(apply_outcomes(cell, &outcomes))
}

fn apply_outcomes(cell: &mut VoxelCell, outcomes: &[UpdateOutcome]) -> UpdateOutcome {
    let summary = if outcomes.contains(&UpdateOutcome::Removed) {
        UpdateOutcome::Removed
    } else if outcomes.contains(&UpdateOutcome::Updated) {
        UpdateOutcome::Updated
    } else if outcomes.contains(&UpdateOutcome::KeptInitial) {
        UpdateOutcome::KeptInitial
    } else {
        UpdateOutcome::Pending
    };
    if summary == UpdateOutcome::Removed {
        cell.mark_removed();
    } else {
        cell.sync_state();
    }
    summary
}

/// Plane centroid emitted for a planar voxel or octree node.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneCentroid {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub key: VoxelKey,
    /// Child indices from the voxel root, one digit per level; empty for the root.
    pub octree_path: String,
}

#[derive(Debug, Clone, Default)]
pub struct InsertReport {
    /// Keys that received points, sorted.
    pub keys: Vec<VoxelKey>,
    pub skipped_non_finite: usize,
    pub updated: usize,
    pub kept_initial: usize,
    pub removed: usize,
}

#[derive(Debug, Clone)]
pub struct PlaneMap {
    cfg: PlaneMapConfig,
    cells: HashMap<VoxelKey, VoxelCell>,
    skipped_non_finite: usize,
}

impl PlaneMap {
    pub fn new(cfg: PlaneMapConfig) -> Result<Self, PlaneMapError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            cells: HashMap::new(),
            skipped_non_finite: 0,
        })
    }

    pub fn config(&self) -> &PlaneMapConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, key: &VoxelKey) -> Option<&VoxelCell> {
        self.cells.get(key)
    }

    pub fn cells(&self) -> impl Iterator<Item = &VoxelCell> {
        self.cells.values()
    }

    pub fn skipped_non_finite(&self) -> usize {
        self.skipped_non_finite
    }

    /// Insert world-frame points, returning the keys touched.
    pub fn insert_scan(&mut self, points_world: &[Vector3<f64>]) -> Vec<VoxelKey> {
        self.insert_scan_report(points_world).keys
    }

    pub fn insert_scan_report(&mut self, points_world: &[Vector3<f64>]) -> InsertReport {
        let mut report = InsertReport::default();
        let mut grouped: BTreeMap<VoxelKey, Vec<Vector3<f64>>> = BTreeMap::new();
        for p in points_world {
            match voxel_key(p, self.cfg.voxel_size) {
                Ok(k) => grouped.entry(k).or_default().push(*p),
                Err(_) => report.skipped_non_finite += 1,
            }
        }
        self.skipped_non_finite += report.skipped_non_finite;
        for (key, pts) in grouped {
            let size = self.cfg.voxel_size;
            let cell = self
                .cells
                .entry(key)
                .or_insert_with(|| VoxelCell::new(key, size));
            if cell.state == CellState::Removed {
                *cell = VoxelCell::new(key, size);
            }
            let outcomes = cell.root.absorb(pts, &self.cfg);
            for o in &outcomes {
                match o {
                    UpdateOutcome::Updated => report.updated += 1,
                    UpdateOutcome::KeptInitial => report.kept_initial += 1,
                    UpdateOutcome::Removed => report.removed += 1,
                    UpdateOutcome::Pending => {}
                }
            }
            apply_outcomes(cell, &outcomes);
            report.keys.push(key);
        }
        report
    }

    /// Drop voxels whose center lies farther than the configured window
    /// radius from `center`. No-op when the window is disabled.
    pub fn prune_outside(&mut self, center: &Vector3<f64>) -> usize {
        let Some(radius) = self.cfg.window_radius else {
            return 0;
        };
        let half = self.cfg.voxel_size * 0.5;
        let before = self.cells.len();
        self.cells.retain(|_, c| {
            let mid = c.root.origin + Vector3::repeat(half);
            (mid - center).norm() <= radius
        });
        before - self.cells.len()
    }

    /// One centroid per planar voxel or planar octree node, sorted by key and
    /// octree path.
    pub fn extract_centroids(&self) -> Vec<PlaneCentroid> {
        let mut keys: Vec<&VoxelKey> = self.cells.keys().collect();
        keys.sort();
        let mut out = Vec::new();
        let mut path = String::new();
        for key in keys {
            let cell = &self.cells[key];
            if matches!(cell.state, CellState::Planar | CellState::Subdivided) {
                cell.root.collect_centroids(*key, &mut path, &mut out);
            }
        }
        out
    }
}

/// `x y z nx ny nz voxel_key octree_path`, one line per centroid.
///
/// The key is written as `i,j,k`; the root path is written as `-`.
pub fn write_centroids<W: Write>(mut w: W, centroids: &[PlaneCentroid]) -> io::Result<()> {
    for c in centroids {
        let path = if c.octree_path.is_empty() {
            "-"
        } else {
            c.octree_path.as_str()
        };
        writeln!(
            w,
            "{} {} {} {} {} {} {},{},{} {}",
            fmt_sig(c.position.x),
            fmt_sig(c.position.y),
            fmt_sig(c.position.z),
            fmt_sig(c.normal.x),
            fmt_sig(c.normal.y),
            fmt_sig(c.normal.z),
            c.key[0],
            c.key[1],
            c.key[2],
            path
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cfg() -> PlaneMapConfig {
        PlaneMapConfig::default()
    }

    fn plane_points(rng: &mut impl Rng, n: usize, z: f64, lo: f64, hi: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), z))
            .collect()
    }

    #[test]
    fn voxel_key_floor_semantics() {
        assert_eq!(voxel_key(&Vector3::new(0.5, 0.5, 0.5), 1.0).unwrap(), [0, 0, 0]);
        assert_eq!(voxel_key(&Vector3::new(-0.1, 0.0, 0.0), 1.0).unwrap(), [-1, 0, 0]);
        assert_eq!(voxel_key(&Vector3::new(1.0, 2.0, -3.0), 1.0).unwrap(), [1, 2, -3]);
        assert!(voxel_key(&Vector3::new(f64::NAN, 0.0, 0.0), 1.0).is_err());
    }

    #[test]
    fn voxel_key_matches_floor_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = Vector3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            );
            let size = rng.random_range(0.1..3.0);
            let k = voxel_key(&p, size).unwrap();
            for axis in 0..3 {
                let lo = k[axis] as f64 * size;
                assert!(lo <= p[axis] + 1e-12 && p[axis] < lo + size + 1e-12);
            }
        }
    }

    #[test]
    fn batch_stats_examples() {
        let s = batch_stats(&[
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ])
        .unwrap();
        assert!(s.lambda_min().abs() < 1e-12);
        assert!((s.normal - Vector3::z()).norm() < 1e-12);

        let s = batch_stats(&[
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::new(2.0, 2.0, 0.0),
        ])
        .unwrap();
        assert_eq!(s.mean, Vector3::new(1.0, 1.0, 0.0));
        // N-normalized: variance of {0,2} is 1.
        assert!((s.cov[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(batch_stats(&[]), Err(PlaneMapError::EmptyInput));
    }

    #[test]
    fn isotropic_gaussian_eigenvalues_near_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigma = 0.3;
        let normal = Normal::new(0.0, sigma).unwrap();
        let pts: Vec<_> = (0..500)
            .map(|_| Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
            .collect();
        let s = batch_stats(&pts).unwrap();
        for l in s.eigenvalues.iter() {
            assert!((l / (sigma * sigma) - 1.0).abs() < 0.3, "eigenvalue {l}");
        }
        assert!(s.eigenvalues[0] <= s.eigenvalues[1] && s.eigenvalues[1] <= s.eigenvalues[2]);
    }

    #[test]
    fn classify_uses_strict_threshold() {
        let c = cfg();
        let mut s = batch_stats(&[Vector3::zeros(), Vector3::x(), Vector3::y()]).unwrap();
        assert_eq!(classify(&s, &c), Planarity::Planar);
        s.eigenvalues[0] = 0.02;
        assert_eq!(classify(&s, &c), Planarity::NotPlanar);
        s.eigenvalues[0] = c.plane_threshold;
        assert_eq!(classify(&s, &c), Planarity::NotPlanar);
    }

    #[test]
    fn init_coplanar_cell_is_planar() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cell = VoxelCell::new([0, 0, 0], 1.0);
        cell.root.pending = plane_points(&mut rng, c.min_points + 1, 0.3, 0.0, 1.0);
        let cell = init_voxel(cell, &c);
        assert_eq!(cell.state, CellState::Planar);
        assert!(cell.octree().is_none());
        assert!(cell.pending().is_empty());
    }

    #[test]
    fn init_requires_more_than_min_points() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cell = VoxelCell::new([0, 0, 0], 1.0);
        cell.root.pending = plane_points(&mut rng, c.min_points, 0.3, 0.0, 1.0);
        let cell = init_voxel(cell, &c);
        assert_eq!(cell.state, CellState::Accumulating);
    }

    #[test]
    fn two_parallel_planes_subdivide_into_planar_children() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pts = plane_points(&mut rng, 200, 0.2, 0.0, 1.0);
        pts.extend(plane_points(&mut rng, 200, 0.7, 0.0, 1.0));
        let mut cell = VoxelCell::new([0, 0, 0], 1.0);
        cell.root.pending = pts;
        let cell = init_voxel(cell, &c);
        assert_eq!(cell.state, CellState::Subdivided);
        let children = cell.octree().unwrap();
        let mut planar = 0;
        for child in children.iter() {
            if child.state == NodeState::Planar {
                planar += 1;
                // Oracle: the child's points all lie on one of the two planes.
                let s = child.stats.as_ref().unwrap();
                assert!(s.lambda_min() < c.plane_threshold);
                assert!((s.mean.z - 0.2).abs() < 1e-12 || (s.mean.z - 0.7).abs() < 1e-12);
            }
        }
        assert!(planar >= 1);
    }

    #[test]
    fn volume_fill_never_planar_and_depth_bounded() {
        // A uniform cube of edge a has variance a²/12 per axis, so nodes only
        // stay non-planar while a²/12 >= t_lambda. A 5 m voxel keeps the
        // depth-3 nodes (0.625 m, variance 0.033 m²) well above the threshold.
        let size = 5.0;
        let c = PlaneMapConfig {
            voxel_size: size,
            ..cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<_> = (0..60_000)
            .map(|_| Vector3::new(rng.random(), rng.random(), rng.random()) * size)
            .collect();
        let mut cell = VoxelCell::new([0, 0, 0], size);
        cell.root.pending = pts.clone();
        let cell = init_voxel(cell, &c);
        assert_eq!(cell.state, CellState::Subdivided);
        assert!(cell.root.max_depth() <= MAX_OCTREE_DEPTH);
        let mut leaves = 0;
        cell.root.for_each(&mut |n| {
            if n.children.is_some() {
                return;
            }
            leaves += 1;
            let inside: Vec<_> = pts
                .iter()
                .filter(|p| (0..3).all(|a| p[a] >= n.origin[a] && p[a] < n.origin[a] + n.size))
                .copied()
                .collect();
            let few = inside.len() < c.min_points;
            assert!(few || n.depth == MAX_OCTREE_DEPTH, "leaf at depth {}", n.depth);
            if !few {
                let oracle = batch_stats(&inside).unwrap();
                assert_eq!(classify(&oracle, &c), Planarity::NotPlanar, "{:?} depth {} n {} l {}", n.state, n.depth, inside.len(), oracle.lambda_min());
            }
            assert_ne!(n.state, NodeState::Planar);
        });
        assert_eq!(leaves, 512);
    }

    fn planar_cell(rng: &mut impl Rng, n: usize) -> VoxelCell {
        let mut cell = VoxelCell::new([0, 0, 0], 1.0);
        cell.root.pending = plane_points(rng, n, 0.2, 0.0, 1.0);
        init_voxel(cell, &cfg())
    }

    #[test]
    fn update_same_plane_matches_batch() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut cell = VoxelCell::new([0, 0, 0], 1.0);
        let first = plane_points(&mut rng, 40, 0.2, 0.0, 1.0);
        cell.root.pending = first.clone();
        let mut cell = init_voxel(cell, &c);
        let more = plane_points(&mut rng, 30, 0.2, 0.0, 1.0);
        assert_eq!(update_plane(&mut cell, &more, &c).unwrap(), UpdateOutcome::Updated);
        let union: Vec<_> = first.iter().chain(more.iter()).copied().collect();
        let oracle = batch_stats(&union).unwrap();
        let s = cell.stats().unwrap();
        assert_eq!(s.count, 70);
        assert!((s.mean - oracle.mean).norm() < 1e-12);
        assert!((s.cov - oracle.cov).norm() < 1e-12);
    }

    #[test]
    fn update_with_offset_cluster_removes_voxel() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cell = planar_cell(&mut rng, 40);
        let cluster = plane_points(&mut rng, 40, 0.7, 0.0, 1.0);
        assert_eq!(update_plane(&mut cell, &cluster, &c).unwrap(), UpdateOutcome::Removed);
        assert_eq!(cell.state, CellState::Removed);
    }

    #[test]
    fn thick_consistent_batch_keeps_initial_stats() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut cell = planar_cell(&mut rng, 40);
        let before = cell.stats().unwrap().clone();
        // Same footprint, ±0.3 m spread along the normal, mirrored so the
        // mean stays on the plane.
        let mut thick = Vec::new();
        for _ in 0..20 {
            let x = rng.random_range(0.0..1.0);
            let y = rng.random_range(0.0..1.0);
            let dz = rng.random_range(0.2..0.3);
            thick.push(Vector3::new(x, y, 0.2 + dz));
            thick.push(Vector3::new(1.0 - x, 1.0 - y, 0.2 - dz));
        }
        let merged = before.merged(&thick);
        assert!((merged.mean - before.mean).norm() < c.mean_shift_threshold);
        assert!(merged.lambda_min() > c.plane_threshold);
        assert_eq!(update_plane(&mut cell, &thick, &c).unwrap(), UpdateOutcome::KeptInitial);
        assert_eq!(cell.stats().unwrap(), &before);
        assert_eq!(cell.state, CellState::Planar);
    }

    #[test]
    fn update_errors() {
        let c = cfg();
        let mut cell = VoxelCell::new([0, 0, 0], 1.0);
        let pts = vec![Vector3::new(0.5, 0.5, 0.5); 10];
        assert!(matches!(
            update_plane(&mut cell, &pts, &c),
            Err(PlaneMapError::Uninitialized(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cell = planar_cell(&mut rng, 30);
        assert!(matches!(
            update_plane(&mut cell, &pts[..2], &c),
            Err(PlaneMapError::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn empty_scan_is_noop() {
        let mut map = PlaneMap::new(cfg()).unwrap();
        assert!(map.insert_scan(&[]).is_empty());
        assert!(map.is_empty());
        assert!(map.extract_centroids().is_empty());
    }

    #[test]
    fn non_finite_points_are_counted() {
        let mut map = PlaneMap::new(cfg()).unwrap();
        let keys = map.insert_scan(&[Vector3::new(f64::NAN, 0.0, 0.0), Vector3::new(0.5, 0.5, 0.5)]);
        assert_eq!(keys, vec![[0, 0, 0]]);
        assert_eq!(map.skipped_non_finite(), 1);
    }

    fn ground_scan(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.05))
            .collect()
    }

    #[test]
    fn ground_plane_scan_all_voxels_planar() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scan = ground_scan(&mut rng, 3600);
        let mut map = PlaneMap::new(c.clone()).unwrap();
        map.insert_scan(&scan);
        let mut counts: HashMap<VoxelKey, usize> = HashMap::new();
        for p in &scan {
            *counts.entry(voxel_key(p, 1.0).unwrap()).or_default() += 1;
        }
        for (k, n) in counts {
            if n > c.min_points {
                assert_eq!(map.cell(&k).unwrap().state, CellState::Planar);
            }
        }
        let centroids = map.extract_centroids();
        assert_eq!(centroids.len(), 36);
        assert!(centroids.iter().all(|c| (c.position.z - 0.05).abs() < 1e-12));
    }

    #[test]
    fn chunked_insertion_matches_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let scan = ground_scan(&mut rng, 7200);
        let mut whole = PlaneMap::new(cfg()).unwrap();
        whole.insert_scan(&scan);
        let mut chunked = PlaneMap::new(cfg()).unwrap();
        let (a, b) = scan.split_at(scan.len() / 2);
        chunked.insert_scan(a);
        chunked.insert_scan(b);
        let cw = whole.extract_centroids();
        let cc = chunked.extract_centroids();
        assert_eq!(cw.len(), cc.len());
        for (x, y) in cw.iter().zip(&cc) {
            assert_eq!(x.key, y.key);
            assert_eq!(x.octree_path, y.octree_path);
            assert!((x.position - y.position).norm() < 1e-7);
            assert!((x.normal - y.normal).norm() < 1e-7);
        }
    }

    #[test]
    fn single_planar_voxel_centroid_is_its_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pts = plane_points(&mut rng, 30, 0.4, 0.0, 1.0);
        let mut map = PlaneMap::new(cfg()).unwrap();
        map.insert_scan(&pts);
        let cs = map.extract_centroids();
        assert_eq!(cs.len(), 1);
        let oracle = batch_stats(&pts).unwrap();
        assert!((cs[0].position - oracle.mean).norm() < 1e-12);
        assert_eq!(cs[0].octree_path, "");
        assert_eq!(cs, map.extract_centroids());
    }

    #[test]
    fn removed_voxel_disappears_then_recreates() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut map = PlaneMap::new(cfg()).unwrap();
        map.insert_scan(&plane_points(&mut rng, 40, 0.2, 0.0, 1.0));
        assert_eq!(map.extract_centroids().len(), 1);
        let report = map.insert_scan_report(&plane_points(&mut rng, 40, 0.7, 0.0, 1.0));
        assert_eq!(report.removed, 1);
        assert_eq!(map.cell(&[0, 0, 0]).unwrap().state, CellState::Removed);
        assert!(map.extract_centroids().is_empty());
        map.insert_scan(&plane_points(&mut rng, 3, 0.2, 0.0, 1.0));
        assert_eq!(map.cell(&[0, 0, 0]).unwrap().state, CellState::Accumulating);
        assert!(map.extract_centroids().is_empty());
    }

    #[test]
    fn window_prunes_far_voxels() {
        let c = PlaneMapConfig {
            window_radius: Some(2.0),
            ..cfg()
        };
        let mut map = PlaneMap::new(c).unwrap();
        map.insert_scan(&[Vector3::new(0.5, 0.5, 0.5), Vector3::new(10.5, 0.5, 0.5)]);
        assert_eq!(map.prune_outside(&Vector3::zeros()), 1);
        assert_eq!(map.len(), 1);
    }

    #[test]
    fn centroid_dump_format() {
        let c = PlaneCentroid {
            position: Vector3::new(1.0, -2.5, 0.125),
            normal: Vector3::z(),
            key: [1, -3, 0],
            octree_path: "07".into(),
        };
        let mut buf = Vec::new();
        write_centroids(&mut buf, &[c.clone()]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1 -2.5 0.125 0 0 1 1,-3,0 07\n");
    }

    #[test]
    fn config_validation() {
        assert!(PlaneMapConfig { min_points: 3, ..cfg() }.validate().is_err());
        assert!(PlaneMapConfig { plane_threshold: 0.0, ..cfg() }.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn incremental_equals_batch(seed in 0u64..10_000, n in 20usize..400, chunks in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<_> = (0..n)
                .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-0.5..0.5)))
                .collect();
            let first = n / (chunks + 1);
            let mut stats = batch_stats(&pts[..first.max(1)]).unwrap();
            let rest = &pts[first.max(1)..];
            for chunk in rest.chunks(rest.len().div_ceil(chunks).max(1)) {
                stats = stats.merged(chunk);
            }
            let oracle = batch_stats(&pts).unwrap();
            let scale = oracle.cov.abs().max();
            prop_assert!((stats.cov - oracle.cov).abs().max() / scale < 1e-7);
            prop_assert!((stats.mean - oracle.mean).abs().max() / oracle.mean.abs().max().max(1.0) < 1e-7);
            prop_assert!((stats.eigenvalues - oracle.eigenvalues).abs().max() < 1e-9);
        }

        #[test]
        fn thicker_noise_never_becomes_planar(seed in 0u64..10_000, s in 1.0f64..5.0) {
            let c = cfg();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base: Vec<(f64, f64, f64)> = (0..100)
                .map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(-0.5..0.5)))
                .collect();
            let noise = 0.15;
            let make = |k: f64| -> Vec<Vector3<f64>> {
                base.iter().map(|&(x, y, z)| Vector3::new(x, y, 0.5 + z * noise * k)).collect()
            };
            let a = batch_stats(&make(1.0)).unwrap();
            let b = batch_stats(&make(s)).unwrap();
            prop_assert!(b.lambda_min() >= a.lambda_min() - 1e-12);
            if classify(&a, &c) == Planarity::NotPlanar {
                prop_assert_eq!(classify(&b, &c), Planarity::NotPlanar);
            }
        }

        #[test]
        fn stats_invariants(seed in 0u64..10_000, n in 4usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<_> = (0..n)
                .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
                .collect();
            let s = batch_stats(&pts).unwrap();
            prop_assert!((s.cov - s.cov.transpose()).norm() < 1e-12);
            prop_assert!(s.eigenvalues[0] > -1e-9);
            let eig = SymmetricEigen::new(s.cov);
            let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            for i in 0..3 {
                prop_assert!((ev[i] - s.eigenvalues[i]).abs() < 1e-9);
            }
            prop_assert!((s.cov * s.normal - s.normal * s.eigenvalues[0]).norm() < 1e-9);
        }
    }
}
