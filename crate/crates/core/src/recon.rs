//! Reconstruction from one or a few views: synthetic inliers, the
//! network-centered observation matrix, row resampling, factorization and
//! xy-snapping.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_json, Collection, ObjectInstance, Vec2};
use crate::error::{Error, Result};
use crate::factorization::{factorize, factorize_from, FactorizationResult, FactorizeOptions, ObservationMatrix};
use crate::geometry::{is_mirrored_id, mirror_instance, mirrored_id, viewpoint_difference_deg};
use crate::network::{align_fast, dock, AlignmentResult, CompressedNetwork, VVNetwork};
use crate::Real;

pub type Vec3 = Vector3<Real>;

/// Angular step used to widen an empty neighbor range.
pub const NEIGHBOR_RANGE_STEP: Real = 15.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub n_inliers_per_pair: usize,
    pub resample_target_factor: Real,
    pub resample_nn_factor: Real,
    pub n_neighbors: usize,
    /// Viewpoint differences, in degrees, eligible for neighbor selection.
    pub neighbor_view_range: [Real; 2],
    pub xy_snap: bool,
    pub n_dock: usize,
    /// Adds the mirrored view when a single target is given.
    pub mirror: bool,
    /// Keeps keypoint and inlier reconstructions in the output cloud.
    pub include_auxiliary: bool,
    /// Reprojection distance, in pixels, within which an entry supports a point.
    pub consensus_px: Real,
    pub factorize: FactorizeOptions,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            n_inliers_per_pair: 10,
            resample_target_factor: 0.05,
            resample_nn_factor: 0.02,
            n_neighbors: 4,
            neighbor_view_range: [30.0, 60.0],
            xy_snap: true,
            n_dock: 10,
            mirror: true,
            include_auxiliary: false,
            consensus_px: 5.0,
            factorize: FactorizeOptions::default(),
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        let factors = [self.resample_target_factor, self.resample_nn_factor];
        if factors.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::InvalidInput("resampling factors must be finite and non-negative".into()));
        }
        let [lo, hi] = self.neighbor_view_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidInput("neighbor view range must be ordered".into()));
        }
        if !(self.consensus_px.is_finite() && self.consensus_px > 0.0) {
            return Err(Error::InvalidInput("consensus threshold must be positive".into()));
        }
        if self.n_dock == 0 {
            return Err(Error::InvalidInput("n_dock must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where a synthetic inlier column comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InlierProvenance {
    /// Keypoint indices `(u, v)`, `u < v`.
    pub pair: (usize, usize),
    /// The point is `alpha·m_u + (1 − alpha)·m_v`.
    pub alpha: Real,
}

/// Points on the segments between visible keypoint pairs; column `c` means
/// the same pair and parameter in every instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticInlierSet {
    pub provenance: Vec<InlierProvenance>,
    /// `points[instance][column]`, `None` when an endpoint is not visible.
    pub points: Vec<Vec<Option<Vec2>>>,
}

impl SyntheticInlierSet {
    pub fn empty(instances: usize) -> Self {
        Self { provenance: Vec::new(), points: vec![Vec::new(); instances] }
    }

    pub fn column_count(&self) -> usize {
        self.provenance.len()
    }

    pub fn instance_count(&self) -> usize {
        self.points.len()
    }
}

/// `n` equally spaced interior points on every keypoint pair.
pub fn extrapolate_inliers(collection: &Collection, n: usize) -> Result<SyntheticInlierSet> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one inlier per pair".into()));
    }
    let z = collection.keypoint_count();
    let mut provenance = Vec::with_capacity(z * z.saturating_sub(1) / 2 * n);
    for u in 0..z {
        for v in u + 1..z {
            for t in 1..=n {
                provenance.push(InlierProvenance { pair: (u, v), alpha: t as Real / (n + 1) as Real });
            }
        }
    }
    let points = collection
        .instances
        .iter()
        .map(|inst| {
            provenance
                .iter()
                .map(|p| {
                    let mu = inst.keypoints.visible_position(p.pair.0)?;
                    let mv = inst.keypoints.visible_position(p.pair.1)?;
                    Some(mu * p.alpha + mv * (1.0 - p.alpha))
                })
                .collect()
        })
        .collect();
    Ok(SyntheticInlierSet { provenance, points })
}

/// Row and column blocks of an assembled observation matrix. Rows are the
/// target frames followed by one frame per training instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationLayout {
    pub target_frames: usize,
    pub training_frames: usize,
    pub target_columns: Vec<Range<usize>>,
    pub keypoint_columns: Range<usize>,
    pub inlier_columns: Range<usize>,
}

impl ObservationLayout {
    pub fn frames(&self) -> usize {
        self.target_frames + self.training_frames
    }

    pub fn columns(&self) -> usize {
        self.inlier_columns.end
    }

    pub fn training_frame(&self, instance: usize) -> usize {
        self.target_frames + instance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assembly {
    pub observation: ObservationMatrix<Real>,
    pub layout: ObservationLayout,
}

/// Builds the blockwise-missing observation matrix. Target points are known
/// in their own frame and wherever the alignment matched them; keypoint and
/// inlier columns only in training frames.
pub fn assemble_observation(
    targets: &[(&ObjectInstance, &AlignmentResult)],
    collection: &Collection,
    inliers: &SyntheticInlierSet,
) -> Result<Assembly> {
    let m = collection.len();
    if targets.is_empty() {
        return Err(Error::InvalidInput("empty alignment: no target views".into()));
    }
    for (inst, al) in targets {
        if al.instance_count() != m || al.test_points() != inst.grid.len() {
            return Err(Error::InvalidInput(format!("alignment of `{}` does not cover the collection", inst.id)));
        }
        if inst.grid.is_empty() {
            return Err(Error::InvalidInput(format!("empty alignment: `{}` has no grid points", inst.id)));
        }
    }
    if inliers.instance_count() != m {
        return Err(Error::InvalidInput("inlier set does not cover the collection".into()));
    }
    let t = targets.len();
    let mut target_columns = Vec::with_capacity(t);
    let mut next = 0;
    for (inst, _) in targets {
        target_columns.push(next..next + inst.grid.len());
        next += inst.grid.len();
    }
    let z = collection.keypoint_count();
    let keypoint_columns = next..next + z;
    let inlier_columns = keypoint_columns.end..keypoint_columns.end + inliers.column_count();
    let layout = ObservationLayout { target_frames: t, training_frames: m, target_columns, keypoint_columns, inlier_columns };
    let mut obs = ObservationMatrix::new(layout.frames(), layout.columns());
    for (f, ((inst, al), cols)) in targets.iter().zip(&layout.target_columns).enumerate() {
        for (k, col) in cols.clone().enumerate() {
            obs.set(f, col, inst.grid.points[k]);
            for (j, entry) in al.row(k).iter().enumerate() {
                if let Some(hit) = entry {
                    let node = hit.node;
                    let pts = &collection.instances[j].grid.points;
                    if node.instance_index != j || node.point_index >= pts.len() {
                        return Err(Error::InvalidInput("alignment refers to a missing grid point".into()));
                    }
                    obs.set(layout.training_frame(j), col, pts[node.point_index]);
                }
            }
        }
    }
    for (j, inst) in collection.instances.iter().enumerate() {
        let f = layout.training_frame(j);
        for zi in 0..z {
            if let Some(p) = inst.keypoints.visible_position(zi) {
                obs.set(f, layout.keypoint_columns.start + zi, p);
            }
        }
        if inliers.points[j].len() != inliers.column_count() {
            return Err(Error::InvalidInput("ragged inlier set".into()));
        }
        for (c, p) in inliers.points[j].iter().enumerate() {
            if let Some(p) = p {
                obs.set(f, layout.inlier_columns.start + c, *p);
            }
        }
    }
    Ok(Assembly { observation: obs, layout })
}

fn same_object(a: &str, b: &str) -> bool {
    a == b || mirrored_id(a) == b || mirrored_id(b) == a
}

/// The `n_neighbors` instances closest in global descriptor among those
/// seen from a viewpoint differing by an angle within the configured range.
pub fn select_neighbors(
    target: &ObjectInstance,
    collection: &Collection,
    pose: &crate::camera::Camera<Real>,
    cfg: &ReconConfig,
) -> Result<Vec<usize>> {
    pose.validate()?;
    let cameras = collection.cameras()?;
    let desc = target.global_descriptor_or_mean();
    let angles: Vec<Real> = cameras.iter().map(|c| viewpoint_difference_deg(pose, c)).collect();
    let [mut lo, mut hi] = cfg.neighbor_view_range;
    loop {
        let mut cands: Vec<(Real, usize)> = Vec::new();
        for (j, inst) in collection.instances.iter().enumerate() {
            if same_object(&inst.id, &target.id) || angles[j] < lo || angles[j] > hi {
                continue;
            }
            let other = inst.global_descriptor_or_mean();
            if other.len() != desc.len() {
                return Err(Error::InvalidInput("global descriptor dimension mismatch".into()));
            }
            let d = desc.iter().zip(&other).map(|(a, b)| (a - b) * (a - b)).sum::<Real>().sqrt();
            cands.push((d, j));
        }
        if !cands.is_empty() {
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            return Ok(cands.into_iter().take(cfg.n_neighbors).map(|(_, j)| j).collect());
        }
        if lo <= 0.0 && hi >= 180.0 {
            return Err(Error::InsufficientObservations(format!("no neighbor candidates for `{}`", target.id)));
        }
        lo = (lo - NEIGHBOR_RANGE_STEP).max(0.0);
        hi = (hi + NEIGHBOR_RANGE_STEP).min(180.0);
        log::warn!("no neighbors of `{}` in range, widening to [{lo}, {hi}]", target.id);
    }
}

/// `max(1, round(factor · collection_size))`.
pub fn resample_count(factor: Real, collection_size: usize) -> usize {
    ((factor * collection_size as Real).round() as usize).max(1)
}

/// Sets integer row weights on the target and nearest-neighbor frames.
pub fn apply_resampling(
    obs: &ObservationMatrix<Real>,
    target_frames: &[usize],
    nn_frames: &[usize],
    collection_size: usize,
    cfg: &ReconConfig,
) -> Result<ObservationMatrix<Real>> {
    if target_frames.iter().chain(nn_frames).any(|&f| f >= obs.frames()) {
        return Err(Error::InvalidInput("resampled frame out of range".into()));
    }
    let mut out = obs.clone();
    out.set_row_weights(vec![1.0; obs.frames()])?;
    let nn = resample_count(cfg.resample_nn_factor, collection_size) as Real;
    let tw = resample_count(cfg.resample_target_factor, collection_size) as Real;
    for &f in nn_frames {
        out.set_row_weight(f, nn);
    }
    for &f in target_frames {
        out.set_row_weight(f, tw);
    }
    Ok(out)
}

/// Keeps the columns with at least `min_known` entries; returns the
/// reduced matrix and the original index of every kept column.
pub fn prune_columns(obs: &ObservationMatrix<Real>, min_known: usize) -> Result<(ObservationMatrix<Real>, Vec<usize>)> {
    let kept: Vec<usize> = (0..obs.points()).filter(|&c| obs.known_in_point(c) >= min_known).collect();
    let mut out = ObservationMatrix::new(obs.frames(), kept.len());
    out.set_row_weights(obs.row_weights().to_vec())?;
    for (nc, &c) in kept.iter().enumerate() {
        for f in 0..obs.frames() {
            if let Some(x) = obs.get(f, c) {
                out.set(f, nc, x);
            }
        }
    }
    Ok((out, kept))
}

/// Least-squares point seen by `cams` at `obs`, with a tiny ridge toward
/// the origin when underdetermined.
fn triangulate(cams: &[&crate::camera::Camera<Real>], obs: &[Vec2], weights: &[Real]) -> Vec3 {
    let mut a = nalgebra::Matrix3::<Real>::zeros();
    let mut b = Vec3::zeros();
    for ((c, x), w) in cams.iter().zip(obs).zip(weights) {
        let p = c.projection_matrix();
        a += p.transpose() * p * *w;
        b += p.transpose() * (x - c.translation()) * *w;
    }
    let ridge = a.trace().max(1.0) * 1e-9;
    a += nalgebra::Matrix3::identity() * ridge;
    a.cholesky().map_or(Vec3::zeros(), |ch| ch.solve(&b))
}

/// Depth along the target ray `origin + d·axis` best supported by the
/// observations within `tol` pixels, refit on its supporters.
fn ray_consensus(
    origin: &Vec3,
    axis: &Vec3,
    cams: &[&crate::camera::Camera<Real>],
    xs: &[Vec2],
    w: &[Real],
    tol: Real,
) -> (Vec3, Vec<bool>) {
    let uv: Vec<(Vec2, Vec2)> =
        cams.iter().map(|c| (c.project_point(origin), c.projection_matrix() * axis)).collect();
    let support = |d: Real| -> (Real, Vec<bool>) {
        let keep: Vec<bool> = uv.iter().zip(xs).map(|((u, v), x)| (u + v * d - x).norm() <= tol).collect();
        (keep.iter().zip(w).filter(|(k, _)| **k).map(|(_, w)| *w).sum(), keep)
    };
    let fit = |keep: &[bool]| -> Option<Real> {
        let (mut num, mut den) = (0.0, 0.0);
        for (((u, v), x), (k, w)) in uv.iter().zip(xs).zip(keep.iter().zip(w)) {
            if *k {
                num += w * v.dot(&(x - u));
                den += w * v.norm_squared();
            }
        }
        (den > 1e-12).then(|| num / den)
    };
    let mut best: (Real, Real, Vec<bool>) = (Real::NEG_INFINITY, 0.0, Vec::new());
    for ((u, v), x) in uv.iter().zip(xs) {
        let n2 = v.norm_squared();
        if n2 < 1e-12 {
            continue;
        }
        let d = v.dot(&(x - u)) / n2;
        let (sc, keep) = support(d);
        if sc > best.0 || (sc == best.0 && d.abs() < best.1.abs()) {
            best = (sc, d, keep);
        }
    }
    if best.2.is_empty() {
        return (*origin, vec![true; xs.len()]);
    }
    let (mut d, mut keep) = (best.1, best.2);
    for _ in 0..3 {
        let Some(nd) = fit(&keep) else { break };
        let (sc, nk) = support(nd);
        if sc < best.0 {
            break;
        }
        best.0 = sc;
        let same = nk == keep;
        (d, keep) = (nd, nk);
        if same {
            break;
        }
    }
    (origin + axis * d, keep)
}

/// Network-centered factorization. Motions start at the known poses (the
/// training cameras and the target poses); keypoint and inlier columns are
/// triangulated from them, and every target point is searched along its
/// viewing ray for the depth most training entries agree with. Entries that
/// disagree are cleared and the whole matrix is refined. Frames are the
/// target poses followed by the training poses; `target_columns[i]` is
/// `(column, target frame)`. Returns the fit and the trimmed observations.
pub fn staged_factorization(
    obs: &ObservationMatrix<Real>,
    target_poses: &[crate::camera::Camera<Real>],
    training_poses: &[crate::camera::Camera<Real>],
    target_columns: &[(usize, usize)],
    cfg: &ReconConfig,
) -> Result<(FactorizationResult<Real>, ObservationMatrix<Real>)> {
    let tf = target_poses.len();
    if tf + training_poses.len() != obs.frames() || target_columns.iter().any(|&(c, f)| c >= obs.points() || f >= tf) {
        return Err(Error::InvalidInput("poses or target columns do not match the observations".into()));
    }
    obs.validate()?;
    let motions: Vec<crate::camera::Camera<Real>> = target_poses.iter().chain(training_poses).copied().collect();
    let mut target_of = vec![None; obs.points()];
    for &(c, v) in target_columns {
        target_of[c] = Some(v);
    }
    let mut shape = Matrix3xX::zeros(obs.points());
    let mut trimmed = obs.clone();
    for c in 0..obs.points() {
        let Some(v) = target_of[c] else {
            let entries: Vec<usize> = (0..obs.frames()).filter(|&f| obs.is_known(f, c)).collect();
            let cams: Vec<_> = entries.iter().map(|&f| &motions[f]).collect();
            let xs: Vec<Vec2> = entries.iter().map(|&f| obs.get(f, c).unwrap()).collect();
            let w: Vec<Real> = entries.iter().map(|&f| obs.row_weights()[f]).collect();
            shape.set_column(c, &triangulate(&cams, &xs, &w));
            continue;
        };
        let cam = &motions[v];
        let x = obs.get(v, c).ok_or_else(|| Error::InvalidInput("target column unobserved in its own frame".into()))?;
        let xy = (x - cam.translation()) / cam.scale();
        let origin = cam.rotation().transpose() * Vec3::new(xy.x, xy.y, 0.0);
        let axis = cam.rotation().transpose() * Vec3::z();
        let entries: Vec<(usize, Vec2)> = (tf..obs.frames()).filter_map(|f| obs.get(f, c).map(|x| (f, x))).collect();
        let cams: Vec<_> = entries.iter().map(|(f, _)| &motions[*f]).collect();
        let xs: Vec<Vec2> = entries.iter().map(|e| e.1).collect();
        let w: Vec<Real> = entries.iter().map(|(f, _)| obs.row_weights()[*f]).collect();
        let (p, keep) = ray_consensus(&origin, &axis, &cams, &xs, &w, cfg.consensus_px);
        shape.set_column(c, &p);
        let mut known = (0..tf).filter(|&f| obs.is_known(f, c)).count() + keep.iter().filter(|k| **k).count();
        for ((f, _), k) in entries.iter().zip(&keep) {
            if *k {
                continue;
            }
            if known >= 2 {
                trimmed.clear(*f, c);
            } else {
                known += 1;
            }
        }
    }
    let init = FactorizationResult {
        completed: DMatrix::zeros(0, 0),
        shape,
        motions,
        residual: 0.0,
        iterations: 0,
        converged: false,
        residual_history: Vec::new(),
        flagged_frames: Vec::new(),
    };
    Ok((factorize_from(&trimmed, &cfg.factorize, &init)?, trimmed))
}

/// Columns of the mirrored view and, for each, the index in `snaps` of the
/// reference point it mirrors.
#[derive(Clone, Copy, Debug)]
pub struct MirrorSnap<'a> {
    pub columns: &'a [usize],
    pub correspondence: Option<&'a [usize]>,
}

/// Moves each `(column, x)` point parallel to the reference image plane so
/// that it projects exactly onto `x`. Mirror columns receive the offset of
/// their correspondent. `residual` keeps the value of the fit.
pub fn xy_snap(
    result: &FactorizationResult<Real>,
    reference_frame: usize,
    snaps: &[(usize, Vec2)],
    mirror: Option<MirrorSnap<'_>>,
) -> Result<FactorizationResult<Real>> {
    let cam = result
        .motions
        .get(reference_frame)
        .ok_or_else(|| Error::InvalidInput("reference frame out of range".into()))?;
    let k = result.shape.ncols();
    let r = cam.rotation();
    let mut out = result.clone();
    let mut offsets = Vec::with_capacity(snaps.len());
    for &(col, x) in snaps {
        if col >= k {
            return Err(Error::InvalidInput("snapped column out of range".into()));
        }
        let p = result.point(col);
        let delta = (x - cam.project_point(&p)) / cam.scale();
        let off = r.transpose() * Vec3::new(delta.x, delta.y, 0.0);
        out.shape.set_column(col, &(p + off));
        offsets.push(off);
    }
    if let Some(m) = mirror {
        let corr = m.correspondence.ok_or_else(|| Error::InvalidInput("missing mirror correspondence table".into()))?;
        if corr.len() != m.columns.len() {
            return Err(Error::InvalidInput("mirror correspondence table has the wrong length".into()));
        }
        for (&col, &src) in m.columns.iter().zip(corr) {
            if col >= k || src >= offsets.len() {
                return Err(Error::InvalidInput("mirror correspondence out of range".into()));
            }
            let p = result.point(col) + offsets[src];
            out.shape.set_column(col, &p);
        }
    }
    out.completed = predict(&out.motions, &out.shape);
    Ok(out)
}

fn predict(motions: &[crate::camera::Camera<Real>], shape: &Matrix3xX<Real>) -> DMatrix<Real> {
    let mut out = DMatrix::zeros(2 * motions.len(), shape.ncols());
    for (f, cam) in motions.iter().enumerate() {
        for k in 0..shape.ncols() {
            let p = cam.project_point(&shape.column(k).into_owned());
            out[(2 * f, k)] = p.x;
            out[(2 * f + 1, k)] = p.y;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointLabel {
    Target,
    TargetMirrored,
    SyntheticInlier,
    Training,
}

impl PointLabel {
    pub fn code(self) -> u8 {
        match self {
            PointLabel::Target => 0,
            PointLabel::TargetMirrored => 1,
            PointLabel::SyntheticInlier => 2,
            PointLabel::Training => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        [PointLabel::Target, PointLabel::TargetMirrored, PointLabel::SyntheticInlier, PointLabel::Training]
            .get(code as usize)
            .copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointSource {
    pub instance_id: String,
    /// Grid index for target points, keypoint or inlier column otherwise.
    pub index: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub labels: Vec<PointLabel>,
    pub sources: Vec<PointSource>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, point: Vec3, label: PointLabel, source: PointSource) {
        self.points.push(point);
        self.labels.push(label);
        self.sources.push(source);
    }

    /// Points carrying `label`.
    pub fn with_label(&self, label: PointLabel) -> Vec<Vec3> {
        self.points.iter().zip(&self.labels).filter(|(_, l)| **l == label).map(|(p, _)| *p).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.points.len() || self.sources.len() != self.points.len() {
            return Err(Error::InvalidInput("point cloud arrays differ in length".into()));
        }
        if self.points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("point cloud"));
        }
        Ok(())
    }

    /// ASCII PLY with a `label` vertex property; sources go in header comments.
    pub fn write_ply<W: Write>(&self, mut out: W) -> Result<()> {
        self.validate()?;
        let io = |e| Error::io("<ply>", e);
        let mut header = String::from("ply\nformat ascii 1.0\n");
        header.push_str("comment label 0=target 1=target-mirrored 2=synthetic-inlier 3=training\n");
        for (i, s) in self.sources.iter().enumerate() {
            header.push_str(&format!("comment source {i} {} {}\n", s.instance_id, s.index));
        }
        header.push_str(&format!(
            "element vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty uchar label\nend_header\n",
            self.len()
        ));
        out.write_all(header.as_bytes()).map_err(io)?;
        for (p, l) in self.points.iter().zip(&self.labels) {
            writeln!(out, "{} {} {} {}", p.x, p.y, p.z, l.code()).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn save_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_ply(BufWriter::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    /// Reads what [`PointCloud::write_ply`] writes.
    pub fn from_ply_str(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::schema("ply", m);
        let mut lines = text.lines();
        if lines.next() != Some("ply") {
            return Err(bad("missing magic"));
        }
        let mut count = None;
        let mut sources = Vec::new();
        for line in lines.by_ref() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["end_header"] => break,
                ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| bad("vertex count"))?),
                ["comment", "source", _, id, idx] => sources.push(PointSource {
                    instance_id: id.to_string(),
                    index: idx.parse().map_err(|_| bad("source index"))?,
                }),
                _ => {}
            }
        }
        let n = count.ok_or_else(|| bad("no vertex element"))?;
        let mut cloud = PointCloud::default();
        for _ in 0..n {
            let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad("vertex line needs 4 fields"));
            }
            let c = |s: &str| s.parse::<Real>().map_err(|_| bad("coordinate"));
            let label = f[3].parse::<u8>().ok().and_then(PointLabel::from_code).ok_or_else(|| bad("label"))?;
            cloud.points.push(Vec3::new(c(f[0])?, c(f[1])?, c(f[2])?));
            cloud.labels.push(label);
        }
        if sources.len() != n {
            return Err(bad("source comments do not match the vertex count"));
        }
        cloud.sources = sources;
        cloud.validate()?;
        Ok(cloud)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub id: String,
    pub mirrored: bool,
    pub grid_points: usize,
    pub docking_edges: usize,
    /// Training instances reached by at least one target point.
    pub matched_instances: usize,
    /// Points observed only in their own frame, placed by back-projection.
    pub imputed_points: usize,
    pub neighbors: Vec<String>,
}

/// Sidecar metadata of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub views: Vec<ViewReport>,
    pub frames: usize,
    pub columns: usize,
    pub factorized_columns: usize,
    pub known_entries: usize,
    pub cleared_entries: usize,
    pub target_weight: usize,
    pub neighbor_weight: usize,
    pub residual: Real,
    pub iterations: usize,
    pub converged: bool,
    pub flagged_frames: usize,
    pub depth_flipped: bool,
    pub snapped: bool,
    pub runtime_seconds: Real,
    pub config: ReconConfig,
}

impl ReconReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub cloud: PointCloud,
    /// Factorization of the columns with at least two observations.
    pub factorization: FactorizationResult<Real>,
    /// Original column of every factorized column.
    pub factorized_columns: Vec<usize>,
    /// Target-view points (all views, in layout order) before snapping.
    pub unsnapped: Vec<Vec3>,
    pub layout: ObservationLayout,
    pub report: ReconReport,
}

impl Reconstruction {
    /// Points of the first target view.
    pub fn reference_points(&self) -> Vec<Vec3> {
        self.cloud.points[..self.layout.target_columns[0].len()].to_vec()
    }
}

/// Full pipeline. Every target must carry its (oracle or predicted) pose in
/// `camera`. A single target is joined by its mirror when `cfg.mirror`.
pub fn reconstruct(
    targets: &[ObjectInstance],
    network: &VVNetwork,
    compressed: &CompressedNetwork,
    collection: &Collection,
    cfg: &ReconConfig,
) -> Result<Reconstruction> {
    let start = Instant::now();
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::InvalidInput("no target views".into()));
    }
    if network.instance_count() != collection.len() || compressed.instance_count() != collection.len() {
        return Err(Error::InvalidInput("network does not match the collection".into()));
    }
    let mut views: Vec<(ObjectInstance, bool)> = targets.iter().cloned().map(|t| (t, false)).collect();
    let mut mirror_map = None;
    if targets.len() == 1 && cfg.mirror {
        let m = mirror_instance(&targets[0], &collection.symmetry_swap)?;
        mirror_map = Some(m.grid_map);
        views.push((m.instance, true));
    }

    let mut alignments = Vec::with_capacity(views.len());
    let mut view_reports = Vec::with_capacity(views.len());
    let mut nn_instances: Vec<usize> = Vec::new();
    for (view, mirrored) in &views {
        let pose = view.camera.ok_or_else(|| Error::InvalidInput(format!("target `{}` has no pose", view.id)))?;
        let docking = dock(view, collection, network, &pose, cfg.n_dock, network.alpha())?;
        let al = align_fast(compressed, &docking)?;
        let matched = (0..collection.len()).filter(|&j| (0..al.test_points()).any(|p| al.get(p, j).is_some())).count();
        let neighbors = select_neighbors(view, collection, &pose, cfg)?;
        for &j in &neighbors {
            if !nn_instances.contains(&j) {
                nn_instances.push(j);
            }
        }
        view_reports.push(ViewReport {
            id: view.id.clone(),
            mirrored: *mirrored,
            grid_points: view.grid.len(),
            docking_edges: docking.edges().len(),
            matched_instances: matched,
            imputed_points: 0,
            neighbors: neighbors.iter().map(|&j| collection.instances[j].id.clone()).collect(),
        });
        alignments.push(al);
    }

    let inliers = if cfg.n_inliers_per_pair > 0 {
        extrapolate_inliers(collection, cfg.n_inliers_per_pair)?
    } else {
        SyntheticInlierSet::empty(collection.len())
    };
    let pairs: Vec<(&ObjectInstance, &AlignmentResult)> = views.iter().map(|(v, _)| v).zip(&alignments).collect();
    let Assembly { observation, layout } = assemble_observation(&pairs, collection, &inliers)?;

    let collection_size = collection.instances.iter().filter(|i| !is_mirrored_id(&i.id)).count();
    let target_frames: Vec<usize> = (0..layout.target_frames).collect();
    let nn_frames: Vec<usize> = nn_instances.iter().map(|&j| layout.training_frame(j)).collect();
    let weighted = apply_resampling(&observation, &target_frames, &nn_frames, collection_size, cfg)?;

    let (pruned, kept) = prune_columns(&weighted, 2)?;
    let known_entries = pruned.mask().iter().filter(|&&b| b).count();
    let target_cols: Vec<(usize, usize)> = kept
        .iter()
        .enumerate()
        .filter_map(|(nc, &c)| layout.target_columns.iter().position(|r| r.contains(&c)).map(|v| (nc, v)))
        .collect();
    let target_poses: Vec<_> = views.iter().map(|(v, _)| v.camera.unwrap()).collect();
    let (mut fact, trimmed) = if target_cols.len() < kept.len() {
        staged_factorization(&pruned, &target_poses, &collection.cameras()?, &target_cols, cfg)?
    } else {
        (factorize(&pruned, &cfg.factorize)?, pruned.clone())
    };
    let cleared = known_entries - trimmed.mask().iter().filter(|&&b| b).count();

    let mut slot = vec![None; layout.columns()];
    for (nc, &c) in kept.iter().enumerate() {
        slot[c] = Some(nc);
    }
    let mut target_points: Vec<Vec3> = Vec::new();
    for (v, cols) in layout.target_columns.iter().enumerate() {
        let cam = &fact.motions[v];
        let grid = &views[v].0.grid.points;
        let known: Vec<(Vec2, Vec3)> =
            cols.clone().enumerate().filter_map(|(k, c)| slot[c].map(|nc| (grid[k], fact.point(nc)))).collect();
        if known.is_empty() {
            return Err(Error::InsufficientObservations(format!("no point of `{}` was matched", views[v].0.id)));
        }
        for (k, c) in cols.clone().enumerate() {
            match slot[c] {
                Some(nc) => target_points.push(fact.point(nc)),
                None => {
                    let x = grid[k];
                    let nearest = known
                        .iter()
                        .min_by(|a, b| (a.0 - x).norm_squared().total_cmp(&(b.0 - x).norm_squared()))
                        .map(|(_, p)| p)
                        .unwrap();
                    let depth = (cam.rotation() * nearest).z;
                    let xy = (x - cam.translation()) / cam.scale();
                    target_points.push(cam.rotation().transpose() * Vec3::new(xy.x, xy.y, depth));
                    view_reports[v].imputed_points += 1;
                }
            }
        }
    }

    // Factorized shapes are centered, so the reference points' mean depth is relative to the centroid.
    let n_ref = layout.target_columns[0].len();
    let mean_depth = target_points[..n_ref].iter().map(|p| (fact.motions[0].rotation() * p).z).sum::<Real>() / n_ref as Real;
    let depth_flipped = mean_depth > 0.0;
    if depth_flipped {
        fact = fact.depth_flipped();
        for p in target_points.iter_mut() {
            p.z = -p.z;
        }
    }
    let unsnapped = target_points.clone();
    let mut target_result = FactorizationResult {
        shape: Matrix3xX::from_columns(&target_points),
        motions: fact.motions.clone(),
        completed: DMatrix::zeros(0, 0),
        residual: fact.residual,
        iterations: fact.iterations,
        converged: fact.converged,
        residual_history: fact.residual_history.clone(),
        flagged_frames: fact.flagged_frames.clone(),
    };
    target_result.completed = predict(&target_result.motions, &target_result.shape);
    if cfg.xy_snap {
        let snaps: Vec<(usize, Vec2)> = views[0].0.grid.points.iter().copied().enumerate().collect();
        let mut mirror_cols = Vec::new();
        let mut corr = Vec::new();
        if let Some(map) = &mirror_map {
            mirror_cols = (n_ref..n_ref + layout.target_columns[1].len()).collect();
            corr = vec![usize::MAX; mirror_cols.len()];
            for (src, &dst) in map.iter().enumerate() {
                corr[dst] = src;
            }
        }
        let mirror = mirror_map.as_ref().map(|_| MirrorSnap { columns: &mirror_cols, correspondence: Some(&corr) });
        target_result = xy_snap(&target_result, 0, &snaps, mirror)?;
    }

    let mut cloud = PointCloud::default();
    let mut idx = 0;
    for (v, cols) in layout.target_columns.iter().enumerate() {
        let (view, mirrored) = &views[v];
        let label = if *mirrored { PointLabel::TargetMirrored } else { PointLabel::Target };
        for k in 0..cols.len() {
            cloud.push(target_result.point(idx), label, PointSource { instance_id: view.id.clone(), index: k });
            idx += 1;
        }
    }
    if cfg.include_auxiliary {
        for (nc, &c) in kept.iter().enumerate() {
            if layout.keypoint_columns.contains(&c) {
                let src = PointSource { instance_id: "keypoint".into(), index: c - layout.keypoint_columns.start };
                cloud.push(fact.point(nc), PointLabel::Training, src);
            } else if layout.inlier_columns.contains(&c) {
                let src = PointSource { instance_id: "inlier".into(), index: c - layout.inlier_columns.start };
                cloud.push(fact.point(nc), PointLabel::SyntheticInlier, src);
            }
        }
    }
    cloud.validate()?;

    let report = ReconReport {
        views: view_reports,
        frames: layout.frames(),
        columns: layout.columns(),
        factorized_columns: kept.len(),
        known_entries,
        cleared_entries: cleared,
        target_weight: resample_count(cfg.resample_target_factor, collection_size),
        neighbor_weight: resample_count(cfg.resample_nn_factor, collection_size),
        residual: fact.residual,
        iterations: fact.iterations,
        converged: fact.converged,
        flagged_frames: fact.flagged_frames.len(),
        depth_flipped,
        snapped: cfg.xy_snap,
        runtime_seconds: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    Ok(Reconstruction { cloud, factorization: fact, factorized_columns: kept, unsnapped, layout, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;
    use crate::dataset::{Keypoint, KeypointSet};
    use crate::geometry::view_rotation;
    use crate::network::{Cost, Match, NodeId};
    use crate::synth::{car, generate, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(n: usize, seed: u64) -> Collection {
        let cfg = SynthConfig { n_instances: n, n_grid_points: 60, seed, ..SynthConfig::default() };
        generate(&car(), &cfg).unwrap().0
    }

    fn matching(test_points: usize, collection: &Collection, f: impl Fn(usize, usize) -> Option<usize>) -> AlignmentResult {
        let m = collection.len();
        let mut entries = Vec::with_capacity(test_points * m);
        for p in 0..test_points {
            for j in 0..m {
                entries.push(f(p, j).map(|q| Match { node: NodeId::new(j, q), cost: Cost(1) }));
            }
        }
        AlignmentResult::new(test_points, m, entries).unwrap()
    }

    #[test]
    fn inliers_on_a_horizontal_segment() {
        let mut c = small(1, 0);
        c.instances[0].keypoints = KeypointSet {
            keypoints: vec![Keypoint::visible("a", Vec2::new(0.0, 0.0)), Keypoint::visible("b", Vec2::new(11.0, 0.0))],
        };
        c.symmetry_swap = vec![0, 1];
        let set = extrapolate_inliers(&c, 10).unwrap();
        assert_eq!(set.column_count(), 10);
        let mut xs: Vec<Real> = set.points[0].iter().map(|p| p.unwrap().x).collect();
        xs.sort_by(|a, b| a.total_cmp(b));
        for (t, x) in xs.iter().enumerate() {
            assert!((x - (t + 1) as Real).abs() < 1e-12);
        }
        assert!(set.points[0].iter().all(|p| p.unwrap().y == 0.0));
        assert!(extrapolate_inliers(&c, 0).is_err());
    }

    #[test]
    fn invisible_endpoint_leaves_a_gap() {
        let mut c = small(2, 1);
        c.instances[1].keypoints.keypoints[0] = Keypoint::missing("k0");
        let set = extrapolate_inliers(&c, 3).unwrap();
        let z = c.keypoint_count();
        assert_eq!(set.column_count(), z * (z - 1) / 2 * 3);
        for (col, prov) in set.provenance.iter().enumerate() {
            let vis = |z: usize| c.instances[1].keypoints.keypoints[z].visible;
            assert_eq!(set.points[1][col].is_none(), !vis(prov.pair.0) || !vis(prov.pair.1));
        }
    }

    #[test]
    fn assembly_follows_the_block_pattern() {
        let all = small(3, 2);
        let coll = Collection { instances: all.instances[..2].to_vec(), ..all.clone() };
        let target = &all.instances[2];
        let mirror = mirror_instance(target, &coll.symmetry_swap).unwrap().instance;
        let n = target.grid.len();
        let al = matching(n, &coll, |p, j| (j == 0 || p % 2 == 0).then_some(p % coll.instances[j].grid.len()));
        let inl = extrapolate_inliers(&coll, 2).unwrap();
        let asm = assemble_observation(&[(target, &al), (&mirror, &al)], &coll, &inl).unwrap();
        let (obs, l) = (&asm.observation, &asm.layout);
        assert_eq!(l.frames(), 4);
        assert_eq!(l.target_columns, vec![0..n, n..2 * n]);
        assert_eq!(l.columns(), 2 * n + coll.keypoint_count() + inl.column_count());
        for (v, cols) in l.target_columns.iter().enumerate() {
            for (p, c) in cols.clone().enumerate() {
                assert!(obs.is_known(v, c));
                assert!(!obs.is_known(1 - v, c));
                assert!(obs.is_known(l.training_frame(0), c));
                assert_eq!(obs.is_known(l.training_frame(1), c), p % 2 == 0);
            }
        }
        for c in l.keypoint_columns.clone().chain(l.inlier_columns.clone()) {
            assert!(!obs.is_known(0, c) && !obs.is_known(1, c));
        }
        for j in 0..2 {
            for zi in 0..coll.keypoint_count() {
                let c = l.keypoint_columns.start + zi;
                assert_eq!(obs.is_known(l.training_frame(j), c), coll.instances[j].keypoints.keypoints[zi].visible);
            }
            for c in 0..inl.column_count() {
                assert_eq!(obs.is_known(l.training_frame(j), l.inlier_columns.start + c), inl.points[j][c].is_some());
            }
        }
        let again = assemble_observation(&[(target, &al), (&mirror, &al)], &coll, &inl).unwrap();
        assert_eq!(again.observation, asm.observation);
        assert_eq!(again.layout, asm.layout);
        assert!(assemble_observation(&[], &coll, &inl).is_err());
    }

    #[test]
    fn zero_distance_alignment_copies_grid_coordinates() {
        let coll = small(2, 3);
        let target = coll.instances[0].clone();
        let al = matching(target.grid.len(), &coll, |p, j| (j == 0).then_some(p));
        let asm = assemble_observation(&[(&target, &al)], &coll, &SyntheticInlierSet::empty(2)).unwrap();
        for (p, c) in asm.layout.target_columns[0].clone().enumerate() {
            assert_eq!(asm.observation.get(asm.layout.training_frame(0), c), Some(coll.instances[0].grid.points[p]));
            assert_eq!(asm.observation.known_in_point(c), 2);
        }
    }

    #[test]
    fn column_counts_match_the_alignment() {
        let all = small(5, 4);
        let coll = Collection { instances: all.instances[..4].to_vec(), ..all.clone() };
        let target = &all.instances[4];
        let al = matching(target.grid.len(), &coll, |p, j| ((p + j) % 3 != 0).then_some(p % coll.instances[j].grid.len()));
        let asm = assemble_observation(&[(target, &al)], &coll, &SyntheticInlierSet::empty(4)).unwrap();
        for (p, c) in asm.layout.target_columns[0].clone().enumerate() {
            let matched = (0..4).filter(|&j| al.get(p, j).is_some()).count();
            assert_eq!(asm.observation.known_in_point(c), 1 + matched);
        }
    }

    #[test]
    fn resampling_weights() {
        assert_eq!(resample_count(0.05, 100), 5);
        assert_eq!(resample_count(0.02, 100), 2);
        assert_eq!(resample_count(0.0, 100), 1);
        assert_eq!(resample_count(0.025, 100), 3);
        let obs = ObservationMatrix::<Real>::new(5, 3);
        let cfg = ReconConfig::default();
        let w = apply_resampling(&obs, &[0, 1], &[3], 100, &cfg).unwrap();
        assert_eq!(w.row_weights(), &[5.0, 5.0, 1.0, 2.0, 1.0]);
        let zero = ReconConfig { resample_target_factor: 0.0, resample_nn_factor: 0.0, ..cfg.clone() };
        let w = apply_resampling(&obs, &[0], &[3], 100, &zero).unwrap();
        assert!(w.row_weights().iter().all(|&x| x == 1.0));
        assert!(apply_resampling(&obs, &[5], &[], 100, &cfg).is_err());
    }

    fn posed(id: &str, az_deg: Real, desc: Real, template: &ObjectInstance) -> ObjectInstance {
        let mut inst = template.clone();
        inst.id = id.into();
        inst.camera = Some(Camera::new(view_rotation(az_deg.to_radians(), 0.0), 1.0, Vec2::zeros()).unwrap());
        inst.global_descriptor = Some(vec![desc, 0.0]);
        inst
    }

    #[test]
    fn neighbors_respect_the_view_range() {
        let base = small(1, 5).instances[0].clone();
        let coll = Collection {
            class_label: "car".into(),
            instances: vec![
                posed("a", 10.0, 0.0, &base),
                posed("b", 45.0, 2.0, &base),
                posed("c", 50.0, 1.0, &base),
                posed("d", 170.0, 0.0, &base),
            ],
            symmetry_swap: Vec::new(),
        };
        let target = posed("t", 0.0, 0.0, &base);
        let pose = target.camera.unwrap();
        let cfg = ReconConfig::default();
        assert_eq!(select_neighbors(&target, &coll, &pose, &cfg).unwrap(), vec![2, 1]);
        let one = ReconConfig { n_neighbors: 1, ..cfg.clone() };
        assert_eq!(select_neighbors(&target, &coll, &pose, &one).unwrap(), vec![2]);
        let narrow = ReconConfig { neighbor_view_range: [60.0, 70.0], ..cfg.clone() };
        assert_eq!(select_neighbors(&target, &coll, &pose, &narrow).unwrap(), vec![2, 1]);
        let mut same = coll.clone();
        same.instances[2].id = mirrored_id("t");
        assert_eq!(select_neighbors(&target, &same, &pose, &cfg).unwrap(), vec![1]);
    }

    fn random_fit(points: usize, seed: u64) -> FactorizationResult<Real> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Matrix3xX::from_fn(points, |_, _| rng.random_range(-1.0..1.0));
        let motions: Vec<Camera<Real>> = (0..3)
            .map(|_| {
                let r = view_rotation(rng.random_range(-3.0..3.0), rng.random_range(-0.5..0.5));
                Camera::new(r, rng.random_range(30.0..60.0), Vec2::new(rng.random_range(50.0..90.0), 70.0)).unwrap()
            })
            .collect();
        FactorizationResult {
            completed: predict(&motions, &shape),
            shape,
            motions,
            residual: 0.5,
            iterations: 3,
            converged: true,
            residual_history: vec![0.5],
            flagged_frames: Vec::new(),
        }
    }

    #[test]
    fn snapping_hits_the_original_coordinates() {
        let fit = random_fit(8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let snaps: Vec<(usize, Vec2)> =
            (0..4).map(|k| (k, Vec2::new(rng.random_range(0.0..150.0), rng.random_range(0.0..150.0)))).collect();
        let mirror_cols = [4, 5, 6, 7];
        let corr = [1, 0, 3, 2];
        let mirror = MirrorSnap { columns: &mirror_cols, correspondence: Some(&corr) };
        let out = xy_snap(&fit, 1, &snaps, Some(mirror)).unwrap();
        let cam = &fit.motions[1];
        for &(k, x) in &snaps {
            assert!((cam.project_point(&out.point(k)) - x).norm() < 1e-12);
            let depth = |p: &Vec3| (cam.rotation() * p).z;
            assert!((depth(&out.point(k)) - depth(&fit.point(k))).abs() < 1e-12);
        }
        for (&col, &src) in mirror_cols.iter().zip(&corr) {
            let moved = out.point(col) - fit.point(col);
            let offset = out.point(src) - fit.point(src);
            assert!((moved - offset).norm() < 1e-12);
        }
        assert_eq!(out.residual, fit.residual);
        let missing = MirrorSnap { columns: &mirror_cols, correspondence: None };
        assert!(xy_snap(&fit, 1, &snaps, Some(missing)).is_err());
        assert!(xy_snap(&fit, 3, &snaps, None).is_err());
    }

    #[test]
    fn snapping_exact_projections_is_a_no_op() {
        let fit = random_fit(6, 8);
        let snaps: Vec<(usize, Vec2)> = (0..6).map(|k| (k, fit.motions[0].project_point(&fit.point(k)))).collect();
        let out = xy_snap(&fit, 0, &snaps, None).unwrap();
        assert!((out.shape.clone() - fit.shape.clone()).abs().max() < 1e-6);
    }

    #[test]
    fn inlier_columns_reconstruct_collinear() {
        let cfg = SynthConfig {
            n_instances: 20,
            n_grid_points: 60,
            descriptor_noise_sigma: 0.0,
            keypoint_noise_sigma_px: 0.0,
            deformation_scale: 0.0,
            seed: 9,
            ..SynthConfig::default()
        };
        let (coll, _) = generate(&car(), &cfg).unwrap();
        let inl = extrapolate_inliers(&coll, 4).unwrap();
        let z = coll.keypoint_count();
        let mut obs = ObservationMatrix::new(coll.len(), z + inl.column_count());
        for (f, inst) in coll.instances.iter().enumerate() {
            for zi in 0..z {
                if let Some(p) = inst.keypoints.visible_position(zi) {
                    obs.set(f, zi, p);
                }
            }
            for (c, p) in inl.points[f].iter().enumerate() {
                if let Some(p) = p {
                    obs.set(f, z + c, *p);
                }
            }
        }
        let (pruned, kept) = prune_columns(&obs, 2).unwrap();
        assert!(kept[..z].iter().enumerate().all(|(i, &c)| i == c));
        let fit = factorize(&pruned, &FactorizeOptions::default()).unwrap();
        assert!(fit.residual < 1e-6, "residual {}", fit.residual);
        let mut worst: Real = 0.0;
        for (nc, &c) in kept.iter().enumerate().skip(z) {
            let prov = inl.provenance[c - z];
            let (a, b) = (fit.point(prov.pair.0), fit.point(prov.pair.1));
            let seg = b - a;
            let off = (fit.point(nc) - a).cross(&seg).norm() / seg.norm();
            worst = worst.max(off / seg.norm());
        }
        assert!(worst < 1e-3, "collinearity {worst}");
    }

    #[test]
    fn target_share_falls_with_its_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let truth = random_fit(25, 11);
        let cams: Vec<Camera<Real>> = (0..8)
            .map(|_| Camera::new(view_rotation(rng.random_range(-3.0..3.0), rng.random_range(-0.4..0.4)), 40.0, Vec2::new(70.0, 70.0)).unwrap())
            .collect();
        let mut obs = ObservationMatrix::new(cams.len(), 25);
        for (f, c) in cams.iter().enumerate() {
            for k in 0..25 {
                let noise = Vec2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                obs.set(f, k, c.project_point(&truth.point(k)) + noise);
            }
        }
        let mut shares = Vec::new();
        for factor in [0.0, 0.1, 0.5] {
            let cfg = ReconConfig { resample_target_factor: factor, ..ReconConfig::default() };
            let w = apply_resampling(&obs, &[0], &[], 100, &cfg).unwrap();
            let fit = factorize(&w, &FactorizeOptions::default()).unwrap();
            let err = |f: usize| -> Real {
                (0..25).map(|k| (obs.get(f, k).unwrap() - fit.motions[f].project_point(&fit.point(k))).norm_squared()).sum()
            };
            let total: Real = (0..cams.len()).map(err).sum();
            shares.push(err(0) / total);
        }
        assert!(shares[0] > shares[1] && shares[1] > shares[2], "{shares:?}");
    }

    #[test]
    fn ply_round_trip() {
        let mut cloud = PointCloud::default();
        cloud.push(Vec3::new(0.1, -2.5, 1.0 / 3.0), PointLabel::Target, PointSource { instance_id: "car-0001".into(), index: 4 });
        cloud.push(Vec3::new(1e-9, 3.0, -7.25), PointLabel::TargetMirrored, PointSource { instance_id: "car-0001~m".into(), index: 0 });
        cloud.push(Vec3::new(5.0, 5.0, 5.0), PointLabel::SyntheticInlier, PointSource { instance_id: "inlier".into(), index: 12 });
        let mut buf = Vec::new();
        cloud.write_ply(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\n"));
        assert!(text.contains("property uchar label\n"));
        assert_eq!(PointCloud::from_ply_str(&text).unwrap(), cloud);
        assert!(PointCloud::from_ply_str("ply\nelement vertex 2\nend_header\n0 0 0 0\n").is_err());
        assert_eq!(PointLabel::from_code(9), None);
        cloud.points[0].x = Real::NAN;
        assert!(cloud.write_ply(Vec::new()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ReconConfig::default().validate().is_ok());
        assert!(ReconConfig { resample_nn_factor: -1.0, ..ReconConfig::default() }.validate().is_err());
        assert!(ReconConfig { neighbor_view_range: [60.0, 30.0], ..ReconConfig::default() }.validate().is_err());
        assert!(ReconConfig { n_dock: 0, ..ReconConfig::default() }.validate().is_err());
        let json = serde_json::to_string(&ReconConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<ReconConfig>(&json).unwrap(), ReconConfig::default());
        assert_eq!(serde_json::from_str::<ReconConfig>("{}").unwrap(), ReconConfig::default());
    }

    #[test]
    fn prune_keeps_well_observed_columns() {
        let mut obs = ObservationMatrix::<Real>::new(3, 3);
        obs.set(0, 0, Vec2::new(1.0, 1.0));
        obs.set(1, 0, Vec2::new(2.0, 2.0));
        obs.set(2, 1, Vec2::new(3.0, 3.0));
        obs.set(0, 2, Vec2::new(4.0, 4.0));
        obs.set(2, 2, Vec2::new(5.0, 5.0));
        let (out, kept) = prune_columns(&obs, 2).unwrap();
        assert_eq!(kept, vec![0, 2]);
        assert_eq!(out.get(2, 1), Some(Vec2::new(5.0, 5.0)));
        assert_eq!(out.get(1, 1), None);
    }
}
