//! Evaluation: keypoint transfer error of an alignment, error against
//! viewpoint difference, a descriptor nearest-neighbour baseline, pose
//! retrieval, reconstruction error and timing of the two alignment methods.

use std::io::Write;
use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::dataset::{Collection, KeypointSet, ObjectInstance, Vec2};
use crate::error::{Error, Result};
use crate::geometry::{procrustes_align, view_angles, view_rotation, viewpoint_difference_deg};
use crate::network::{align_dijkstra, align_fast, AlignmentResult, CompressedNetwork, Cost, DockingSet, Match, NodeId, VVNetwork};
use crate::recon::Reconstruction;
use crate::Real;

/// Number of azimuth bins of the pose predictor.
pub const POSE_BINS: usize = 24;
/// Default width of viewpoint bins, in degrees.
pub const DEFAULT_BIN_WIDTH: Real = 30.0;

/// Mean distance between transferred test keypoints and the training
/// keypoints. Each shared-visible keypoint is carried by the nearest test
/// grid point having a match; `matched[p]` is where test grid point `p` lands
/// in the training image.
pub fn alignment_error(
    matched: &[Option<Vec2>],
    test_kps: &KeypointSet,
    train_kps: &KeypointSet,
    test_grid: &[Vec2],
) -> Result<Real> {
    if matched.len() != test_grid.len() {
        return Err(Error::InvalidInput("one match slot per test grid point expected".into()));
    }
    let shared = test_kps.shared_visible(train_kps);
    let mut total = 0.0;
    let mut count = 0usize;
    for &z in &shared {
        let k = test_kps.keypoints[z].position;
        let nearest = (0..test_grid.len())
            .filter(|&p| matched[p].is_some())
            .min_by(|&a, &b| (test_grid[a] - k).norm_squared().total_cmp(&(test_grid[b] - k).norm_squared()));
        if let Some(p) = nearest {
            total += (matched[p].unwrap() - train_kps.keypoints[z].position).norm();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InsufficientObservations("no shared visible keypoints".into()));
    }
    Ok(total / count as Real)
}

/// Image positions in instance `j` of every test point's match.
pub fn matched_positions(alignment: &AlignmentResult, collection: &Collection, j: usize) -> Vec<Option<Vec2>> {
    let pts = &collection.instances[j].grid.points;
    (0..alignment.test_points()).map(|p| alignment.get(p, j).map(|m| pts[m.node.point_index])).collect()
}

/// Matches every test point to its descriptor-nearest point in each instance.
pub fn align_euclid(test: &ObjectInstance, collection: &Collection) -> Result<AlignmentResult> {
    let m = collection.len();
    let dim = test.grid.descriptor_dim().unwrap_or(0);
    if collection.instances.iter().any(|i| i.grid.descriptor_dim().is_some_and(|d| d != dim)) {
        return Err(Error::InvalidInput("descriptor dimension mismatch".into()));
    }
    let rows = (0..test.grid.len())
        .into_par_iter()
        .map(|p| {
            let d = &test.grid.descriptors[p];
            collection
                .instances
                .iter()
                .enumerate()
                .map(|(j, inst)| {
                    let mut best: Option<(Real, usize)> = None;
                    for (v, dv) in inst.grid.descriptors.iter().enumerate() {
                        let e = d.iter().zip(dv).map(|(a, b)| (a - b) * (a - b)).sum::<Real>().sqrt();
                        if best.is_none_or(|b| e < b.0) {
                            best = Some((e, v));
                        }
                    }
                    best.map(|(e, v)| Ok(Match { node: NodeId::new(j, v), cost: Cost::from_real(e)? })).transpose()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    AlignmentResult::new(test.grid.len(), m, rows.into_iter().flatten().collect())
}

/// Error of one (test, training) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub method: String,
    pub test_id: String,
    pub train_id: String,
    pub viewpoint_deg: Real,
    pub error: Real,
}

/// Mean error in one viewpoint bin `[lo, hi)`; the last bin includes 180°.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewpointBin {
    pub lo: Real,
    pub hi: Real,
    pub count: usize,
    pub mean_error: Real,
}

/// Per-pair errors and binned means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentErrorReport {
    pub pairs: Vec<PairError>,
    pub bins: Vec<ViewpointBin>,
}

/// Errors of `alignment` (for `test`) against every training instance that
/// shares a visible keypoint with it. Pairs are sorted by training index.
pub fn pair_errors(
    method: &str,
    test: &ObjectInstance,
    alignment: &AlignmentResult,
    collection: &Collection,
) -> Result<Vec<PairError>> {
    let tc = test.camera.ok_or_else(|| Error::invariant(&test.id, "camera required for evaluation"))?;
    let mut out = Vec::new();
    for (j, train) in collection.instances.iter().enumerate() {
        if train.id == test.id || test.keypoints.shared_visible(&train.keypoints).is_empty() {
            continue;
        }
        let cam = train.camera.ok_or_else(|| Error::invariant(&train.id, "camera required for evaluation"))?;
        let matched = matched_positions(alignment, collection, j);
        match alignment_error(&matched, &test.keypoints, &train.keypoints, &test.grid.points) {
            Ok(error) => out.push(PairError {
                method: method.into(),
                test_id: test.id.clone(),
                train_id: train.id.clone(),
                viewpoint_deg: viewpoint_difference_deg(&tc, &cam),
                error,
            }),
            Err(Error::InsufficientObservations(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Mean error per viewpoint bin over `[0°, 180°]`.
pub fn error_vs_viewpoint_curve(pairs: &[PairError], bin_width_deg: Real) -> Result<Vec<ViewpointBin>> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no pair errors to bin".into()));
    }
    if !(bin_width_deg > 0.0 && bin_width_deg <= 180.0) {
        return Err(Error::InvalidInput(format!("bin width {bin_width_deg} outside (0, 180]")));
    }
    let n = (180.0 / bin_width_deg).ceil() as usize;
    let mut sums = vec![(0.0, 0usize); n];
    for p in pairs {
        let b = ((p.viewpoint_deg / bin_width_deg).floor().max(0.0) as usize).min(n - 1);
        sums[b].0 += p.error;
        sums[b].1 += 1;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(b, (s, c))| ViewpointBin {
            lo: b as Real * bin_width_deg,
            hi: ((b + 1) as Real * bin_width_deg).min(180.0),
            count: c,
            mean_error: if c > 0 { s / c as Real } else { Real::NAN },
        })
        .collect())
}

/// Bins `pairs` into a report.
pub fn alignment_report(pairs: Vec<PairError>, bin_width_deg: Real) -> Result<AlignmentErrorReport> {
    let bins = error_vs_viewpoint_curve(&pairs, bin_width_deg)?;
    Ok(AlignmentErrorReport { pairs, bins })
}

/// Pose of the training instance with the nearest global descriptor, its
/// azimuth snapped to one of [`POSE_BINS`] bins.
pub fn predict_pose_retrieval(test: &ObjectInstance, collection: &Collection) -> Result<Camera<Real>> {
    Ok(pose_candidates(test, collection, 1)?.remove(0))
}

/// Up to `k` distinct binned poses, in order of global-descriptor distance
/// of the training instances they come from.
pub fn pose_candidates(test: &ObjectInstance, collection: &Collection, k: usize) -> Result<Vec<Camera<Real>>> {
    if k == 0 {
        return Err(Error::InvalidInput("need at least one pose candidate".into()));
    }
    let g = test.global_descriptor_or_mean();
    let mut ranked: Vec<(Real, usize)> = Vec::new();
    for (j, inst) in collection.instances.iter().enumerate() {
        if inst.camera.is_none() {
            continue;
        }
        let h = inst.global_descriptor_or_mean();
        if h.len() != g.len() {
            return Err(Error::InvalidInput("global descriptor dimension mismatch".into()));
        }
        ranked.push((g.iter().zip(&h).map(|(a, b)| (a - b) * (a - b)).sum::<Real>(), j));
    }
    if ranked.is_empty() {
        return Err(Error::InvalidInput("no training instance with a camera".into()));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let step = std::f64::consts::TAU / POSE_BINS as Real;
    let mut bins = Vec::new();
    let mut out = Vec::new();
    for (_, j) in ranked {
        let cam = collection.instances[j].camera.unwrap();
        let (az, el) = view_angles(cam.rotation());
        let bin = ((az / step).round() as i64).rem_euclid(POSE_BINS as i64);
        if bins.contains(&bin) {
            continue;
        }
        bins.push(bin);
        out.push(Camera::new(view_rotation(bin as Real * step, el), cam.scale(), *cam.translation())?);
        if out.len() == k {
            break;
        }
    }
    Ok(out)
}

/// The candidate closest in viewpoint to the true pose.
pub fn pose_topk_oracle(test: &ObjectInstance, collection: &Collection, k: usize) -> Result<Camera<Real>> {
    let truth = test.camera.ok_or_else(|| Error::invariant(&test.id, "true pose required for top-k selection"))?;
    let cands = pose_candidates(test, collection, k)?;
    Ok(cands
        .into_iter()
        .min_by(|a, b| viewpoint_difference_deg(a, &truth).total_cmp(&viewpoint_difference_deg(b, &truth)))
        .unwrap())
}

/// Wall-clock comparison of the two alignment methods on identical inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub nodes: usize,
    pub instances: usize,
    pub edges: usize,
    pub test_points: usize,
    pub dijkstra_seconds: Real,
    pub fast_seconds: Real,
    pub speedup: Real,
}

/// Times both methods on every docking set after checking that they agree.
pub fn benchmark_alignment(
    network: &VVNetwork,
    compressed: &CompressedNetwork,
    docking_sets: &[DockingSet],
) -> Result<BenchmarkReport> {
    if docking_sets.is_empty() {
        return Err(Error::InvalidInput("no docking sets to benchmark".into()));
    }
    let mut slow = 0.0;
    let mut fast = 0.0;
    for d in docking_sets {
        let t0 = Instant::now();
        let a = align_dijkstra(network, d)?;
        slow += t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let b = align_fast(compressed, d)?;
        fast += t1.elapsed().as_secs_f64();
        if a != b {
            return Err(Error::Degenerate("fast alignment disagrees with shortest paths".into()));
        }
    }
    Ok(BenchmarkReport {
        nodes: network.node_count(),
        instances: network.instance_count(),
        edges: network.edge_count(),
        test_points: docking_sets.iter().map(DockingSet::test_points).sum(),
        dijkstra_seconds: slow,
        fast_seconds: fast,
        speedup: slow / fast.max(1e-9),
    })
}

/// Procrustes error of a reconstruction against ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeError {
    /// Root-mean-square distance after similarity alignment.
    pub rmse: Real,
    /// `rmse` divided by the ground-truth diameter.
    pub rmse_fraction: Real,
    /// Whether the reconstruction's depth sign was flipped to get `rmse`.
    pub depth_flipped: bool,
}

/// Largest pairwise distance.
pub fn diameter(points: &[Vector3<Real>]) -> Real {
    let mut d: Real = 0.0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            d = d.max((a - b).norm());
        }
    }
    d
}

/// Similarity-aligned error, taking the better of the two depth signs.
pub fn shape_error(reconstruction: &[Vector3<Real>], truth: &[Vector3<Real>]) -> Result<ShapeError> {
    let (_, direct) = procrustes_align(reconstruction, truth)?;
    let flipped: Vec<_> = reconstruction.iter().map(|p| Vector3::new(p.x, p.y, -p.z)).collect();
    let (_, other) = procrustes_align(&flipped, truth)?;
    let dia = diameter(truth);
    if dia <= 0.0 {
        return Err(Error::Degenerate("ground truth has zero extent".into()));
    }
    let (rmse, depth_flipped) = if other < direct { (other, true) } else { (direct, false) };
    Ok(ShapeError { rmse, rmse_fraction: rmse / dia, depth_flipped })
}

/// Reconstruction error of one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconTargetError {
    pub target_id: String,
    pub rmse: Real,
    /// Fraction of the ground-truth diameter.
    pub rmse_fraction: Real,
    pub depth_flipped: bool,
    /// Factorization residual, pixels.
    pub residual: Real,
    pub runtime_seconds: Real,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconErrorReport {
    pub targets: Vec<ReconTargetError>,
}

impl ReconErrorReport {
    /// Share of targets whose `rmse_fraction` is below `threshold`.
    pub fn pass_fraction(&self, threshold: Real) -> Real {
        if self.targets.is_empty() {
            return 0.0;
        }
        self.targets.iter().filter(|t| t.rmse_fraction < threshold).count() as Real / self.targets.len() as Real
    }

    pub fn median_fraction(&self) -> Option<Real> {
        let mut v: Vec<Real> = self.targets.iter().map(|t| t.rmse_fraction).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        Some(v[v.len() / 2])
    }
}

/// Scores the reference-view points of `recon` against their true 3D positions.
pub fn recon_error(target_id: &str, recon: &Reconstruction, truth: &[Vector3<Real>]) -> Result<ReconTargetError> {
    let points = recon.reference_points();
    if points.len() != truth.len() {
        return Err(Error::InvalidInput("ground truth does not match the reference view".into()));
    }
    let e = shape_error(&points, truth)?;
    Ok(ReconTargetError {
        target_id: target_id.into(),
        rmse: e.rmse,
        rmse_fraction: e.rmse_fraction,
        depth_flipped: e.depth_flipped,
        residual: recon.report.residual,
        runtime_seconds: recon.report.runtime_seconds,
    })
}

/// Writes `target_id,rmse,rmse_fraction,depth_flipped,residual,runtime_seconds`.
pub fn write_recon_csv<W: Write>(out: W, report: &ReconErrorReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::InvalidInput(format!("csv output: {e}"));
    w.write_record(["target_id", "rmse", "rmse_fraction", "depth_flipped", "residual", "runtime_seconds"]).map_err(err)?;
    for t in &report.targets {
        w.write_record([
            t.target_id.clone(),
            sig9(t.rmse),
            sig9(t.rmse_fraction),
            t.depth_flipped.to_string(),
            sig9(t.residual),
            sig9(t.runtime_seconds),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("csv output: {e}")))
}

/// Formats with nine significant digits.
pub fn sig9(x: Real) -> String {
    if x.is_finite() {
        format!("{x:.8e}")
    } else {
        x.to_string()
    }
}

/// Writes binned curves as `method,bin_lo,bin_hi,count,mean_error`.
pub fn write_curves_csv<W: Write>(out: W, curves: &[(String, Vec<ViewpointBin>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::InvalidInput(format!("csv output: {e}"));
    w.write_record(["method", "bin_lo", "bin_hi", "count", "mean_error"]).map_err(err)?;
    for (method, bins) in curves {
        for b in bins {
            w.write_record([method.clone(), sig9(b.lo), sig9(b.hi), b.count.to_string(), sig9(b.mean_error)])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("csv output: {e}")))
}

/// Writes every match as `test_point,instance_id,point_index,x,y,distance`.
pub fn write_matches_csv<W: Write>(out: W, alignment: &AlignmentResult, collection: &Collection) -> Result<()> {
    if alignment.instance_count() != collection.len() {
        return Err(Error::InvalidInput("alignment does not cover the collection".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::InvalidInput(format!("csv output: {e}"));
    w.write_record(["test_point", "instance_id", "point_index", "x", "y", "distance"]).map_err(err)?;
    for p in 0..alignment.test_points() {
        for (j, inst) in collection.instances.iter().enumerate() {
            if let Some(m) = alignment.get(p, j) {
                let x = inst.grid.points[m.node.point_index];
                w.write_record([
                    p.to_string(),
                    inst.id.clone(),
                    m.node.point_index.to_string(),
                    sig9(x.x),
                    sig9(x.y),
                    sig9(m.distance()),
                ])
                .map_err(err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("csv output: {e}")))
}

/// Writes per-pair errors as `method,test_id,train_id,viewpoint_deg,error`.
pub fn write_pairs_csv<W: Write>(out: W, pairs: &[PairError]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::InvalidInput(format!("csv output: {e}"));
    w.write_record(["method", "test_id", "train_id", "viewpoint_deg", "error"]).map_err(err)?;
    for p in pairs {
        w.write_record([p.method.clone(), p.test_id.clone(), p.train_id.clone(), sig9(p.viewpoint_deg), sig9(p.error)])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("csv output: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Keypoint;

    fn kps(pts: &[(f64, f64)]) -> KeypointSet {
        KeypointSet { keypoints: pts.iter().enumerate().map(|(i, &(x, y))| Keypoint::visible(format!("k{i}"), Vec2::new(x, y))).collect() }
    }

    #[test]
    fn three_four_five() {
        let grid = vec![Vec2::new(10.0, 10.0), Vec2::new(50.0, 50.0)];
        let matched = vec![Some(Vec2::new(23.0, 24.0)), Some(Vec2::new(0.0, 0.0))];
        let e = alignment_error(&matched, &kps(&[(11.0, 9.0)]), &kps(&[(20.0, 20.0)]), &grid).unwrap();
        assert_eq!(e, 5.0);
    }

    #[test]
    fn identity_matching_is_exact() {
        let grid: Vec<Vec2> = (0..5).map(|i| Vec2::new(i as f64 * 8.0, 3.0)).collect();
        let matched: Vec<_> = grid.iter().copied().map(Some).collect();
        let k = kps(&[(0.0, 3.0), (16.0, 3.0)]);
        assert_eq!(alignment_error(&matched, &k, &k, &grid).unwrap(), 0.0);
        let none = KeypointSet { keypoints: vec![Keypoint::missing("k0"), Keypoint::missing("k1")] };
        assert!(alignment_error(&matched, &k, &none, &grid).is_err());
    }

    #[test]
    fn unmatched_points_are_skipped() {
        let grid = vec![Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0)];
        let matched = vec![None, Some(Vec2::new(1.0, 0.0))];
        let e = alignment_error(&matched, &kps(&[(0.0, 0.0)]), &kps(&[(0.0, 0.0)]), &grid).unwrap();
        assert_eq!(e, 1.0);
    }

    fn pair(deg: f64, err: f64) -> PairError {
        PairError { method: "m".into(), test_id: "t".into(), train_id: "r".into(), viewpoint_deg: deg, error: err }
    }

    #[test]
    fn binning() {
        let bins = error_vs_viewpoint_curve(&[pair(5.0, 1.0), pair(10.0, 3.0), pair(180.0, 4.0), pair(95.0, 2.0)], 30.0).unwrap();
        assert_eq!(bins.len(), 6);
        assert_eq!(bins[0].mean_error, 2.0);
        assert_eq!(bins[3].count, 1);
        assert_eq!(bins[5].mean_error, 4.0);
        assert!(bins[1].mean_error.is_nan());
        let one = error_vs_viewpoint_curve(&[pair(1.0, 1.0), pair(2.0, 2.0)], 180.0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].mean_error, 1.5);
        assert!(error_vs_viewpoint_curve(&[], 30.0).is_err());
    }

    #[test]
    fn shape_error_handles_depth_sign() {
        let truth: Vec<Vector3<f64>> = (0..10).map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.1, (i % 3) as f64)).collect();
        let e = shape_error(&truth, &truth).unwrap();
        assert!(e.rmse < 1e-9 && !e.depth_flipped);
        let flipped: Vec<_> = truth.iter().map(|p| Vector3::new(p.x, p.y, -p.z) * 2.0).collect();
        let f = shape_error(&flipped, &truth).unwrap();
        assert!(f.rmse < 1e-9 && f.depth_flipped);
        assert!((diameter(&truth) - (81.0 + 8.1f64.powi(2) + 0.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn pose_of_a_training_instance_is_its_binned_pose() {
        let cfg = crate::synth::SynthConfig { n_instances: 30, n_grid_points: 80, seed: 3, ..Default::default() };
        let (c, _) = crate::synth::generate(&crate::synth::car(), &cfg).unwrap();
        let test = &c.instances[4];
        let pose = predict_pose_retrieval(test, &c).unwrap();
        let (az, el) = view_angles(test.camera.unwrap().rotation());
        let step = std::f64::consts::TAU / POSE_BINS as Real;
        let expect = view_rotation((az / step).round() * step, el);
        assert!((pose.rotation() - expect).abs().max() < 1e-12);
        let empty = Collection { instances: Vec::new(), ..c.clone() };
        assert!(predict_pose_retrieval(test, &empty).is_err());
        let cands = pose_candidates(test, &c, 4).unwrap();
        assert_eq!(cands.len(), 4);
        assert_eq!(cands[0], pose);
        let best = pose_topk_oracle(test, &c, 4).unwrap();
        let err = |p: &Camera<Real>| viewpoint_difference_deg(p, &test.camera.unwrap());
        assert!(cands.iter().all(|p| err(&best) <= err(p)));
    }

    #[test]
    fn retrieved_poses_land_within_a_bin() {
        let cfg = crate::synth::SynthConfig { n_instances: 140, n_grid_points: 150, seed: 4, ..Default::default() };
        let (all, _) = crate::synth::generate(&crate::synth::car(), &cfg).unwrap();
        let train = Collection { instances: all.instances[..120].to_vec(), ..all.clone() };
        let mut errs: Vec<Real> = all.instances[120..]
            .iter()
            .map(|t| viewpoint_difference_deg(&predict_pose_retrieval(t, &train).unwrap(), &t.camera.unwrap()))
            .collect();
        errs.sort_by(|a, b| a.total_cmp(b));
        assert!(errs[errs.len() / 2] < 360.0 / POSE_BINS as Real, "median {}", errs[errs.len() / 2]);
    }

    #[test]
    fn benchmark_checks_agreement_first() {
        use crate::network::{compress, random_docking, random_network, RandomNetworkSpec};
        let spec = RandomNetworkSpec { instances: 12, min_points: 10, max_points: 30, k: 4, components: 1, integer_weights: false };
        let net = random_network(&spec, 1);
        let comp = compress(&net);
        let sets: Vec<_> = (0..3).map(|s| random_docking(&net, 20, 5, false, s)).collect();
        let r = benchmark_alignment(&net, &comp, &sets).unwrap();
        assert_eq!(r.nodes, net.node_count());
        assert_eq!(r.test_points, 60);
        assert!(r.dijkstra_seconds >= 0.0 && r.fast_seconds >= 0.0);
        assert!(benchmark_alignment(&net, &comp, &[]).is_err());
    }

    #[test]
    fn recon_report_counts_passes() {
        let t = |f: Real| ReconTargetError {
            target_id: "t".into(),
            rmse: f,
            rmse_fraction: f,
            depth_flipped: false,
            residual: 1.0,
            runtime_seconds: 0.5,
        };
        let r = ReconErrorReport { targets: vec![t(0.01), t(0.04), t(0.2), t(0.05)] };
        assert_eq!(r.pass_fraction(0.05), 0.5);
        assert_eq!(r.median_fraction(), Some(0.05));
        assert_eq!(ReconErrorReport::default().pass_fraction(0.05), 0.0);
        let mut buf = Vec::new();
        write_recon_csv(&mut buf, &r).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("target_id,rmse,rmse_fraction,depth_flipped,residual,runtime_seconds\nt,1.00000000e-2,"));
    }

    #[test]
    fn csv_uses_fixed_columns() {
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, &[("vvn".into(), vec![ViewpointBin { lo: 0.0, hi: 30.0, count: 2, mean_error: 1.0 / 3.0 }])]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "method,bin_lo,bin_hi,count,mean_error\nvvn,0.00000000e0,3.00000000e1,2,3.33333333e-1\n");
    }
}
