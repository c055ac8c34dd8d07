//! Virtual view network: construction, docking, geodesic alignment and the
//! compressed point-to-point form answering alignment queries in linear time.
//!
//! Edge weights are stored as fixed-point [`Cost`]s so path lengths are sums
//! of integers. Shortest paths found by different routes (a single-source
//! search, or a docking edge plus a precomputed geodesic) then agree to the
//! last bit.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::camera::Camera;
use crate::dataset::{collection_to_string, BoundingBox, Collection, ObjectInstance, Vec2};
use crate::error::{Error, Result};
use crate::geometry::rotation_distance_unchecked;
use crate::warp::{fit_affine_box, fit_keypoint_prior, PlanarMap, WarpPrior};
use crate::Real;

/// Default number of pose neighbours per training instance.
pub const DEFAULT_K: usize = 30;
/// Default number of docking instances.
pub const DEFAULT_N_DOCK: usize = 10;
/// Candidate pairs drawn when calibrating `alpha`.
pub const CALIBRATION_SAMPLES: usize = 10_000;

/// A grid point of a training instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub instance_index: usize,
    pub point_index: usize,
}

impl NodeId {
    pub fn new(instance_index: usize, point_index: usize) -> Self {
        Self { instance_index, point_index }
    }
}

/// Non-negative path length in units of 2⁻³².
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cost(pub u64);

impl Cost {
    pub const ZERO: Cost = Cost(0);
    /// Marks unreachable nodes.
    pub const INFINITE: Cost = Cost(u64::MAX);
    pub const SCALE: f64 = 4_294_967_296.0;
    /// Largest real weight accepted by [`Cost::from_real`].
    pub const MAX_REAL: f64 = 1_048_576.0;

    /// Rounds to the nearest representable cost.
    pub fn from_real(w: Real) -> Result<Cost> {
        if !w.is_finite() {
            return Err(Error::NonFinite("edge weight"));
        }
        if !(0.0..=Self::MAX_REAL).contains(&w) {
            return Err(Error::InvalidInput(format!("edge weight {w} outside [0, {}]", Self::MAX_REAL)));
        }
        Ok(Cost((w * Self::SCALE).round() as u64))
    }

    pub fn to_real(self) -> Real {
        self.0 as f64 / Self::SCALE
    }

    pub fn is_finite(self) -> bool {
        self != Self::INFINITE
    }

    #[inline]
    pub fn plus(self, other: Cost) -> Cost {
        Cost(self.0.saturating_add(other.0))
    }
}

/// Pose neighbours by rotation distance; ties go to the lower index.
pub fn pose_knn(cameras: &[Camera<Real>], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = cameras.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!("pose neighbour count {k} must be in [1, {n})")));
    }
    for c in cameras {
        c.validate()?;
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| nearest_poses(cameras, cameras[i].rotation(), k, Some(i)))
        .collect())
}

/// The `k` cameras closest in rotation to `rotation`, skipping `exclude`.
pub fn nearest_poses(
    cameras: &[Camera<Real>],
    rotation: &nalgebra::Matrix3<Real>,
    k: usize,
    exclude: Option<usize>,
) -> Vec<usize> {
    let mut d: Vec<(Real, usize)> = cameras
        .iter()
        .enumerate()
        .filter(|&(j, _)| Some(j) != exclude)
        .map(|(j, c)| (rotation_distance_unchecked(rotation, c.rotation()), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, j)| j).collect()
}

#[inline]
fn descriptor_distance(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<Real>().sqrt()
}

#[inline]
fn combine(desc: Real, forward: Real, backward: Real, alpha: Real) -> Real {
    desc + alpha * (forward + backward)
}

/// Cost of matching `u` (instance i) with `v` (instance j):
/// descriptor distance plus `alpha` times the two warp residuals.
#[allow(clippy::too_many_arguments)]
pub fn matching_cost<M: PlanarMap<Real> + ?Sized>(
    d_u: &[Real],
    x_u: &Vec2,
    d_v: &[Real],
    x_v: &Vec2,
    g_ij: &M,
    g_ji: &M,
    alpha: Real,
) -> Result<Real> {
    if d_u.len() != d_v.len() {
        return Err(Error::InvalidInput(format!(
            "descriptor dimension mismatch: {} vs {}",
            d_u.len(),
            d_v.len()
        )));
    }
    let fwd = (x_v - g_ij.apply(x_u)).norm();
    let bwd = (x_u - g_ji.apply(x_v)).norm();
    Ok(combine(descriptor_distance(d_u, d_v), fwd, bwd, alpha))
}

fn instance_box(inst: &ObjectInstance) -> Result<BoundingBox> {
    inst.object_box()
        .filter(|b| b.width() > 0.0 && b.height() > 0.0)
        .or_else(|| inst.grid.bounding_box())
        .ok_or_else(|| Error::invariant(&inst.id, "no object extent"))
}

/// Keypoint priors `(g_ab, g_ba)` between two instances.
pub fn pair_priors(a: &ObjectInstance, b: &ObjectInstance) -> Result<(WarpPrior<Real>, WarpPrior<Real>)> {
    let shared = a.keypoints.shared_visible(&b.keypoints);
    let pa: Vec<Vec2> = shared.iter().map(|&z| a.keypoints.keypoints[z].position).collect();
    let pb: Vec<Vec2> = shared.iter().map(|&z| b.keypoints.keypoints[z].position).collect();
    let (ba, bb) = (instance_box(a)?.corners(), instance_box(b)?.corners());
    Ok((fit_keypoint_prior(&pa, &pb, (ba, bb))?, fit_keypoint_prior(&pb, &pa, (bb, ba))?))
}

fn check_buildable(collection: &Collection) -> Result<Vec<Camera<Real>>> {
    for inst in &collection.instances {
        if inst.grid.is_empty() {
            return Err(Error::invariant(&inst.id, "empty feature grid"));
        }
        if inst.grid.descriptors.len() != inst.grid.points.len() {
            return Err(Error::invariant(&inst.id, "descriptor count differs from grid size"));
        }
    }
    collection.cameras()
}

/// Weighted directed graph over all grid points of a collection.
#[derive(Clone, Debug, PartialEq)]
pub struct VVNetwork {
    instance_ids: Vec<String>,
    offsets: Vec<usize>,
    pose_neighbors: Vec<Vec<usize>>,
    alpha: Real,
    edge_start: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<Cost>,
}

impl VVNetwork {
    /// `edges[n]` lists the outgoing edges of the `n`-th node (instance-major
    /// order), one per pose neighbour and in the same order.
    pub fn from_edges(
        instance_ids: Vec<String>,
        sizes: &[usize],
        pose_neighbors: Vec<Vec<usize>>,
        alpha: Real,
        edges: Vec<Vec<(NodeId, Cost)>>,
    ) -> Result<Self> {
        let m = sizes.len();
        if instance_ids.len() != m || pose_neighbors.len() != m {
            return Err(Error::InvalidInput("per-instance lists differ in length".into()));
        }
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::InvalidInput(format!("alpha must be finite and non-negative, got {alpha}")));
        }
        let mut offsets = Vec::with_capacity(m + 1);
        offsets.push(0usize);
        for &s in sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let n = offsets[m];
        if n >= u32::MAX as usize {
            return Err(Error::InvalidInput("too many nodes".into()));
        }
        if edges.len() != n {
            return Err(Error::InvalidInput(format!("{} edge lists for {n} nodes", edges.len())));
        }
        for (i, nb) in pose_neighbors.iter().enumerate() {
            let mut seen = nb.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != nb.len() || nb.iter().any(|&j| j == i || j >= m) {
                return Err(Error::InvalidInput(format!("bad pose neighbour list for instance {i}")));
            }
        }
        let mut edge_start = Vec::with_capacity(n + 1);
        edge_start.push(0);
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for i in 0..m {
            for node in offsets[i]..offsets[i + 1] {
                let out = &edges[node];
                if out.len() != pose_neighbors[i].len() {
                    return Err(Error::InvalidInput(format!(
                        "node {node} has {} edges, expected {}",
                        out.len(),
                        pose_neighbors[i].len()
                    )));
                }
                for (&(t, w), &j) in out.iter().zip(&pose_neighbors[i]) {
                    if t.instance_index != j || t.point_index >= sizes[j] || !w.is_finite() {
                        return Err(Error::InvalidInput(format!("bad edge out of node {node}")));
                    }
                    targets.push((offsets[j] + t.point_index) as u32);
                    weights.push(w);
                }
                edge_start.push(targets.len());
            }
        }
        Ok(Self { instance_ids, offsets, pose_neighbors, alpha, edge_start, targets, weights })
    }

    pub fn node_count(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn instance_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len()
    }

    pub fn instance_size(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn instance_offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn instance_ids(&self) -> &[String] {
        &self.instance_ids
    }

    pub fn pose_neighbors(&self) -> &[Vec<usize>] {
        &self.pose_neighbors
    }

    pub fn alpha(&self) -> Real {
        self.alpha
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node.instance_index < self.instance_count() && node.point_index < self.instance_size(node.instance_index)
    }

    /// Position of `node` in the instance-major node order.
    #[inline]
    pub fn node_index(&self, node: NodeId) -> usize {
        self.offsets[node.instance_index] + node.point_index
    }

    pub fn node_id(&self, index: usize) -> NodeId {
        let i = self.offsets.partition_point(|&o| o <= index) - 1;
        NodeId::new(i, index - self.offsets[i])
    }

    /// Outgoing `(node index, weight)` pairs of a node index.
    #[inline]
    pub fn out_edges(&self, index: usize) -> impl Iterator<Item = (usize, Cost)> + '_ {
        let r = self.edge_start[index]..self.edge_start[index + 1];
        self.targets[r.clone()].iter().map(|&t| t as usize).zip(self.weights[r].iter().copied())
    }

    /// Outgoing edges of a node in pose-neighbour order.
    pub fn edges_from(&self, node: NodeId) -> Vec<(NodeId, Cost)> {
        self.out_edges(self.node_index(node)).map(|(t, w)| (self.node_id(t), w)).collect()
    }

    /// Replaces the weight of the `slot`-th outgoing edge of `node`.
    pub fn set_edge_weight(&mut self, node: NodeId, slot: usize, weight: Cost) {
        let e = self.edge_start[self.node_index(node)] + slot;
        self.weights[e] = weight;
    }

    fn check_docking(&self, docking: &DockingSet) -> Result<()> {
        if docking.edges.is_empty() {
            return Err(Error::InvalidInput("empty docking set".into()));
        }
        if let Some(e) = docking.edges.iter().find(|e| !self.contains(e.node)) {
            return Err(Error::InvalidInput(format!("docking edge into unknown node {:?}", e.node)));
        }
        Ok(())
    }
}

/// Builds the network: every point of every instance gets one edge to its
/// cheapest match in each pose neighbour, weighted by [`matching_cost`].
pub fn build_network(collection: &Collection, k: usize, alpha: Real) -> Result<VVNetwork> {
    let cameras = check_buildable(collection)?;
    let neighbors = pose_knn(&cameras, k)?;
    let insts = &collection.instances;
    let per_instance: Vec<Vec<Vec<(NodeId, Cost)>>> = (0..insts.len())
        .into_par_iter()
        .map(|i| {
            let a = &insts[i];
            let mut out = vec![Vec::with_capacity(neighbors[i].len()); a.grid.len()];
            for &j in &neighbors[i] {
                let b = &insts[j];
                let (g_ab, g_ba) = pair_priors(a, b)?;
                let fwd = g_ab.apply_all(&a.grid.points);
                let bwd = g_ba.apply_all(&b.grid.points);
                for (u, edges) in out.iter_mut().enumerate() {
                    let (du, xu) = (&a.grid.descriptors[u], &a.grid.points[u]);
                    if du.len() != b.grid.descriptors[0].len() {
                        return Err(Error::InvalidInput("descriptor dimension mismatch".into()));
                    }
                    let mut best = (Real::INFINITY, 0usize);
                    for v in 0..b.grid.len() {
                        let e = combine(
                            descriptor_distance(du, &b.grid.descriptors[v]),
                            (b.grid.points[v] - fwd[u]).norm(),
                            (xu - bwd[v]).norm(),
                            alpha,
                        );
                        if e < best.0 {
                            best = (e, v);
                        }
                    }
                    edges.push((NodeId::new(j, best.1), Cost::from_real(best.0)?));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    VVNetwork::from_edges(
        insts.iter().map(|i| i.id.clone()).collect(),
        &insts.iter().map(|i| i.grid.len()).collect::<Vec<_>>(),
        neighbors,
        alpha,
        per_instance.into_iter().flatten().collect(),
    )
}

fn median(mut v: Vec<Real>) -> Real {
    v.sort_by(Real::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `alpha` making the median spatial term equal the median descriptor term
/// over randomly drawn candidate pairs of pose neighbours.
pub fn calibrate_alpha(collection: &Collection, k: usize, seed: u64) -> Result<Real> {
    let cameras = check_buildable(collection)?;
    let neighbors = pose_knn(&cameras, k)?;
    let insts = &collection.instances;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut desc = Vec::with_capacity(CALIBRATION_SAMPLES);
    let mut spatial = Vec::with_capacity(CALIBRATION_SAMPLES);
    let mut priors = std::collections::HashMap::new();
    for _ in 0..CALIBRATION_SAMPLES {
        let i = rng.random_range(0..insts.len());
        let j = neighbors[i][rng.random_range(0..neighbors[i].len())];
        if let std::collections::hash_map::Entry::Vacant(e) = priors.entry((i, j)) {
            e.insert(pair_priors(&insts[i], &insts[j])?);
        }
        let (g_ij, g_ji) = &priors[&(i, j)];
        let (a, b) = (&insts[i].grid, &insts[j].grid);
        let u = rng.random_range(0..a.len());
        let v = rng.random_range(0..b.len());
        desc.push(descriptor_distance(&a.descriptors[u], &b.descriptors[v]));
        spatial.push((b.points[v] - g_ij.apply(&a.points[u])).norm() + (a.points[u] - g_ji.apply(&b.points[v])).norm());
    }
    let (md, ms) = (median(desc), median(spatial));
    if ms <= 0.0 || !md.is_finite() {
        return Err(Error::Degenerate("spatial term vanishes on all sampled pairs".into()));
    }
    Ok(md / ms)
}

/// Edge from a test point into the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DockEdge {
    pub test_point: usize,
    pub node: NodeId,
    pub weight: Cost,
}

/// Edges attaching a test instance to the network. Every node receives at
/// most one docking edge.
#[derive(Clone, Debug, PartialEq)]
pub struct DockingSet {
    test_points: usize,
    edges: Vec<DockEdge>,
    starts: Vec<usize>,
    docking_instances: Vec<usize>,
}

impl DockingSet {
    /// Keeps, for every node, only the lightest candidate edge into it (ties
    /// go to the lower test point).
    pub fn new(test_points: usize, mut candidates: Vec<DockEdge>, docking_instances: Vec<usize>) -> Result<Self> {
        if let Some(e) = candidates.iter().find(|e| e.test_point >= test_points) {
            return Err(Error::InvalidInput(format!("docking edge from unknown test point {}", e.test_point)));
        }
        candidates.sort_by_key(|e| (e.node, e.weight, e.test_point));
        candidates.dedup_by_key(|e| e.node);
        candidates.sort_by_key(|e| (e.test_point, e.node));
        let mut starts = vec![0; test_points + 1];
        for e in &candidates {
            starts[e.test_point + 1] += 1;
        }
        for p in 0..test_points {
            starts[p + 1] += starts[p];
        }
        Ok(Self { test_points, edges: candidates, starts, docking_instances })
    }

    pub fn test_points(&self) -> usize {
        self.test_points
    }

    pub fn edges(&self) -> &[DockEdge] {
        &self.edges
    }

    pub fn edges_of(&self, test_point: usize) -> &[DockEdge] {
        &self.edges[self.starts[test_point]..self.starts[test_point + 1]]
    }

    pub fn docking_instances(&self) -> &[usize] {
        &self.docking_instances
    }
}

/// Attaches `test` to its `n_dock` pose-nearest training instances. The
/// spatial prior is the map between object boxes, applied once.
pub fn dock(
    test: &ObjectInstance,
    collection: &Collection,
    network: &VVNetwork,
    test_pose: &Camera<Real>,
    n_dock: usize,
    alpha: Real,
) -> Result<DockingSet> {
    let m = network.instance_count();
    if m == 0 || collection.len() != m || (0..m).any(|i| collection.instances[i].grid.len() != network.instance_size(i)) {
        return Err(Error::InvalidInput("network does not match the collection".into()));
    }
    if n_dock == 0 {
        return Err(Error::InvalidInput("n_dock must be at least 1".into()));
    }
    if test.grid.is_empty() {
        return Err(Error::invariant(&test.id, "empty feature grid"));
    }
    test_pose.validate()?;
    let cameras = collection.cameras()?;
    let docking = nearest_poses(&cameras, test_pose.rotation(), n_dock, None);
    let tbox = instance_box(test)?.corners();
    let mut maps = Vec::with_capacity(docking.len());
    for &j in &docking {
        maps.push(fit_affine_box(&tbox, &instance_box(&collection.instances[j])?.corners())?);
    }
    let dim = test.grid.descriptors.first().map_or(0, Vec::len);
    if docking.iter().any(|&j| collection.instances[j].grid.descriptors[0].len() != dim) {
        return Err(Error::InvalidInput("descriptor dimension mismatch".into()));
    }
    let candidates: Vec<DockEdge> = (0..test.grid.len())
        .into_par_iter()
        .map(|p| {
            let (dp, xp) = (&test.grid.descriptors[p], &test.grid.points[p]);
            let mut out = Vec::with_capacity(docking.len());
            for (&j, map) in docking.iter().zip(&maps) {
                let g = &collection.instances[j].grid;
                let target = map.apply(xp);
                let mut best = (Real::INFINITY, 0usize);
                for v in 0..g.len() {
                    let e = descriptor_distance(dp, &g.descriptors[v]) + alpha * (g.points[v] - target).norm();
                    if e < best.0 {
                        best = (e, v);
                    }
                }
                out.push(DockEdge { test_point: p, node: NodeId::new(j, best.1), weight: Cost::from_real(best.0)? });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    DockingSet::new(test.grid.len(), candidates, docking)
}

/// Geodesic nearest node of an instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Match {
    pub node: NodeId,
    pub cost: Cost,
}

impl Match {
    pub fn distance(&self) -> Real {
        self.cost.to_real()
    }
}

/// Per test point and training instance, the nearest node or `None` when the
/// instance is unreachable.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentResult {
    test_points: usize,
    instances: usize,
    entries: Vec<Option<Match>>,
}

impl AlignmentResult {
    pub fn new(test_points: usize, instances: usize, entries: Vec<Option<Match>>) -> Result<Self> {
        if entries.len() != test_points * instances {
            return Err(Error::InvalidInput("alignment table has the wrong size".into()));
        }
        Ok(Self { test_points, instances, entries })
    }

    pub fn test_points(&self) -> usize {
        self.test_points
    }

    pub fn instance_count(&self) -> usize {
        self.instances
    }

    pub fn get(&self, test_point: usize, instance: usize) -> Option<Match> {
        self.entries[test_point * self.instances + instance]
    }

    pub fn row(&self, test_point: usize) -> &[Option<Match>] {
        &self.entries[test_point * self.instances..(test_point + 1) * self.instances]
    }
}

/// Independent single-source shortest paths from every test point.
pub fn align_dijkstra(network: &VVNetwork, docking: &DockingSet) -> Result<AlignmentResult> {
    network.check_docking(docking)?;
    let n = network.node_count();
    let m = network.instance_count();
    let rows: Vec<Vec<Option<Match>>> = (0..docking.test_points())
        .into_par_iter()
        .map_init(
            || vec![u64::MAX; n],
            |dist, p| {
                dist.fill(u64::MAX);
                let mut heap = BinaryHeap::new();
                for e in docking.edges_of(p) {
                    let q = network.node_index(e.node);
                    if e.weight.0 < dist[q] {
                        dist[q] = e.weight.0;
                        heap.push(Reverse((e.weight.0, q)));
                    }
                }
                while let Some(Reverse((d, u))) = heap.pop() {
                    if d > dist[u] {
                        continue;
                    }
                    for (v, w) in network.out_edges(u) {
                        let nd = d.saturating_add(w.0);
                        if nd < dist[v] {
                            dist[v] = nd;
                            heap.push(Reverse((nd, v)));
                        }
                    }
                }
                (0..m)
                    .map(|j| {
                        let base = network.offsets[j];
                        let mut best: Option<(u64, usize)> = None;
                        for (pt, &d) in dist[base..network.offsets[j + 1]].iter().enumerate() {
                            if d != u64::MAX && best.is_none_or(|b| d < b.0) {
                                best = Some((d, pt));
                            }
                        }
                        best.map(|(d, pt)| Match { node: NodeId::new(j, pt), cost: Cost(d) })
                    })
                    .collect()
            },
        )
        .collect();
    AlignmentResult::new(docking.test_points(), m, rows.into_iter().flatten().collect())
}

/// For every node and every instance, the geodesically nearest node of that
/// instance (lowest index among ties) and its distance.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedNetwork {
    offsets: Vec<usize>,
    /// Instance-major: entry `j * node_count + node`.
    points: Vec<u32>,
    costs: Vec<Cost>,
}

impl CompressedNetwork {
    pub fn node_count(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn instance_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn get(&self, node: NodeId, instance: usize) -> Option<Match> {
        let q = self.offsets[node.instance_index] + node.point_index;
        let e = instance * self.node_count() + q;
        self.costs[e]
            .is_finite()
            .then(|| Match { node: NodeId::new(instance, self.points[e] as usize), cost: self.costs[e] })
    }
}

/// Exact all-pairs compression: one multi-source search per instance over the
/// reversed graph, ordered by `(distance, source index)`.
pub fn compress(network: &VVNetwork) -> CompressedNetwork {
    let n = network.node_count();
    let m = network.instance_count();
    let mut rev_start = vec![0usize; n + 1];
    for &t in &network.targets {
        rev_start[t as usize + 1] += 1;
    }
    for i in 0..n {
        rev_start[i + 1] += rev_start[i];
    }
    let mut fill = rev_start.clone();
    let mut rev_src = vec![0u32; network.targets.len()];
    let mut rev_w = vec![Cost::ZERO; network.targets.len()];
    for u in 0..n {
        for (v, w) in network.out_edges(u) {
            rev_src[fill[v]] = u as u32;
            rev_w[fill[v]] = w;
            fill[v] += 1;
        }
    }
    let mut points = vec![u32::MAX; n * m];
    let mut costs = vec![Cost::INFINITE; n * m];
    if n > 0 {
        points.par_chunks_mut(n).zip(costs.par_chunks_mut(n)).enumerate().for_each(|(j, (label, dist))| {
            let mut heap = BinaryHeap::new();
            for s in network.offsets[j]..network.offsets[j + 1] {
                dist[s] = Cost::ZERO;
                label[s] = s as u32;
                heap.push(Reverse((0u64, s as u32, s as u32)));
            }
            while let Some(Reverse((d, l, u))) = heap.pop() {
                let u = u as usize;
                if (d, l) != (dist[u].0, label[u]) {
                    continue;
                }
                for e in rev_start[u]..rev_start[u + 1] {
                    let x = rev_src[e] as usize;
                    let cand = (d.saturating_add(rev_w[e].0), l);
                    if cand < (dist[x].0, label[x]) {
                        dist[x] = Cost(cand.0);
                        label[x] = l;
                        heap.push(Reverse((cand.0, l, x as u32)));
                    }
                }
            }
            let base = network.offsets[j] as u32;
            for (l, d) in label.iter_mut().zip(dist.iter()) {
                if d.is_finite() {
                    *l -= base;
                }
            }
        });
    }
    CompressedNetwork { offsets: network.offsets.clone(), points, costs }
}

/// Alignment from the compressed network: for each test point and instance,
/// the best docking edge plus stored geodesic.
pub fn align_fast(compressed: &CompressedNetwork, docking: &DockingSet) -> Result<AlignmentResult> {
    if docking.edges.is_empty() {
        return Err(Error::InvalidInput("empty docking set".into()));
    }
    let n = compressed.node_count();
    let m = compressed.instance_count();
    let contains = |q: NodeId| {
        q.instance_index < m && q.point_index < compressed.offsets[q.instance_index + 1] - compressed.offsets[q.instance_index]
    };
    if let Some(e) = docking.edges.iter().find(|e| !contains(e.node)) {
        return Err(Error::InvalidInput(format!("docking edge into unknown node {:?}", e.node)));
    }
    let rows: Vec<Vec<Option<Match>>> = (0..docking.test_points())
        .into_par_iter()
        .map(|p| {
            let mut best = vec![(u64::MAX, u32::MAX); m];
            for e in docking.edges_of(p) {
                let q = compressed.offsets[e.node.instance_index] + e.node.point_index;
                for (j, b) in best.iter_mut().enumerate() {
                    let c = compressed.costs[j * n + q];
                    if !c.is_finite() {
                        continue;
                    }
                    let cand = (e.weight.0.saturating_add(c.0), compressed.points[j * n + q]);
                    if cand < *b {
                        *b = cand;
                    }
                }
            }
            best.into_iter()
                .enumerate()
                .map(|(j, (d, pt))| {
                    (d != u64::MAX).then(|| Match { node: NodeId::new(j, pt as usize), cost: Cost(d) })
                })
                .collect()
        })
        .collect();
    AlignmentResult::new(docking.test_points(), m, rows.into_iter().flatten().collect())
}

/// Shape of a random network used by tests and benchmarks.
#[derive(Clone, Copy, Debug)]
pub struct RandomNetworkSpec {
    pub instances: usize,
    pub min_points: usize,
    pub max_points: usize,
    pub k: usize,
    /// Instances are split into this many mutually unreachable groups.
    pub components: usize,
    /// Small integer weights produce many equal-length paths.
    pub integer_weights: bool,
}

/// Random network obeying the structural invariants of [`VVNetwork`].
pub fn random_network(spec: &RandomNetworkSpec, seed: u64) -> VVNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = spec.instances;
    let comps = spec.components.clamp(1, m);
    let sizes: Vec<usize> = (0..m).map(|_| rng.random_range(spec.min_points..=spec.max_points)).collect();
    let members: Vec<Vec<usize>> = (0..comps).map(|c| (c..m).step_by(comps).collect()).collect();
    let neighbors: Vec<Vec<usize>> = (0..m)
        .map(|i| {
            let pool: Vec<usize> = members[i % comps].iter().copied().filter(|&j| j != i).collect();
            let k = spec.k.min(pool.len());
            sample(&mut rng, pool.len(), k).into_iter().map(|x| pool[x]).collect()
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..m {
        for _ in 0..sizes[i] {
            let out = neighbors[i]
                .iter()
                .map(|&j| {
                    let w = if spec.integer_weights {
                        Cost(rng.random_range(0..6u64) << 32)
                    } else {
                        Cost(rng.random_range(0..8u64 << 32))
                    };
                    (NodeId::new(j, rng.random_range(0..sizes[j])), w)
                })
                .collect();
            edges.push(out);
        }
    }
    VVNetwork::from_edges((0..m).map(|i| format!("r{i}")).collect(), &sizes, neighbors, 1.0, edges)
        .expect("random network is valid")
}

/// Random docking of `test_points` points into `n_dock` random instances.
pub fn random_docking(network: &VVNetwork, test_points: usize, n_dock: usize, integer_weights: bool, seed: u64) -> DockingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = network.instance_count();
    let docking: Vec<usize> = sample(&mut rng, m, n_dock.min(m)).into_vec();
    let mut edges = Vec::new();
    for p in 0..test_points {
        for &j in &docking {
            let w = if integer_weights { Cost(rng.random_range(0..4u64) << 32) } else { Cost(rng.random_range(0..4u64 << 32)) };
            edges.push(DockEdge { test_point: p, node: NodeId::new(j, rng.random_range(0..network.instance_size(j))), weight: w });
        }
    }
    DockingSet::new(test_points, edges, docking).expect("random docking is valid")
}

const MAGIC: &[u8; 8] = b"VVNCACHE";
const CACHE_VERSION: u32 = 1;

/// Content key of a network built from `collection` with the given settings.
pub fn cache_key(collection: &Collection, k: usize, alpha: Option<Real>) -> Result<[u8; 32]> {
    let mut h = Sha256::new();
    h.update(collection_to_string(collection)?.as_bytes());
    h.update((k as u64).to_le_bytes());
    match alpha {
        Some(a) => h.update(a.to_bits().to_le_bytes()),
        None => h.update(b"auto"),
    }
    Ok(h.finalize().into())
}

pub fn hex(key: &[u8; 32]) -> String {
    key.iter().map(|b| format!("{b:02x}")).collect()
}

/// File name of a cached network inside `dir`.
pub fn cache_path(dir: impl AsRef<Path>, key: &[u8; 32]) -> PathBuf {
    dir.as_ref().join(format!("{}.vvnnet", hex(key)))
}

/// A network plus optional compressed form, as stored in a cache file.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkArtifacts {
    pub key: [u8; 32],
    pub network: VVNetwork,
    pub compressed: Option<CompressedNetwork>,
}

fn write_artifacts<W: Write>(w: &mut W, a: &NetworkArtifacts) -> std::io::Result<()> {
    let net = &a.network;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(CACHE_VERSION)?;
    w.write_all(&a.key)?;
    w.write_f64::<LittleEndian>(net.alpha)?;
    w.write_u64::<LittleEndian>(net.instance_count() as u64)?;
    for i in 0..net.instance_count() {
        let id = net.instance_ids[i].as_bytes();
        w.write_u64::<LittleEndian>(id.len() as u64)?;
        w.write_all(id)?;
        w.write_u64::<LittleEndian>(net.instance_size(i) as u64)?;
        w.write_u64::<LittleEndian>(net.pose_neighbors[i].len() as u64)?;
        for &j in &net.pose_neighbors[i] {
            w.write_u64::<LittleEndian>(j as u64)?;
        }
    }
    for (&t, c) in net.targets.iter().zip(&net.weights) {
        w.write_u32::<LittleEndian>(t)?;
        w.write_u64::<LittleEndian>(c.0)?;
    }
    match &a.compressed {
        None => w.write_u8(0)?,
        Some(c) => {
            w.write_u8(1)?;
            for (&p, d) in c.points.iter().zip(&c.costs) {
                w.write_u32::<LittleEndian>(p)?;
                w.write_u64::<LittleEndian>(d.0)?;
            }
        }
    }
    Ok(())
}

fn read_artifacts<R: Read>(r: &mut R) -> Result<NetworkArtifacts> {
    let bad = |e: std::io::Error| Error::Cache(e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != MAGIC {
        return Err(Error::Cache("not a network cache file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(bad)?;
    if version != CACHE_VERSION {
        return Err(Error::Cache(format!("unsupported cache version {version}")));
    }
    let mut key = [0u8; 32];
    r.read_exact(&mut key).map_err(bad)?;
    let alpha = r.read_f64::<LittleEndian>().map_err(bad)?;
    let m = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
    let mut ids = Vec::new();
    let mut sizes = Vec::new();
    let mut neighbors = Vec::new();
    for _ in 0..m {
        let len = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(bad)?;
        ids.push(String::from_utf8(buf).map_err(|e| Error::Cache(e.to_string()))?);
        sizes.push(r.read_u64::<LittleEndian>().map_err(bad)? as usize);
        let k = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
        neighbors.push((0..k).map(|_| r.read_u64::<LittleEndian>().map(|j| j as usize)).collect::<std::io::Result<Vec<_>>>().map_err(bad)?);
    }
    let mut offsets = vec![0usize];
    for &s in &sizes {
        offsets.push(offsets.last().unwrap() + s);
    }
    let mut edges = Vec::with_capacity(offsets[m]);
    for i in 0..m {
        for _ in 0..sizes[i] {
            let mut out = Vec::with_capacity(neighbors[i].len());
            for _ in 0..neighbors[i].len() {
                let t = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
                let c = Cost(r.read_u64::<LittleEndian>().map_err(bad)?);
                let j = offsets.partition_point(|&o| o <= t).saturating_sub(1).min(m.saturating_sub(1));
                out.push((NodeId::new(j, t.saturating_sub(offsets[j])), c));
            }
            edges.push(out);
        }
    }
    let network = VVNetwork::from_edges(ids, &sizes, neighbors, alpha, edges).map_err(|e| Error::Cache(e.to_string()))?;
    let compressed = match r.read_u8().map_err(bad)? {
        0 => None,
        1 => {
            let total = network.node_count() * m;
            let mut points = Vec::with_capacity(total);
            let mut costs = Vec::with_capacity(total);
            for _ in 0..total {
                points.push(r.read_u32::<LittleEndian>().map_err(bad)?);
                costs.push(Cost(r.read_u64::<LittleEndian>().map_err(bad)?));
            }
            Some(CompressedNetwork { offsets: network.offsets.clone(), points, costs })
        }
        f => return Err(Error::Cache(format!("bad compressed flag {f}"))),
    };
    Ok(NetworkArtifacts { key, network, compressed })
}

/// Builds and compresses the network of `collection`, or loads it from
/// `cache_dir` when a file with the same key exists there. A fresh build is
/// stored in `cache_dir`. Returns the artifacts and whether they came from
/// the cache.
pub fn build_artifacts(
    collection: &Collection,
    k: usize,
    alpha: Option<Real>,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<(NetworkArtifacts, bool)> {
    let key = cache_key(collection, k, alpha)?;
    if let Some(dir) = cache_dir {
        let path = cache_path(dir, &key);
        if path.exists() {
            match load_network(&path) {
                Ok(a) if a.key == key && a.compressed.is_some() => return Ok((a, true)),
                Ok(_) => log::warn!("ignoring stale cache file {}", path.display()),
                Err(e) => log::warn!("ignoring unreadable cache file {}: {e}", path.display()),
            }
        }
    }
    let alpha = match alpha {
        Some(a) => a,
        None => calibrate_alpha(collection, k, seed)?,
    };
    let network = build_network(collection, k, alpha)?;
    let compressed = Some(compress(&network));
    let artifacts = NetworkArtifacts { key, network, compressed };
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_network(cache_path(dir, &key), &artifacts)?;
    }
    Ok((artifacts, false))
}

pub fn save_network(path: impl AsRef<Path>, artifacts: &NetworkArtifacts) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_artifacts(&mut w, artifacts).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkArtifacts> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_artifacts(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FeatureGrid, Keypoint, KeypointSet, Mask};
    use crate::warp::AffineMap2D;
    use nalgebra::{Matrix3, Vector3};

    fn unit(x: u64) -> Cost {
        Cost(x << 32)
    }

    fn rot_y(deg: f64) -> Matrix3<f64> {
        nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), deg.to_radians()).into_inner()
    }

    fn cam(deg: f64) -> Camera<f64> {
        Camera::new(rot_y(deg), 1.0, Vec2::zeros()).unwrap()
    }

    #[test]
    fn cost_fixed_point() {
        assert_eq!(Cost::from_real(1.5).unwrap(), Cost(3 << 31));
        assert_eq!(Cost::from_real(2.25).unwrap().to_real(), 2.25);
        assert!(Cost::from_real(-1.0).is_err());
        assert!(Cost::from_real(f64::NAN).is_err());
        assert_eq!(Cost::INFINITE.plus(unit(1)), Cost::INFINITE);
    }

    #[test]
    fn knn_examples() {
        let cams = vec![cam(0.0), cam(20.0), cam(10.0)];
        assert_eq!(pose_knn(&cams, 1).unwrap()[0], vec![2]);
        let same = vec![cam(5.0); 4];
        let nb = pose_knn(&same, 2).unwrap();
        assert_eq!(nb[0], vec![1, 2]);
        assert_eq!(nb[2], vec![0, 1]);
        assert!(pose_knn(&same, 4).is_err());
        assert!(pose_knn(&same, 0).is_err());
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cams: Vec<_> = (0..40).map(|_| cam(rng.random_range(0.0..360.0))).collect();
        let nb = pose_knn(&cams, 5).unwrap();
        for i in 0..cams.len() {
            let mut all: Vec<(f64, usize)> = (0..cams.len())
                .filter(|&j| j != i)
                .map(|j| (crate::geometry::rotation_distance(cams[i].rotation(), cams[j].rotation()).unwrap(), j))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = all[..5].iter().map(|x| x.1).collect();
            assert_eq!(nb[i], expect);
        }
    }

    #[test]
    fn matching_cost_examples() {
        let id = AffineMap2D::identity();
        let x = Vec2::new(1.0, 2.0);
        assert_eq!(matching_cost(&[0.5, 0.5], &x, &[0.5, 0.5], &x, &id, &id, 3.0).unwrap(), 0.0);
        let y = Vec2::new(4.0, 6.0);
        assert_eq!(matching_cost(&[0.0, 0.0], &x, &[3.0, 4.0], &y, &id, &id, 0.0).unwrap(), 5.0);
        // descriptor distance 1, forward residual 3, backward residual 4
        let fwd = AffineMap2D::translation(Vec2::new(0.0, -3.0));
        let bwd = AffineMap2D::translation(Vec2::new(4.0, 0.0));
        let u = Vec2::new(0.0, 0.0);
        let v = Vec2::new(0.0, 0.0);
        assert_eq!(matching_cost(&[0.0], &u, &[1.0], &v, &fwd, &bwd, 0.5).unwrap(), 4.5);
        assert!(matching_cost(&[0.0], &u, &[1.0, 2.0], &v, &fwd, &bwd, 0.5).is_err());
    }

    fn fixture_instance(id: &str, angle: f64, shift: f64) -> ObjectInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points: Vec<Vec2> = (0..5).flat_map(|r| (0..5).map(move |c| Vec2::new(20.0 + 10.0 * c as f64, 20.0 + 10.0 * r as f64))).collect();
        let descriptors = points.iter().map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let kp = [(20.0, 20.0), (60.0, 20.0), (60.0, 60.0), (20.0, 60.0), (40.0, 30.0)];
        ObjectInstance {
            id: id.into(),
            image_size: [100.0 + shift, 100.0],
            mask: Mask::Polygon {
                vertices: vec![Vec2::new(15.0, 15.0), Vec2::new(65.0, 15.0), Vec2::new(65.0, 65.0), Vec2::new(15.0, 65.0)]
                    .into_iter()
                    .map(|v| v + Vec2::new(shift, 0.0))
                    .collect(),
            },
            grid: FeatureGrid {
                points: points.iter().map(|p| p + Vec2::new(shift, 0.0)).collect(),
                descriptors,
                stride: 10.0,
            },
            keypoints: KeypointSet {
                keypoints: kp
                    .iter()
                    .enumerate()
                    .map(|(z, &(x, y))| Keypoint::visible(format!("k{z}"), Vec2::new(x + shift, y)))
                    .collect(),
            },
            camera: Some(cam(angle)),
            global_descriptor: None,
        }
    }

    fn fixture(n: usize) -> Collection {
        Collection {
            class_label: "toy".into(),
            instances: (0..n).map(|i| fixture_instance(&i.to_string(), 10.0 * i as f64, 3.0 * i as f64)).collect(),
            symmetry_swap: vec![1, 0, 3, 2, 4],
        }
    }

    #[test]
    fn identical_instances_match_themselves() {
        let c = fixture(2);
        let net = build_network(&c, 1, 2.0).unwrap();
        for i in 0..2 {
            for u in 0..25 {
                let e = net.edges_from(NodeId::new(i, u));
                assert_eq!(e, vec![(NodeId::new(1 - i, u), Cost::ZERO)]);
            }
        }
    }

    #[test]
    fn build_weights_equal_matching_cost() {
        let mut c = fixture(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for inst in &mut c.instances {
            for d in &mut inst.grid.descriptors {
                for x in d.iter_mut() {
                    *x += rng.random_range(-0.3..0.3);
                }
            }
            for kp in &mut inst.keypoints.keypoints {
                kp.position += Vec2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            }
        }
        let alpha = 0.05;
        let net = build_network(&c, 2, alpha).unwrap();
        assert_eq!(net.edge_count(), 4 * 25 * 2);
        for i in 0..4 {
            for (slot, &j) in net.pose_neighbors()[i].iter().enumerate() {
                let (g_ij, g_ji) = pair_priors(&c.instances[i], &c.instances[j]).unwrap();
                for u in 0..25 {
                    let (a, b) = (&c.instances[i].grid, &c.instances[j].grid);
                    let costs: Vec<f64> = (0..25)
                        .map(|v| matching_cost(&a.descriptors[u], &a.points[u], &b.descriptors[v], &b.points[v], &g_ij, &g_ji, alpha).unwrap())
                        .collect();
                    let best = (0..25).min_by(|&x, &y| costs[x].total_cmp(&costs[y]).then(x.cmp(&y))).unwrap();
                    let e = net.edges_from(NodeId::new(i, u))[slot];
                    assert_eq!(e, (NodeId::new(j, best), Cost::from_real(costs[best]).unwrap()));
                }
            }
        }
    }

    #[test]
    fn build_is_thread_count_independent() {
        let mut c = fixture(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for inst in &mut c.instances {
            for d in &mut inst.grid.descriptors {
                d.iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
            }
        }
        let run = |t| rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap().install(|| build_network(&c, 3, 0.1).unwrap());
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn empty_grid_rejected() {
        let mut c = fixture(3);
        c.instances[1].grid.points.clear();
        c.instances[1].grid.descriptors.clear();
        assert!(matches!(build_network(&c, 1, 1.0), Err(Error::Invariant { .. })));
    }

    #[test]
    fn alpha_calibration_balances_medians() {
        let mut c = fixture(4);
        for (i, inst) in c.instances.iter_mut().enumerate() {
            for kp in &mut inst.keypoints.keypoints {
                kp.position.y += i as f64;
            }
        }
        let a = calibrate_alpha(&c, 2, 1).unwrap();
        assert!(a.is_finite() && a > 0.0);
        assert_eq!(a, calibrate_alpha(&c, 2, 1).unwrap());
    }

    #[test]
    fn docking_identical_instance() {
        let c = fixture(3);
        let net = build_network(&c, 1, 1.0).unwrap();
        let test = c.instances[0].clone();
        let d = dock(&test, &c, &net, test.camera.as_ref().unwrap(), 1, 1.0).unwrap();
        assert_eq!(d.docking_instances(), &[0]);
        assert_eq!(d.edges().len(), 25);
        for (p, e) in d.edges().iter().enumerate() {
            assert_eq!(*e, DockEdge { test_point: p, node: NodeId::new(0, p), weight: Cost::ZERO });
        }
    }

    #[test]
    fn docking_suppresses_duplicates() {
        let edges = vec![
            DockEdge { test_point: 0, node: NodeId::new(0, 1), weight: unit(3) },
            DockEdge { test_point: 1, node: NodeId::new(0, 1), weight: unit(2) },
            DockEdge { test_point: 2, node: NodeId::new(0, 0), weight: unit(5) },
            DockEdge { test_point: 2, node: NodeId::new(1, 1), weight: unit(1) },
            DockEdge { test_point: 0, node: NodeId::new(1, 1), weight: unit(1) },
        ];
        let d = DockingSet::new(3, edges, vec![0, 1]).unwrap();
        assert_eq!(d.edges_of(0), &[DockEdge { test_point: 0, node: NodeId::new(1, 1), weight: unit(1) }]);
        assert_eq!(d.edges_of(1), &[DockEdge { test_point: 1, node: NodeId::new(0, 1), weight: unit(2) }]);
        assert_eq!(d.edges_of(2), &[DockEdge { test_point: 2, node: NodeId::new(0, 0), weight: unit(5) }]);
        assert!(DockingSet::new(2, vec![DockEdge { test_point: 2, node: NodeId::new(0, 0), weight: Cost::ZERO }], vec![]).is_err());
    }

    fn line_network() -> VVNetwork {
        // a -> b -> c across three single-point instances, plus c -> b
        VVNetwork::from_edges(
            vec!["a".into(), "b".into(), "c".into()],
            &[1, 1, 1],
            vec![vec![1], vec![2], vec![1]],
            1.0,
            vec![vec![(NodeId::new(1, 0), unit(2))], vec![(NodeId::new(2, 0), unit(3))], vec![(NodeId::new(1, 0), unit(1))]],
        )
        .unwrap()
    }

    #[test]
    fn line_graph_distances() {
        let net = line_network();
        let d = DockingSet::new(1, vec![DockEdge { test_point: 0, node: NodeId::new(0, 0), weight: Cost::ZERO }], vec![0]).unwrap();
        let r = align_dijkstra(&net, &d).unwrap();
        assert_eq!(r.get(0, 2).unwrap().distance(), 5.0);
        assert_eq!(r.get(0, 1).unwrap().distance(), 2.0);
        assert_eq!(r.get(0, 0).unwrap().cost, Cost::ZERO);
        let c = compress(&net);
        assert_eq!(align_fast(&c, &d).unwrap(), r);
        let from_b = DockingSet::new(1, vec![DockEdge { test_point: 0, node: NodeId::new(1, 0), weight: Cost::ZERO }], vec![1]).unwrap();
        let rb = align_dijkstra(&net, &from_b).unwrap();
        assert_eq!(rb.get(0, 0), None);
        assert_eq!(c.get(NodeId::new(1, 0), 0), None);
        assert_eq!(align_fast(&c, &from_b).unwrap(), rb);
    }

    #[test]
    fn one_hop_and_zero_weight() {
        let net = VVNetwork::from_edges(
            vec!["a".into(), "b".into()],
            &[2, 2],
            vec![vec![1], vec![0]],
            1.0,
            vec![
                vec![(NodeId::new(1, 1), Cost::ZERO)],
                vec![(NodeId::new(1, 0), unit(1))],
                vec![(NodeId::new(0, 0), unit(1))],
                vec![(NodeId::new(0, 1), unit(1))],
            ],
        )
        .unwrap();
        let c = compress(&net);
        assert_eq!(c.get(NodeId::new(0, 0), 1), Some(Match { node: NodeId::new(1, 1), cost: Cost::ZERO }));
        let d = DockingSet::new(1, vec![DockEdge { test_point: 0, node: NodeId::new(0, 1), weight: Cost::ZERO }], vec![0]).unwrap();
        let r = align_dijkstra(&net, &d).unwrap();
        assert_eq!(r.get(0, 1), Some(Match { node: NodeId::new(1, 0), cost: unit(1) }));
        assert_eq!(align_fast(&c, &d).unwrap(), r);
    }

    /// Distances by Bellman-Ford relaxation in floating point.
    fn bellman_ford(net: &VVNetwork, sources: &[(usize, f64)]) -> Vec<f64> {
        let n = net.node_count();
        let mut dist = vec![f64::INFINITY; n];
        for &(s, w) in sources {
            dist[s] = dist[s].min(w);
        }
        for _ in 0..n {
            let mut changed = false;
            for u in 0..n {
                if dist[u].is_finite() {
                    for (v, w) in net.out_edges(u) {
                        let nd = dist[u] + w.to_real();
                        if nd < dist[v] {
                            dist[v] = nd;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        dist
    }

    #[test]
    fn dijkstra_matches_bellman_ford() {
        let spec = RandomNetworkSpec { instances: 20, min_points: 15, max_points: 35, k: 4, components: 2, integer_weights: false };
        let net = random_network(&spec, 17);
        assert!((400..=700).contains(&net.node_count()));
        let d = random_docking(&net, 6, 3, false, 4);
        let r = align_dijkstra(&net, &d).unwrap();
        for p in 0..6 {
            let src: Vec<(usize, f64)> = d.edges_of(p).iter().map(|e| (net.node_index(e.node), e.weight.to_real())).collect();
            let bf = bellman_ford(&net, &src);
            for j in 0..net.instance_count() {
                let range = net.instance_offset(j)..net.instance_offset(j) + net.instance_size(j);
                let best = range.clone().map(|v| bf[v]).fold(f64::INFINITY, f64::min);
                match r.get(p, j) {
                    None => assert!(best.is_infinite()),
                    Some(mt) => {
                        assert_eq!(mt.distance(), best);
                        let first = range.clone().find(|&v| bf[v] == best).unwrap();
                        assert_eq!(net.node_index(mt.node), first);
                    }
                }
            }
        }
    }

    #[test]
    fn fast_equals_dijkstra_on_random_networks() {
        for seed in 0..12 {
            let spec = RandomNetworkSpec {
                instances: 8 + seed as usize,
                min_points: 5,
                max_points: 40,
                k: 3,
                components: 1 + (seed as usize % 3),
                integer_weights: seed % 2 == 0,
            };
            let net = random_network(&spec, seed);
            let c = compress(&net);
            let d = random_docking(&net, 10, 4, seed % 2 == 0, seed + 100);
            assert_eq!(align_fast(&c, &d).unwrap(), align_dijkstra(&net, &d).unwrap(), "seed {seed}");
        }
    }

    #[test]
    fn compressed_entries_are_geodesics() {
        let spec = RandomNetworkSpec { instances: 12, min_points: 10, max_points: 20, k: 3, components: 1, integer_weights: true };
        let net = random_network(&spec, 2);
        let c = compress(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..30 {
            let q = net.node_id(rng.random_range(0..net.node_count()));
            let d = DockingSet::new(1, vec![DockEdge { test_point: 0, node: q, weight: Cost::ZERO }], vec![q.instance_index]).unwrap();
            let r = align_dijkstra(&net, &d).unwrap();
            for j in 0..net.instance_count() {
                assert_eq!(c.get(q, j), r.get(0, j));
            }
            assert_eq!(align_fast(&c, &d).unwrap(), r);
        }
    }

    #[test]
    fn triangle_inequality_and_monotonicity() {
        let spec = RandomNetworkSpec { instances: 10, min_points: 8, max_points: 12, k: 4, components: 1, integer_weights: false };
        let mut net = random_network(&spec, 8);
        let c = compress(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = net.node_id(rng.random_range(0..net.node_count()));
            let j = rng.random_range(0..net.instance_count());
            let k = rng.random_range(0..net.instance_count());
            if let (Some(ab), Some(bc_start)) = (c.get(a, j), c.get(a, k)) {
                if let Some(bc) = c.get(ab.node, k) {
                    assert!(bc_start.cost.0 <= ab.cost.0 + bc.cost.0);
                }
            }
        }
        let d = random_docking(&net, 5, 3, false, 6);
        let before = align_dijkstra(&net, &d).unwrap();
        for _ in 0..10 {
            let node = net.node_id(rng.random_range(0..net.node_count()));
            let slot = rng.random_range(0..net.pose_neighbors()[node.instance_index].len());
            let w = net.edges_from(node)[slot].1;
            net.set_edge_weight(node, slot, w.plus(unit(rng.random_range(1..5))));
        }
        let after = align_dijkstra(&net, &d).unwrap();
        for p in 0..5 {
            for j in 0..net.instance_count() {
                if let Some(b) = before.get(p, j) {
                    assert!(after.get(p, j).is_none_or(|a| a.cost >= b.cost));
                }
            }
        }
    }

    #[test]
    fn cache_round_trip() {
        let spec = RandomNetworkSpec { instances: 6, min_points: 3, max_points: 9, k: 2, components: 1, integer_weights: false };
        let net = random_network(&spec, 3);
        let a = NetworkArtifacts { key: [7; 32], compressed: Some(compress(&net)), network: net };
        let dir = tempfile::tempdir().unwrap();
        let path = cache_path(dir.path(), &a.key);
        save_network(&path, &a).unwrap();
        assert_eq!(load_network(&path).unwrap(), a);
        let b = NetworkArtifacts { compressed: None, ..a.clone() };
        save_network(&path, &b).unwrap();
        assert_eq!(load_network(&path).unwrap(), b);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_network(&path), Err(Error::Cache(_))));
    }

    #[test]
    fn cache_key_depends_on_settings() {
        let c = fixture(3);
        let a = cache_key(&c, 2, None).unwrap();
        assert_eq!(a, cache_key(&c, 2, None).unwrap());
        assert_ne!(a, cache_key(&c, 1, None).unwrap());
        assert_ne!(a, cache_key(&c, 2, Some(1.0)).unwrap());
        assert_eq!(hex(&a).len(), 64);
    }

    #[test]
    fn cached_build_is_reused() {
        let cfg = crate::synth::SynthConfig { n_instances: 8, n_grid_points: 30, seed: 2, ..Default::default() };
        let (c, _) = crate::synth::generate(&crate::synth::car(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, hit) = build_artifacts(&c, 3, None, 0, Some(dir.path())).unwrap();
        assert!(!hit);
        assert!(cache_path(dir.path(), &a.key).exists());
        let (b, hit) = build_artifacts(&c, 3, None, 0, Some(dir.path())).unwrap();
        assert!(hit);
        assert_eq!(a, b);
        let (fresh, hit) = build_artifacts(&c, 3, None, 0, None).unwrap();
        assert!(!hit);
        assert_eq!(fresh.network, a.network);
        std::fs::write(cache_path(dir.path(), &a.key), b"garbage").unwrap();
        assert!(!build_artifacts(&c, 3, None, 0, Some(dir.path())).unwrap().1);
    }
}
