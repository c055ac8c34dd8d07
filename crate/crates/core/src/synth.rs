//! Synthetic object classes with exact 3D ground truth.
//!
//! An instance is a deformed copy of a symmetric point model seen by a
//! scaled orthographic camera. Points whose outward direction (taken from the
//! model centroid) faces the camera form the feature grid. Descriptors embed
//! each point's canonical coordinate folded across the symmetry plane, plus a
//! term depending on the point's orientation in the camera frame, so matching
//! by appearance degrades as the viewpoint changes.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::Camera;
use crate::dataset::{
    normalize_instance, Collection, FeatureGrid, Keypoint, KeypointSet, Mask, ObjectInstance, RleMask, Vec2,
    DEFAULT_HEIGHT,
};
use crate::error::{Error, Result};
use crate::geometry::{lateral_reflection, mirrored_id, view_rotation};
use crate::Real;

pub type Point3 = Vector3<Real>;

/// Symmetric point model of an object class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeModel {
    pub class_id: String,
    pub base_points: Vec<Point3>,
    pub keypoint_indices: Vec<usize>,
    pub keypoint_names: Vec<String>,
    /// `point_swap[k]` is the index of the x-negated copy of point `k`.
    pub point_swap: Vec<usize>,
    /// Each mode displaces every base point.
    pub deformation_modes: Vec<Vec<Point3>>,
}

impl ShapeModel {
    pub fn keypoint_count(&self) -> usize {
        self.keypoint_indices.len()
    }

    pub fn centroid(&self) -> Point3 {
        self.base_points.iter().sum::<Point3>() / self.base_points.len() as Real
    }

    /// Keypoint relabelling under reflection, as used by [`Collection::symmetry_swap`].
    pub fn keypoint_swap(&self) -> Result<Vec<usize>> {
        self.keypoint_indices
            .iter()
            .map(|&p| {
                let q = self.point_swap[p];
                self.keypoint_indices
                    .iter()
                    .position(|&k| k == q)
                    .ok_or_else(|| Error::InvalidInput(format!("mirror of keypoint point {p} is not a keypoint")))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.base_points.len();
        let bad = |m: &str| Err(Error::InvalidInput(format!("shape model `{}`: {m}", self.class_id)));
        if k < 4 {
            return bad("needs at least four points");
        }
        if self.point_swap.len() != k || self.point_swap.iter().enumerate().any(|(a, &b)| b >= k || self.point_swap[b] != a) {
            return bad("point swap is not an involution");
        }
        let d = lateral_reflection::<Real>();
        for (a, &b) in self.point_swap.iter().enumerate() {
            if (self.base_points[b] - d * self.base_points[a]).norm() > 1e-12 {
                return bad("base shape is not symmetric");
            }
            for mode in &self.deformation_modes {
                if mode.len() != k || (mode[b] - d * mode[a]).norm() > 1e-12 {
                    return bad("deformation mode is not symmetric");
                }
            }
        }
        if self.keypoint_names.len() != self.keypoint_indices.len() || self.keypoint_indices.iter().any(|&i| i >= k) {
            return bad("keypoint table is inconsistent");
        }
        let swap = self.keypoint_swap()?;
        if swap.iter().enumerate().any(|(a, &b)| swap[b] != a) {
            return bad("keypoint swap is not an involution");
        }
        Ok(())
    }
}

/// Generator settings. Angles are in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_instances: usize,
    /// Upper bound on grid points per instance.
    pub n_grid_points: usize,
    pub descriptor_dim: usize,
    pub descriptor_noise_sigma: Real,
    pub keypoint_noise_sigma_px: Real,
    /// Bound on the magnitude of each deformation coefficient.
    pub deformation_scale: Real,
    pub azimuth_range: [Real; 2],
    pub elevation_range: [Real; 2],
    /// Weight of the camera-frame orientation term in the descriptors.
    pub view_dependence: Real,
    /// Weight of the lateral orientation component; zero keeps descriptors
    /// exactly invariant under mirroring.
    pub lateral_view_weight: Real,
    pub target_height: Real,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_instances: 200,
            n_grid_points: 400,
            descriptor_dim: 32,
            descriptor_noise_sigma: 0.1,
            keypoint_noise_sigma_px: 1.0,
            deformation_scale: 0.1,
            azimuth_range: [0.0, 360.0],
            elevation_range: [0.0, 30.0],
            view_dependence: 1.0,
            lateral_view_weight: 0.3,
            target_height: DEFAULT_HEIGHT,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_instances >= 1
            && self.n_grid_points >= 1
            && self.descriptor_dim >= 1
            && self.descriptor_noise_sigma >= 0.0
            && self.keypoint_noise_sigma_px >= 0.0
            && self.deformation_scale >= 0.0
            && self.view_dependence >= 0.0
            && self.lateral_view_weight >= 0.0
            && self.target_height > 0.0
            && self.azimuth_range[0] <= self.azimuth_range[1]
            && self.elevation_range[0] <= self.elevation_range[1];
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("invalid synthetic configuration".into()))
        }
    }
}

/// Exact geometry behind one generated view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceTruth {
    pub id: String,
    /// Deformed model points, indexed like the base points.
    pub points: Vec<Point3>,
    pub camera: Camera<Real>,
    /// Base point index of every grid point.
    pub grid_points: Vec<usize>,
    pub coefficients: Vec<Real>,
    pub azimuth_deg: Real,
    pub elevation_deg: Real,
}

impl InstanceTruth {
    pub fn grid_points_3d(&self) -> Vec<Point3> {
        self.grid_points.iter().map(|&k| self.points[k]).collect()
    }

    /// Truth of the horizontally flipped view: the reflected shape, grid
    /// order preserved.
    pub fn mirrored(&self, point_swap: &[usize], width: Real) -> Self {
        let d = lateral_reflection::<Real>();
        let mut points = vec![Point3::zeros(); self.points.len()];
        for (k, p) in self.points.iter().enumerate() {
            points[point_swap[k]] = d * p;
        }
        Self {
            id: mirrored_id(&self.id),
            points,
            camera: crate::geometry::mirror_camera(&self.camera, width),
            grid_points: self.grid_points.iter().map(|&k| point_swap[k]).collect(),
            coefficients: self.coefficients.clone(),
            azimuth_deg: -self.azimuth_deg,
            elevation_deg: self.elevation_deg,
        }
    }
}

/// Ground-truth sidecar of a generated collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_label: String,
    pub keypoint_indices: Vec<usize>,
    pub point_swap: Vec<usize>,
    pub instances: Vec<InstanceTruth>,
}

impl GroundTruth {
    pub fn find(&self, id: &str) -> Option<&InstanceTruth> {
        self.instances.iter().find(|t| t.id == id)
    }

    /// Truth for `id`, deriving mirrored views on the fly.
    pub fn truth_for(&self, id: &str, collection: &Collection) -> Option<InstanceTruth> {
        if let Some(t) = self.find(id) {
            return Some(t.clone());
        }
        let src = self.find(&mirrored_id(id))?;
        let (_, inst) = collection.find(id).or_else(|| collection.find(&src.id))?;
        Some(src.mirrored(&self.point_swap, inst.width()))
    }

    /// For each grid point of `a`, the grid point of `b` showing the same
    /// model point.
    pub fn correspondence(a: &InstanceTruth, b: &InstanceTruth) -> Vec<Option<usize>> {
        let mut where_b = std::collections::HashMap::new();
        for (g, &k) in b.grid_points.iter().enumerate() {
            where_b.insert(k, g);
        }
        a.grid_points.iter().map(|k| where_b.get(k).copied()).collect()
    }
}

/// Fixed per-class descriptor embedding.
struct Embedding {
    linear: DMatrix<Real>,
    bias: DVector<Real>,
    view: DMatrix<Real>,
}

impl Embedding {
    fn for_class(class_id: &str, dim: usize) -> Self {
        let digest = Sha256::digest(class_id.as_bytes());
        let mut seed = [0u8; 8];
        seed.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(seed));
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut draw = |r, c| DMatrix::from_fn(r, c, |_, _| normal.sample(&mut rng));
        let linear = draw(dim, 3);
        let bias = draw(dim, 1).column(0).into_owned();
        let view = draw(dim, 3);
        Self { linear, bias, view }
    }

    fn descriptor(&self, canonical: &Point3, view_normal: &Point3, cfg: &SynthConfig) -> DVector<Real> {
        let folded = Vector3::new(canonical.x.abs(), canonical.y, canonical.z);
        let v = Vector3::new(view_normal.x * cfg.lateral_view_weight, view_normal.y, view_normal.z);
        let raw = &self.linear * folded + &self.bias + cfg.view_dependence * (&self.view * v);
        let norm = raw.norm();
        if norm > 0.0 {
            raw * ((self.linear.nrows() as Real).sqrt() / norm)
        } else {
            raw
        }
    }
}

const PIXELS_PER_UNIT: Real = 40.0;
const MARGIN: Real = 12.0;
const SPLAT_RADIUS: Real = 5.0;

fn render(
    model: &ShapeModel,
    embedding: &Embedding,
    cfg: &SynthConfig,
    index: usize,
) -> Result<(ObjectInstance, InstanceTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let coefficients: Vec<Real> = model
        .deformation_modes
        .iter()
        .map(|_| if cfg.deformation_scale > 0.0 { rng.random_range(-cfg.deformation_scale..=cfg.deformation_scale) } else { 0.0 })
        .collect();
    let az = rng.random_range(cfg.azimuth_range[0]..=cfg.azimuth_range[1]);
    let el = rng.random_range(cfg.elevation_range[0]..=cfg.elevation_range[1]);
    let points: Vec<Point3> = (0..model.base_points.len())
        .map(|k| {
            let mut p = model.base_points[k];
            for (mode, c) in model.deformation_modes.iter().zip(&coefficients) {
                p += mode[k] * *c;
            }
            p
        })
        .collect();
    let rotation = view_rotation(az.to_radians(), el.to_radians());
    let raw: Vec<Vec2> = points.iter().map(|p| PIXELS_PER_UNIT * (rotation * p).xy()).collect();
    let (mut lo, mut hi) = (raw[0], raw[0]);
    for p in &raw {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let shift = Vector2::repeat(MARGIN) - lo;
    let camera = Camera::new(rotation, PIXELS_PER_UNIT, shift)?;
    let proj: Vec<Vec2> = raw.iter().map(|p| p + shift).collect();
    let width = (hi.x - lo.x + 2.0 * MARGIN).ceil();
    let height = (hi.y - lo.y + 2.0 * MARGIN).ceil();
    let (w, h) = (width as u32, height as u32);
    let mut bits = vec![false; (w * h) as usize];
    let r = SPLAT_RADIUS.ceil() as i64;
    for p in &proj {
        let (cx, cy) = (p.x.floor() as i64, p.y.floor() as i64);
        for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                let d = Vec2::new(x as Real + 0.5, y as Real + 0.5) - p;
                if d.norm() <= SPLAT_RADIUS {
                    bits[y as usize * w as usize + x as usize] = true;
                }
            }
        }
    }
    let mask = Mask::Rle(RleMask::from_bitmap(w, h, 1.0, &bits));

    let centroid = model.centroid();
    let facing: Vec<Option<Point3>> = model
        .base_points
        .iter()
        .map(|b| {
            let n = (b - centroid).try_normalize(1e-12).unwrap_or_else(Vector3::z);
            let nc = rotation * n;
            (nc.z < 0.0).then_some(nc)
        })
        .collect();
    let mut visible: Vec<usize> = (0..points.len()).filter(|&k| facing[k].is_some()).collect();
    if visible.len() > cfg.n_grid_points {
        let step = visible.len() as Real / cfg.n_grid_points as Real;
        visible = (0..cfg.n_grid_points).map(|i| visible[(i as Real * step) as usize]).collect();
    }
    let noise = Normal::new(0.0, 1.0).unwrap();
    let descriptors = visible
        .iter()
        .map(|&k| {
            let d = embedding.descriptor(&model.base_points[k], &facing[k].unwrap(), cfg);
            d.iter().map(|x| x + cfg.descriptor_noise_sigma * noise.sample(&mut rng)).collect()
        })
        .collect();
    let keypoints = model
        .keypoint_indices
        .iter()
        .zip(&model.keypoint_names)
        .map(|(&k, name)| {
            if facing[k].is_none() {
                return Keypoint::missing(name.clone());
            }
            let jitter = Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng)) * cfg.keypoint_noise_sigma_px;
            let p = proj[k] + jitter;
            Keypoint::visible(name.clone(), Vec2::new(p.x.clamp(0.0, width - 1e-9), p.y.clamp(0.0, height - 1e-9)))
        })
        .collect();
    let instance = ObjectInstance {
        id: index.to_string(),
        image_size: [width, height],
        mask,
        grid: FeatureGrid { points: visible.iter().map(|&k| proj[k]).collect(), descriptors, stride: 0.0 },
        keypoints: KeypointSet { keypoints },
        camera: Some(camera),
        global_descriptor: None,
    };
    let instance = normalize_instance(&instance, cfg.target_height)?;
    let truth = InstanceTruth {
        id: instance.id.clone(),
        points,
        camera: instance.camera.unwrap(),
        grid_points: visible,
        coefficients,
        azimuth_deg: az,
        elevation_deg: el,
    };
    Ok((instance, truth))
}

/// Generates a collection and its ground truth. Instance `i` depends only on
/// the model, the configuration and `i`.
pub fn generate(model: &ShapeModel, cfg: &SynthConfig) -> Result<(Collection, GroundTruth)> {
    model.validate()?;
    cfg.validate()?;
    let embedding = Embedding::for_class(&model.class_id, cfg.descriptor_dim);
    let rendered = (0..cfg.n_instances)
        .into_par_iter()
        .map(|i| render(model, &embedding, cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let (instances, truths): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
    let collection = Collection { class_label: model.class_id.clone(), instances, symmetry_swap: model.keypoint_swap()? };
    let truth = GroundTruth {
        class_label: model.class_id.clone(),
        keypoint_indices: model.keypoint_indices.clone(),
        point_swap: model.point_swap.clone(),
        instances: truths,
    };
    Ok((collection, truth))
}

/// Incrementally assembles a symmetric model.
struct Builder {
    points: Vec<Point3>,
    swap: Vec<usize>,
    keypoints: Vec<usize>,
    names: Vec<String>,
}

impl Builder {
    fn new() -> Self {
        Self { points: Vec::new(), swap: Vec::new(), keypoints: Vec::new(), names: Vec::new() }
    }

    /// Adds `p` and, unless it lies on the symmetry plane, its reflection.
    fn pair(&mut self, p: Point3) -> usize {
        let i = self.points.len();
        if p.x == 0.0 {
            self.points.push(p);
            self.swap.push(i);
        } else {
            self.points.push(p);
            self.points.push(Vector3::new(-p.x, p.y, p.z));
            self.swap.push(i + 1);
            self.swap.push(i);
        }
        i
    }

    /// Samples an ellipsoid surface, keeping points accepted by `keep`.
    fn ellipsoid(&mut self, center: Point3, radii: Point3, n: usize, keep: impl Fn(&Point3) -> bool) {
        assert_eq!(center.x, 0.0);
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        for i in 0..n {
            let y = 1.0 - 2.0 * (i as Real + 0.5) / n as Real;
            let r = (1.0 - y * y).sqrt();
            let t = golden * i as Real;
            let u = Vector3::new(r * t.cos(), y, r * t.sin());
            if u.x <= 1e-6 || !keep(&u) {
                continue;
            }
            self.pair(center + u.component_mul(&radii));
        }
    }

    /// A sphere at `(±x, y, z)`.
    fn side_spheres(&mut self, center: Point3, radius: Real, n: usize) {
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        for i in 0..n {
            let y = 1.0 - 2.0 * (i as Real + 0.5) / n as Real;
            let r = (1.0 - y * y).sqrt();
            let t = golden * i as Real;
            self.pair(center + radius * Vector3::new(r * t.cos(), y, r * t.sin()));
        }
    }

    fn keypoint(&mut self, name: &str, p: Point3) {
        let i = self.pair(p);
        self.keypoints.push(i);
        if p.x == 0.0 {
            self.names.push(name.to_string());
        } else {
            self.keypoints.push(i + 1);
            self.names.push(format!("{name}_left"));
            self.names.push(format!("{name}_right"));
        }
    }

    fn finish(self, class_id: &str) -> ShapeModel {
        let axis = |a: usize| self.points.iter().map(|p| {
            let mut m = Point3::zeros();
            m[a] = p[a];
            m
        }).collect::<Vec<_>>();
        let modes = vec![axis(0), axis(1), axis(2)];
        let model = ShapeModel {
            class_id: class_id.into(),
            base_points: self.points,
            keypoint_indices: self.keypoints,
            keypoint_names: self.names,
            point_swap: self.swap,
            deformation_modes: modes,
        };
        model.validate().expect("builtin model is valid");
        model
    }
}

fn v(x: Real, y: Real, z: Real) -> Point3 {
    Vector3::new(x, y, z)
}

pub fn car() -> ShapeModel {
    let mut b = Builder::new();
    b.ellipsoid(v(0.0, 0.5, 0.0), v(0.8, 0.4, 2.0), 140, |_| true);
    b.ellipsoid(v(0.0, 0.95, -0.2), v(0.65, 0.35, 1.0), 60, |u| u.y > -0.2);
    b.side_spheres(v(0.8, 0.25, 1.3), 0.25, 8);
    b.side_spheres(v(0.8, 0.25, -1.3), 0.25, 8);
    b.keypoint("front_wheel", v(1.05, 0.25, 1.3));
    b.keypoint("back_wheel", v(1.05, 0.25, -1.3));
    b.keypoint("headlight", v(0.55, 0.6, 1.85));
    b.keypoint("taillight", v(0.55, 0.6, -1.85));
    b.keypoint("roof_front", v(0.0, 1.3, 0.3));
    b.keypoint("roof_back", v(0.0, 1.3, -0.7));
    b.finish("car")
}

pub fn aeroplane() -> ShapeModel {
    let mut b = Builder::new();
    b.ellipsoid(v(0.0, 0.0, 0.0), v(0.35, 0.35, 2.5), 110, |_| true);
    b.ellipsoid(v(0.0, 0.0, 0.2), v(2.6, 0.08, 0.5), 90, |u| u.x > 0.12);
    b.ellipsoid(v(0.0, 0.1, -2.2), v(0.9, 0.05, 0.3), 30, |u| u.x > 0.3);
    b.ellipsoid(v(0.0, 0.6, -2.2), v(0.06, 0.6, 0.35), 24, |u| u.y > 0.0);
    b.keypoint("nose", v(0.0, 0.0, 2.5));
    b.keypoint("tail_top", v(0.0, 1.2, -2.2));
    b.keypoint("belly", v(0.0, -0.35, 0.0));
    b.keypoint("wing_tip", v(2.6, 0.0, 0.2));
    b.keypoint("stabilizer_tip", v(0.9, 0.1, -2.2));
    b.keypoint("engine", v(1.1, -0.2, 0.6));
    b.finish("aeroplane")
}

pub fn boat() -> ShapeModel {
    let mut b = Builder::new();
    b.ellipsoid(v(0.0, 0.3, 0.0), v(0.7, 0.6, 2.5), 190, |u| u.y < 0.1);
    b.ellipsoid(v(0.0, 0.6, -0.5), v(0.5, 0.45, 0.75), 50, |u| u.y > -0.3);
    b.ellipsoid(v(0.0, 1.5, 0.4), v(0.06, 1.0, 0.06), 20, |_| true);
    b.keypoint("bow", v(0.0, 0.35, 2.5));
    b.keypoint("mast_top", v(0.0, 2.5, 0.4));
    b.keypoint("keel", v(0.0, -0.3, 0.0));
    b.keypoint("stern", v(0.6, 0.35, -2.2));
    b.keypoint("cabin_front", v(0.45, 0.95, 0.1));
    b.keypoint("cabin_back", v(0.45, 0.95, -1.1));
    b.finish("boat")
}

/// Car, aeroplane and boat models.
pub fn builtin_models() -> Vec<ShapeModel> {
    vec![car(), aeroplane(), boat()]
}

pub fn builtin_model(name: &str) -> Result<ShapeModel> {
    builtin_models()
        .into_iter()
        .find(|m| m.class_id == name)
        .ok_or_else(|| Error::InvalidInput(format!("unknown model `{name}` (expected car, aeroplane or boat)")))
}
