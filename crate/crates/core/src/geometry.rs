//! Rotation metric, scaled orthographic projection, mirroring, similarity
//! alignment and camera bootstrapping from keypoints.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::camera::{check_rotation, Camera};
use crate::dataset::{Collection, FeatureGrid, Keypoint, KeypointSet, ObjectInstance, Vec2};
use crate::error::{Error, Result};
use crate::factorization::{factorize, FactorizeOptions, ObservationMatrix};
use crate::scalar::{all_finite, Scalar};
use crate::Real;

/// Projects 3D points through a scaled orthographic camera.
pub fn project<T: Scalar>(camera: &Camera<T>, points: &[Vector3<T>]) -> Result<Vec<Vector2<T>>> {
    camera.validate()?;
    if !all_finite(points.iter().flat_map(|p| p.iter().copied())) {
        return Err(Error::NonFinite("points"));
    }
    Ok(points.iter().map(|p| camera.project_point(p)).collect())
}

#[inline]
fn vee<T: Scalar>(m: &Matrix3<T>) -> Vector3<T> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

/// Rotation angle in `[0, π]` of a rotation matrix.
pub fn rotation_angle<T: Scalar>(r: &Matrix3<T>) -> T {
    let half = T::lit(0.5);
    let cos = (r.trace() - T::one()) * half;
    let sin = vee(r).norm() * half;
    sin.atan2(cos)
}

/// Axis-angle vector `ω` with `R = exp([ω]×)`, `|ω| ∈ [0, π]`.
pub fn log_so3<T: Scalar>(r: &Matrix3<T>) -> Vector3<T> {
    let theta = rotation_angle(r);
    let v = vee(r);
    if theta < T::lit(1e-6) {
        // sin θ ≈ θ: first-order term of the series.
        return v * T::lit(0.5);
    }
    if theta < T::pi() - T::lit(1e-4) {
        return v * (theta / (T::lit(2.0) * theta.sin()));
    }
    // Near π the skew part vanishes; the axis is the dominant eigenvector of
    // the symmetric part, (R + I) / 2 ≈ a aᵀ.
    let sym = (r + r.transpose()) * T::lit(0.5) + Matrix3::identity();
    let eig = sym.symmetric_eigen();
    let (idx, _) = eig.eigenvalues.argmax();
    let mut axis: Vector3<T> = eig.eigenvectors.column(idx).into_owned().normalize();
    if axis.dot(&v) < T::zero() {
        axis = -axis;
    }
    axis * theta
}

/// Riemannian distance `‖log(Ra Rbᵀ)‖_F`, equal to `√2·θ` for relative angle θ.
pub fn rotation_distance<T: Scalar>(ra: &Matrix3<T>, rb: &Matrix3<T>) -> Result<T> {
    check_rotation(ra)?;
    check_rotation(rb)?;
    Ok(rotation_distance_unchecked(ra, rb))
}

#[inline]
pub(crate) fn rotation_distance_unchecked<T: Scalar>(ra: &Matrix3<T>, rb: &Matrix3<T>) -> T {
    T::lit(std::f64::consts::SQRT_2) * rotation_angle(&(ra * rb.transpose()))
}

/// Relative viewing angle between two cameras, in degrees.
pub fn viewpoint_difference_deg(a: &Camera<Real>, b: &Camera<Real>) -> Real {
    rotation_angle(&(a.rotation() * b.rotation().transpose())).to_degrees()
}

/// Rotation taking world coordinates (x lateral, y up, z forward) to camera
/// coordinates (x right, y down, z along the viewing direction) for a
/// camera at the given azimuth and elevation, in radians. Azimuth 0 views
/// the object's front.
pub fn view_rotation<T: Scalar>(azimuth: T, elevation: T) -> Matrix3<T> {
    let (sa, ca) = azimuth.sin_cos();
    let (se, ce) = elevation.sin_cos();
    let (o, z) = (T::one(), T::zero());
    let ry = Matrix3::new(ca, z, sa, z, o, z, -sa, z, ca);
    let rx = Matrix3::new(o, z, z, z, ce, -se, z, se, ce);
    let flip = Matrix3::new(o, z, z, z, -o, z, z, z, -o);
    flip * rx * ry
}

/// Inverse of [`view_rotation`] for roll-free rotations: `(azimuth, elevation)`.
pub fn view_angles<T: Scalar>(r: &Matrix3<T>) -> (T, T) {
    let o = T::one();
    let flip = Matrix3::from_diagonal(&Vector3::new(o, -o, -o));
    let g = flip * r;
    (g[(0, 2)].atan2(g[(0, 0)]), g[(2, 1)].atan2(g[(1, 1)]))
}

/// `diag(-1, 1, 1)`: reflection through the object's symmetry plane.
pub fn lateral_reflection<T: Scalar>() -> Matrix3<T> {
    Matrix3::from_diagonal(&Vector3::new(-T::one(), T::one(), T::one()))
}

/// Camera observing the reflected shape in the horizontally flipped image of
/// an image `width` pixels wide.
pub fn mirror_camera<T: Scalar>(camera: &Camera<T>, width: T) -> Camera<T> {
    let d = lateral_reflection::<T>();
    let t = camera.translation();
    Camera::new_unchecked(d * camera.rotation() * d, camera.scale(), Vector2::new(width - t.x, t.y))
}

const MIRROR_SUFFIX: &str = "~mirror";

/// Id of the mirrored counterpart of an instance id.
pub fn mirrored_id(id: &str) -> String {
    match id.strip_suffix(MIRROR_SUFFIX) {
        Some(base) => base.to_string(),
        None => format!("{id}{MIRROR_SUFFIX}"),
    }
}

pub fn is_mirrored_id(id: &str) -> bool {
    id.ends_with(MIRROR_SUFFIX)
}

/// A mirrored view plus the grid correspondence to its source.
#[derive(Clone, Debug, PartialEq)]
pub struct Mirrored {
    pub instance: ObjectInstance,
    /// `grid_map[k]` is the mirrored grid index of source grid point `k`.
    pub grid_map: Vec<usize>,
}

/// Horizontally flips an instance, relabelling keypoints through `swap`.
pub fn mirror_instance(instance: &ObjectInstance, swap: &[usize]) -> Result<Mirrored> {
    let z = instance.keypoints.len();
    if swap.len() != z {
        return Err(Error::InvalidInput(format!(
            "symmetry swap has {} entries, instance has {z} keypoints",
            swap.len()
        )));
    }
    if swap.iter().enumerate().any(|(a, &b)| b >= z || swap[b] != a) {
        return Err(Error::InvalidInput("symmetry swap is not an involution".into()));
    }
    let w = instance.width();
    let flip = |p: &Vec2| Vec2::new(w - p.x, p.y);
    // Mirrored keypoint z is the flipped source keypoint swap[z]; names stay with the slot.
    let keypoints = (0..z)
        .map(|slot| {
            let src = &instance.keypoints.keypoints[swap[slot]];
            let name = instance.keypoints.keypoints[slot].name.clone();
            if src.visible {
                Keypoint { name, position: flip(&src.position), visible: true }
            } else {
                Keypoint::missing(name)
            }
        })
        .collect();
    let mirrored = ObjectInstance {
        id: mirrored_id(&instance.id),
        image_size: instance.image_size,
        mask: instance.mask.flipped(w),
        grid: FeatureGrid {
            points: instance.grid.points.iter().map(flip).collect(),
            descriptors: instance.grid.descriptors.clone(),
            stride: instance.grid.stride,
        },
        keypoints: KeypointSet { keypoints },
        camera: instance.camera.map(|c| mirror_camera(&c, w)),
        global_descriptor: instance.global_descriptor.clone(),
    };
    Ok(Mirrored { instance: mirrored, grid_map: (0..instance.grid.len()).collect() })
}

/// The collection followed by the mirrored counterpart of every instance.
pub fn with_mirrored_instances(collection: &Collection) -> Result<Collection> {
    let mut out = collection.clone();
    for inst in &collection.instances {
        out.instances.push(mirror_instance(inst, &collection.symmetry_swap)?.instance);
    }
    Ok(out)
}

/// Similarity `x ↦ scale · rotation · x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform3D<T: Scalar> {
    pub scale: T,
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Scalar> SimilarityTransform3D<T> {
    pub fn identity() -> Self {
        Self { scale: T::one(), rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Least-squares similarity mapping `a` onto `b` (Umeyama), with the
/// residual root-mean-square distance.
pub fn procrustes_align<T: Scalar>(
    a: &[Vector3<T>],
    b: &[Vector3<T>],
) -> Result<(SimilarityTransform3D<T>, T)> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "procrustes needs two clouds of equal length >= 3 (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    if !all_finite(a.iter().chain(b).flat_map(|p| p.iter().copied())) {
        return Err(Error::NonFinite("procrustes input"));
    }
    let n = T::from_usize(a.len()).unwrap();
    let mu_a = a.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    let mu_b = b.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Matrix3::zeros();
    let mut cov_a = Matrix3::zeros();
    let mut var_a = T::zero();
    for (pa, pb) in a.iter().zip(b) {
        let (da, db) = (pa - mu_a, pb - mu_b);
        cov += db * da.transpose();
        cov_a += da * da.transpose();
        var_a += da.norm_squared();
    }
    let spread = cov_a.symmetric_eigen().eigenvalues;
    let mut sorted = [spread[0], spread[1], spread[2]];
    sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
    if sorted[0] <= T::zero() || sorted[1] <= sorted[0] * T::lit(1e-12) {
        return Err(Error::Degenerate("source cloud has rank < 2 after centering".into()));
    }
    cov /= n;
    var_a /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Vector3::new(T::one(), T::one(), T::one());
    if (u.determinant() * v_t.determinant()) < T::zero() {
        d[2] = -T::one();
    }
    let rotation = u * Matrix3::from_diagonal(&d) * v_t;
    let scale = (svd.singular_values.component_mul(&d)).sum() / var_a;
    let translation = mu_b - rotation * mu_a * scale;
    let tf = SimilarityTransform3D { scale, rotation, translation };
    let sq = a.iter().zip(b).map(|(pa, pb)| (tf.apply(pa) - pb).norm_squared()).fold(T::zero(), |s, x| s + x);
    Ok((tf, (sq / n).sqrt()))
}

/// Options for [`estimate_cameras`].
#[derive(Clone, Debug, Default)]
pub struct CameraEstimation {
    /// Restrict to these keypoint indices (e.g. a rigid torso subset).
    pub keypoint_subset: Option<Vec<usize>>,
    pub factorize: FactorizeOptions,
}

/// Bootstraps a scaled orthographic camera per instance by factorizing the
/// keypoint observation matrix, with invisible keypoints as missing data.
/// The first instance's rotation is the identity.
pub fn estimate_cameras(collection: &Collection, opts: &CameraEstimation) -> Result<Vec<Camera<Real>>> {
    let n = collection.len();
    if n < 3 {
        return Err(Error::InsufficientObservations(format!("{n} instances, need at least 3")));
    }
    let subset: Vec<usize> = match &opts.keypoint_subset {
        Some(s) => s.clone(),
        None => (0..collection.keypoint_count()).collect(),
    };
    if let Some(&bad) = subset.iter().find(|&&z| z >= collection.keypoint_count()) {
        return Err(Error::InvalidInput(format!("keypoint index {bad} out of range")));
    }
    let mut obs = ObservationMatrix::<Real>::new(n, subset.len());
    for (f, inst) in collection.instances.iter().enumerate() {
        let mut count = 0;
        for (col, &z) in subset.iter().enumerate() {
            if let Some(p) = inst.keypoints.visible_position(z) {
                obs.set(f, col, p);
                count += 1;
            }
        }
        if count < 4 {
            return Err(Error::InsufficientObservations(format!(
                "instance `{}` has {count} visible keypoints, need 4",
                inst.id
            )));
        }
    }
    let result = factorize(&obs, &opts.factorize)?;
    Ok(result.motions)
}
