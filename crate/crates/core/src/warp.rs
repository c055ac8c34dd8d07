//! Thin-plate-spline and box-affine interpolants used as spatial priors in
//! matching costs.

use nalgebra::{DMatrix, Matrix2, Matrix2x3, Vector2};

use crate::error::{Error, Result};
use crate::scalar::{all_finite, Scalar};

/// A map of the image plane.
pub trait PlanarMap<T: Scalar> {
    fn apply(&self, p: &Vector2<T>) -> Vector2<T>;

    fn apply_all(&self, pts: &[Vector2<T>]) -> Vec<Vector2<T>> {
        pts.iter().map(|p| self.apply(p)).collect()
    }
}

/// `U(r) = r² log r`, `U(0) = 0`, evaluated from `r²`.
#[inline]
pub fn tps_kernel<T: Scalar>(r2: T) -> T {
    if r2 <= T::zero() {
        T::zero()
    } else {
        T::lit(0.5) * r2 * r2.ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThinPlateSpline<T: Scalar> {
    pub control_points: Vec<Vector2<T>>,
    /// Applied to `[x; y; 1]`.
    pub affine_part: Matrix2x3<T>,
    pub kernel_weights: Vec<Vector2<T>>,
    pub regularization: T,
}

impl<T: Scalar> ThinPlateSpline<T> {
    /// `Σ_c w_cᵀ K w_c` over both output coordinates.
    pub fn bending_energy(&self) -> T {
        let n = self.control_points.len();
        let mut e = T::zero();
        for i in 0..n {
            for j in 0..n {
                let k = tps_kernel((self.control_points[i] - self.control_points[j]).norm_squared());
                e += k * self.kernel_weights[i].dot(&self.kernel_weights[j]);
            }
        }
        e
    }

    fn affine(&self, p: &Vector2<T>) -> Vector2<T> {
        let a = &self.affine_part;
        Vector2::new(
            a[(0, 0)] * p.x + a[(0, 1)] * p.y + a[(0, 2)],
            a[(1, 0)] * p.x + a[(1, 1)] * p.y + a[(1, 2)],
        )
    }
}

impl<T: Scalar> PlanarMap<T> for ThinPlateSpline<T> {
    fn apply(&self, p: &Vector2<T>) -> Vector2<T> {
        let mut out = self.affine(p);
        for (c, w) in self.control_points.iter().zip(&self.kernel_weights) {
            let u = tps_kernel((p - c).norm_squared());
            out += w * u;
        }
        out
    }
}

/// Why a spline could not be fit exactly.
fn degeneracy<T: Scalar>(src: &[Vector2<T>]) -> Option<&'static str> {
    let n = T::from_usize(src.len()).unwrap();
    let mean = src.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix2::zeros();
    for p in src {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let ev = cov.symmetric_eigen().eigenvalues;
    let (lo, hi) = (ev.min(), ev.max());
    if hi <= T::zero() || lo <= hi * T::lit(1e-10) {
        return Some("collinear control points");
    }
    let tol = hi.sqrt() * T::lit(1e-9);
    for i in 0..src.len() {
        for j in i + 1..src.len() {
            if (src[i] - src[j]).norm() <= tol {
                return Some("duplicate control points");
            }
        }
    }
    None
}

/// Closed-form spline with `g(src_k) ≈ dst_k`; exact when `lambda = 0`.
pub fn fit_tps<T: Scalar>(src: &[Vector2<T>], dst: &[Vector2<T>], lambda: T) -> Result<ThinPlateSpline<T>> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "thin plate spline needs matching point lists of length >= 3 (got {} and {})",
            src.len(),
            dst.len()
        )));
    }
    if !all_finite(src.iter().chain(dst).flat_map(|p| p.iter().copied())) {
        return Err(Error::NonFinite("spline control points"));
    }
    if !lambda.is_finite_scalar() || lambda < T::zero() {
        return Err(Error::InvalidInput("regularization must be finite and non-negative".into()));
    }
    match degeneracy(src) {
        Some(why) if lambda == T::zero() || why.starts_with("collinear") => {
            return Err(Error::Degenerate(why.into()));
        }
        _ => {}
    }
    let n = src.len();
    let mut l = DMatrix::<T>::zeros(n + 3, n + 3);
    let mut rhs = DMatrix::<T>::zeros(n + 3, 2);
    for i in 0..n {
        for j in 0..n {
            l[(i, j)] = tps_kernel((src[i] - src[j]).norm_squared());
        }
        l[(i, i)] += lambda;
        l[(i, n)] = T::one();
        l[(i, n + 1)] = src[i].x;
        l[(i, n + 2)] = src[i].y;
        l[(n, i)] = T::one();
        l[(n + 1, i)] = src[i].x;
        l[(n + 2, i)] = src[i].y;
        rhs[(i, 0)] = dst[i].x;
        rhs[(i, 1)] = dst[i].y;
    }
    let sol = l
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("singular spline system".into()))?;
    if !all_finite(sol.iter().copied()) {
        return Err(Error::Degenerate("singular spline system".into()));
    }
    let kernel_weights = (0..n).map(|i| Vector2::new(sol[(i, 0)], sol[(i, 1)])).collect();
    let affine_part = Matrix2x3::new(
        sol[(n + 1, 0)],
        sol[(n + 2, 0)],
        sol[(n, 0)],
        sol[(n + 1, 1)],
        sol[(n + 2, 1)],
        sol[(n, 1)],
    );
    Ok(ThinPlateSpline { control_points: src.to_vec(), affine_part, kernel_weights, regularization: lambda })
}

/// Evaluates a spline at many points.
pub fn eval_tps<T: Scalar>(tps: &ThinPlateSpline<T>, pts: &[Vector2<T>]) -> Result<Vec<Vector2<T>>> {
    if !all_finite(pts.iter().flat_map(|p| p.iter().copied())) {
        return Err(Error::NonFinite("spline evaluation points"));
    }
    Ok(tps.apply_all(pts))
}

/// `p ↦ matrix · p + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMap2D<T: Scalar> {
    pub matrix: Matrix2<T>,
    pub offset: Vector2<T>,
}

impl<T: Scalar> AffineMap2D<T> {
    pub fn identity() -> Self {
        Self { matrix: Matrix2::identity(), offset: Vector2::zeros() }
    }

    pub fn translation(offset: Vector2<T>) -> Self {
        Self { matrix: Matrix2::identity(), offset }
    }

    pub fn compose(&self, inner: &Self) -> Self {
        Self { matrix: self.matrix * inner.matrix, offset: self.matrix * inner.offset + self.offset }
    }
}

impl<T: Scalar> PlanarMap<T> for AffineMap2D<T> {
    fn apply(&self, p: &Vector2<T>) -> Vector2<T> {
        self.matrix * p + self.offset
    }
}

fn box_extent<T: Scalar>(corners: &[Vector2<T>; 4]) -> Result<(Vector2<T>, Vector2<T>)> {
    if !all_finite(corners.iter().flat_map(|p| p.iter().copied())) {
        return Err(Error::NonFinite("box corners"));
    }
    let mut lo = corners[0];
    let mut hi = corners[0];
    for c in &corners[1..] {
        lo = lo.inf(c);
        hi = hi.sup(c);
    }
    let tol = (hi - lo).amax() * T::lit(1e-12);
    let on = |v: T, a: T, b: T| (v - a).abs() <= tol || (v - b).abs() <= tol;
    if corners.iter().any(|c| !on(c.x, lo.x, hi.x) || !on(c.y, lo.y, hi.y)) {
        return Err(Error::InvalidInput("box corners are not axis aligned".into()));
    }
    if hi.x - lo.x <= T::zero() || hi.y - lo.y <= T::zero() {
        return Err(Error::Degenerate("zero-area box".into()));
    }
    Ok((lo, hi))
}

/// Anisotropic scaling plus offset mapping one axis-aligned box onto another.
pub fn fit_affine_box<T: Scalar>(src_box: &[Vector2<T>; 4], dst_box: &[Vector2<T>; 4]) -> Result<AffineMap2D<T>> {
    let (slo, shi) = box_extent(src_box)?;
    let (dlo, dhi) = box_extent(dst_box)?;
    let sx = (dhi.x - dlo.x) / (shi.x - slo.x);
    let sy = (dhi.y - dlo.y) / (shi.y - slo.y);
    let matrix = Matrix2::new(sx, T::zero(), T::zero(), sy);
    Ok(AffineMap2D { matrix, offset: dlo - matrix * slo })
}

/// Corners of the box `[lo, hi]`.
pub fn box_corners<T: Scalar>(lo: Vector2<T>, hi: Vector2<T>) -> [Vector2<T>; 4] {
    [lo, Vector2::new(hi.x, lo.y), hi, Vector2::new(lo.x, hi.y)]
}

/// Euclidean distance between `x_dst` and the mapped `x_src`.
#[inline]
pub fn warp_cost<T: Scalar, M: PlanarMap<T> + ?Sized>(x_src: &Vector2<T>, x_dst: &Vector2<T>, map: &M) -> T {
    (x_dst - map.apply(x_src)).norm()
}

/// Spatial prior used by the matching cost.
#[derive(Clone, Debug, PartialEq)]
pub enum WarpPrior<T: Scalar> {
    Tps(ThinPlateSpline<T>),
    Affine(AffineMap2D<T>),
}

impl<T: Scalar> PlanarMap<T> for WarpPrior<T> {
    #[inline]
    fn apply(&self, p: &Vector2<T>) -> Vector2<T> {
        match self {
            WarpPrior::Tps(t) => t.apply(p),
            WarpPrior::Affine(a) => a.apply(p),
        }
    }
}

/// Fits the keypoint-driven prior between two views.
///
/// Order of attempts: exact spline on the shared keypoints; ridge-regularized
/// spline when controls coincide; box-affine map on the keypoint boxes when
/// fewer than three usable controls remain or they are collinear; box-affine
/// map on `fallback_boxes` (object boxes) when the keypoint boxes are flat.
pub fn fit_keypoint_prior<T: Scalar>(
    src: &[Vector2<T>],
    dst: &[Vector2<T>],
    fallback_boxes: ([Vector2<T>; 4], [Vector2<T>; 4]),
) -> Result<WarpPrior<T>> {
    if src.len() >= 3 {
        match fit_tps(src, dst, T::zero()) {
            Ok(t) => return Ok(WarpPrior::Tps(t)),
            Err(Error::Degenerate(why)) if why.starts_with("duplicate") => {
                let n = T::from_usize(src.len()).unwrap();
                let mut msd = T::zero();
                for a in src {
                    for b in src {
                        msd += (a - b).norm_squared();
                    }
                }
                msd /= n * n;
                if let Ok(t) = fit_tps(src, dst, T::lit(1e-8) * msd) {
                    return Ok(WarpPrior::Tps(t));
                }
            }
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let bbox = |pts: &[Vector2<T>]| {
        let mut lo = pts[0];
        let mut hi = pts[0];
        for p in pts {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        box_corners(lo, hi)
    };
    if src.len() >= 2 && src.len() == dst.len() {
        if let Ok(a) = fit_affine_box(&bbox(src), &bbox(dst)) {
            return Ok(WarpPrior::Affine(a));
        }
    }
    fit_affine_box(&fallback_boxes.0, &fallback_boxes.1).map(WarpPrior::Affine)
}
