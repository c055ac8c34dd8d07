//! Rigid scaled-orthographic factorization with missing data and row weights.
//!
//! The objective is
//!
//! ```text
//! J = Σ_f w_f Σ_{k known in f} ‖W_fk − (s_f Π R_f S_k + t_f)‖²
//! ```
//!
//! Initialization completes the matrix with an affine rank-3 model (fill,
//! center, weighted truncated SVD, refill), upgrades the affine motion to a
//! metric one, and projects every 2×3 block onto `s·(two rows of a rotation)`.
//! Refinement alternates exact block minimizations: per-point weighted least
//! squares for the shape, and per-frame scaled orthographic Procrustes for
//! the motion. Every block step is a minimizer of its subproblem, so the
//! residual never increases.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Matrix3xX, Matrix4, Matrix6, SVector, Vector2, Vector3, Vector4, Vector6};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Above this many entries the rank-3 fit uses subspace iteration.
const DENSE_SVD_LIMIT: usize = 60_000;
const SEED_STARTS: usize = 5;
const SEED_FRAMES: usize = 12;

/// Partially observed `2F × K` measurement matrix. Rows `2f` and `2f + 1`
/// hold the x and y coordinates of frame `f` and share one mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationMatrix<T: Scalar> {
    values: DMatrix<T>,
    known: Vec<bool>,
    row_weights: Vec<T>,
}

impl<T: Scalar> ObservationMatrix<T> {
    /// All-missing matrix with unit weights.
    pub fn new(frames: usize, points: usize) -> Self {
        Self {
            values: DMatrix::zeros(2 * frames, points),
            known: vec![false; frames * points],
            row_weights: vec![T::one(); frames],
        }
    }

    pub fn frames(&self) -> usize {
        self.row_weights.len()
    }

    pub fn points(&self) -> usize {
        self.values.ncols()
    }

    pub fn set(&mut self, frame: usize, point: usize, value: Vector2<T>) {
        self.values[(2 * frame, point)] = value.x;
        self.values[(2 * frame + 1, point)] = value.y;
        let idx = frame * self.points() + point;
        self.known[idx] = true;
    }

    pub fn clear(&mut self, frame: usize, point: usize) {
        self.values[(2 * frame, point)] = T::zero();
        self.values[(2 * frame + 1, point)] = T::zero();
        let idx = frame * self.points() + point;
        self.known[idx] = false;
    }

    #[inline]
    pub fn is_known(&self, frame: usize, point: usize) -> bool {
        self.known[frame * self.points() + point]
    }

    pub fn get(&self, frame: usize, point: usize) -> Option<Vector2<T>> {
        self.is_known(frame, point)
            .then(|| Vector2::new(self.values[(2 * frame, point)], self.values[(2 * frame + 1, point)]))
    }

    pub fn values(&self) -> &DMatrix<T> {
        &self.values
    }

    pub fn row_weights(&self) -> &[T] {
        &self.row_weights
    }

    pub fn set_row_weight(&mut self, frame: usize, weight: T) {
        self.row_weights[frame] = weight;
    }

    pub fn set_row_weights(&mut self, weights: Vec<T>) -> Result<()> {
        if weights.len() != self.frames() {
            return Err(Error::InvalidInput(format!(
                "{} row weights for {} frames",
                weights.len(),
                self.frames()
            )));
        }
        self.row_weights = weights;
        Ok(())
    }

    pub fn known_in_frame(&self, frame: usize) -> usize {
        let k = self.points();
        self.known[frame * k..(frame + 1) * k].iter().filter(|b| **b).count()
    }

    pub fn known_in_point(&self, point: usize) -> usize {
        (0..self.frames()).filter(|&f| self.is_known(f, point)).count()
    }

    /// Frame-major `F × K` mask.
    pub fn mask(&self) -> &[bool] {
        &self.known
    }

    /// Copy with frame rows duplicated `counts[f]` times, all with unit weight.
    pub fn duplicated_rows(&self, counts: &[usize]) -> Self {
        let k = self.points();
        let total: usize = counts.iter().sum();
        let mut out = Self::new(total, k);
        let mut row = 0;
        for (f, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                for p in 0..k {
                    if let Some(v) = self.get(f, p) {
                        out.set(row, p, v);
                    }
                }
                row += 1;
            }
        }
        out
    }

    /// Checks the structural invariants. Returns frames with fewer than four
    /// known points, which are flagged rather than rejected.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.frames() < 2 || self.points() == 0 {
            return Err(Error::InsufficientObservations(format!(
                "{} frames x {} points",
                self.frames(),
                self.points()
            )));
        }
        if self.row_weights.iter().any(|w| !w.is_finite_scalar() || *w <= T::zero()) {
            return Err(Error::InvalidInput("row weights must be positive and finite".into()));
        }
        for f in 0..self.frames() {
            for p in 0..self.points() {
                if self.is_known(f, p)
                    && !(self.values[(2 * f, p)].is_finite_scalar() && self.values[(2 * f + 1, p)].is_finite_scalar())
                {
                    return Err(Error::NonFinite("observation matrix"));
                }
            }
        }
        if let Some(p) = (0..self.points()).find(|&p| self.known_in_point(p) < 2) {
            return Err(Error::InsufficientObservations(format!(
                "column {p} has {} known frames, need 2",
                self.known_in_point(p)
            )));
        }
        Ok((0..self.frames()).filter(|&f| self.known_in_frame(f) < 4).collect())
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FactorizeOptions {
    pub max_iters: usize,
    /// Convergence threshold on the relative residual change.
    pub tol: f64,
    /// Accepted for interface stability; the algorithm is deterministic.
    pub seed: u64,
    /// Iteration cap of the affine completion used for initialization.
    pub init_iters: usize,
}

impl Default for FactorizeOptions {
    fn default() -> Self {
        Self { max_iters: 500, tol: 1e-9, seed: 0, init_iters: 200 }
    }
}

#[derive(Clone, Debug)]
pub struct FactorizationResult<T: Scalar> {
    /// `3 × K` shape, centered, unit mean point norm.
    pub shape: Matrix3xX<T>,
    /// Per-frame scaled orthographic motion; frame 0 has identity rotation.
    pub motions: Vec<Camera<T>>,
    /// Model predictions for every entry.
    pub completed: DMatrix<T>,
    /// Weighted RMS reprojection error over known entries, in pixels.
    pub residual: T,
    pub iterations: usize,
    pub converged: bool,
    /// Residual after initialization and after each refinement sweep.
    pub residual_history: Vec<T>,
    /// Frames with fewer than four known points.
    pub flagged_frames: Vec<usize>,
}

impl<T: Scalar> FactorizationResult<T> {
    pub fn point(&self, k: usize) -> Vector3<T> {
        self.shape.column(k).into_owned()
    }

    /// Reflects depth: `S_z → −S_z` with matching rotations. Projections are unchanged.
    pub fn depth_flipped(&self) -> Self {
        let dz = Matrix3::from_diagonal(&Vector3::new(T::one(), T::one(), -T::one()));
        let mut out = self.clone();
        for mut c in out.shape.column_iter_mut() {
            c[2] = -c[2];
        }
        for m in out.motions.iter_mut() {
            *m = Camera::new_unchecked(dz * m.rotation() * dz, m.scale(), *m.translation());
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct Motion<T: Scalar> {
    rows: Matrix2x3<T>,
    scale: T,
    translation: Vector2<T>,
}

impl<T: Scalar> Motion<T> {
    #[inline]
    fn project(&self, p: &Vector3<T>) -> Vector2<T> {
        self.rows * p * self.scale + self.translation
    }

    fn to_camera(self) -> Camera<T> {
        let r0: Vector3<T> = self.rows.row(0).transpose();
        let r1: Vector3<T> = self.rows.row(1).transpose();
        let r2 = r0.cross(&r1);
        Camera::new_unchecked(Matrix3::from_rows(&[r0.transpose(), r1.transpose(), r2.transpose()]), self.scale, self.translation)
    }

    fn from_camera(c: &Camera<T>) -> Self {
        Self { rows: c.rotation().fixed_rows::<2>(0).into_owned(), scale: c.scale(), translation: *c.translation() }
    }
}

/// Weighted sum of squared reprojection errors over known entries.
pub fn weighted_objective<T: Scalar>(obs: &ObservationMatrix<T>, motions: &[Camera<T>], shape: &Matrix3xX<T>) -> T {
    let mut total = T::zero();
    for (f, cam) in motions.iter().enumerate() {
        let mut frame = T::zero();
        for k in 0..obs.points() {
            if let Some(m) = obs.get(f, k) {
                frame += (m - cam.project_point(&shape.column(k).into_owned())).norm_squared();
            }
        }
        total += obs.row_weights[f] * frame;
    }
    total
}

/// Weighted RMS reprojection error over known entries.
pub fn reprojection_residual<T: Scalar>(obs: &ObservationMatrix<T>, result: &FactorizationResult<T>) -> Result<T> {
    if result.motions.len() != obs.frames() || result.shape.ncols() != obs.points() {
        return Err(Error::InvalidInput("result dimensions do not match the observation matrix".into()));
    }
    let motions: Vec<Motion<T>> = result.motions.iter().map(Motion::from_camera).collect();
    Ok(rms(obs, &motions, &result.shape))
}

fn objective<T: Scalar>(obs: &ObservationMatrix<T>, motions: &[Motion<T>], shape: &Matrix3xX<T>) -> T {
    let mut total = T::zero();
    for (f, m) in motions.iter().enumerate() {
        let mut frame = T::zero();
        for k in 0..obs.points() {
            if let Some(v) = obs.get(f, k) {
                frame += (v - m.project(&shape.column(k).into_owned())).norm_squared();
            }
        }
        total += obs.row_weights[f] * frame;
    }
    total
}

fn rms<T: Scalar>(obs: &ObservationMatrix<T>, motions: &[Motion<T>], shape: &Matrix3xX<T>) -> T {
    let denom = (0..obs.frames())
        .map(|f| obs.row_weights[f] * T::from_usize(obs.known_in_frame(f)).unwrap())
        .fold(T::zero(), |a, b| a + b);
    (objective(obs, motions, shape) / denom).sqrt()
}

/// Factorizes `obs` into a rigid shape and per-frame scaled orthographic motions.
pub fn factorize<T: Scalar>(obs: &ObservationMatrix<T>, opts: &FactorizeOptions) -> Result<FactorizationResult<T>> {
    let flagged_frames = obs.validate()?;
    let run = |(motions, mut shape): (Vec<Motion<T>>, Matrix3xX<T>)| {
        // Bring the shape to the least-squares optimum for the projected motions.
        shape_step(obs, &motions, &mut shape);
        refine(obs, opts, motions, shape, flagged_frames.clone())
    };
    let affine = initialize(obs, opts).map(run);
    if obs.known.iter().all(|b| *b) {
        return affine;
    }
    match (affine, incremental_init(obs, opts).map(run)) {
        (Ok(a), Some(b)) => Ok(if b.residual < a.residual { b } else { a }),
        (Err(_), Some(b)) => Ok(b),
        (a, None) => a,
    }
}

/// Refinement only, starting from `init` (same frames and points as `obs`).
pub fn factorize_from<T: Scalar>(
    obs: &ObservationMatrix<T>,
    opts: &FactorizeOptions,
    init: &FactorizationResult<T>,
) -> Result<FactorizationResult<T>> {
    let flagged_frames = obs.validate()?;
    if init.motions.len() != obs.frames() || init.shape.ncols() != obs.points() {
        return Err(Error::InvalidInput("initial factorization does not match the observations".into()));
    }
    let motions = init.motions.iter().map(Motion::from_camera).collect();
    Ok(refine(obs, opts, motions, init.shape.clone(), flagged_frames))
}

fn refine<T: Scalar>(
    obs: &ObservationMatrix<T>,
    opts: &FactorizeOptions,
    mut motions: Vec<Motion<T>>,
    mut shape: Matrix3xX<T>,
    flagged_frames: Vec<usize>,
) -> FactorizationResult<T> {
    let mut history = vec![rms(obs, &motions, &shape)];
    let mut converged = false;
    let mut iterations = 0;
    let tol = T::lit(opts.tol);
    while iterations < opts.max_iters {
        iterations += 1;
        for (f, m) in motions.iter_mut().enumerate() {
            motion_step(obs, f, m, &shape);
        }
        shape_step(obs, &motions, &mut shape);
        let r = rms(obs, &motions, &shape);
        let prev = *history.last().unwrap();
        history.push(r);
        if prev - r <= tol * prev || r <= T::lit(1e-13) * obs_scale(obs) {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("factorization stopped at max_iters={} (residual {})", opts.max_iters, history.last().unwrap().to_f64_lossy());
    }

    fix_gauge(&mut motions, &mut shape);
    let completed = predict_all(obs, &motions, &shape);
    let residual = rms(obs, &motions, &shape);
    FactorizationResult {
        shape,
        motions: motions.into_iter().map(Motion::to_camera).collect(),
        completed,
        residual,
        iterations,
        converged,
        residual_history: history,
        flagged_frames,
    }
}

fn obs_scale<T: Scalar>(obs: &ObservationMatrix<T>) -> T {
    obs.values.amax().max(T::one())
}

fn predict_all<T: Scalar>(obs: &ObservationMatrix<T>, motions: &[Motion<T>], shape: &Matrix3xX<T>) -> DMatrix<T> {
    let mut out = DMatrix::zeros(2 * obs.frames(), obs.points());
    for (f, m) in motions.iter().enumerate() {
        for k in 0..obs.points() {
            let p = m.project(&shape.column(k).into_owned());
            out[(2 * f, k)] = p.x;
            out[(2 * f + 1, k)] = p.y;
        }
    }
    out
}

/// Affine rank-3 completion followed by metric upgrade.
fn initialize<T: Scalar>(obs: &ObservationMatrix<T>, opts: &FactorizeOptions) -> Result<(Vec<Motion<T>>, Matrix3xX<T>)> {
    let (nf, nk) = (obs.frames(), obs.points());
    let mut filled = obs.values.clone();
    // Unknown entries start at the column mean of the known entries of the same coordinate.
    for k in 0..nk {
        for c in 0..2 {
            let (mut sum, mut n) = (T::zero(), 0usize);
            for f in 0..nf {
                if obs.is_known(f, k) {
                    sum += obs.values[(2 * f + c, k)];
                    n += 1;
                }
            }
            let mean = sum / T::from_usize(n).unwrap();
            for f in 0..nf {
                if !obs.is_known(f, k) {
                    filled[(2 * f + c, k)] = mean;
                }
            }
        }
    }
    let sqrt_w: Vec<T> = obs.row_weights.iter().map(|w| w.sqrt()).collect();
    let all_known = obs.known.iter().all(|b| *b);
    let iters = if all_known { 1 } else { opts.init_iters.max(1) };

    let mut factors = None;
    let mut basis = None;
    let mut prev_change = T::max_value().unwrap_or(T::lit(1e300));
    for _ in 0..iters {
        let (centers, m_hat, s_hat, sv) = affine_rank3(&filled, &sqrt_w, &mut basis);
        let mut change = T::zero();
        for f in 0..nf {
            for k in 0..nk {
                if obs.is_known(f, k) {
                    continue;
                }
                for c in 0..2 {
                    let r = 2 * f + c;
                    let v = centers[r] + (m_hat.row(r) * s_hat.column(k))[0];
                    change += (v - filled[(r, k)]).powi(2);
                    filled[(r, k)] = v;
                }
            }
        }
        factors = Some((centers, m_hat, s_hat, sv));
        let scale = obs_scale(obs);
        if change.sqrt() <= T::lit(1e-10) * scale || change >= prev_change && change.sqrt() <= T::lit(1e-6) * scale {
            break;
        }
        prev_change = change;
    }
    let (mut centers, mut m_hat, mut s_hat, sv) = factors.expect("at least one completion sweep");
    if sv[2] <= sv[0] * T::lit(1e-9) {
        return Err(Error::DegenerateMotion("observations have rank < 3; depth is unobservable".into()));
    }
    if !all_known {
        affine_als(obs, &mut centers, &mut m_hat, &mut s_hat, opts.init_iters.max(1));
    }
    let q = metric_upgrade(&m_hat)?;
    let q_inv = q.try_inverse().ok_or_else(|| Error::DegenerateMotion("singular metric upgrade".into()))?;
    let m_metric = &m_hat * q;
    let shape = q_inv * s_hat;

    let motions = (0..nf)
        .map(|f| {
            let block = Matrix2x3::from_rows(&[m_metric.row(2 * f).into_owned(), m_metric.row(2 * f + 1).into_owned()]);
            let (rows, scale) = project_scaled_rows(&block);
            Motion { rows, scale, translation: Vector2::new(centers[2 * f], centers[2 * f + 1]) }
        })
        .collect();
    Ok((motions, shape))
}

/// Alternating least squares on the affine model `x = A_f s_k + t_f`, known
/// entries only.
fn affine_als<T: Scalar>(
    obs: &ObservationMatrix<T>,
    centers: &mut [T],
    m_hat: &mut DMatrix<T>,
    s_hat: &mut Matrix3xX<T>,
    iters: usize,
) {
    let (nf, nk) = (obs.frames(), obs.points());
    let mut prev = T::max_value().unwrap_or(T::lit(1e300));
    let scale = obs_scale(obs);
    for _ in 0..iters {
        for f in 0..nf {
            let mut ata = Matrix4::<T>::zeros();
            let mut atb = [Vector4::<T>::zeros(); 2];
            for k in 0..nk {
                if let Some(x) = obs.get(f, k) {
                    let h = Vector4::new(s_hat[(0, k)], s_hat[(1, k)], s_hat[(2, k)], T::one());
                    ata += h * h.transpose();
                    atb[0] += h * x.x;
                    atb[1] += h * x.y;
                }
            }
            let ridge = ata.trace().max(T::one()) * T::lit(1e-12);
            let Some(ch) = (ata + Matrix4::identity() * ridge).cholesky() else { continue };
            for c in 0..2 {
                let sol = ch.solve(&atb[c]);
                for j in 0..3 {
                    m_hat[(2 * f + c, j)] = sol[j];
                }
                centers[2 * f + c] = sol[3];
            }
        }
        let mut sse = T::zero();
        for k in 0..nk {
            let mut ata = Matrix3::<T>::zeros();
            let mut atb = Vector3::<T>::zeros();
            for f in 0..nf {
                if let Some(x) = obs.get(f, k) {
                    let w = obs.row_weights[f];
                    for c in 0..2 {
                        let a: Vector3<T> = m_hat.fixed_view::<1, 3>(2 * f + c, 0).transpose();
                        ata += a * a.transpose() * w;
                        atb += a * ((x[c] - centers[2 * f + c]) * w);
                    }
                }
            }
            let ridge = ata.trace().max(T::lit(1e-300)) * T::lit(1e-12);
            if let Some(ch) = (ata + Matrix3::identity() * ridge).cholesky() {
                s_hat.set_column(k, &ch.solve(&atb));
            }
            for f in 0..nf {
                if let Some(x) = obs.get(f, k) {
                    for c in 0..2 {
                        let a = m_hat.fixed_view::<1, 3>(2 * f + c, 0);
                        let r = x[c] - centers[2 * f + c] - (a * s_hat.column(k))[0];
                        sse += obs.row_weights[f] * r * r;
                    }
                }
            }
        }
        if sse.sqrt() <= T::lit(1e-12) * scale || prev - sse <= T::lit(1e-12) * prev {
            break;
        }
        prev = sse;
    }
}

/// Row centers, `2F × 3` motion, `3 × K` shape and singular values of the
/// weighted rank-3 fit of a complete matrix.
fn affine_rank3<T: Scalar>(
    filled: &DMatrix<T>,
    sqrt_w: &[T],
    basis: &mut Option<DMatrix<T>>,
) -> (Vec<T>, DMatrix<T>, Matrix3xX<T>, Vector3<T>) {
    let (rows, cols) = filled.shape();
    let centers: Vec<T> = (0..rows).map(|r| filled.row(r).mean()).collect();
    let mut centered = filled.clone();
    for r in 0..rows {
        let w = sqrt_w[r / 2];
        for c in 0..cols {
            centered[(r, c)] = (centered[(r, c)] - centers[r]) * w;
        }
    }
    let svd = if rows * cols <= DENSE_SVD_LIMIT || rows.min(cols) <= 6 {
        centered.svd(true, true)
    } else {
        top3_svd(&centered, basis)
    };
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    let mut m_hat = DMatrix::zeros(rows, 3);
    let mut s_hat = Matrix3xX::zeros(cols);
    let mut sv = Vector3::zeros();
    for (j, &idx) in order.iter().take(3).enumerate() {
        let s = svd.singular_values[idx];
        sv[j] = s;
        let root = s.sqrt();
        for r in 0..rows {
            m_hat[(r, j)] = u[(r, idx)] * root / sqrt_w[r / 2];
        }
        for c in 0..cols {
            s_hat[(j, c)] = v_t[(idx, c)] * root;
        }
    }
    (centers, m_hat, s_hat, sv)
}

/// Leading three singular triplets by subspace iteration, warm-started from
/// the right basis of the previous call.
fn top3_svd<T: Scalar>(a: &DMatrix<T>, basis: &mut Option<DMatrix<T>>) -> nalgebra::SVD<T, nalgebra::Dyn, nalgebra::Dyn> {
    let (v0, sweeps) = match basis.take() {
        Some(v) => (v, 3),
        None => {
            // Deterministic start: a few spread-out rows of the matrix.
            let rows = a.nrows();
            let mut start = DMatrix::zeros(a.ncols(), 6);
            for j in 0..6 {
                start.set_column(j, &a.row(j * (rows - 1) / 5).transpose());
            }
            (start, 60)
        }
    };
    let mut v = v0.qr().q();
    for _ in 0..sweeps {
        let q = (a * &v).qr().q();
        v = (a.transpose() * q).qr().q();
    }
    let q = (a * &v).qr().q();
    let small = q.transpose() * a;
    let mut svd = small.svd(true, true);
    svd.u = svd.u.map(|ub| q * ub);
    *basis = Some(v);
    svd
}

/// Finds `Q` so that each 2×3 block of `m_hat · Q` has orthogonal rows of equal norm.
fn metric_upgrade<T: Scalar>(m_hat: &DMatrix<T>) -> Result<Matrix3<T>> {
    // Symmetric B = Q Qᵀ parametrized by its 6 upper-triangular entries.
    let quad = |a: &[T; 3], b: &[T; 3]| -> Vector6<T> {
        Vector6::new(
            a[0] * b[0],
            a[0] * b[1] + a[1] * b[0],
            a[0] * b[2] + a[2] * b[0],
            a[1] * b[1],
            a[1] * b[2] + a[2] * b[1],
            a[2] * b[2],
        )
    };
    let mut normal = Matrix6::<T>::zeros();
    let frames = m_hat.nrows() / 2;
    for f in 0..frames {
        let a = [m_hat[(2 * f, 0)], m_hat[(2 * f, 1)], m_hat[(2 * f, 2)]];
        let b = [m_hat[(2 * f + 1, 0)], m_hat[(2 * f + 1, 1)], m_hat[(2 * f + 1, 2)]];
        let norm = quad(&a, &a).norm().max(quad(&b, &b).norm()).max(T::lit(1e-300));
        let e1: Vector6<T> = (quad(&a, &a) - quad(&b, &b)) / norm;
        let e2: Vector6<T> = quad(&a, &b) / norm;
        normal += e1 * e1.transpose() + e2 * e2.transpose();
    }
    let eig = normal.symmetric_eigen();
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let top = eig.eigenvalues[order[5]].abs().max(T::lit(1e-300));
    if eig.eigenvalues[order[1]].abs() <= top * T::lit(1e-14) {
        return Err(Error::DegenerateMotion("views do not constrain the metric upgrade".into()));
    }
    let x: SVector<T, 6> = eig.eigenvectors.column(order[0]).into_owned();
    let mut b = Matrix3::new(x[0], x[1], x[2], x[1], x[3], x[4], x[2], x[4], x[5]);
    if b.trace() < T::zero() {
        b = -b;
    }
    let be = b.symmetric_eigen();
    let max_ev = be.eigenvalues.max();
    if max_ev <= T::zero() {
        return Err(Error::DegenerateMotion("metric upgrade has no positive solution".into()));
    }
    let floor = max_ev * T::lit(1e-6);
    let roots = be.eigenvalues.map(|v| v.max(floor).sqrt());
    Ok(be.eigenvectors * Matrix3::from_diagonal(&roots))
}

/// Nearest `s·R₂` (orthonormal rows, `s` = mean singular value) to a 2×3 block.
fn project_scaled_rows<T: Scalar>(block: &Matrix2x3<T>) -> (Matrix2x3<T>, T) {
    let svd = block.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let rows = u * v_t;
    let scale = (svd.singular_values[0] + svd.singular_values[1]) * T::lit(0.5);
    (rows, scale.max(T::lit(1e-12)))
}

/// Polar factor of a 2×3 matrix: the orthonormal-row matrix maximizing `⟨Z, R⟩`.
fn polar_rows<T: Scalar>(z: &Matrix2x3<T>) -> Matrix2x3<T> {
    let svd = z.svd(true, true);
    svd.u.unwrap() * svd.v_t.unwrap()
}

/// Exact minimization over `(s, R₂, t)` of frame `f`, by majorization for
/// the rotation and closed form for scale and translation.
fn motion_step<T: Scalar>(obs: &ObservationMatrix<T>, f: usize, motion: &mut Motion<T>, shape: &Matrix3xX<T>) {
    motion_step_on(obs, f, motion, shape, |_| true);
}

fn motion_step_on<T: Scalar>(
    obs: &ObservationMatrix<T>,
    f: usize,
    motion: &mut Motion<T>,
    shape: &Matrix3xX<T>,
    use_point: impl Fn(usize) -> bool,
) {
    let mut pts = Vec::new();
    let mut obsv = Vec::new();
    for k in (0..obs.points()).filter(|&k| use_point(k)) {
        if let Some(v) = obs.get(f, k) {
            pts.push(shape.column(k).into_owned());
            obsv.push(v);
        }
    }
    if pts.is_empty() {
        return;
    }
    let n = T::from_usize(pts.len()).unwrap();
    let mean_x = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mean_m = obsv.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mut c = Matrix2x3::<T>::zeros();
    let mut g = Matrix3::<T>::zeros();
    let mut mm = T::zero();
    for (p, m) in pts.iter().zip(&obsv) {
        let (dx, dm) = (p - mean_x, m - mean_m);
        c += dm * dx.transpose();
        g += dx * dx.transpose();
        mm += dm.norm_squared();
    }
    // Centered objective: mm − 2 s ⟨C, R⟩ + s² tr(R G Rᵀ).
    let centered = |rows: &Matrix2x3<T>, s: T| mm - T::lit(2.0) * s * c.dot(rows) + s * s * (rows * g * rows.transpose()).trace();
    let best_scale = |rows: &Matrix2x3<T>| {
        let den = (rows * g * rows.transpose()).trace();
        if den <= T::zero() {
            return None;
        }
        let s = c.dot(rows) / den;
        (s > T::zero()).then_some(s)
    };

    let mut rows = motion.rows;
    let mut s = motion.scale;
    let mut best = centered(&rows, s);

    // Closed-form proposal from the unconstrained affine fit, kept only if better.
    if let Some(g_inv) = g.try_inverse() {
        let (cand_rows, _) = project_scaled_rows(&(c * g_inv));
        if let Some(cs) = best_scale(&cand_rows) {
            let val = centered(&cand_rows, cs);
            if val < best {
                rows = cand_rows;
                s = cs;
                best = val;
            }
        }
    }

    let lambda = g.symmetric_eigen().eigenvalues.max();
    let lambda_i = Matrix3::identity() * lambda;
    for _ in 0..50 {
        let z = c * s + rows * (lambda_i - g) * (s * s);
        let cand_rows = polar_rows(&z);
        let cs = best_scale(&cand_rows).unwrap_or(s);
        let val = centered(&cand_rows, cs);
        if !(val <= best) {
            break;
        }
        let gain = best - val;
        rows = cand_rows;
        s = cs;
        best = val;
        if gain <= T::lit(1e-15) * (mm + T::one()) {
            break;
        }
    }
    motion.rows = rows;
    motion.scale = s;
    motion.translation = mean_m - rows * mean_x * s;
}

/// Per-point weighted least squares given the motions.
fn shape_step<T: Scalar>(obs: &ObservationMatrix<T>, motions: &[Motion<T>], shape: &mut Matrix3xX<T>) {
    for k in 0..obs.points() {
        if let Some(x) = solve_point(obs, k, |f| motions.get(f)) {
            shape.set_column(k, &x);
        }
    }
}

fn solve_point<'a, T: Scalar>(
    obs: &ObservationMatrix<T>,
    k: usize,
    motion: impl Fn(usize) -> Option<&'a Motion<T>>,
) -> Option<Vector3<T>> {
    let mut a = Matrix3::<T>::zeros();
    let mut b = Vector3::<T>::zeros();
    for f in 0..obs.frames() {
        if let (Some(v), Some(m)) = (obs.get(f, k), motion(f)) {
            let w = obs.row_weights[f];
            let p = m.rows * m.scale;
            a += p.transpose() * p * w;
            b += p.transpose() * (v - m.translation) * w;
        }
    }
    let svd = a.svd(true, true);
    let eps = svd.singular_values.max() * T::lit(1e-12);
    svd.solve(&b, eps).ok()
}

fn well_conditioned<T: Scalar>(m: &Matrix3<T>) -> bool {
    let ev = m.symmetric_eigen().eigenvalues;
    ev.max() > T::zero() && ev.min() > ev.max() * T::lit(1e-4)
}

/// Frames and points of a large fully observed block, grown greedily from
/// the best observed frames.
fn seed_block<T: Scalar>(obs: &ObservationMatrix<T>) -> Option<(Vec<usize>, Vec<usize>)> {
    let (nf, nk) = (obs.frames(), obs.points());
    let mut order: Vec<usize> = (0..nf).collect();
    order.sort_by_key(|&f| (std::cmp::Reverse(obs.known_in_frame(f)), f));
    let mut best: Option<(usize, Vec<usize>, Vec<usize>)> = None;
    for &f0 in order.iter().take(SEED_STARTS) {
        let mut frames = vec![f0];
        let mut pts: Vec<usize> = (0..nk).filter(|&k| obs.is_known(f0, k)).collect();
        while frames.len() < SEED_FRAMES {
            let next = (0..nf)
                .filter(|g| !frames.contains(g))
                .map(|g| (pts.iter().filter(|&&k| obs.is_known(g, k)).count(), std::cmp::Reverse(g)))
                .max();
            let Some((count, std::cmp::Reverse(g))) = next else { break };
            if count < 4 {
                break;
            }
            frames.push(g);
            pts.retain(|&k| obs.is_known(g, k));
            let score = frames.len() * pts.len();
            if frames.len() >= 3 && best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, frames.clone(), pts.clone()));
            }
        }
    }
    best.map(|(_, f, p)| (f, p))
}

/// Rigid start grown from [`seed_block`]: frames are resected once four of
/// their points are placed and points triangulated once two of their frames are.
fn incremental_init<T: Scalar>(obs: &ObservationMatrix<T>, opts: &FactorizeOptions) -> Option<(Vec<Motion<T>>, Matrix3xX<T>)> {
    let (nf, nk) = (obs.frames(), obs.points());
    let (frames, points) = seed_block(obs)?;
    let mut sub = ObservationMatrix::new(frames.len(), points.len());
    sub.row_weights = frames.iter().map(|&f| obs.row_weights[f]).collect();
    for (i, &f) in frames.iter().enumerate() {
        for (j, &k) in points.iter().enumerate() {
            sub.set(i, j, obs.get(f, k)?);
        }
    }
    let (m0, s0) = initialize(&sub, opts).ok()?;
    let mut motions: Vec<Option<Motion<T>>> = vec![None; nf];
    let mut shape = Matrix3xX::zeros(nk);
    let mut placed = vec![false; nk];
    for (i, &f) in frames.iter().enumerate() {
        motions[f] = Some(m0[i]);
    }
    for (j, &k) in points.iter().enumerate() {
        shape.set_column(k, &s0.column(j));
        placed[k] = true;
    }
    loop {
        let mut progress = false;
        let mut ready: Vec<(usize, usize)> = (0..nf)
            .filter(|&f| motions[f].is_none())
            .map(|f| ((0..nk).filter(|&k| placed[k] && obs.is_known(f, k)).count(), f))
            .filter(|&(n, _)| n >= 4)
            .collect();
        ready.sort_by_key(|&(n, f)| (std::cmp::Reverse(n), f));
        for (_, f) in ready {
            let cols: Vec<usize> = (0..nk).filter(|&k| placed[k] && obs.is_known(f, k)).collect();
            let n = T::from_usize(cols.len()).unwrap();
            let mean = cols.iter().fold(Vector3::zeros(), |a, &k| a + shape.column(k)) / n;
            let g = cols.iter().fold(Matrix3::zeros(), |a, &k| {
                let d: Vector3<T> = shape.column(k) - mean;
                a + d * d.transpose()
            });
            if !well_conditioned(&g) {
                continue;
            }
            let mut m = Motion { rows: Matrix2x3::identity(), scale: T::one(), translation: Vector2::zeros() };
            motion_step_on(obs, f, &mut m, &shape, |k| placed[k]);
            motions[f] = Some(m);
            progress = true;
        }
        for k in 0..nk {
            if placed[k] {
                continue;
            }
            let a = (0..nf).filter(|&f| obs.is_known(f, k)).filter_map(|f| motions[f].as_ref()).fold(Matrix3::zeros(), |a, m| {
                let p = m.rows * m.scale;
                a + p.transpose() * p
            });
            if !well_conditioned(&a) {
                continue;
            }
            if let Some(p) = solve_point(obs, k, |f| motions[f].as_ref()) {
                shape.set_column(k, &p);
                placed[k] = true;
                progress = true;
            }
        }
        if !progress {
            break;
        }
    }
    if !placed.iter().all(|p| *p) {
        return None;
    }
    motions.into_iter().collect::<Option<Vec<_>>>().map(|m| (m, shape))
}

/// Frame 0 rotation = identity, shape centroid at the origin, unit mean point norm.
fn fix_gauge<T: Scalar>(motions: &mut [Motion<T>], shape: &mut Matrix3xX<T>) {
    let Some(first) = motions.first() else { return };
    let g = first.to_camera().rotation().to_owned();
    // R_f → R_f Gᵀ, S → G S
    for m in motions.iter_mut() {
        m.rows *= g.transpose();
    }
    *shape = g * &*shape;
    let n = T::from_usize(shape.ncols()).unwrap();
    let centroid: Vector3<T> = shape.column_sum() / n;
    for mut c in shape.column_iter_mut() {
        c -= centroid;
    }
    for m in motions.iter_mut() {
        m.translation += m.rows * centroid * m.scale;
    }
    let mean_norm = shape.column_iter().map(|c| c.norm()).fold(T::zero(), |a, b| a + b) / n;
    if mean_norm > T::zero() {
        *shape /= mean_norm;
        for m in motions.iter_mut() {
            m.scale *= mean_norm;
        }
    }
    // Re-orthonormalize rows exactly against accumulated rounding.
    for m in motions.iter_mut() {
        let (rows, _) = project_scaled_rows(&m.rows);
        m.rows = rows;
    }
    motions[0].rows = Matrix2x3::new(T::one(), T::zero(), T::zero(), T::zero(), T::one(), T::zero());
}
