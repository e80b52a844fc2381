//! Primitives on SO(p), its Lie algebra so(p) and the Stiefel manifold St(d, p).
//!
//! # Generator convention
//!
//! so(p) is parameterized by `p(p-1)/2` coordinates. Coordinate `k` belongs to
//! the k-th index pair `(a, b)`, `a < b`, in lexicographic order, and its
//! generator `G_k` has `+1` at `(b, a)` and `-1` at `(a, b)`.
//!
//! For p = 3 the pairs are `(0,1), (0,2), (1,2)`, so the coordinates relate to
//! the usual angular velocity `(wx, wy, wz)` by `c = (wz, -wy, wx)`. See
//! [`so3_coords_from_omega`] and [`so3_omega_from_coords`].

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result, ShonanError};

/// Orthonormality tolerance used when validating user-supplied matrices.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Tolerance on `‖M + Mᵀ‖_F` accepted by [`vee`].
pub const SKEW_TOL: f64 = 1e-8;

/// Dimension of so(p).
#[inline]
pub fn tangent_dim(p: usize) -> usize {
    p * p.saturating_sub(1) / 2
}

/// Index pairs `(a, b)` with `a < b`, in the coordinate order.
pub fn generator_pairs(p: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..p).flat_map(move |a| (a + 1..p).map(move |b| (a, b)))
}

/// Coordinate index of the pair `(a, b)`, `a < b < p`.
#[inline]
pub fn generator_index(p: usize, a: usize, b: usize) -> usize {
    debug_assert!(a < b && b < p);
    a * (2 * p - a - 1) / 2 + (b - a - 1)
}

/// Tangent vector of so(p) in generator coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentCoords {
    p: usize,
    coords: DVector<f64>,
}

impl TangentCoords {
    pub fn new(p: usize, coords: DVector<f64>) -> Result<Self> {
        if coords.len() != tangent_dim(p) {
            return Err(invalid(format!(
                "so({p}) needs {} coordinates, got {}",
                tangent_dim(p),
                coords.len()
            )));
        }
        Ok(Self { p, coords })
    }

    pub fn from_slice(p: usize, coords: &[f64]) -> Result<Self> {
        Self::new(p, DVector::from_column_slice(coords))
    }

    pub fn zeros(p: usize) -> Self {
        Self {
            p,
            coords: DVector::zeros(tangent_dim(p)),
        }
    }

    /// The k-th unit coordinate vector.
    pub fn basis(p: usize, k: usize) -> Result<Self> {
        let dim = tangent_dim(p);
        if k >= dim {
            return Err(invalid(format!("basis index {k} out of range for so({p})")));
        }
        let mut coords = DVector::zeros(dim);
        coords[k] = 1.0;
        Ok(Self { p, coords })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn as_slice(&self) -> &[f64] {
        self.coords.as_slice()
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.coords
    }

    pub fn norm(&self) -> f64 {
        self.coords.norm()
    }

    pub fn scale(&self, t: f64) -> Self {
        Self {
            p: self.p,
            coords: &self.coords * t,
        }
    }
}

/// The matrix `Ḡ_p` whose columns are the column-major vectorized generators.
#[derive(Debug, Clone)]
pub struct GeneratorBasis {
    p: usize,
    matrix: DMatrix<f64>,
}

impl GeneratorBasis {
    pub fn new(p: usize) -> Self {
        let mut matrix = DMatrix::zeros(p * p, tangent_dim(p));
        for (k, (a, b)) in generator_pairs(p).enumerate() {
            // column-major: entry (row, col) lives at col * p + row
            matrix[(a * p + b, k)] = 1.0;
            matrix[(b * p + a, k)] = -1.0;
        }
        Self { p, matrix }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// The k-th generator as a p×p matrix.
    pub fn generator(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.p, self.p, self.matrix.column(k).as_slice())
    }
}

/// Skew-symmetric matrix of the coordinates in `v` (no length check).
pub(crate) fn hat_slice(p: usize, v: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(p, p);
    for ((a, b), &x) in generator_pairs(p).zip(v) {
        m[(b, a)] = x;
        m[(a, b)] = -x;
    }
    m
}

/// Coordinates of the skew part of `m` (no tolerance check).
pub(crate) fn vee_skew_part(m: &DMatrix<f64>) -> DVector<f64> {
    let p = m.nrows();
    DVector::from_iterator(
        tangent_dim(p),
        generator_pairs(p).map(|(a, b)| 0.5 * (m[(b, a)] - m[(a, b)])),
    )
}

/// Hat operator so(p) coordinates → p×p skew-symmetric matrix.
pub fn hat(v: &TangentCoords) -> DMatrix<f64> {
    hat_slice(v.p, v.coords.as_slice())
}

/// Inverse of [`hat`]; extracts the skew part of `m` when it is skew within [`SKEW_TOL`].
pub fn vee(m: &DMatrix<f64>) -> Result<TangentCoords> {
    if !m.is_square() {
        return Err(invalid(format!(
            "vee needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let sym = (m + m.transpose()).norm();
    if sym > SKEW_TOL {
        return Err(invalid(format!("matrix is not skew-symmetric (‖M+Mᵀ‖ = {sym:e})")));
    }
    Ok(TangentCoords {
        p: m.nrows(),
        coords: vee_skew_part(m),
    })
}

/// Maps standard angular-velocity coordinates `(wx, wy, wz)` to so(3) coordinates.
pub fn so3_coords_from_omega(omega: &Vector3<f64>) -> TangentCoords {
    TangentCoords {
        p: 3,
        coords: DVector::from_vec(vec![omega.z, -omega.y, omega.x]),
    }
}

/// Inverse of [`so3_coords_from_omega`].
pub fn so3_omega_from_coords(v: &TangentCoords) -> Result<Vector3<f64>> {
    if v.p != 3 {
        return Err(invalid(format!("expected so(3) coordinates, got so({})", v.p)));
    }
    let c = &v.coords;
    Ok(Vector3::new(c[2], -c[1], c[0]))
}

/// A p×p rotation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation {
    mat: DMatrix<f64>,
}

impl Rotation {
    pub fn identity(p: usize) -> Self {
        Self {
            mat: DMatrix::identity(p, p),
        }
    }

    /// Validates orthonormality and orientation to [`ORTHONORMAL_TOL`].
    pub fn from_matrix(mat: DMatrix<f64>) -> Result<Self> {
        if !mat.is_square() || mat.nrows() < 2 {
            return Err(invalid(format!(
                "rotation must be square with p >= 2, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let err = orthonormality_error(&mat);
        if err > ORTHONORMAL_TOL {
            return Err(invalid(format!("matrix is not orthonormal (‖QᵀQ - I‖ = {err:e})")));
        }
        let det = mat.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(invalid(format!("rotation determinant is {det}, expected +1")));
        }
        Ok(Self { mat })
    }

    pub(crate) fn from_matrix_unchecked(mat: DMatrix<f64>) -> Self {
        Self { mat }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }

    pub fn transpose(&self) -> Self {
        Self {
            mat: self.mat.transpose(),
        }
    }

    pub fn compose(&self, other: &Rotation) -> Result<Rotation> {
        if self.dim() != other.dim() {
            return Err(invalid("rotation dimensions differ"));
        }
        Ok(Self {
            mat: &self.mat * &other.mat,
        })
    }
}

/// `‖QᵀQ − I‖_F`.
pub fn orthonormality_error(m: &DMatrix<f64>) -> f64 {
    let c = m.ncols();
    (m.transpose() * m - DMatrix::<f64>::identity(c, c)).norm()
}

/// A p×d matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    mat: DMatrix<f64>,
}

impl StiefelPoint {
    pub fn from_matrix(mat: DMatrix<f64>) -> Result<Self> {
        if mat.nrows() < mat.ncols() || mat.ncols() == 0 {
            return Err(invalid(format!(
                "Stiefel point needs p >= d >= 1, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let err = orthonormality_error(&mat);
        if err > ORTHONORMAL_TOL {
            return Err(invalid(format!("columns are not orthonormal (‖SᵀS - I‖ = {err:e})")));
        }
        Ok(Self { mat })
    }

    pub(crate) fn from_matrix_unchecked(mat: DMatrix<f64>) -> Self {
        Self { mat }
    }

    pub fn p(&self) -> usize {
        self.mat.nrows()
    }

    pub fn d(&self) -> usize {
        self.mat.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }
}

/// Matrix exponential of a skew-symmetric matrix.
///
/// Closed form for p ≤ 3, scaling-and-squaring with a diagonal Padé approximant
/// otherwise. For skew input the Padé numerator and denominator are transposes
/// of one another and commute, so the result is orthogonal up to roundoff.
pub fn exp_skew(a: &DMatrix<f64>) -> DMatrix<f64> {
    let p = a.nrows();
    match p {
        0 | 1 => DMatrix::identity(p, p),
        2 => {
            let theta = a[(1, 0)];
            let (s, c) = theta.sin_cos();
            DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
        }
        3 => rodrigues(a),
        _ => pade_exp(a),
    }
}

fn rodrigues(a: &DMatrix<f64>) -> DMatrix<f64> {
    // ‖hat(w)‖_F² = 2‖w‖²
    let theta2 = 0.5 * a.norm_squared();
    let theta = theta2.sqrt();
    let (s_coef, c_coef) = if theta < 1e-4 {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let a2 = a * a;
    DMatrix::identity(3, 3) + a * s_coef + a2 * c_coef
}

fn pade_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    const DEGREE: usize = 8;
    let p = a.nrows();
    let norm1 = (0..p)
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0u32;
    if norm1 > 0.5 {
        squarings = (norm1 / 0.5).log2().ceil() as u32;
    }
    let scaled = a / 2f64.powi(squarings as i32);

    // c_k = (2m - k)! m! / ((2m)! k! (m - k)!)
    let mut coef = [0.0; DEGREE + 1];
    coef[0] = 1.0;
    for k in 1..=DEGREE {
        coef[k] = coef[k - 1] * (DEGREE + 1 - k) as f64 / (k as f64 * (2 * DEGREE + 1 - k) as f64);
    }
    let ident = DMatrix::<f64>::identity(p, p);
    let mut even = &ident * coef[0];
    let mut odd = DMatrix::<f64>::zeros(p, p);
    let mut power = ident.clone();
    for (k, c) in coef.iter().enumerate().skip(1) {
        power = &power * &scaled;
        if k % 2 == 0 {
            even += &power * *c;
        } else {
            odd += &power * *c;
        }
    }
    let numer = &even + &odd;
    let denom = &even - &odd;
    let mut result = denom
        .lu()
        .solve(&numer)
        .expect("Padé denominator of a scaled skew matrix is nonsingular");
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// `Q · exp(hat(v))`.
pub fn retract(q: &Rotation, v: &TangentCoords) -> Result<Rotation> {
    if q.dim() != v.p {
        return Err(invalid(format!(
            "retract: rotation is SO({}) but tangent is so({})",
            q.dim(),
            v.p
        )));
    }
    Ok(retract_slice(q, v.as_slice()))
}

pub(crate) fn retract_slice(q: &Rotation, v: &[f64]) -> Rotation {
    let p = q.dim();
    Rotation::from_matrix_unchecked(&q.mat * exp_skew(&hat_slice(p, v)))
}

/// Matrix of `v ↦ vee(Q hat(v) Qᵀ)`, so that `Q exp(hat(v)) = exp(hat(Ad·v)) Q`.
///
/// Entry `((r,s),(a,b))` is the 2×2 minor `Q_ra Q_sb − Q_rb Q_sa`.
pub fn adjoint(q: &Rotation) -> DMatrix<f64> {
    let p = q.dim();
    let m = &q.mat;
    let pairs: Vec<(usize, usize)> = generator_pairs(p).collect();
    DMatrix::from_fn(pairs.len(), pairs.len(), |row, col| {
        let ((r, s), (a, b)) = (pairs[row], pairs[col]);
        m[(r, a)] * m[(s, b)] - m[(r, b)] * m[(s, a)]
    })
}

/// `π(Q) = Q·[I_d; 0]`, the first d columns.
pub fn project_to_stiefel(q: &Rotation, d: usize) -> Result<StiefelPoint> {
    if d == 0 || d > q.dim() {
        return Err(invalid(format!(
            "cannot project SO({}) onto St({d}, {})",
            q.dim(),
            q.dim()
        )));
    }
    Ok(StiefelPoint::from_matrix_unchecked(q.mat.columns(0, d).into_owned()))
}

/// Completes `S` to a rotation `[S, V]` by Gram-Schmidt against the standard basis.
pub fn lift_stiefel_to_rotation(s: &StiefelPoint) -> Result<Rotation> {
    let (p, d) = (s.p(), s.d());
    if p == d {
        return Err(ShonanError::Unsupported(format!(
            "St({d}, {p}) → SO({p}) lift needs p > d"
        )));
    }
    let mut cols: Vec<DVector<f64>> = (0..d).map(|c| s.mat.column(c).into_owned()).collect();
    let mut used = vec![false; p];
    while cols.len() < p {
        // Pick the standard basis vector with the largest component outside the current span.
        let mut best: Option<(usize, DVector<f64>, f64)> = None;
        for (k, _) in used.iter().enumerate().filter(|(_, u)| !**u) {
            let mut e = DVector::zeros(p);
            e[k] = 1.0;
            let r = orthogonalize(e, &cols);
            let nr = r.norm();
            if best.as_ref().is_none_or(|(_, _, b)| nr > *b) {
                best = Some((k, r, nr));
            }
        }
        let (k, r, nr) = best.expect("fewer than p columns leaves unused candidates");
        if nr < 1e-8 {
            return Err(ShonanError::NumericalFailure(
                "Gram-Schmidt completion is rank deficient".into(),
            ));
        }
        used[k] = true;
        let r = orthogonalize(r / nr, &cols);
        let nr = r.norm();
        cols.push(r / nr);
    }
    let mut q = DMatrix::from_columns(&cols);
    if q.determinant() < 0.0 {
        let mut last = q.column_mut(p - 1);
        last.neg_mut();
    }
    Ok(Rotation::from_matrix_unchecked(q))
}

fn orthogonalize(mut v: DVector<f64>, basis: &[DVector<f64>]) -> DVector<f64> {
    for _ in 0..2 {
        for b in basis {
            let c = b.dot(&v);
            v.axpy(-c, b, 1.0);
        }
    }
    v
}

/// `block-diag(Q, 1) ∈ SO(p + 1)`.
pub fn lift_rotation(q: &Rotation) -> Rotation {
    let p = q.dim();
    let mut m = DMatrix::zeros(p + 1, p + 1);
    m.view_mut((0, 0), (p, p)).copy_from(&q.mat);
    m[(p, p)] = 1.0;
    Rotation::from_matrix_unchecked(m)
}

/// Body-frame tangent at `Q⁺ ∈ SO(p+1)` whose skew matrix carries `v` in the
/// last row (first d columns) and `-v` in the last column.
///
/// Its image under dΠ is the Stiefel tangent `[0; vᵀ]`.
pub fn escape_tangent(q_plus: &Rotation, v: &[f64]) -> Result<TangentCoords> {
    let p1 = q_plus.dim();
    let d = v.len();
    if d == 0 || d >= p1 {
        return Err(invalid(format!(
            "escape tangent needs 1 <= d < p+1, got d = {d}, p+1 = {p1}"
        )));
    }
    let mut coords = DVector::zeros(tangent_dim(p1));
    for (a, &x) in v.iter().enumerate() {
        coords[generator_index(p1, a, p1 - 1)] = x;
    }
    Ok(TangentCoords { p: p1, coords })
}

/// Output of [`nearest_rotation`].
#[derive(Debug, Clone)]
pub struct NearestRotation {
    pub rotation: Rotation,
    /// `σ_min / σ_max < 1e-10`: the projection is not unique.
    pub ill_conditioned: bool,
}

/// Projection of a square matrix onto SO(d): `U·diag(1, …, 1, det(UVᵀ))·Vᵀ`.
pub fn nearest_rotation(m: &DMatrix<f64>) -> Result<NearestRotation> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(invalid(format!(
            "nearest_rotation needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(ShonanError::NumericalFailure("non-finite matrix entry".into()));
    }
    let d = m.nrows();
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested Vᵀ");
    let sv = &svd.singular_values;
    let (imin, _) = sv.argmin();
    let smax = sv.max();
    let det = (u * v_t).determinant();
    let mut scaled_u = u.clone();
    if det < 0.0 {
        let mut c = scaled_u.column_mut(imin);
        c.neg_mut();
    }
    let rotation = Rotation::from_matrix_unchecked(scaled_u * v_t);
    let ill_conditioned = smax == 0.0 || sv[imin] / smax < 1e-10;
    debug_assert!(d > 0);
    Ok(NearestRotation {
        rotation,
        ill_conditioned,
    })
}

/// Haar-distributed sample from SO(p): QR of a Gaussian matrix with the
/// diagonal of R made positive, then one column flipped if det = -1.
pub fn random_rotation<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Rotation {
    let g = DMatrix::<f64>::from_fn(p, p, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            let mut c = q.column_mut(j);
            c.neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        let mut c = q.column_mut(0);
        c.neg_mut();
    }
    Rotation::from_matrix_unchecked(q)
}

/// Standard Rodrigues rotation about `axis` (normalized internally) by `angle`.
pub fn rotation_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Result<Rotation> {
    let n = axis.norm();
    if !(n > 0.0) {
        return Err(invalid("rotation axis must be nonzero"));
    }
    let omega = axis * (angle / n);
    let v = so3_coords_from_omega(&omega);
    Ok(Rotation::from_matrix_unchecked(exp_skew(&hat(&v))))
}

/// Logarithm on SO(2) and SO(3), with rotation angle in [0, π].
pub fn log_rotation(r: &Rotation) -> Result<TangentCoords> {
    let m = &r.mat;
    match r.dim() {
        2 => {
            let theta = m[(1, 0)].atan2(m[(0, 0)]);
            TangentCoords::from_slice(2, &[theta])
        }
        3 => {
            let cos_theta = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            let skew = (m - m.transpose()) * 0.5;
            let sin_theta = vee_skew_part(&skew).norm();
            let theta = sin_theta.atan2(cos_theta);
            if theta < 1e-6 {
                // log(R) ≈ skew(R) (1 + θ²/6)
                let coords = vee_skew_part(&skew) * (1.0 + theta * theta / 6.0);
                return TangentCoords::new(3, coords);
            }
            if std::f64::consts::PI - theta > 1e-4 {
                let coords = vee_skew_part(&skew) * (theta / sin_theta);
                return TangentCoords::new(3, coords);
            }
            // Near π: (R + Rᵀ)/2 − cos θ·I = (1 − cos θ)·a aᵀ.
            let sym = (m + m.transpose()) * 0.5 - DMatrix::identity(3, 3) * cos_theta;
            let (k, _) = (0..3)
                .map(|i| (i, sym[(i, i)]))
                .fold((0, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
            let col = sym.column(k);
            let mut axis = Vector3::new(col[0], col[1], col[2]);
            axis /= axis.norm();
            // Orient the axis with the (small) skew part when available.
            let w = so3_omega_from_coords(&TangentCoords {
                p: 3,
                coords: vee_skew_part(&skew),
            })?;
            if w.dot(&axis) < 0.0 {
                axis = -axis;
            }
            Ok(so3_coords_from_omega(&(axis * theta)))
        }
        p => Err(ShonanError::Unsupported(format!("log_rotation on SO({p})"))),
    }
}

/// Geodesic angle between two rotations of SO(2) or SO(3).
pub fn angular_distance(a: &Rotation, b: &Rotation) -> Result<f64> {
    let rel = a.transpose().compose(b)?;
    Ok(log_rotation(&rel)?.norm())
}
