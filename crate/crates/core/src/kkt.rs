//! Null-space solution of the SQP subproblem
//!
//! ```text
//! min_d gᵀd + ½ dᵀHd   s.t.   c + Jd = 0
//! ```
//!
//! through its KKT system `[H Jᵀ; J 0] [d; y] = -[g; c]`.
//!
//! `J` is the `m x n` constraint Jacobian. A Householder QR factorization
//! `Jᵀ = [Y Z] [R; 0]` gives an orthonormal range basis `Y`, an orthonormal
//! null-space basis `Z` and the triangular factor `R` with `JJᵀ = RᵀR`.
//! The step splits as `d = u + v` with the normal part
//! `v = -Jᵀ(JJᵀ)⁻¹c` and the tangential part `u = Zw`, where `w` solves the
//! reduced system `(ZᵀHZ) w = -Zᵀ(g + Hv)`.
//!
//! The pseudoinverse below is `J† = (JJᵀ)⁻¹J`, an `m x n` matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::KktError;

/// Relative singular-value threshold for full row rank.
pub const RANK_TOL: f64 = 1e-10;

/// Inputs of one subproblem solve.
#[derive(Debug, Clone, PartialEq)]
pub struct KktInputs {
    pub h: DMatrix<f64>,
    pub jac: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c: DVector<f64>,
}

/// Step, multiplier, and the tangential/normal split of the step.
#[derive(Debug, Clone, PartialEq)]
pub struct KktSolution {
    pub d: DVector<f64>,
    pub y: DVector<f64>,
    /// Tangential component, in the null space of `J`.
    pub u: DVector<f64>,
    /// Normal component, in the row space of `J`.
    pub v: DVector<f64>,
    /// Orthonormal null-space basis used for the reduced solve.
    pub z: DMatrix<f64>,
    /// `|Hd + Jᵀy + g| + |Jd + c|`.
    pub residual: f64,
}

/// Householder QR of `Jᵀ` with the full orthogonal factor.
#[derive(Debug, Clone)]
pub struct JacobianFactor {
    range: DMatrix<f64>,
    null: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl JacobianFactor {
    pub fn new(jac: &DMatrix<f64>) -> Result<Self, KktError> {
        let (m, n) = jac.shape();
        if m > n {
            return Err(KktError::Dimension(format!("{m} constraints exceed {n} variables")));
        }
        let mut a = jac.transpose();
        let mut reflectors: Vec<DVector<f64>> = Vec::with_capacity(m);
        for k in 0..m {
            let x = a.view((k, k), (n - k, 1)).column(0).into_owned();
            let alpha = x.norm();
            let mut v = x;
            if alpha > 0.0 {
                let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
                v[0] += sign * alpha;
                let vn = v.norm();
                v /= vn;
                // A[k.., k..] -= 2 v (vᵀ A[k.., k..])
                let mut block = a.view_mut((k, k), (n - k, m - k));
                let vt_a = v.transpose() * &block;
                block -= 2.0 * &v * vt_a;
            } else {
                v.fill(0.0);
            }
            reflectors.push(v);
        }
        let r = a.view((0, 0), (m, m)).upper_triangle();

        let sv = r.singular_values();
        let sigma_max = sv.iter().cloned().fold(0.0, f64::max);
        let sigma_min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if m > 0 && !(sigma_min >= RANK_TOL * sigma_max.max(1.0)) {
            return Err(KktError::RankDeficient { sigma_min, sigma_max });
        }

        // Q = H_0 H_1 ... H_{m-1}, applied to the identity from the right-most reflector.
        let mut q = DMatrix::identity(n, n);
        for (k, v) in reflectors.iter().enumerate().rev() {
            let mut block = q.view_mut((k, 0), (n - k, n));
            let vt_q = v.transpose() * &block;
            block -= 2.0 * v * vt_q;
        }
        Ok(Self {
            range: q.columns(0, m).into_owned(),
            null: q.columns(m, n - m).into_owned(),
            r,
        })
    }

    /// Orthonormal basis of the row space of `J` (`n x m`).
    pub fn range_basis(&self) -> &DMatrix<f64> {
        &self.range
    }

    /// Orthonormal basis of the null space of `J` (`n x (n-m)`).
    pub fn null_basis(&self) -> &DMatrix<f64> {
        &self.null
    }

    /// `J† w = R⁻¹ Yᵀ w`.
    pub fn pinv_apply(&self, w: &DVector<f64>) -> DVector<f64> {
        let t = self.range.transpose() * w;
        self.r.solve_upper_triangular(&t).expect("checked nonsingular")
    }

    /// `(J†)ᵀ c = Y R⁻ᵀ c`.
    pub fn pinv_t_apply(&self, c: &DVector<f64>) -> DVector<f64> {
        let t = self
            .r
            .tr_solve_upper_triangular(c)
            .expect("checked nonsingular");
        &self.range * t
    }
}

fn check_inputs(inp: &KktInputs) -> Result<(), KktError> {
    let (m, n) = inp.jac.shape();
    if inp.h.shape() != (n, n) || inp.g.len() != n || inp.c.len() != m {
        return Err(KktError::Dimension(format!(
            "H {:?}, J {:?}, g {}, c {}",
            inp.h.shape(),
            inp.jac.shape(),
            inp.g.len(),
            inp.c.len()
        )));
    }
    let scale = inp.h.amax().max(1.0);
    let asym = (&inp.h - inp.h.transpose()).amax() / scale;
    if asym > 1e-12 {
        return Err(KktError::NotSymmetric(asym));
    }
    Ok(())
}

/// `|Hd + Jᵀy + g| + |Jd + c|`.
pub fn kkt_residual(inp: &KktInputs, d: &DVector<f64>, y: &DVector<f64>) -> f64 {
    (&inp.h * d + inp.jac.transpose() * y + &inp.g).norm() + (&inp.jac * d + &inp.c).norm()
}

/// Solve the subproblem with the factorization-derived null-space basis.
pub fn solve_kkt(inp: &KktInputs) -> Result<KktSolution, KktError> {
    check_inputs(inp)?;
    let fac = JacobianFactor::new(&inp.jac)?;
    let z = fac.null_basis().clone();
    solve_with(inp, &fac, z)
}

/// Solve with an existing factorization of the same Jacobian, e.g. to
/// reuse one factorization for several right-hand sides.
pub fn solve_kkt_factored(inp: &KktInputs, fac: &JacobianFactor) -> Result<KktSolution, KktError> {
    check_inputs(inp)?;
    if fac.range.nrows() != inp.jac.ncols() || fac.range.ncols() != inp.jac.nrows() {
        return Err(KktError::Dimension("factorization does not match the Jacobian".into()));
    }
    solve_with(inp, fac, fac.null_basis().clone())
}

/// Solve the subproblem with a caller-supplied orthonormal null-space basis.
pub fn solve_kkt_with_basis(inp: &KktInputs, z: &DMatrix<f64>) -> Result<KktSolution, KktError> {
    check_inputs(inp)?;
    let fac = JacobianFactor::new(&inp.jac)?;
    let (m, n) = inp.jac.shape();
    if z.shape() != (n, n - m) {
        return Err(KktError::Dimension(format!("null basis has shape {:?}", z.shape())));
    }
    solve_with(inp, &fac, z.clone())
}

fn solve_with(inp: &KktInputs, fac: &JacobianFactor, z: DMatrix<f64>) -> Result<KktSolution, KktError> {
    let v = -fac.pinv_t_apply(&inp.c);
    let u = if z.ncols() == 0 {
        DVector::zeros(v.len())
    } else {
        let reduced = z.transpose() * &inp.h * &z;
        let reduced = (&reduced + reduced.transpose()) * 0.5;
        let chol = reduced.cholesky().ok_or(KktError::IndefiniteReducedHessian)?;
        let rhs = -(z.transpose() * (&inp.g + &inp.h * &v));
        &z * chol.solve(&rhs)
    };
    let d = &u + &v;
    let y = -fac.pinv_apply(&(&inp.h * &d + &inp.g));
    let residual = kkt_residual(inp, &d, &y);
    Ok(KktSolution {
        d,
        y,
        u,
        v,
        z,
        residual,
    })
}

/// Dense LU solve of the full `(n+m)` KKT matrix. Kept as an independent
/// check on the null-space route.
pub fn solve_kkt_dense(inp: &KktInputs) -> Result<(DVector<f64>, DVector<f64>), KktError> {
    check_inputs(inp)?;
    let (m, n) = inp.jac.shape();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(&inp.h);
    k.view_mut((0, n), (n, m)).copy_from(&inp.jac.transpose());
    k.view_mut((n, 0), (m, n)).copy_from(&inp.jac);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-&inp.g));
    rhs.rows_mut(n, m).copy_from(&(-&inp.c));
    let sol = k.full_piv_lu().solve(&rhs).ok_or_else(|| {
        KktError::RankDeficient {
            sigma_min: 0.0,
            sigma_max: f64::NAN,
        }
    })?;
    Ok((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
}

/// Orthonormal basis of the null space of `J`.
pub fn null_space_basis(jac: &DMatrix<f64>) -> Result<DMatrix<f64>, KktError> {
    Ok(JacobianFactor::new(jac)?.null_basis().clone())
}

/// Split `d` into tangential `u` and normal `v = -Jᵀ(JJᵀ)⁻¹c`.
///
/// Requires `Jd = -c` up to round-off.
pub fn decompose_step(
    d: &DVector<f64>,
    jac: &DMatrix<f64>,
    c: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), KktError> {
    if d.len() != jac.ncols() || c.len() != jac.nrows() {
        return Err(KktError::Dimension("step or constraint length".into()));
    }
    let fac = JacobianFactor::new(jac)?;
    let mismatch = (jac * d + c).norm();
    if mismatch > 1e-8 * (1.0 + c.norm() + jac.norm() * d.norm()) {
        return Err(KktError::Inconsistent(mismatch));
    }
    let v = -fac.pinv_t_apply(c);
    Ok((d - &v, v))
}

/// `J† = (JJᵀ)⁻¹J` from the normal equations.
pub fn pseudo_inverse(jac: &DMatrix<f64>) -> Result<DMatrix<f64>, KktError> {
    let gram = jac * jac.transpose();
    let chol = gram.cholesky().ok_or(KktError::RankDeficient {
        sigma_min: 0.0,
        sigma_max: f64::NAN,
    })?;
    Ok(chol.solve(jac))
}

/// `M = J† (I - HZ(ZᵀHZ)⁻¹Zᵀ)`, an `m x n` matrix.
///
/// Built from the normal equations rather than the QR factor used by
/// [`solve_kkt`], so [`multiplier_via_operator`] is an independent check.
pub fn multiplier_operator(
    h: &DMatrix<f64>,
    jac: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<DMatrix<f64>, KktError> {
    let n = jac.ncols();
    let pinv = pseudo_inverse(jac)?;
    if z.ncols() == 0 {
        return Ok(pinv);
    }
    let hz = h * z;
    let reduced = z.transpose() * &hz;
    let chol = reduced.cholesky().ok_or(KktError::IndefiniteReducedHessian)?;
    let proj = DMatrix::identity(n, n) - &hz * chol.solve(&z.transpose());
    Ok(pinv * proj)
}

/// `y = M (H (J†)ᵀ c - g)`.
pub fn multiplier_via_operator(
    m_op: &DMatrix<f64>,
    h: &DMatrix<f64>,
    jac: &DMatrix<f64>,
    c: &DVector<f64>,
    g: &DVector<f64>,
) -> Result<DVector<f64>, KktError> {
    let pinv = pseudo_inverse(jac)?;
    Ok(m_op * (h * (pinv.transpose() * c) - g))
}

/// `argmin_y |g + Jᵀy|² = -(JJᵀ)⁻¹Jg`.
pub fn least_squares_multiplier(jac: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>, KktError> {
    let fac = JacobianFactor::new(jac)?;
    Ok(-fac.pinv_apply(g))
}
