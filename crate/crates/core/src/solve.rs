//! Damped normal-equation solves for Gauss-Newton steps.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolveError {
    #[error("normal equations stayed singular after {0} damping escalations")]
    SingularNormalEquations(usize),
}

/// Relative pivot size below which `JᵀJ` is treated as singular.
const PIVOT_TOL: f64 = 1e-12;
const MAX_ESCALATIONS: usize = 30;

/// Result of a Gauss-Newton solve.
#[derive(Debug, Clone)]
pub struct GnStep {
    /// Step `g` such that the update is `q - g`.
    pub step: DVector<f64>,
    /// Levenberg damping used (0 for an undamped solve).
    pub lambda: f64,
}

fn cholesky_checked(a: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let scale = a.diagonal().iter().cloned().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let ch = a.clone().cholesky()?;
    let l = ch.l_dirty();
    let min_pivot = (0..a.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_pivot < PIVOT_TOL * scale {
        None
    } else {
        Some(ch)
    }
}

/// Solves `(JᵀJ + λI) g = Jᵀ b`. Tries the undamped system first and falls back to
/// `λ = 1e-8 · tr(JᵀJ) / dim`, escalating ×10 until the factorisation succeeds.
pub fn gauss_newton_step(j: &DMatrix<f64>, b: &DVector<f64>) -> Result<GnStep, SolveError> {
    damped_solve(&(j.transpose() * j), &(j.transpose() * b))
}

/// Solves `(A + λI) x = rhs` for a symmetric positive semi-definite `A` with the
/// same damping schedule as [`gauss_newton_step`].
pub fn damped_solve(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<GnStep, SolveError> {
    let dim = a.ncols();
    if let Some(ch) = cholesky_checked(a) {
        return Ok(GnStep { step: ch.solve(rhs), lambda: 0.0 });
    }
    let tr = a.trace();
    let mut lambda = if tr > 0.0 { 1e-8 * tr / dim as f64 } else { 1e-12 };
    for _ in 0..MAX_ESCALATIONS {
        let mut m = a.clone();
        for i in 0..dim {
            m[(i, i)] += lambda;
        }
        if let Some(ch) = m.cholesky() {
            return Ok(GnStep { step: ch.solve(rhs), lambda });
        }
        lambda *= 10.0;
    }
    Err(SolveError::SingularNormalEquations(MAX_ESCALATIONS))
}
