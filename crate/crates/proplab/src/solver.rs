//! Least-squares fits `Y ≈ A X` regularized either by a column-group norm on
//! `A` or by switch scales `A diag(beta)`.
//!
//! `X` is `p × m` (one column per sample), `Y` is `n × m`, `A` is `n × p`.
//! Column `j` of `A` is the group of weights reading input `j`.

use nalgebra::{DMatrix, DVector};
use smallify_core::SeededRng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when the parameter change is below `tol` relative to their norm.
    pub tol: f64,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            restarts: 10,
            max_iter: 200_000,
            tol: 1e-10,
            seed: 0,
        }
    }
}

fn check_data(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<()> {
    if x.ncols() != y.ncols() {
        return Err(Error::Argument(format!(
            "x has {} samples but y has {}",
            x.ncols(),
            y.ncols()
        )));
    }
    if x.is_empty() || y.is_empty() {
        return Err(Error::Argument("empty data".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Argument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Argument("data contains non-finite values".into()));
    }
    Ok(())
}

fn column_norms(a: &DMatrix<f64>) -> Vec<f64> {
    a.column_iter().map(|c| c.norm()).collect()
}

fn largest_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    sym.clone().symmetric_eigen().eigenvalues.max().max(0.0)
}

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.normal())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupLassoProblem {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub lambda: f64,
}

impl GroupLassoProblem {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, lambda: f64) -> Result<Self> {
        check_data(&x, &y, lambda)?;
        Ok(GroupLassoProblem { x, y, lambda })
    }

    pub fn inputs(&self) -> usize {
        self.x.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.y.nrows()
    }

    pub fn fit(&self, a: &DMatrix<f64>) -> f64 {
        (&self.y - a * &self.x).norm_squared()
    }

    /// `‖Y − AX‖² + λ Σ_j ‖A_{:,j}‖₂`.
    pub fn objective(&self, a: &DMatrix<f64>) -> f64 {
        self.fit(a) + self.lambda * column_norms(a).iter().sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupLassoSolution {
    pub a: DMatrix<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Shrinks each column toward zero by `threshold` in Euclidean norm.
pub fn block_soft_threshold(a: &mut DMatrix<f64>, threshold: f64) {
    for mut col in a.column_iter_mut() {
        let norm = col.norm();
        if norm <= threshold {
            col.fill(0.0);
        } else {
            col *= 1.0 - threshold / norm;
        }
    }
}

/// Proximal gradient with step `1/L`, `L = 2 λ_max(X Xᵀ)`, from random starts.
pub fn solve_group_lasso(prob: &GroupLassoProblem, opts: &SolverOptions) -> Result<GroupLassoSolution> {
    check_data(&prob.x, &prob.y, prob.lambda)?;
    let (n, p) = (prob.outputs(), prob.inputs());
    let gram = &prob.x * prob.x.transpose();
    let yx = &prob.y * prob.x.transpose();
    let lip = 2.0 * largest_eigenvalue(&gram);
    if lip == 0.0 {
        let a = DMatrix::zeros(n, p);
        return Ok(GroupLassoSolution {
            objective: prob.objective(&a),
            a,
            iterations: 0,
        });
    }
    let root = SeededRng::new(opts.seed);
    let mut best: Option<GroupLassoSolution> = None;
    let mut worst_residual = 0.0f64;
    for r in 0..opts.restarts.max(1) {
        let mut a = if r == 0 {
            DMatrix::zeros(n, p)
        } else {
            random_matrix(&mut root.split(r as u64), n, p)
        };
        let mut converged = None;
        let mut residual = f64::INFINITY;
        for it in 1..=opts.max_iter {
            let grad = (&a * &gram - &yx) * 2.0;
            let mut next = &a - grad / lip;
            block_soft_threshold(&mut next, prob.lambda / lip);
            residual = (&next - &a).norm() / a.norm().max(1.0);
            a = next;
            if residual <= opts.tol {
                converged = Some(it);
                break;
            }
        }
        match converged {
            Some(iterations) => {
                let objective = prob.objective(&a);
                if best.as_ref().is_none_or(|b| objective < b.objective) {
                    best = Some(GroupLassoSolution {
                        a,
                        objective,
                        iterations,
                    });
                }
            }
            None => worst_residual = worst_residual.max(residual),
        }
    }
    best.ok_or(Error::Convergence {
        restarts: opts.restarts.max(1),
        iterations: opts.max_iter,
        residual: worst_residual,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmallifyProblem {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// L1 strength on `beta`.
    pub lambda: f64,
    /// Strength of `Σ|A_ij|^p`.
    pub lambda2: f64,
    /// 1 or 2.
    pub p: f64,
    /// Hold every column of `A` at unit Euclidean norm.
    pub unit_columns: bool,
}

impl SmallifyProblem {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, lambda: f64) -> Result<Self> {
        let prob = SmallifyProblem {
            x,
            y,
            lambda,
            lambda2: 0.0,
            p: 2.0,
            unit_columns: false,
        };
        prob.validate()?;
        Ok(prob)
    }

    pub fn constrained(mut self) -> Self {
        self.unit_columns = true;
        self
    }

    pub fn with_weight_norm(mut self, lambda2: f64, p: f64) -> Result<Self> {
        self.lambda2 = lambda2;
        self.p = p;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        check_data(&self.x, &self.y, self.lambda)?;
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::Argument(format!(
                "lambda2 must be finite and >= 0, got {}",
                self.lambda2
            )));
        }
        if self.p != 1.0 && self.p != 2.0 {
            return Err(Error::Argument(format!("p must be 1 or 2, got {}", self.p)));
        }
        Ok(())
    }

    pub fn fit(&self, a: &DMatrix<f64>, beta: &DVector<f64>) -> f64 {
        (&self.y - a * DMatrix::from_diagonal(beta) * &self.x).norm_squared()
    }

    pub fn weight_norm(&self, a: &DMatrix<f64>) -> f64 {
        a.iter().map(|v| v.abs().powf(self.p)).sum()
    }

    /// `‖Y − A diag(β) X‖² + λ‖β‖₁ + λ₂ Σ|A_ij|^p`.
    pub fn objective(&self, a: &DMatrix<f64>, beta: &DVector<f64>) -> f64 {
        self.fit(a, beta) + self.lambda * beta.lp_norm(1) + self.lambda2 * self.weight_norm(a)
    }

    /// Objectives at `(2^t A, β / 2^t)` for `t = 0..=steps`.
    pub fn scaling_sequence(&self, a: &DMatrix<f64>, beta: &DVector<f64>, steps: usize) -> Vec<f64> {
        (0..=steps)
            .map(|t| {
                let k = 2f64.powi(t as i32);
                self.objective(&(a * k), &(beta / k))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmallifySolution {
    pub a: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

fn normalize_columns(a: &mut DMatrix<f64>) {
    for (j, mut col) in a.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        } else {
            let len = col.len();
            col.fill(0.0);
            col[j % len] = 1.0;
        }
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Alternating proximal gradient on `A` and `beta`, each with the exact
/// Lipschitz step of its block; columns are renormalized after each `A` step
/// when constrained.
///
/// Unconstrained with `lambda > 0` and `lambda2 == 0` has no minimizer and is
/// refused.
pub fn solve_smallify(prob: &SmallifyProblem, opts: &SolverOptions) -> Result<SmallifySolution> {
    prob.validate()?;
    if !prob.unit_columns && prob.lambda > 0.0 && prob.lambda2 == 0.0 {
        return Err(Error::NoMinimum(
            "objective strictly decreases along (2^t A, beta / 2^t) when lambda > 0 and lambda2 = 0".into(),
        ));
    }
    let (n, p) = (prob.y.nrows(), prob.x.nrows());
    let xxt = &prob.x * prob.x.transpose();
    let yxt = &prob.y * prob.x.transpose();
    let root = SeededRng::new(opts.seed);
    let mut best: Option<SmallifySolution> = None;
    let mut worst_residual = 0.0f64;
    for r in 0..opts.restarts.max(1) {
        let mut rng = root.split(r as u64);
        let mut a = random_matrix(&mut rng, n, p);
        if prob.unit_columns {
            normalize_columns(&mut a);
        }
        let mut beta = DVector::from_fn(p, |_, _| rng.normal());
        let mut converged = None;
        let mut residual = f64::INFINITY;
        for it in 1..=opts.max_iter {
            let (a_prev, beta_prev) = (a.clone(), beta.clone());

            // A block: fit is ‖Y − A M‖² with M = diag(β) X.
            let d = DMatrix::from_diagonal(&beta);
            let mmt = &d * &xxt * &d;
            let mut lip = 2.0 * largest_eigenvalue(&mmt);
            if prob.p == 2.0 {
                lip += 2.0 * prob.lambda2;
            }
            if lip > 0.0 {
                let mut grad = (&a * &mmt - &yxt * &d) * 2.0;
                if prob.p == 2.0 {
                    grad += &a * (2.0 * prob.lambda2);
                }
                a -= grad / lip;
                if prob.p == 1.0 && prob.lambda2 > 0.0 {
                    a.apply(|v| *v = soft_threshold(*v, prob.lambda2 / lip));
                }
                if prob.unit_columns {
                    normalize_columns(&mut a);
                }
            }

            // β block: fit is quadratic with Hessian 2 (AᵀA ∘ XXᵀ).
            let ata = a.transpose() * &a;
            let h = ata.component_mul(&xxt);
            let lip = 2.0 * largest_eigenvalue(&h);
            if lip > 0.0 {
                let lin = a.transpose().component_mul(&yxt.transpose()).column_sum();
                let grad = (&h * &beta - lin) * 2.0;
                beta -= grad / lip;
                beta.apply(|v| *v = soft_threshold(*v, prob.lambda / lip));
            }

            let change = ((&a - &a_prev).norm_squared() + (&beta - &beta_prev).norm_squared()).sqrt();
            let scale = (a.norm_squared() + beta.norm_squared()).sqrt().max(1.0);
            residual = change / scale;
            if residual <= opts.tol {
                converged = Some(it);
                break;
            }
        }
        match converged {
            Some(iterations) => {
                let objective = prob.objective(&a, &beta);
                if best.as_ref().is_none_or(|b| objective < b.objective) {
                    best = Some(SmallifySolution {
                        a,
                        beta,
                        objective,
                        iterations,
                    });
                }
            }
            None => worst_residual = worst_residual.max(residual),
        }
    }
    best.ok_or(Error::Convergence {
        restarts: opts.restarts.max(1),
        iterations: opts.max_iter,
        residual: worst_residual,
    })
}

/// Splits `A` into unit columns and their norms, `A = A' diag(β)`.
///
/// A zero column maps to `β_j = 0` and a unit basis column.
pub fn factor_columns(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let beta = DVector::from_vec(column_norms(a));
    let mut unit = a.clone();
    normalize_columns(&mut unit);
    (unit, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(y: f64, x: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        (DMatrix::from_element(1, 1, x), DMatrix::from_element(1, 1, y))
    }

    #[test]
    fn scalar_group_lasso_matches_soft_threshold() {
        let (x, y) = scalar(1.0, 1.0);
        let prob = GroupLassoProblem::new(x, y, 0.1).unwrap();
        let sol = solve_group_lasso(&prob, &SolverOptions::default()).unwrap();
        assert!((sol.a[(0, 0)] - 0.95).abs() < 1e-8);
        assert!((sol.objective - 0.0975).abs() < 1e-10);
    }

    #[test]
    fn zero_lambda_is_least_squares() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -1.0, 0.2, 2.0, 0.3]);
        let y = DMatrix::from_row_slice(2, 3, &[0.3, -1.0, 2.0, 1.0, 0.1, 0.4]);
        let prob = GroupLassoProblem::new(x.clone(), y.clone(), 0.0).unwrap();
        let sol = solve_group_lasso(&prob, &SolverOptions::default()).unwrap();
        let xxt = &x * x.transpose();
        let ls = &y * x.transpose() * xxt.try_inverse().unwrap();
        let resid = (&y - &ls * &x).norm_squared();
        assert!((sol.objective - resid).abs() < 1e-8);
    }

    #[test]
    fn large_lambda_zeroes_everything() {
        let (x, y) = scalar(1.0, 2.0);
        let prob = GroupLassoProblem::new(x, y, 10.0).unwrap();
        let sol = solve_group_lasso(&prob, &SolverOptions::default()).unwrap();
        assert_eq!(sol.a[(0, 0)], 0.0);
        assert_eq!(sol.objective, 1.0);
    }

    #[test]
    fn too_few_iterations_report_convergence_failure() {
        let (x, y) = scalar(1.0, 1.0);
        let prob = GroupLassoProblem::new(x, y, 0.1).unwrap();
        let opts = SolverOptions {
            max_iter: 0,
            ..SolverOptions::default()
        };
        assert!(matches!(
            solve_group_lasso(&prob, &opts),
            Err(Error::Convergence { .. })
        ));
    }

    #[test]
    fn constrained_scalar_matches_group_lasso() {
        let (x, y) = scalar(1.0, 1.0);
        let prob = SmallifyProblem::new(x, y, 0.1).unwrap().constrained();
        let sol = solve_smallify(&prob, &SolverOptions::default()).unwrap();
        assert!((sol.objective - 0.0975).abs() < 1e-4);
        assert!((sol.beta[0].abs() - 0.95).abs() < 1e-6);
        assert!((sol.a[(0, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_without_weight_norm_is_refused() {
        let (x, y) = scalar(1.0, 1.0);
        let prob = SmallifyProblem::new(x, y, 0.1).unwrap();
        assert!(matches!(
            solve_smallify(&prob, &SolverOptions::default()),
            Err(Error::NoMinimum(_))
        ));
    }

    #[test]
    fn unregularized_smallify_reaches_least_squares() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -1.0, 0.2, 2.0, 0.3]);
        let y = DMatrix::from_row_slice(2, 3, &[0.3, -1.0, 2.0, 1.0, 0.1, 0.4]);
        let xxt = &x * x.transpose();
        let ls = &y * x.transpose() * xxt.try_inverse().unwrap();
        let resid = (&y - &ls * &x).norm_squared();
        let prob = SmallifyProblem::new(x, y, 0.0).unwrap();
        let sol = solve_smallify(&prob, &SolverOptions::default()).unwrap();
        assert!((sol.objective - resid).abs() < 1e-6);
    }

    #[test]
    fn factoring_gives_unit_columns() {
        let a = DMatrix::from_row_slice(2, 3, &[3.0, 0.0, 1.0, 4.0, 0.0, -1.0]);
        let (unit, beta) = factor_columns(&a);
        assert_eq!(beta.as_slice(), &[5.0, 0.0, 2f64.sqrt()]);
        for c in unit.column_iter() {
            assert!((c.norm() - 1.0).abs() < 1e-15);
        }
        let back = &unit * DMatrix::from_diagonal(&beta);
        assert!((back - a).norm() < 1e-15);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let x = DMatrix::from_element(1, 2, 1.0);
        let y = DMatrix::from_element(1, 3, 1.0);
        assert!(GroupLassoProblem::new(x.clone(), y, 0.1).is_err());
        let y = DMatrix::from_element(1, 2, 1.0);
        assert!(GroupLassoProblem::new(x.clone(), y.clone(), -1.0).is_err());
        assert!(SmallifyProblem::new(x, y, 0.1)
            .unwrap()
            .with_weight_norm(0.1, 3.0)
            .is_err());
    }
}
