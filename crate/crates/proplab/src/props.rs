//! Checks of four properties of the switch objective:
//!
//! 1. With unit-norm columns, `min ‖Y − A' diag(β) X‖² + λ‖β‖₁` equals the
//!    group-lasso minimum `min ‖Y − AX‖² + λ Σ_j ‖A_{:,j}‖₂`.
//! 2. `(y − aβx)²` is not jointly convex in `(a, β)`.
//! 3. Without a weight norm, `(2^t A, β/2^t)` lowers the objective forever;
//!    with `λ₂ > 0` the sequence eventually rises.
//! 4. Negating any subset of switch scales together with the matching
//!    consumer columns leaves outputs and objective unchanged.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use smallify_core::{
    flip_sign, smallify_loss, Layer, Linear, Network64, PenaltyConfig, SeededRng, SwitchLayer, Tensor64,
};

use crate::error::{Error, Result};
use crate::solver::{
    factor_columns, solve_group_lasso, solve_smallify, GroupLassoProblem, SmallifyProblem, SolverOptions,
};

pub const EQUIVALENCE_TOL: f64 = 1e-3;
pub const SIGNFLIP_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Proposition {
    Equivalence = 1,
    NonConvexity = 2,
    NoMinimum = 3,
    SignSymmetry = 4,
}

impl Proposition {
    pub const ALL: [Proposition; 4] = [
        Proposition::Equivalence,
        Proposition::NonConvexity,
        Proposition::NoMinimum,
        Proposition::SignSymmetry,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for Proposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Proposition::Equivalence => "group-lasso equivalence",
            Proposition::NonConvexity => "non-convexity",
            Proposition::NoMinimum => "no minimum without weight norm",
            Proposition::SignSymmetry => "sign-flip symmetry",
        };
        write!(f, "{} ({name})", self.number())
    }
}

impl FromStr for Proposition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(Proposition::Equivalence),
            "2" => Ok(Proposition::NonConvexity),
            "3" => Ok(Proposition::NoMinimum),
            "4" => Ok(Proposition::SignSymmetry),
            other => Err(Error::Argument(format!("unknown proposition {other:?}, expected 1-4"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceTrial {
    pub seed: u64,
    pub lambda: f64,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub group_lasso: f64,
    pub smallify: f64,
    /// `|smallify − group_lasso|`.
    pub gap: f64,
    /// Objective gap after factoring the group-lasso solution into unit columns and norms.
    pub mapped_gap: f64,
    pub mapped_unit_columns: bool,
}

impl EquivalenceTrial {
    pub fn passed(&self) -> bool {
        self.gap < EQUIVALENCE_TOL && self.mapped_gap < 1e-9 && self.mapped_unit_columns
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub trials: Vec<EquivalenceTrial>,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.trials.iter().all(EquivalenceTrial::passed)
    }

    pub fn max_gap(&self) -> f64 {
        self.trials.iter().map(|t| t.gap).fold(0.0, f64::max)
    }
}

/// Compares both minima on one instance.
pub fn equivalence_trial(
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    lambda: f64,
    seed: u64,
    opts: &SolverOptions,
) -> Result<EquivalenceTrial> {
    let gl = GroupLassoProblem::new(x.clone(), y.clone(), lambda)?;
    let sm = SmallifyProblem::new(x.clone(), y.clone(), lambda)?.constrained();
    let opts = SolverOptions { seed, ..*opts };
    let gl_sol = solve_group_lasso(&gl, &opts)?;
    let sm_sol = solve_smallify(&sm, &opts)?;
    let (unit, beta) = factor_columns(&gl_sol.a);
    let mapped_unit_columns = unit.column_iter().all(|c| (c.norm() - 1.0).abs() < 1e-12);
    let mapped_gap = (sm.objective(&unit, &beta) - gl_sol.objective).abs();
    Ok(EquivalenceTrial {
        seed,
        lambda,
        x,
        y,
        group_lasso: gl_sol.objective,
        smallify: sm_sol.objective,
        gap: (sm_sol.objective - gl_sol.objective).abs(),
        mapped_gap,
        mapped_unit_columns,
    })
}

/// Seeded random 2×2 instances with two samples each.
pub fn verify_equivalence(seed: u64, trials: usize, opts: &SolverOptions) -> Result<EquivalenceReport> {
    let root = SeededRng::new(seed);
    let trials = (0..trials)
        .map(|i| {
            let mut rng = root.split(i as u64);
            let x = DMatrix::from_fn(2, 2, |_, _| rng.normal());
            let y = DMatrix::from_fn(2, 2, |_, _| rng.normal());
            let lambda = rng.uniform_range(0.1, 1.5);
            equivalence_trial(x, y, lambda, seed.wrapping_add(i as u64), opts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EquivalenceReport { trials })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NonconvexityReport {
    pub x: f64,
    pub f_s1: f64,
    pub f_s2: f64,
    pub f_mid: f64,
}

impl NonconvexityReport {
    pub fn holds(&self) -> bool {
        self.f_s1 == 0.0 && self.f_s2 == 0.0 && self.f_mid > 0.5 * self.f_s1 + 0.5 * self.f_s2
    }
}

/// Evaluates `f(a, β) = (0 − aβx)²` at `(0, 2)`, `(2, 0)` and their midpoint.
pub fn nonconvexity_witness(x: f64) -> Result<NonconvexityReport> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Argument(format!("x must be positive and finite, got {x}")));
    }
    let f = |a: f64, b: f64| (0.0 - a * b * x).powi(2);
    Ok(NonconvexityReport {
        x,
        f_s1: f(0.0, 2.0),
        f_s2: f(2.0, 0.0),
        f_mid: f(1.0, 1.0),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub fit: f64,
    /// Objectives along the scaling sequence with `λ₂ = 0`.
    pub unregularized: Vec<f64>,
    /// Same sequence with `λ₂ > 0`.
    pub regularized: Vec<f64>,
    pub lambda2: f64,
}

impl ScalingReport {
    pub fn strictly_decreasing(&self) -> bool {
        self.unregularized.windows(2).all(|w| w[1] < w[0])
    }

    pub fn bounded_below(&self) -> bool {
        self.unregularized.iter().all(|&v| v >= self.fit)
    }

    /// Step after which the regularized sequence only rises.
    pub fn turning_point(&self) -> Option<usize> {
        let r = &self.regularized;
        let t = (0..r.len().saturating_sub(1))
            .rev()
            .take_while(|&t| r[t + 1] > r[t])
            .last()?;
        Some(t)
    }

    pub fn eventually_increases(&self) -> bool {
        self.turning_point().is_some_and(|t| t + 1 < self.regularized.len())
    }

    pub fn passed(&self) -> bool {
        self.strictly_decreasing() && self.bounded_below() && self.eventually_increases()
    }
}

/// Scaling sequences from a random point of a random 2×2 instance.
///
/// Thirty doublings keep `λ‖β‖₁ / 2^t` above the rounding level of the fit term.
pub fn scaling_check(seed: u64, lambda: f64, lambda2: f64, steps: usize) -> Result<ScalingReport> {
    if !(lambda > 0.0 && lambda2 > 0.0) {
        return Err(Error::Argument("scaling check needs lambda > 0 and lambda2 > 0".into()));
    }
    let mut rng = SeededRng::new(seed);
    let x = DMatrix::from_fn(2, 2, |_, _| rng.normal());
    let y = DMatrix::from_fn(2, 2, |_, _| rng.normal());
    let a = DMatrix::from_fn(2, 2, |_, _| rng.normal());
    let beta = DVector::from_fn(2, |_, _| rng.uniform_range(0.5, 1.5));
    let plain = SmallifyProblem::new(x, y, lambda)?;
    let reg = plain.clone().with_weight_norm(lambda2, 2.0)?;
    Ok(ScalingReport {
        fit: plain.fit(&a, &beta),
        unregularized: plain.scaling_sequence(&a, &beta, steps),
        regularized: reg.scaling_sequence(&a, &beta, steps),
        lambda2,
    })
}

/// `Linear(3→4) → ReLU → Switch(4) → Linear(4→2)` with random scales and biases.
pub fn signflip_network(seed: u64) -> Result<Network64> {
    let mut rng = SeededRng::new(seed);
    let mut first = Linear::init(3, 4, &mut rng);
    first.bias = rng.normal_tensor(&[4]);
    let switch = SwitchLayer::init(4, &mut rng);
    let mut second = Linear::init(4, 2, &mut rng);
    second.bias = rng.normal_tensor(&[2]);
    Ok(Network64::new(
        vec![3],
        vec![
            Layer::Linear(first),
            Layer::Relu,
            Layer::Switch(switch),
            Layer::Linear(second),
        ],
    )?)
}

/// `‖Y − N(X)‖² + λ‖β‖₁ + λ₂ Σ‖W‖ₚᵖ`.
pub fn squared_error_objective(net: &Network64, x: &Tensor64, y: &Tensor64, penalty: &PenaltyConfig) -> Result<f64> {
    let out = net.predict(x)?;
    let fit = out.sub(y)?.data().iter().map(|d| d * d).sum::<f64>();
    Ok(smallify_loss(fit, net, penalty)?.total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignflipReport {
    /// Number of flip subsets evaluated.
    pub subsets: usize,
    pub base_objective: f64,
    pub min_objective: f64,
    pub max_objective: f64,
    pub max_output_diff: f64,
}

impl SignflipReport {
    pub fn spread(&self) -> f64 {
        self.max_objective - self.min_objective
    }

    pub fn passed(&self) -> bool {
        self.spread() < SIGNFLIP_TOL && self.max_output_diff < SIGNFLIP_TOL
    }
}

/// Applies `flips` as `(switch layer, channel)` pairs and compares against `net`.
pub fn signflip_check(
    net: &Network64,
    flips: &[(usize, usize)],
    x: &Tensor64,
    y: &Tensor64,
    penalty: &PenaltyConfig,
) -> Result<SignflipReport> {
    let base = squared_error_objective(net, x, y, penalty)?;
    let base_out = net.predict(x)?;
    let mut flipped = net.clone();
    for &(layer, channel) in flips {
        flip_sign(&mut flipped, layer, channel)?;
    }
    let obj = squared_error_objective(&flipped, x, y, penalty)?;
    let diff = flipped.predict(x)?.max_abs_diff(&base_out)?;
    Ok(SignflipReport {
        subsets: 1,
        base_objective: base,
        min_objective: base.min(obj),
        max_objective: base.max(obj),
        max_output_diff: diff,
    })
}

/// Evaluates every subset of switch channels; at most 20 channels in total.
pub fn signflip_orbit(net: &Network64, x: &Tensor64, y: &Tensor64, penalty: &PenaltyConfig) -> Result<SignflipReport> {
    let channels: Vec<(usize, usize)> = net
        .switch_indices()
        .into_iter()
        .flat_map(|idx| (0..net.switch(idx).expect("switch").channels()).map(move |c| (idx, c)))
        .collect();
    if channels.is_empty() {
        return Err(Error::Argument("network has no switch".into()));
    }
    if channels.len() > 20 {
        return Err(Error::Argument(format!(
            "{} switch channels is too many to enumerate",
            channels.len()
        )));
    }
    let base = squared_error_objective(net, x, y, penalty)?;
    let mut report = SignflipReport {
        subsets: 0,
        base_objective: base,
        min_objective: base,
        max_objective: base,
        max_output_diff: 0.0,
    };
    for mask in 0u32..(1 << channels.len()) {
        let subset: Vec<(usize, usize)> = channels
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &c)| c)
            .collect();
        let r = signflip_check(net, &subset, x, y, penalty)?;
        report.subsets += 1;
        report.min_objective = report.min_objective.min(r.min_objective);
        report.max_objective = report.max_objective.max(r.max_objective);
        report.max_output_diff = report.max_output_diff.max(r.max_output_diff);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropOutcome {
    pub proposition: Proposition,
    pub passed: bool,
    pub summary: String,
    /// Offending instances, filled on failure.
    pub dump: Option<String>,
}

fn run_one(prop: Proposition, seed: u64, trials: usize) -> Result<PropOutcome> {
    let opts = SolverOptions {
        seed,
        ..SolverOptions::default()
    };
    let (passed, summary, dump) = match prop {
        Proposition::Equivalence => {
            let r = verify_equivalence(seed, trials, &opts)?;
            let failing: Vec<String> = r
                .trials
                .iter()
                .filter(|t| !t.passed())
                .map(|t| format!("{t:?}"))
                .collect();
            (
                r.passed(),
                format!(
                    "{} instances, max gap {:.3e} (tolerance {EQUIVALENCE_TOL:e})",
                    r.trials.len(),
                    r.max_gap()
                ),
                failing,
            )
        }
        Proposition::NonConvexity => {
            let reports = [0.5, 1.0, 2.0, 3.0]
                .into_iter()
                .map(nonconvexity_witness)
                .collect::<Result<Vec<_>>>()?;
            let failing: Vec<String> = reports
                .iter()
                .filter(|r| !r.holds())
                .map(|r| format!("{r:?}"))
                .collect();
            let mids: Vec<String> = reports
                .iter()
                .map(|r| format!("x={} f(1,1)={}", r.x, r.f_mid))
                .collect();
            (
                failing.is_empty(),
                format!("f(0,2)=f(2,0)=0 < {}", mids.join(", ")),
                failing,
            )
        }
        Proposition::NoMinimum => {
            let reports = (0..trials.max(1))
                .map(|i| scaling_check(seed.wrapping_add(i as u64), 0.5, 1e-4, 30))
                .collect::<Result<Vec<_>>>()?;
            let failing: Vec<String> = reports
                .iter()
                .filter(|r| !r.passed())
                .map(|r| format!("{r:?}"))
                .collect();
            let turns: Vec<String> = reports
                .iter()
                .map(|r| r.turning_point().map_or("-".into(), |t| t.to_string()))
                .collect();
            (
                failing.is_empty(),
                format!(
                    "{} sequences of 30 doublings; lambda2=0 strictly decreasing, lambda2=1e-4 rising from step {}",
                    reports.len(),
                    turns.join("/")
                ),
                failing,
            )
        }
        Proposition::SignSymmetry => {
            let penalty = PenaltyConfig::new(0.3, 0.05, 2.0)?;
            let mut failing = Vec::new();
            let mut worst = 0.0f64;
            let mut subsets = 0;
            for i in 0..trials.max(1) {
                let s = seed.wrapping_add(i as u64);
                let net = signflip_network(s)?;
                let mut rng = SeededRng::new(s).split(1);
                let x = rng.normal_tensor(&[16, 3]);
                let y = rng.normal_tensor(&[16, 2]);
                let r = signflip_orbit(&net, &x, &y, &penalty)?;
                worst = worst.max(r.spread()).max(r.max_output_diff);
                subsets += r.subsets;
                if !r.passed() {
                    failing.push(format!("seed {s}: {r:?}"));
                }
            }
            (
                failing.is_empty(),
                format!("{subsets} flip subsets, max deviation {worst:.3e} (tolerance {SIGNFLIP_TOL:e})"),
                failing,
            )
        }
    };
    Ok(PropOutcome {
        proposition: prop,
        passed,
        summary,
        dump: (!dump.is_empty()).then(|| dump.join("\n")),
    })
}

/// Runs the selected propositions, all of them when `which` is `None`.
pub fn run(which: Option<Proposition>, seed: u64, trials: usize) -> Result<Vec<PropOutcome>> {
    let props: Vec<Proposition> = match which {
        Some(p) => vec![p],
        None => Proposition::ALL.to_vec(),
    };
    props.into_iter().map(|p| run_one(p, seed, trials)).collect()
}
