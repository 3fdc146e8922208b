//! LP relaxations used by the balance solver, backed by `minilp`.
//!
//! Both programs work with target rows already centered at the source mean
//! and divided by the tolerance, so a unit of imbalance equals one `delta_k`.

use minilp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem, Variable};

/// Centered, tolerance-scaled target rows: `a[j][k] = (B_k(X_j) - mean_S B_k) / delta_k`
/// over the active (finite-tolerance) constraints only.
#[derive(Debug, Clone)]
pub(crate) struct ScaledRows {
    pub a: Vec<f64>,
    pub n: usize,
    pub k: usize,
}

impl ScaledRows {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.a[j * self.k..(j + 1) * self.k]
    }
}

/// Largest total mass `sum_j r_j` over `r in [0,1]^n` whose weighted rows sum
/// to within one tolerance unit of zero per unit mass:
/// `|sum_j r_j a_jk| <= sum_j r_j` for every `k`.
///
/// Rescaling a feasible weight vector shows the relaxation at multiplicity
/// `M` (cap `U` per target, `S` sources) is feasible iff `S*M/U <= mass`.
pub(crate) fn max_balanced_mass(rows: &ScaledRows) -> f64 {
    if rows.k == 0 {
        return rows.n as f64;
    }
    let mut p = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<Variable> = (0..rows.n).map(|_| p.add_var(1.0, (0.0, 1.0))).collect();
    for k in 0..rows.k {
        let mut hi = LinearExpr::empty();
        let mut lo = LinearExpr::empty();
        for (j, v) in vars.iter().enumerate() {
            let a = rows.a[j * rows.k + k];
            hi.add(*v, a - 1.0);
            lo.add(*v, -a - 1.0);
        }
        p.add_constraint(hi, ComparisonOp::Le, 0.0);
        p.add_constraint(lo, ComparisonOp::Le, 0.0);
    }
    match p.solve() {
        Ok(sol) => sol.objective().max(0.0),
        // r = 0 is always feasible, so failure means numerical trouble;
        // returning the trivial upper bound keeps the search exhaustive.
        Err(_) => rows.n as f64,
    }
}

/// Solution of the fixed-multiplicity relaxation.
#[derive(Debug, Clone)]
pub(crate) struct Relaxed {
    /// Smallest achievable worst-case imbalance in tolerance units.
    pub violation: f64,
    /// Weights `v_j = c_j / (M S)`, summing to one.
    pub weights: Vec<f64>,
}

/// Minimizes the worst scaled imbalance over weights `v` with
/// `lower_j <= v_j <= upper_j` and `sum_j v_j = 1`. Returns `None` when the
/// bounds admit no unit-mass vector.
pub(crate) fn min_violation(rows: &ScaledRows, lower: &[f64], upper: &[f64]) -> Option<Relaxed> {
    debug_assert_eq!(lower.len(), rows.n);
    let lo_mass: f64 = lower.iter().sum();
    let hi_mass: f64 = upper.iter().sum();
    if lo_mass > 1.0 + 1e-12 || hi_mass < 1.0 - 1e-12 {
        return None;
    }
    let mut p = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Variable> = (0..rows.n).map(|j| p.add_var(0.0, (lower[j], upper[j]))).collect();
    let t = p.add_var(1.0, (0.0, f64::INFINITY));
    let mut mass = LinearExpr::empty();
    for v in &vars {
        mass.add(*v, 1.0);
    }
    p.add_constraint(mass, ComparisonOp::Eq, 1.0);
    for k in 0..rows.k {
        let mut hi = LinearExpr::empty();
        let mut lo = LinearExpr::empty();
        for (j, v) in vars.iter().enumerate() {
            let a = rows.a[j * rows.k + k];
            hi.add(*v, a);
            lo.add(*v, a);
        }
        hi.add(t, -1.0);
        lo.add(t, 1.0);
        p.add_constraint(hi, ComparisonOp::Le, 0.0);
        p.add_constraint(lo, ComparisonOp::Ge, 0.0);
    }
    let sol = p.solve().ok()?;
    Some(Relaxed {
        violation: sol[t].max(0.0),
        weights: vars.iter().map(|v| sol[*v]).collect(),
    })
}
