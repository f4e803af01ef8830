//! Discrete optimal transport between N points and M class-conditional targets.
//!
//! Three solvers live here: entropic Sinkhorn (log domain), the exact
//! free-column-marginal optimum that sends every row to its cheapest column,
//! and the Hungarian method for the balanced square case.

use crate::error::{dim_err, Error, Result};
use crate::numerics::{compensated_sum, log_sum_exp, Matrix};

/// Nonnegative, finite N×M cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(Matrix);

impl CostMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if let Some(bad) = values
            .as_slice()
            .iter()
            .find(|c| !c.is_finite() || **c < 0.0)
        {
            return Err(Error::Domain(format!(
                "cost entry {bad} is not a finite nonnegative value"
            )));
        }
        Ok(Self(values))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let mut m = self.0.clone();
        m.scale(factor);
        Self::new(m)
    }
}

/// Row masses (one per point) and column masses (π over classes).
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    row: Vec<f64>,
    col: Vec<f64>,
}

impl Marginals {
    pub fn new(row: Vec<f64>, col: Vec<f64>) -> Result<Self> {
        for (name, v) in [("row", &row), ("column", &col)] {
            if v.is_empty() {
                return dim_err(format!("empty {name} marginal"));
            }
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Domain(format!(
                    "{name} marginal has a negative entry"
                )));
            }
            let total = compensated_sum(v.iter().copied());
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("{name} marginal sums to {total}")));
            }
        }
        Ok(Self { row, col })
    }

    /// Row masses 1/N against the given class proportions.
    pub fn uniform_rows(n: usize, pi: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n], pi)
    }

    pub fn uniform(n: usize, m: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n], vec![1.0 / m as f64; m])
    }

    pub fn row(&self) -> &[f64] {
        &self.row
    }

    pub fn col(&self) -> &[f64] {
        &self.col
    }
}

/// Nonnegative coupling matrix `A = [a_im]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan(Matrix);

impl TransportPlan {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.as_slice().iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Domain(
                "transport plan has a negative or non-finite entry".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.0.row_sums()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.0.col_sums()
    }

    /// `−Σ a log a`, with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .as_slice()
            .iter()
            .filter(|a| **a > 0.0)
            .map(|a| a * a.ln())
            .sum::<f64>()
    }

    /// Largest absolute deviation of either marginal from the prescribed one.
    pub fn marginal_violation(&self, marg: &Marginals) -> f64 {
        let rows = self
            .row_sums()
            .into_iter()
            .zip(marg.row())
            .map(|(s, m)| (s - m).abs());
        let cols = self
            .col_sums()
            .into_iter()
            .zip(marg.col())
            .map(|(s, m)| (s - m).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

/// `Σ_i Σ_m a_im · c_im`
pub fn transport_cost(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    if plan.0.shape() != cost.0.shape() {
        return dim_err(format!(
            "plan {:?} vs cost {:?}",
            plan.0.shape(),
            cost.0.shape()
        ));
    }
    Ok(compensated_sum(
        plan.0
            .as_slice()
            .iter()
            .zip(cost.0.as_slice())
            .map(|(a, c)| a * c),
    ))
}

/// `Σ a·c − ε·H(A)`
pub fn entropic_objective(plan: &TransportPlan, cost: &CostMatrix, epsilon: f64) -> Result<f64> {
    Ok(transport_cost(plan, cost)? - epsilon * plan.entropy())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornOptions {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            max_iter: 2000,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornResult {
    pub plan: TransportPlan,
    pub iterations: usize,
    /// Max marginal violation of the returned plan.
    pub violation: f64,
    pub converged: bool,
    /// Dual objective `⟨f,a⟩ + ⟨g,b⟩ − ε(Σ P − 1)` after each iteration.
    /// Non-decreasing; equals the entropic objective at convergence.
    pub dual_trace: Vec<f64>,
}

/// Entropy-regularised OT via alternating log-domain scalings.
pub fn sinkhorn(
    cost: &CostMatrix,
    marg: &Marginals,
    opts: SinkhornOptions,
) -> Result<SinkhornResult> {
    let SinkhornOptions {
        epsilon,
        max_iter,
        tol,
    } = opts;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Parameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let (n, m) = cost.0.shape();
    if marg.row.len() != n || marg.col.len() != m {
        return dim_err(format!(
            "marginals {}x{} for a {n}x{m} cost",
            marg.row.len(),
            marg.col.len()
        ));
    }
    let c = &cost.0;
    let log_a: Vec<f64> = marg.row.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = marg.col.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut scratch = vec![0.0; n.max(m)];
    let mut dual_trace = Vec::new();
    let mut iterations = 0;
    let mut violation = f64::INFINITY;

    let plan_of = |f: &[f64], g: &[f64]| {
        let mut p = Matrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                p[(i, j)] = ((f[i] + g[j] - c[(i, j)]) / epsilon).exp();
            }
        }
        p
    };

    while iterations < max_iter {
        iterations += 1;
        for i in 0..n {
            for j in 0..m {
                scratch[j] = (g[j] - c[(i, j)]) / epsilon;
            }
            f[i] = epsilon * (log_a[i] - log_sum_exp(&scratch[..m]));
        }
        for j in 0..m {
            for i in 0..n {
                scratch[i] = (f[i] - c[(i, j)]) / epsilon;
            }
            g[j] = epsilon * (log_b[j] - log_sum_exp(&scratch[..n]));
        }
        if f.iter()
            .chain(&g)
            .any(|v| v.is_nan() || *v == f64::INFINITY)
        {
            return Err(Error::Numeric(format!(
                "Sinkhorn potentials became non-finite at iteration {iterations} (epsilon {epsilon})"
            )));
        }
        let p = plan_of(&f, &g);
        let mass = p.sum();
        let dual = potential_pairing(&f, &marg.row) + potential_pairing(&g, &marg.col)
            - epsilon * (mass - 1.0);
        dual_trace.push(dual);
        let rows = p.row_sums();
        let cols = p.col_sums();
        violation = rows
            .iter()
            .zip(&marg.row)
            .chain(cols.iter().zip(&marg.col))
            .map(|(s, t)| (s - t).abs())
            .fold(0.0, f64::max);
        if violation < tol {
            break;
        }
    }
    let plan = TransportPlan::new(plan_of(&f, &g))?;
    Ok(SinkhornResult {
        plan,
        iterations,
        violation,
        converged: violation < tol,
        dual_trace,
    })
}

/// `⟨potential, mass⟩`, skipping zero-mass entries whose potential is −∞.
fn potential_pairing(potential: &[f64], mass: &[f64]) -> f64 {
    compensated_sum(
        potential
            .iter()
            .zip(mass)
            .filter(|(_, w)| **w > 0.0)
            .map(|(p, w)| p * w),
    )
}

/// Exact optimum when the column marginal is free.
#[derive(Clone, Debug, PartialEq)]
pub struct ArgminPlan {
    pub plan: TransportPlan,
    /// Column sums of the plan.
    pub induced_pi: Vec<f64>,
    /// Chosen column per row.
    pub columns: Vec<usize>,
    pub objective: f64,
}

/// Sends each row's full mass to its cheapest column (ties go to the lowest index).
pub fn row_argmin_plan(cost: &CostMatrix, row_mass: f64) -> ArgminPlan {
    let (n, m) = cost.0.shape();
    let mut plan = Matrix::zeros(n, m);
    let mut columns = Vec::with_capacity(n);
    let mut mins = Vec::with_capacity(n);
    for i in 0..n {
        let row = cost.0.row(i);
        let (best, min) =
            row.iter().enumerate().fold(
                (0, f64::INFINITY),
                |(bj, bv), (j, &v)| if v < bv { (j, v) } else { (bj, bv) },
            );
        if m > 0 {
            plan[(i, best)] = row_mass;
            columns.push(best);
            mins.push(row_mass * min);
        }
    }
    let induced_pi = plan.col_sums();
    ArgminPlan {
        plan: TransportPlan(plan),
        induced_pi,
        columns,
        objective: compensated_sum(mins),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `permutation[i]` is the column assigned to row `i`.
    pub permutation: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect matching on a square cost matrix, O(n³) shortest
/// augmenting paths with row/column potentials.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (n, m) = cost.0.shape();
    if n != m {
        return dim_err(format!("assignment needs a square cost, got {n}x{m}"));
    }
    if n == 0 {
        return Ok(Assignment {
            permutation: vec![],
            cost: 0.0,
        });
    }
    let c = |i: usize, j: usize| cost.0[(i - 1, j - 1)];
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut permutation = vec![0; n];
    for j in 1..=n {
        permutation[col_owner[j] - 1] = j - 1;
    }
    let total = compensated_sum(permutation.iter().enumerate().map(|(i, &j)| cost.0[(i, j)]));
    Ok(Assignment {
        permutation,
        cost: total,
    })
}
