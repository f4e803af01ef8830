use serde::Serialize;

use super::losses::transport_costs;
use super::model::{argmax, ClothModel};
use crate::error::{Error, Result};
use crate::nn::{Activation, MlpSpec, Mode, Network, OutputHead};
use crate::numerics::{clamped_ln, Matrix, SeededStream};
use crate::ot::{
    entropic_objective, row_argmin_plan, sinkhorn, transport_cost, CostMatrix, Marginals,
    SinkhornOptions, TransportPlan,
};

/// Objectives of three transport strategies on one cost matrix. All plans
/// carry row mass `1/N`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub rows: usize,
    pub classes: usize,
    /// `mean_i Σ_m T_im c_im`.
    pub amortized: f64,
    /// Row-wise argmin plan, the optimum over all column marginals.
    pub exact_free_pi: f64,
    /// Transport cost of the entropic plan whose column marginal is the one T induces.
    pub sinkhorn_at_induced_pi: f64,
    /// Entropic objective `Σ a·c − ε·H(A)` of the same plan.
    pub sinkhorn_entropic_objective: f64,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_converged: bool,
    pub sinkhorn_violation: f64,
    pub induced_pi: Vec<f64>,
    pub ratio_amortized_exact: f64,
    pub ratio_amortized_sinkhorn: f64,
    /// Rows where argmax T equals the cheapest column.
    pub argmax_agreement: f64,
    /// Same, restricted to rows whose best and second-best costs differ by more than `gap`.
    pub argmax_agreement_gapped: f64,
    pub gapped_rows: usize,
    pub gap: f64,
}

/// Compares T's rows against the exact free-π plan and a Sinkhorn plan at
/// the induced marginal.
pub fn compare_plans(
    t_rows: &Matrix,
    cost: &CostMatrix,
    opts: SinkhornOptions,
    gap: f64,
) -> Result<CompareReport> {
    let (n, m) = cost.matrix().shape();
    if t_rows.shape() != (n, m) || n == 0 {
        return Err(Error::Dimension(format!(
            "plan rows {:?} vs cost {:?}",
            t_rows.shape(),
            (n, m)
        )));
    }
    let mut plan = t_rows.clone();
    plan.scale(1.0 / n as f64);
    let plan = TransportPlan::new(plan)?;
    let amortized = transport_cost(&plan, cost)?;
    let exact = row_argmin_plan(cost, 1.0 / n as f64);
    let induced_pi = plan.col_sums();
    let pi_sum: f64 = induced_pi.iter().sum();
    let pi: Vec<f64> = induced_pi.iter().map(|p| p / pi_sum).collect();
    let sk = sinkhorn(cost, &Marginals::uniform_rows(n, pi)?, opts)?;
    let sk_cost = transport_cost(&sk.plan, cost)?;

    let mut agree = 0;
    let mut gapped = 0;
    let mut agree_gapped = 0;
    for i in 0..n {
        let row = cost.matrix().row(i);
        let best = exact.columns[i];
        let hit = argmax(t_rows.row(i)) == best;
        agree += usize::from(hit);
        let second = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != best)
            .map(|(_, c)| *c)
            .fold(f64::INFINITY, f64::min);
        if second - row[best] > gap {
            gapped += 1;
            agree_gapped += usize::from(hit);
        }
    }
    Ok(CompareReport {
        rows: n,
        classes: m,
        amortized,
        exact_free_pi: exact.objective,
        sinkhorn_at_induced_pi: sk_cost,
        sinkhorn_entropic_objective: entropic_objective(&sk.plan, cost, opts.epsilon)?,
        sinkhorn_epsilon: opts.epsilon,
        sinkhorn_converged: sk.converged,
        sinkhorn_violation: sk.violation,
        induced_pi,
        ratio_amortized_exact: amortized / exact.objective,
        ratio_amortized_sinkhorn: amortized / sk_cost,
        argmax_agreement: agree as f64 / n as f64,
        argmax_agreement_gapped: if gapped == 0 {
            1.0
        } else {
            agree_gapped as f64 / gapped as f64
        },
        gapped_rows: gapped,
        gap,
    })
}

/// Frozen-model comparison on held features: costs `−ln D_m(G(x))` and rows
/// `T(G(x))`, all from the Polyak shadows.
pub fn compare_amortized_vs_exact(
    model: &ClothModel,
    features: &Matrix,
    log_floor: f64,
    opts: SinkhornOptions,
    gap: f64,
) -> Result<CompareReport> {
    if !model.class_aware_d() {
        return Err(Error::Config(
            "comparison needs a class-aware discriminator".into(),
        ));
    }
    let z = model.g.predict_shadow(features)?;
    let t = model.t_net().predict_shadow(&z)?;
    let d = model.d.predict_shadow(&z)?;
    let cost = CostMatrix::new(transport_costs(&d, model.num_classes, log_floor))?;
    compare_plans(&t, &cost, opts, gap)
}

/// A transport head fitted to one fixed cost matrix.
#[derive(Clone, Debug)]
pub struct FittedTransport {
    pub network: Network,
    /// `mean_i Σ_m T_im c_im` after every `record_every` steps.
    pub objective_trace: Vec<f64>,
    pub rows: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub lr: f64,
    /// Initial weight τ of a row-entropy bonus `−τ·mean_i H(T_i)`, decayed
    /// linearly to zero over the first `anneal_fraction` of the steps.
    pub smoothing: f64,
    pub anneal_fraction: f64,
    pub record_every: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            steps: 5000,
            lr: 1e-2,
            smoothing: 0.3,
            anneal_fraction: 0.8,
            record_every: 100,
        }
    }
}

/// Trains a softmax MLP `T` on fixed features to minimise
/// `mean_i Σ_m T_m(x_i)·c_im` with the Adam/Polyak optimizer.
///
/// Without smoothing, rows tend to lock onto the column that is cheapest on
/// average before the network separates them.
pub fn fit_transport_head(
    features: &Matrix,
    cost: &CostMatrix,
    opts: &FitOptions,
    stream: &mut SeededStream,
) -> Result<FittedTransport> {
    let (n, m) = cost.matrix().shape();
    if features.rows() != n || n == 0 {
        return Err(Error::Dimension(format!(
            "{} feature rows for {n} cost rows",
            features.rows()
        )));
    }
    let mut widths = vec![features.cols()];
    widths.extend_from_slice(&opts.hidden);
    widths.push(m);
    let spec = MlpSpec::new(widths, Activation::Tanh, OutputHead::Softmax);
    let mut net = Network::init(spec, 0.0, stream)?;
    let objective = |rows: &Matrix| -> f64 {
        rows.as_slice()
            .iter()
            .zip(cost.matrix().as_slice())
            .map(|(t, c)| t * c)
            .sum::<f64>()
            / n as f64
    };
    let anneal_steps = (opts.steps as f64 * opts.anneal_fraction).max(1.0);
    let mut trace = Vec::new();
    let mut grad_out = Matrix::zeros(n, m);
    for step in 0..opts.steps {
        let (rows, cache) = net.forward(features, Mode::Eval)?;
        if opts.record_every > 0 && step % opts.record_every == 0 {
            trace.push(objective(&rows));
        }
        let tau = opts.smoothing * (1.0 - step as f64 / anneal_steps).max(0.0);
        for i in 0..n {
            for k in 0..m {
                let bonus = if tau > 0.0 {
                    tau * (clamped_ln(rows[(i, k)]) + 1.0)
                } else {
                    0.0
                };
                grad_out[(i, k)] = (cost.matrix()[(i, k)] + bonus) / n as f64;
            }
        }
        let (g, _) = net.backward(&cache, &grad_out)?;
        net.step(&g, opts.lr)?;
    }
    let rows = net.forward(features, Mode::Eval)?.0;
    trace.push(objective(&rows));
    Ok(FittedTransport {
        network: net,
        objective_trace: trace,
        rows,
    })
}
