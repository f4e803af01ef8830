//! Component losses and their gradients.
//!
//! The `*_from_probs` functions work on network outputs and return gradients
//! with respect to those outputs. [`generator_loss`] and
//! [`discriminator_loss`] run the networks, combine the terms and
//! backpropagate to parameters.
//!
//! Batch conventions: every source term is averaged over the source batch and
//! every target term over the target batch.

use crate::error::{Error, Result};
use crate::hmm::{cahomm_loss, MomentOrder};
use crate::nn::{ForwardCache, MlpParams, Mode, Network};
use crate::numerics::{clamped_ln_at, clamped_ln_grad_at, entropy, Matrix, SeededStream};
use crate::ot::{sinkhorn, CostMatrix, Marginals, SinkhornOptions};

use super::config::TrainConfig;
use super::model::{ClothModel, ModelGrads};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub q: MomentOrder,
    pub hmm_scale: f64,
    pub log_floor: f64,
    /// Replace T's target rows by an entropic plan with this ε.
    pub sinkhorn_epsilon: Option<f64>,
}

impl LossSettings {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            q: cfg.moment_order()?,
            hmm_scale: cfg.resolved_hmm_scale(),
            log_floor: cfg.log_floor,
            sinkhorn_epsilon: cfg.sinkhorn_epsilon,
        })
    }
}

/// Coefficients of the generator-step objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorWeights {
    pub classifier: f64,
    pub adversarial: f64,
    pub transport: f64,
    pub entropy: f64,
    pub hmm: f64,
}

impl GeneratorWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            classifier: 1.0,
            adversarial: if cfg.adversarial { 1.0 } else { 0.0 },
            transport: cfg.alpha,
            entropy: cfg.beta,
            hmm: cfg.gamma,
        }
    }

    fn only(f: impl FnOnce(&mut Self)) -> Self {
        let mut w = Self::default();
        f(&mut w);
        w
    }
}

/// Unweighted values of each term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub classifier: f64,
    pub adversarial: f64,
    pub transport: f64,
    /// Target half of the transport loss: the amortized transport cost.
    pub transport_target: f64,
    pub entropy: f64,
    pub hmm: f64,
    /// Source classes present in the batch for the moment loss.
    pub hmm_classes: usize,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub parts: LossParts,
    pub grads: ModelGrads,
}

fn check_labels(labels: &[usize], rows: usize, m: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Dimension(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    if let Some(y) = labels.iter().find(|y| **y >= m) {
        return Err(Error::Data(format!("label {} outside 1..={m}", y + 1)));
    }
    Ok(())
}

fn nonempty(m: &Matrix, what: &str) -> Result<()> {
    if m.rows() == 0 {
        return Err(Error::Domain(format!("{what} batch is empty")));
    }
    Ok(())
}

/// `mean_i −ln p[i, y_i]`.
pub fn classifier_from_probs(p: &Matrix, labels: &[usize], floor: f64) -> Result<(f64, Matrix)> {
    nonempty(p, "source")?;
    check_labels(labels, p.rows(), p.cols())?;
    let n = p.rows() as f64;
    let mut grad = Matrix::zeros(p.rows(), p.cols());
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        value -= clamped_ln_at(p[(i, y)], floor);
        grad[(i, y)] = -clamped_ln_grad_at(p[(i, y)], floor) / n;
    }
    Ok((value / n, grad))
}

/// Discriminator loss on D's outputs. The last column is the target output;
/// `class_aware` adds the source classification term on the other columns.
///
/// Returns the value and gradients with respect to both output matrices.
pub fn discriminator_from_probs(
    ds: &Matrix,
    labels: &[usize],
    dt: &Matrix,
    class_aware: bool,
    floor: f64,
) -> Result<(f64, Matrix, Matrix)> {
    nonempty(ds, "source")?;
    nonempty(dt, "target")?;
    if ds.cols() != dt.cols() || ds.cols() < 2 {
        return Err(Error::Dimension(
            "discriminator outputs disagree in width".into(),
        ));
    }
    let k = ds.cols() - 1;
    if class_aware {
        check_labels(labels, ds.rows(), k)?;
    }
    let (ns, nt) = (ds.rows() as f64, dt.rows() as f64);
    let mut gs = Matrix::zeros(ds.rows(), ds.cols());
    let mut gt = Matrix::zeros(dt.rows(), dt.cols());
    let mut value = 0.0;
    for i in 0..dt.rows() {
        let v = dt[(i, k)];
        value -= clamped_ln_at(v, floor) / nt;
        gt[(i, k)] = -clamped_ln_grad_at(v, floor) / nt;
    }
    for i in 0..ds.rows() {
        // 1 − D_target, summed over the other outputs
        let src: f64 = ds.row(i)[..k].iter().sum();
        value -= clamped_ln_at(src, floor) / ns;
        let g = -clamped_ln_grad_at(src, floor) / ns;
        for m in 0..k {
            gs[(i, m)] += g;
        }
        if class_aware {
            let y = labels[i];
            value -= clamped_ln_at(ds[(i, y)], floor) / ns;
            gs[(i, y)] -= clamped_ln_grad_at(ds[(i, y)], floor) / ns;
        }
    }
    Ok((value, gs, gt))
}

/// `−mean_s ln D_target(source) + mean_t ln D_target(target)`.
pub fn adversarial_from_probs(
    ds: &Matrix,
    dt: &Matrix,
    floor: f64,
) -> Result<(f64, Matrix, Matrix)> {
    nonempty(ds, "source")?;
    nonempty(dt, "target")?;
    let k = ds.cols() - 1;
    let (ns, nt) = (ds.rows() as f64, dt.rows() as f64);
    let mut gs = Matrix::zeros(ds.rows(), ds.cols());
    let mut gt = Matrix::zeros(dt.rows(), dt.cols());
    let mut value = 0.0;
    for i in 0..ds.rows() {
        value -= clamped_ln_at(ds[(i, k)], floor) / ns;
        gs[(i, k)] = -clamped_ln_grad_at(ds[(i, k)], floor) / ns;
    }
    for i in 0..dt.rows() {
        value += clamped_ln_at(dt[(i, k)], floor) / nt;
        gt[(i, k)] = clamped_ln_grad_at(dt[(i, k)], floor) / nt;
    }
    Ok((value, gs, gt))
}

/// Per-row class costs `−ln D_m` for the first `m` outputs of D.
pub fn transport_costs(dt: &Matrix, m: usize, floor: f64) -> Matrix {
    let mut c = Matrix::zeros(dt.rows(), m);
    for i in 0..dt.rows() {
        for k in 0..m {
            c[(i, k)] = -clamped_ln_at(dt[(i, k)], floor);
        }
    }
    c
}

pub struct TransportTerms {
    pub value: f64,
    pub target_term: f64,
    pub grad_ts: Matrix,
    pub grad_tt: Matrix,
    pub grad_dt: Matrix,
}

/// Transport loss: `mean_t Σ_m T_m·(−ln D_m) + mean_s CE(1_y, T)`.
///
/// `ts` and `tt` are T's outputs on the source and target batch, `dt` is D's
/// output on the target batch.
pub fn transport_from_probs(
    ts: &Matrix,
    labels: &[usize],
    tt: &Matrix,
    dt: &Matrix,
    floor: f64,
) -> Result<TransportTerms> {
    nonempty(tt, "target")?;
    let m = tt.cols();
    if dt.rows() != tt.rows() || dt.cols() != m + 1 {
        return Err(Error::Dimension(format!(
            "transport needs a {}x{} discriminator output, got {:?}",
            tt.rows(),
            m + 1,
            dt.shape()
        )));
    }
    let (source_term, grad_ts) = classifier_from_probs(ts, labels, floor)?;
    let nt = tt.rows() as f64;
    let mut grad_tt = Matrix::zeros(tt.rows(), m);
    let mut grad_dt = Matrix::zeros(dt.rows(), dt.cols());
    let mut target_term = 0.0;
    for i in 0..tt.rows() {
        for k in 0..m {
            let cost = -clamped_ln_at(dt[(i, k)], floor);
            target_term += tt[(i, k)] * cost / nt;
            grad_tt[(i, k)] = cost / nt;
            grad_dt[(i, k)] = -tt[(i, k)] * clamped_ln_grad_at(dt[(i, k)], floor) / nt;
        }
    }
    Ok(TransportTerms {
        value: target_term + source_term,
        target_term,
        grad_ts,
        grad_tt,
        grad_dt,
    })
}

/// `mean_i H(p_i) − H(mean_i p_i)`; lies in `[−ln M, 0]`.
pub fn entropy_from_probs(p: &Matrix, floor: f64) -> Result<(f64, Matrix)> {
    if p.rows() < 2 {
        return Err(Error::Domain(format!(
            "entropy loss needs >= 2 rows, got {}",
            p.rows()
        )));
    }
    let n = p.rows() as f64;
    let mean: Vec<f64> = p.col_sums().into_iter().map(|s| s / n).collect();
    let mut mean_h = 0.0;
    for row in p.iter_rows() {
        mean_h += entropy(row)?;
    }
    let value = mean_h / n - entropy(&mean)?;
    let mut grad = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        for k in 0..p.cols() {
            grad[(i, k)] = (clamped_ln_at(mean[k], floor) - clamped_ln_at(p[(i, k)], floor)) / n;
        }
    }
    Ok((value, grad))
}

fn mode<'b>(rng: &'b mut Option<&mut SeededStream>) -> Mode<'b> {
    match rng {
        Some(s) => Mode::Train(s),
        None => Mode::Eval,
    }
}

fn add_into(acc: &mut Option<Matrix>, g: Matrix) -> Result<()> {
    match acc {
        Some(a) => a.add_assign(&g),
        None => {
            *acc = Some(g);
            Ok(())
        }
    }
}

fn add_params(acc: &mut Option<MlpParams>, g: MlpParams) -> Result<()> {
    match acc {
        Some(a) => a.add_assign(&g),
        None => {
            *acc = Some(g);
            Ok(())
        }
    }
}

fn scaled(mut m: Matrix, w: f64) -> Matrix {
    m.scale(w);
    m
}

struct Head {
    out: Matrix,
    cache: ForwardCache,
}

fn run(net: &Network, x: &Matrix, rng: &mut Option<&mut SeededStream>) -> Result<Head> {
    let (out, cache) = net.forward(x, mode(rng))?;
    Ok(Head { out, cache })
}

/// Entropic plan over target rows and classes with uniform marginals,
/// rescaled so each row sums to one.
fn sinkhorn_rows(costs: &Matrix, epsilon: f64) -> Result<Matrix> {
    let (n, m) = costs.shape();
    let plan = sinkhorn(
        &CostMatrix::new(costs.clone())?,
        &Marginals::uniform(n, m)?,
        SinkhornOptions {
            epsilon,
            ..SinkhornOptions::default()
        },
    )?;
    Ok(scaled(plan.plan.into_matrix(), n as f64))
}

/// Forward and backward pass of the generator-step objective
/// `w_C·L^C + w_adv·(L^{G,S}+L^{G,T}) + w_t·L^t + w_ent·L^ent + w_hmm·L^HMM`.
///
/// Gradients are produced for G, C and T; D is only read. Terms with zero
/// weight are skipped unless `measure` asks for their values.
/// `rng` enables dropout.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    model: &ClothModel,
    source: &Matrix,
    labels: &[usize],
    target: &Matrix,
    w: &GeneratorWeights,
    settings: &LossSettings,
    measure: bool,
    mut rng: Option<&mut SeededStream>,
) -> Result<LossOutput> {
    let floor = settings.log_floor;
    let m = model.num_classes;
    let class_aware = model.class_aware_d();
    if w.transport != 0.0 && !class_aware {
        return Err(Error::Config(
            "transport loss needs a class-aware discriminator".into(),
        ));
    }
    let need = |wt: f64| wt != 0.0 || measure;
    let need_c = need(w.classifier);
    let need_adv = need(w.adversarial);
    let need_t = need(w.transport) && class_aware;
    let need_ent = need(w.entropy);
    let need_hmm = need(w.hmm);
    let plan_mode = settings.sinkhorn_epsilon.is_some() && class_aware;

    let uses_source = need_c || need_adv || need_t || need_hmm;
    let uses_target = need_adv || need_t || need_ent || need_hmm;
    if uses_source {
        nonempty(source, "source")?;
        check_labels(labels, source.rows(), m)?;
    }
    if uses_target {
        nonempty(target, "target")?;
    }

    let gs = if uses_source {
        Some(run(&model.g, source, &mut rng)?)
    } else {
        None
    };
    let gt = if uses_target {
        Some(run(&model.g, target, &mut rng)?)
    } else {
        None
    };
    let zs = gs.as_ref().map(|h| &h.out);
    let zt = gt.as_ref().map(|h| &h.out);

    let mut parts = LossParts::default();
    let mut grad_zs: Option<Matrix> = None;
    let mut grad_zt: Option<Matrix> = None;
    let mut grad_ps = None;
    let mut grad_ts = None;
    let mut grad_tt: Option<Matrix> = None;
    let mut grad_ds = None;
    let mut grad_dt: Option<Matrix> = None;

    let c_src = if need_c {
        Some(run(&model.c, zs.unwrap(), &mut rng)?)
    } else {
        None
    };
    if let Some(h) = &c_src {
        let (v, g) = classifier_from_probs(&h.out, labels, floor)?;
        parts.classifier = v;
        if w.classifier != 0.0 {
            grad_ps = Some(scaled(g, w.classifier));
        }
    }

    let d_src = if need_adv {
        Some(run(&model.d, zs.unwrap(), &mut rng)?)
    } else {
        None
    };
    let d_tgt = if need_adv || need_t || (plan_mode && (need_ent || need_hmm)) {
        Some(run(&model.d, zt.unwrap(), &mut rng)?)
    } else {
        None
    };

    if let (Some(ds), Some(dt)) = (&d_src, &d_tgt) {
        let (v, g_s, g_t) = adversarial_from_probs(&ds.out, &dt.out, floor)?;
        parts.adversarial = v;
        if w.adversarial != 0.0 {
            grad_ds = Some(scaled(g_s, w.adversarial));
            add_into(&mut grad_dt, scaled(g_t, w.adversarial))?;
        }
    }

    // target rows of the transport plan: T's outputs, or a constant entropic plan
    let t_tgt = if uses_target && (need_t || need_ent || need_hmm) && !plan_mode {
        Some(run(model.t_net(), zt.unwrap(), &mut rng)?)
    } else {
        None
    };
    let plan_rows = match (plan_mode, &d_tgt) {
        (true, Some(dt)) => Some(sinkhorn_rows(
            &transport_costs(&dt.out, m, floor),
            settings.sinkhorn_epsilon.unwrap(),
        )?),
        _ => None,
    };
    let weights_t: Option<&Matrix> = plan_rows.as_ref().or(t_tgt.as_ref().map(|h| &h.out));

    let t_src = if need_t {
        Some(run(model.t_net(), zs.unwrap(), &mut rng)?)
    } else {
        None
    };
    if let (Some(ts), Some(tt), Some(dt)) = (&t_src, weights_t, &d_tgt) {
        let terms = transport_from_probs(&ts.out, labels, tt, &dt.out, floor)?;
        parts.transport = terms.value;
        parts.transport_target = terms.target_term;
        if w.transport != 0.0 {
            grad_ts = Some(scaled(terms.grad_ts, w.transport));
            if !plan_mode {
                add_into(&mut grad_tt, scaled(terms.grad_tt, w.transport))?;
            }
            add_into(&mut grad_dt, scaled(terms.grad_dt, w.transport))?;
        }
    }

    if need_ent {
        let tt = weights_t.expect("target plan rows");
        let (v, g) = entropy_from_probs(tt, floor)?;
        parts.entropy = v;
        if w.entropy != 0.0 && !plan_mode {
            add_into(&mut grad_tt, scaled(g, w.entropy))?;
        }
    }

    if need_hmm {
        let tt = weights_t.expect("target plan rows");
        let out = cahomm_loss(
            zs.unwrap(),
            labels,
            zt.unwrap(),
            tt,
            settings.q,
            settings.hmm_scale,
        )?;
        parts.hmm = out.value;
        parts.hmm_classes = out.classes_present;
        if w.hmm != 0.0 {
            add_into(&mut grad_zs, scaled(out.grad_source, w.hmm))?;
            add_into(&mut grad_zt, scaled(out.grad_target, w.hmm))?;
            if !plan_mode {
                add_into(&mut grad_tt, scaled(out.grad_t_probs, w.hmm))?;
            }
        }
    }

    let value = w.classifier * parts.classifier
        + w.adversarial * parts.adversarial
        + w.transport * parts.transport
        + w.entropy * parts.entropy
        + w.hmm * parts.hmm;

    // heads → latent gradients
    let mut grads = ModelGrads::default();
    let mut head_grads: Option<MlpParams> = None;
    if let (Some(h), Some(g)) = (&c_src, &grad_ps) {
        let (gp, gz) = model.c.backward(&h.cache, g)?;
        grads.c = Some(gp);
        add_into(&mut grad_zs, gz)?;
    }
    if let (Some(h), Some(g)) = (&t_src, &grad_ts) {
        let (gp, gz) = model.t_net().backward(&h.cache, g)?;
        add_params(&mut head_grads, gp)?;
        add_into(&mut grad_zs, gz)?;
    }
    if let (Some(h), Some(g)) = (&t_tgt, &grad_tt) {
        let (gp, gz) = model.t_net().backward(&h.cache, g)?;
        add_params(&mut head_grads, gp)?;
        add_into(&mut grad_zt, gz)?;
    }
    if let Some(g) = head_grads {
        if model.t.is_some() {
            grads.t = Some(g);
        } else {
            add_params(&mut grads.c, g)?;
        }
    }
    if let (Some(h), Some(g)) = (&d_src, &grad_ds) {
        add_into(&mut grad_zs, model.d.backward(&h.cache, g)?.1)?;
    }
    if let (Some(h), Some(g)) = (&d_tgt, &grad_dt) {
        add_into(&mut grad_zt, model.d.backward(&h.cache, g)?.1)?;
    }

    // latents → G
    if let (Some(h), Some(g)) = (&gs, &grad_zs) {
        add_params(&mut grads.g, model.g.backward(&h.cache, g)?.0)?;
    }
    if let (Some(h), Some(g)) = (&gt, &grad_zt) {
        add_params(&mut grads.g, model.g.backward(&h.cache, g)?.0)?;
    }

    Ok(LossOutput {
        value,
        parts,
        grads,
    })
}

/// Discriminator step: loss and gradients of D only; G is run forward but
/// receives nothing.
pub fn discriminator_loss(
    model: &ClothModel,
    source: &Matrix,
    labels: &[usize],
    target: &Matrix,
    settings: &LossSettings,
    mut rng: Option<&mut SeededStream>,
) -> Result<LossOutput> {
    let zs = run(&model.g, source, &mut rng)?.out;
    let zt = run(&model.g, target, &mut rng)?.out;
    let ds = run(&model.d, &zs, &mut rng)?;
    let dt = run(&model.d, &zt, &mut rng)?;
    let (value, g_s, g_t) = discriminator_from_probs(
        &ds.out,
        labels,
        &dt.out,
        model.class_aware_d(),
        settings.log_floor,
    )?;
    let mut gd = model.d.backward(&ds.cache, &g_s)?.0;
    gd.add_assign(&model.d.backward(&dt.cache, &g_t)?.0)?;
    Ok(LossOutput {
        value,
        parts: LossParts::default(),
        grads: ModelGrads {
            d: Some(gd),
            ..ModelGrads::default()
        },
    })
}

pub fn loss_classifier(
    model: &ClothModel,
    source: &Matrix,
    labels: &[usize],
    settings: &LossSettings,
    rng: Option<&mut SeededStream>,
) -> Result<LossOutput> {
    let w = GeneratorWeights::only(|w| w.classifier = 1.0);
    generator_loss(
        model,
        source,
        labels,
        &Matrix::zeros(0, source.cols()),
        &w,
        settings,
        false,
        rng,
    )
}

pub fn loss_generator_adversarial(
    model: &ClothModel,
    source: &Matrix,
    target: &Matrix,
    settings: &LossSettings,
    rng: Option<&mut SeededStream>,
) -> Result<LossOutput> {
    let w = GeneratorWeights::only(|w| w.adversarial = 1.0);
    let labels = vec![0; source.rows()];
    generator_loss(model, source, &labels, target, &w, settings, false, rng)
}

pub fn loss_transport(
    model: &ClothModel,
    source: &Matrix,
    labels: &[usize],
    target: &Matrix,
    settings: &LossSettings,
    rng: Option<&mut SeededStream>,
) -> Result<LossOutput> {
    let w = GeneratorWeights::only(|w| w.transport = 1.0);
    generator_loss(model, source, labels, target, &w, settings, false, rng)
}

pub fn loss_entropy(
    model: &ClothModel,
    target: &Matrix,
    settings: &LossSettings,
    rng: Option<&mut SeededStream>,
) -> Result<LossOutput> {
    let w = GeneratorWeights::only(|w| w.entropy = 1.0);
    generator_loss(
        model,
        &Matrix::zeros(0, target.cols()),
        &[],
        target,
        &w,
        settings,
        false,
        rng,
    )
}

pub fn loss_hmm(
    model: &ClothModel,
    source: &Matrix,
    labels: &[usize],
    target: &Matrix,
    settings: &LossSettings,
    rng: Option<&mut SeededStream>,
) -> Result<LossOutput> {
    let w = GeneratorWeights::only(|w| w.hmm = 1.0);
    generator_loss(model, source, labels, target, &w, settings, false, rng)
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::Fixture;
    use super::*;
    use crate::numerics::LOG_FLOOR;

    const LN2: f64 = std::f64::consts::LN_2;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn discriminator_hand_example() {
        let dt = m(&[&[0.25, 0.25, 0.5]]);
        let ds = m(&[&[0.5, 0.25, 0.25]]);
        let (v, _, _) = discriminator_from_probs(&ds, &[0], &dt, true, LOG_FLOOR).unwrap();
        let want = LN2 + (4.0f64 / 3.0).ln() + LN2;
        assert!((v - want).abs() < 1e-12);
        assert!((v - 1.6740).abs() < 1e-4);
    }

    #[test]
    fn perfect_discriminator_is_near_zero() {
        let dt = m(&[&[0.0, 0.0, 1.0]]);
        let ds = m(&[&[0.0, 1.0, 0.0]]);
        let (v, _, _) = discriminator_from_probs(&ds, &[1], &dt, true, LOG_FLOOR).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn transport_hand_examples() {
        let tt = m(&[&[1.0, 0.0]]);
        let dt = m(&[&[0.5, 0.2, 0.3]]);
        let ts = m(&[&[0.0, 1.0]]);
        let r = transport_from_probs(&ts, &[1], &tt, &dt, LOG_FLOOR).unwrap();
        assert!((r.target_term - LN2).abs() < 1e-12);
        assert!((r.value - LN2).abs() < 1e-12);
        assert!(transport_from_probs(&ts, &[1], &tt, &m(&[&[0.5, 0.5]]), LOG_FLOOR).is_err());
    }

    #[test]
    fn entropy_hand_examples() {
        let (v, _) = entropy_from_probs(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), LOG_FLOOR).unwrap();
        assert!((v + LN2).abs() < 1e-12);
        let (v, _) = entropy_from_probs(&m(&[&[0.5, 0.5], &[0.5, 0.5]]), LOG_FLOOR).unwrap();
        assert!(v.abs() < 1e-12);
        let (v, _) = entropy_from_probs(&m(&[&[0.0, 1.0], &[0.0, 1.0]]), LOG_FLOOR).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(entropy_from_probs(&m(&[&[0.5, 0.5]]), LOG_FLOOR).is_err());
    }

    #[test]
    fn adversarial_hand_examples() {
        let half = m(&[&[0.25, 0.25, 0.5], &[0.1, 0.4, 0.5]]);
        let (v, _, _) = adversarial_from_probs(&half, &half, LOG_FLOOR).unwrap();
        assert!(v.abs() < 1e-12);
        let fooled_s = m(&[&[0.0, 0.0, 1.0]]);
        let fooled_t = m(&[&[0.5, 0.5, 0.0]]);
        let (v, _, _) = adversarial_from_probs(&fooled_s, &fooled_t, LOG_FLOOR).unwrap();
        assert!(v < -20.0);
    }

    #[test]
    fn classifier_hand_examples() {
        let (v, _) = classifier_from_probs(&m(&[&[1.0, 0.0, 0.0]]), &[0], LOG_FLOOR).unwrap();
        assert!(v.abs() < 1e-12);
        let u = 1.0 / 3.0;
        let (v, _) =
            classifier_from_probs(&m(&[&[u, u, u], &[u, u, u]]), &[0, 2], LOG_FLOOR).unwrap();
        assert!((v - 3.0f64.ln()).abs() < 1e-12);
        assert!(matches!(
            classifier_from_probs(&m(&[&[u, u, u]]), &[3], LOG_FLOOR),
            Err(Error::Data(_))
        ));
    }

    fn fixture(share_ct: bool, seed: u64) -> Fixture {
        Fixture::new(share_ct, seed).unwrap()
    }

    #[test]
    fn loss_routing() {
        let f = fixture(false, 3);
        let s = &f.settings;
        let out = loss_transport(&f.model, &f.xs, &f.ys, &f.xt, s, None).unwrap();
        assert!(out.grads.d.is_none() && out.grads.c.is_none());
        assert!(out.grads.t.is_some() && out.grads.g.is_some());
        let out = discriminator_loss(&f.model, &f.xs, &f.ys, &f.xt, s, None).unwrap();
        assert!(out.grads.g.is_none() && out.grads.d.is_some());
        let out = loss_classifier(&f.model, &f.xs, &f.ys, s, None).unwrap();
        assert!(out.grads.t.is_none() && out.grads.c.is_some());
    }

    #[test]
    fn measure_reports_unweighted_parts() {
        let f = fixture(false, 5);
        let w = GeneratorWeights {
            classifier: 1.0,
            ..GeneratorWeights::default()
        };
        let out =
            generator_loss(&f.model, &f.xs, &f.ys, &f.xt, &w, &f.settings, true, None).unwrap();
        assert!(out.parts.transport > 0.0 && out.parts.hmm > 0.0);
        assert!(out.parts.entropy <= 0.0);
        assert_eq!(out.value, out.parts.classifier);
        assert!(out.grads.t.is_none());
        let single = loss_hmm(&f.model, &f.xs, &f.ys, &f.xt, &f.settings, None).unwrap();
        assert_eq!(single.value, out.parts.hmm);
    }

    #[test]
    fn sinkhorn_plan_mode_runs() {
        let mut f = fixture(false, 8);
        f.settings.sinkhorn_epsilon = Some(0.5);
        let w = GeneratorWeights {
            classifier: 1.0,
            adversarial: 1.0,
            transport: 0.1,
            entropy: 0.1,
            hmm: 0.01,
        };
        let out =
            generator_loss(&f.model, &f.xs, &f.ys, &f.xt, &w, &f.settings, true, None).unwrap();
        assert!(out.value.is_finite());
        assert!(out.parts.transport_target > 0.0);
        assert!(out.parts.entropy <= 1e-9);
    }
}
