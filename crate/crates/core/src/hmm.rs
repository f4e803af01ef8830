//! Higher-order moment matching.
//!
//! The q-th moment tensor of `z ∈ R^p` flattened to `φ_q(z) ∈ R^{p^q}` satisfies
//! `⟨φ_q(z), φ_q(z')⟩ = ⟨z, z'⟩^q`, so the squared distance between mean
//! moment tensors of two batches can be computed from pairwise inner products
//! without ever materialising `p^q` entries. Both forms are provided: the
//! flattened one is the oracle, the kernel one is what training uses.
//!
//! Empirical means are V-statistics (all ordered pairs, diagonal included),
//! which is exactly the expansion of the squared difference of sample means.

use crate::error::{dim_err, Error, Result};
use crate::numerics::{dot, Matrix};

/// Largest flattened moment vector the brute-force path will build.
pub const MAX_FLAT_LEN: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MomentOrder(u32);

impl MomentOrder {
    pub const MAX: u32 = 8;

    pub fn new(q: u32) -> Result<Self> {
        if !(1..=Self::MAX).contains(&q) {
            return Err(Error::Parameter(format!(
                "moment order {q} outside 1..={}",
                Self::MAX
            )));
        }
        Ok(Self(q))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

fn flat_len(p: usize, q: MomentOrder) -> Result<usize> {
    let mut len: usize = 1;
    for _ in 0..q.0 {
        len = len
            .checked_mul(p)
            .filter(|l| *l <= MAX_FLAT_LEN)
            .ok_or_else(|| Error::Scale(format!("p^q = {p}^{} exceeds {MAX_FLAT_LEN}", q.0)))?;
    }
    Ok(len)
}

/// Row-major flattening of the moment tensor: entry `(i_1,…,i_q)` is `Π_j z_{i_j}`.
pub fn phi_flatten(z: &[f64], q: MomentOrder) -> Result<Vec<f64>> {
    flat_len(z.len(), q)?;
    let mut out = vec![1.0];
    for _ in 0..q.0 {
        let mut next = Vec::with_capacity(out.len() * z.len());
        for &prefix in &out {
            next.extend(z.iter().map(|&x| prefix * x));
        }
        out = next;
    }
    Ok(out)
}

fn check_batches(u: &Matrix, v: &Matrix) -> Result<()> {
    if u.rows() == 0 || v.rows() == 0 {
        return Err(Error::Domain("moment distance of an empty batch".into()));
    }
    if u.cols() != v.cols() {
        return dim_err(format!(
            "latent widths {} and {} differ",
            u.cols(),
            v.cols()
        ));
    }
    Ok(())
}

fn mean_phi(batch: &Matrix, q: MomentOrder) -> Result<Vec<f64>> {
    let len = flat_len(batch.cols(), q)?;
    let mut acc = vec![0.0; len];
    for row in batch.iter_rows() {
        for (a, v) in acc.iter_mut().zip(phi_flatten(row, q)?) {
            *a += v;
        }
    }
    let n = batch.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `‖mean_U φ_q − mean_V φ_q‖²` through explicit moment tensors.
pub fn hm_bruteforce(u: &Matrix, v: &Matrix, q: MomentOrder) -> Result<f64> {
    check_batches(u, v)?;
    let mu = mean_phi(u, q)?;
    let mv = mean_phi(v, q)?;
    Ok(mu.iter().zip(&mv).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Mean of `(s·⟨x, y⟩)^q` over all ordered pairs drawn from `a` × `b`.
fn mean_pair_kernel(a: &Matrix, b: &Matrix, q: i32, scale: f64) -> f64 {
    let mut total = 0.0;
    for x in a.iter_rows() {
        let mut row_total = 0.0;
        for y in b.iter_rows() {
            row_total += (scale * dot(x, y)).powi(q);
        }
        total += row_total;
    }
    total / (a.rows() * b.rows()) as f64
}

/// Kernel form `E_UU[k] + E_VV[k] − 2 E_UV[k]` with `k(z,z') = (s·⟨z,z'⟩)^q`.
/// With `scale = 1` this equals [`hm_bruteforce`] in O((n_U + n_V)² · p).
pub fn hm_kernel(u: &Matrix, v: &Matrix, q: MomentOrder, scale: f64) -> Result<f64> {
    check_batches(u, v)?;
    let q = q.0 as i32;
    Ok(
        mean_pair_kernel(u, u, q, scale) + mean_pair_kernel(v, v, q, scale)
            - 2.0 * mean_pair_kernel(u, v, q, scale),
    )
}

/// Value and gradients of the class-aware moment-matching loss.
#[derive(Clone, Debug, PartialEq)]
pub struct CahommOutput {
    pub value: f64,
    /// ∂L/∂ source latents, aligned with the source rows.
    pub grad_source: Matrix,
    /// ∂L/∂ target latents.
    pub grad_target: Matrix,
    /// ∂L/∂ transport probabilities, `n_T × M`.
    pub grad_t_probs: Matrix,
    /// Classes with at least one source row in the batch (M′).
    pub classes_present: usize,
}

struct Groups {
    members: Vec<Vec<usize>>,
    present: usize,
}

fn validate_cahomm(
    source: &Matrix,
    labels: &[usize],
    target: &Matrix,
    t_probs: &Matrix,
) -> Result<Groups> {
    let m = t_probs.cols();
    if labels.len() != source.rows() {
        return dim_err(format!(
            "{} labels for {} source rows",
            labels.len(),
            source.rows()
        ));
    }
    if t_probs.rows() != target.rows() {
        return dim_err(format!(
            "{} transport rows for {} target rows",
            t_probs.rows(),
            target.rows()
        ));
    }
    if source.cols() != target.cols() {
        return dim_err("source and target latent widths differ");
    }
    if target.rows() == 0 {
        return Err(Error::Domain(
            "class-aware matching needs target rows".into(),
        ));
    }
    let mut members = vec![Vec::new(); m];
    for (i, &y) in labels.iter().enumerate() {
        if y >= m {
            return Err(Error::Data(format!("label index {y} out of {m} classes")));
        }
        members[y].push(i);
    }
    let present = members.iter().filter(|g| !g.is_empty()).count();
    Ok(Groups { members, present })
}

fn empty_output(source: &Matrix, target: &Matrix, t_probs: &Matrix) -> CahommOutput {
    CahommOutput {
        value: 0.0,
        grad_source: Matrix::zeros(source.rows(), source.cols()),
        grad_target: Matrix::zeros(target.rows(), target.cols()),
        grad_t_probs: Matrix::zeros(t_probs.rows(), t_probs.cols()),
        classes_present: 0,
    }
}

/// Class-aware higher-order moment matching,
/// `(1/M′) Σ_m ‖E_{source,m}[φ_q] − E_target[T_m · φ_q]‖²`, evaluated through
/// the source-source, weighted target-target and weighted cross kernel terms.
///
/// `labels` are 0-based. Classes without source rows are skipped and the
/// average is over the `M′` classes present.
pub fn cahomm_loss(
    source: &Matrix,
    labels: &[usize],
    target: &Matrix,
    t_probs: &Matrix,
    q: MomentOrder,
    scale: f64,
) -> Result<CahommOutput> {
    let groups = validate_cahomm(source, labels, target, t_probs)?;
    if groups.present == 0 {
        log::warn!("no class present in source batch; moment matching skipped");
        return Ok(empty_output(source, target, t_probs));
    }
    let (ns, nt, p) = (source.rows(), target.rows(), source.cols());
    let qi = q.0 as i32;
    let inv_m = 1.0 / groups.present as f64;

    // k = (s⟨x,y⟩)^q and its derivative coefficient q·s·(s⟨x,y⟩)^{q-1}
    let kernel = |x: &[f64], y: &[f64]| {
        let t = scale * dot(x, y);
        let tq1 = t.powi(qi - 1);
        (tq1 * t, q.0 as f64 * scale * tq1)
    };

    let mut grad_source = Matrix::zeros(ns, p);
    let mut grad_target = Matrix::zeros(nt, p);
    let mut grad_w = Matrix::zeros(nt, t_probs.cols());
    let mut value = 0.0;

    // source-source, within each class
    for idx in groups.members.iter().filter(|g| !g.is_empty()) {
        let coef = inv_m / (idx.len() * idx.len()) as f64;
        for &a in idx {
            let za = source.row(a);
            let mut g = vec![0.0; p];
            for &b in idx {
                let zb = source.row(b);
                let (k, dk) = kernel(za, zb);
                value += coef * k;
                for (gi, &zi) in g.iter_mut().zip(zb) {
                    *gi += 2.0 * coef * dk * zi;
                }
            }
            for (o, gi) in grad_source.row_mut(a).iter_mut().zip(g) {
                *o += gi;
            }
        }
    }

    // target-target, weighted by Σ_m w_jm w_lm over present classes
    let present: Vec<usize> = (0..t_probs.cols())
        .filter(|&m| !groups.members[m].is_empty())
        .collect();
    let tt_coef = inv_m / (nt * nt) as f64;
    for j in 0..nt {
        let zj = target.row(j);
        let wj = t_probs.row(j);
        let mut g = vec![0.0; p];
        for l in 0..nt {
            let zl = target.row(l);
            let wl = t_probs.row(l);
            let (k, dk) = kernel(zj, zl);
            let ww: f64 = present.iter().map(|&m| wj[m] * wl[m]).sum();
            value += tt_coef * ww * k;
            for (gi, &zi) in g.iter_mut().zip(zl) {
                *gi += 2.0 * tt_coef * ww * dk * zi;
            }
            for &m in &present {
                grad_w[(j, m)] += 2.0 * tt_coef * wl[m] * k;
            }
        }
        for (o, gi) in grad_target.row_mut(j).iter_mut().zip(g) {
            *o += gi;
        }
    }

    // cross terms
    for &m in &present {
        let idx = &groups.members[m];
        let coef = -2.0 * inv_m / (idx.len() * nt) as f64;
        for &a in idx {
            let za = source.row(a);
            for j in 0..nt {
                let zj = target.row(j);
                let w = t_probs[(j, m)];
                let (k, dk) = kernel(za, zj);
                value += coef * w * k;
                grad_w[(j, m)] += coef * k;
                let c = coef * w * dk;
                for (o, &zi) in grad_source.row_mut(a).iter_mut().zip(zj) {
                    *o += c * zi;
                }
                for (o, &zi) in grad_target.row_mut(j).iter_mut().zip(za) {
                    *o += c * zi;
                }
            }
        }
    }

    Ok(CahommOutput {
        value,
        grad_source,
        grad_target,
        grad_t_probs: grad_w,
        classes_present: groups.present,
    })
}

/// The same loss computed through explicit flattened moment tensors, with
/// gradients. Memory and time scale with `p^q`; used as an oracle and as the
/// baseline in timing comparisons.
pub fn cahomm_loss_flatten(
    source: &Matrix,
    labels: &[usize],
    target: &Matrix,
    t_probs: &Matrix,
    q: MomentOrder,
    scale: f64,
) -> Result<CahommOutput> {
    let groups = validate_cahomm(source, labels, target, t_probs)?;
    if groups.present == 0 {
        return Ok(empty_output(source, target, t_probs));
    }
    let (ns, nt, p) = (source.rows(), target.rows(), source.cols());
    let len = flat_len(p, q)?;
    // (s⟨x,y⟩)^q = ⟨s^{q/2} φ(x), s^{q/2} φ(y)⟩
    let amp = scale.powf(q.0 as f64 / 2.0);
    let phis = |batch: &Matrix| -> Result<Vec<Vec<f64>>> {
        batch
            .iter_rows()
            .map(|r| Ok(phi_flatten(r, q)?.into_iter().map(|v| amp * v).collect()))
            .collect()
    };
    let phi_s = phis(source)?;
    let phi_t = phis(target)?;
    let inv_m = 1.0 / groups.present as f64;

    let mut value = 0.0;
    // ∂L/∂φ per row
    let mut dphi_s = vec![vec![0.0; len]; ns];
    let mut dphi_t = vec![vec![0.0; len]; nt];
    let mut grad_w = Matrix::zeros(nt, t_probs.cols());
    for (m, idx) in groups.members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let mut diff = vec![0.0; len];
        for &a in idx {
            for (d, v) in diff.iter_mut().zip(&phi_s[a]) {
                *d += v / idx.len() as f64;
            }
        }
        for j in 0..nt {
            let w = t_probs[(j, m)] / nt as f64;
            for (d, v) in diff.iter_mut().zip(&phi_t[j]) {
                *d -= w * v;
            }
        }
        value += inv_m * diff.iter().map(|d| d * d).sum::<f64>();
        for &a in idx {
            let c = 2.0 * inv_m / idx.len() as f64;
            for (g, d) in dphi_s[a].iter_mut().zip(&diff) {
                *g += c * d;
            }
        }
        for j in 0..nt {
            let c = -2.0 * inv_m / nt as f64;
            grad_w[(j, m)] = c * dot(&diff, &phi_t[j]);
            let cw = c * t_probs[(j, m)];
            for (g, d) in dphi_t[j].iter_mut().zip(&diff) {
                *g += cw * d;
            }
        }
    }

    let pull_back = |batch: &Matrix, dphi: &[Vec<f64>]| -> Matrix {
        let mut out = Matrix::zeros(batch.rows(), p);
        for (r, g) in dphi.iter().enumerate() {
            let grad = phi_vjp(batch.row(r), q, g);
            for (o, v) in out.row_mut(r).iter_mut().zip(grad) {
                *o = amp * v;
            }
        }
        out
    };
    Ok(CahommOutput {
        value,
        grad_source: pull_back(source, &dphi_s),
        grad_target: pull_back(target, &dphi_t),
        grad_t_probs: grad_w,
        classes_present: groups.present,
    })
}

/// `∇_z ⟨g, φ_q(z)⟩` by walking every multi-index.
fn phi_vjp(z: &[f64], q: MomentOrder, g: &[f64]) -> Vec<f64> {
    let p = z.len();
    let q = q.0 as usize;
    let mut out = vec![0.0; p];
    let mut index = vec![0usize; q];
    let mut prefix = vec![1.0; q + 1];
    let mut suffix = vec![1.0; q + 1];
    for &gv in g {
        if gv != 0.0 {
            for k in 0..q {
                prefix[k + 1] = prefix[k] * z[index[k]];
            }
            for k in (0..q).rev() {
                suffix[k] = suffix[k + 1] * z[index[k]];
            }
            for k in 0..q {
                out[index[k]] += gv * prefix[k] * suffix[k + 1];
            }
        }
        // odometer increment, last position fastest (row-major)
        for k in (0..q).rev() {
            index[k] += 1;
            if index[k] < p {
                break;
            }
            index[k] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use crate::numerics::SeededStream;

    fn q(v: u32) -> MomentOrder {
        MomentOrder::new(v).unwrap()
    }

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn moment_order_bounds() {
        assert!(MomentOrder::new(0).is_err());
        assert!(MomentOrder::new(9).is_err());
        assert_eq!(MomentOrder::new(8).unwrap().get(), 8);
    }

    #[test]
    fn phi_examples() {
        assert_eq!(
            phi_flatten(&[1.0, 2.0], q(2)).unwrap(),
            vec![1.0, 2.0, 2.0, 4.0]
        );
        assert_eq!(
            phi_flatten(&[0.5, -3.0, 7.0], q(1)).unwrap(),
            vec![0.5, -3.0, 7.0]
        );
        let one_hot = phi_flatten(&[1.0, 0.0, 0.0], q(3)).unwrap();
        assert_eq!(one_hot.len(), 27);
        assert_eq!(one_hot[0], 1.0);
        assert!(one_hot[1..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn phi_refuses_oversized_tensors() {
        assert!(matches!(
            phi_flatten(&[1.0; 101], q(3)),
            Err(Error::Scale(_))
        ));
        assert!(phi_flatten(&[1.0; 100], q(3)).is_ok());
    }

    #[test]
    fn bruteforce_examples() {
        let u = m(&[&[1.0, 2.0], &[0.0, -1.0]]);
        assert_eq!(hm_bruteforce(&u, &u, q(3)).unwrap(), 0.0);

        let v = m(&[&[3.0, 0.5]]);
        // q = 1 reduces to squared distance of means: (0.5-3)^2 + (0.5-0.5)^2
        assert!((hm_bruteforce(&u, &v, q(1)).unwrap() - 6.25).abs() < 1e-12);

        let e1 = m(&[&[1.0, 0.0]]);
        let e2 = m(&[&[0.0, 1.0]]);
        assert_eq!(hm_bruteforce(&e1, &e2, q(2)).unwrap(), 2.0);
        assert_eq!(hm_kernel(&e1, &e2, q(2), 1.0).unwrap(), 2.0);

        assert!(matches!(
            hm_bruteforce(&Matrix::zeros(0, 2), &e1, q(1)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn kernel_identical_batches_is_exactly_zero() {
        let mut s = SeededStream::new(4);
        let u = s.random_matrix(6, 3, -2.0, 2.0);
        assert_eq!(hm_kernel(&u, &u, q(3), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn kernel_matches_bruteforce() {
        let mut s = SeededStream::new(10);
        for p in 2..=4 {
            for qq in 1..=3 {
                let u = s.random_matrix(5, p, -1.5, 1.5);
                let v = s.random_matrix(3, p, -1.5, 1.5);
                let b = hm_bruteforce(&u, &v, q(qq)).unwrap();
                let k = hm_kernel(&u, &v, q(qq), 1.0).unwrap();
                assert!(
                    (b - k).abs() <= 1e-10 * b.abs().max(1.0),
                    "p={p} q={qq}: {b} vs {k}"
                );
            }
        }
    }

    fn random_case(seed: u64, p: usize, m_classes: usize) -> (Matrix, Vec<usize>, Matrix, Matrix) {
        let mut s = SeededStream::new(seed);
        let ns = 5;
        let nt = 4;
        let source = s.random_matrix(ns, p, -1.0, 1.0);
        let labels: Vec<usize> = (0..ns).map(|i| i % m_classes).collect();
        let target = s.random_matrix(nt, p, -1.0, 1.0);
        let mut probs = s.random_matrix(nt, m_classes, 0.1, 1.0);
        for r in 0..nt {
            let t: f64 = probs.row(r).iter().sum();
            probs.row_mut(r).iter_mut().for_each(|v| *v /= t);
        }
        (source, labels, target, probs)
    }

    #[test]
    fn cahomm_single_class_reduces_to_kernel_distance() {
        let (source, _, target, _) = random_case(3, 3, 1);
        let labels = vec![0; source.rows()];
        let ones = Matrix::filled(target.rows(), 1, 1.0);
        let out = cahomm_loss(&source, &labels, &target, &ones, q(3), 0.5).unwrap();
        let want = hm_kernel(&source, &target, q(3), 0.5).unwrap();
        assert!((out.value - want).abs() < 1e-12);
    }

    #[test]
    fn cahomm_zero_weights_leave_source_self_term() {
        let (source, labels, target, _) = random_case(8, 2, 2);
        let zeros = Matrix::zeros(target.rows(), 2);
        let out = cahomm_loss(&source, &labels, &target, &zeros, q(2), 1.0).unwrap();
        let mut want = 0.0;
        for c in 0..2 {
            let rows: Vec<usize> = (0..source.rows()).filter(|&i| labels[i] == c).collect();
            let sub = source.select_rows(&rows);
            want += mean_pair_kernel(&sub, &sub, 2, 1.0);
        }
        assert!((out.value - want / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cahomm_kernel_and_flatten_forms_agree() {
        for (seed, p, mc, qq, scale) in [(1, 2, 2, 2, 1.0), (2, 3, 3, 3, 0.5), (3, 4, 2, 1, 0.25)] {
            let (source, labels, target, probs) = random_case(seed, p, mc);
            let a = cahomm_loss(&source, &labels, &target, &probs, q(qq), scale).unwrap();
            let b = cahomm_loss_flatten(&source, &labels, &target, &probs, q(qq), scale).unwrap();
            assert!((a.value - b.value).abs() < 1e-12 * a.value.abs().max(1.0));
            for (x, y) in [
                (&a.grad_source, &b.grad_source),
                (&a.grad_target, &b.grad_target),
                (&a.grad_t_probs, &b.grad_t_probs),
            ] {
                for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
                    assert!((u - v).abs() < 1e-11, "{u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn cahomm_skips_absent_classes() {
        let (source, _, target, probs) = random_case(5, 2, 3);
        let labels = vec![1; source.rows()];
        let out = cahomm_loss(&source, &labels, &target, &probs, q(2), 1.0).unwrap();
        assert_eq!(out.classes_present, 1);
        // only class 1 contributes
        let w: Vec<f64> = (0..target.rows()).map(|j| probs[(j, 1)]).collect();
        let mut tgt_mean = vec![0.0; 4];
        for (j, row) in target.iter_rows().enumerate() {
            for (acc, v) in tgt_mean.iter_mut().zip(phi_flatten(row, q(2)).unwrap()) {
                *acc += w[j] * v / target.rows() as f64;
            }
        }
        let src_mean = mean_phi(&source, q(2)).unwrap();
        let want: f64 = src_mean
            .iter()
            .zip(&tgt_mean)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!((out.value - want).abs() < 1e-12);
        assert!(out.grad_t_probs.column(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cahomm_with_empty_source_is_skipped() {
        let target = Matrix::filled(2, 2, 1.0);
        let probs = Matrix::filled(2, 2, 0.5);
        let out = cahomm_loss(&Matrix::zeros(0, 2), &[], &target, &probs, q(2), 1.0).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.classes_present, 0);
    }

    #[test]
    fn cahomm_gradients_pass_finite_differences() {
        let (source, labels, target, probs) = random_case(17, 3, 2);
        let (ns, nt, p, mc) = (source.rows(), target.rows(), 3, 2);
        let pack = [source.as_slice(), target.as_slice(), probs.as_slice()].concat();
        let loss = |x: &[f64]| {
            let s = Matrix::from_vec(ns, p, x[..ns * p].to_vec()).unwrap();
            let t = Matrix::from_vec(nt, p, x[ns * p..(ns + nt) * p].to_vec()).unwrap();
            let w = Matrix::from_vec(nt, mc, x[(ns + nt) * p..].to_vec()).unwrap();
            let out = cahomm_loss(&s, &labels, &t, &w, q(3), 0.7).unwrap();
            let g = [
                out.grad_source.as_slice(),
                out.grad_target.as_slice(),
                out.grad_t_probs.as_slice(),
            ]
            .concat();
            (out.value, g)
        };
        let err = grad_check(loss, &pack, 1e-5);
        assert!(err < 1e-4, "relative error {err}");
    }
}
