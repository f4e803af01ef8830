//! Finite-difference checks of every training loss on a small network.

use crate::error::Result;
use crate::nn::{grad_check, Activation};
use crate::numerics::{Matrix, SeededStream};

use super::config::TrainConfig;
use super::losses::{
    discriminator_loss, generator_loss, loss_classifier, loss_entropy, loss_generator_adversarial,
    loss_hmm, loss_transport, GeneratorWeights, LossOutput, LossSettings,
};
use super::model::{ClothModel, ModelGrads, NetId};

/// Largest parameter count a check may use.
pub const MAX_PARAMS: usize = 500;

/// Worst relative error of one loss against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub loss: &'static str,
    pub shared_ct: bool,
    pub params: usize,
    pub rel_error: f64,
}

/// Small tanh model with fixed batches; dropout is never applied.
pub struct Fixture {
    pub model: ClothModel,
    pub xs: Matrix,
    pub ys: Vec<usize>,
    pub xt: Matrix,
    pub settings: LossSettings,
}

impl Fixture {
    pub fn new(share_ct: bool, seed: u64) -> Result<Self> {
        let cfg = TrainConfig {
            feature_dim: 4,
            g_hidden: vec![6],
            d_hidden: vec![5],
            activation: Activation::Tanh,
            share_ct,
            q: 3,
            ..TrainConfig::default()
        };
        let mut s = SeededStream::new(seed);
        let model = ClothModel::new(&cfg, 3, 3, &mut s)?;
        let xs = s.random_matrix(7, 3, -1.5, 1.5);
        let xt = s.random_matrix(6, 3, -1.5, 1.5);
        let ys = vec![0, 1, 2, 0, 1, 2, 1];
        let settings = LossSettings {
            hmm_scale: 0.5,
            ..LossSettings::from_config(&cfg)?
        };
        Ok(Self {
            model,
            xs,
            ys,
            xt,
            settings,
        })
    }

    fn grad_flat(&self, model: &ClothModel, grads: &ModelGrads, ids: &[NetId]) -> Vec<f64> {
        let mut out = Vec::new();
        for id in ids {
            let Some(net) = model.net(*id) else { continue };
            let g = match id {
                NetId::G => &grads.g,
                NetId::C => &grads.c,
                NetId::T => &grads.t,
                NetId::D => &grads.d,
            };
            match g {
                Some(g) => out.extend(g.to_flat()),
                None => out.extend(vec![0.0; net.params.len()]),
            }
        }
        out
    }

    fn param_count(&self, ids: &[NetId]) -> usize {
        ids.iter()
            .filter_map(|id| self.model.net(*id))
            .map(|n| n.params.len())
            .sum()
    }

    /// Worst relative error of `loss` over the parameters of `ids`.
    pub fn check(
        &self,
        ids: &[NetId],
        loss: impl Fn(&ClothModel) -> Result<LossOutput>,
    ) -> Result<f64> {
        let x0 = self.model.flat_params(ids);
        let mut failure = None;
        let err = grad_check(
            |x| {
                let mut m = self.model.clone();
                let out = m.set_flat_params(ids, x).and_then(|_| loss(&m));
                match out {
                    Ok(out) => {
                        let g = self.grad_flat(&m, &out.grads, ids);
                        (out.value, g)
                    }
                    Err(e) => {
                        failure.get_or_insert(e);
                        (f64::NAN, vec![0.0; x.len()])
                    }
                }
            },
            &x0,
            1e-5,
        );
        match failure {
            Some(e) => Err(e),
            None => Ok(err),
        }
    }
}

const GEN: [NetId; 3] = [NetId::G, NetId::C, NetId::T];

/// Runs every loss with and without a shared C/T network.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let combined = GeneratorWeights {
        classifier: 1.0,
        adversarial: 1.0,
        transport: 0.1,
        entropy: 0.1,
        hmm: 0.01,
    };
    let mut out = Vec::new();
    for shared_ct in [false, true] {
        let f = Fixture::new(shared_ct, seed)?;
        let s = &f.settings;
        type LossFn<'a> = Box<dyn Fn(&ClothModel) -> Result<LossOutput> + 'a>;
        let cases: Vec<(&'static str, &[NetId], LossFn)> = vec![
            (
                "classifier",
                &GEN,
                Box::new(|m| loss_classifier(m, &f.xs, &f.ys, s, None)),
            ),
            (
                "discriminator",
                &[NetId::D],
                Box::new(|m| discriminator_loss(m, &f.xs, &f.ys, &f.xt, s, None)),
            ),
            (
                "transport",
                &GEN,
                Box::new(|m| loss_transport(m, &f.xs, &f.ys, &f.xt, s, None)),
            ),
            (
                "entropy",
                &GEN,
                Box::new(|m| loss_entropy(m, &f.xt, s, None)),
            ),
            (
                "adversarial",
                &GEN,
                Box::new(|m| loss_generator_adversarial(m, &f.xs, &f.xt, s, None)),
            ),
            (
                "hmm",
                &GEN,
                Box::new(|m| loss_hmm(m, &f.xs, &f.ys, &f.xt, s, None)),
            ),
            (
                "combined",
                &GEN,
                Box::new(|m| generator_loss(m, &f.xs, &f.ys, &f.xt, &combined, s, false, None)),
            ),
        ];
        for (loss, ids, run) in cases {
            out.push(GradCheck {
                loss,
                shared_ct,
                params: f.param_count(ids),
                rel_error: f.check(ids, run)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_matches_finite_differences() {
        let checks = gradient_suite(11).unwrap();
        assert_eq!(checks.len(), 14);
        for c in &checks {
            assert!(c.params <= MAX_PARAMS, "{c:?}");
            assert!(c.rel_error <= 1e-4, "{c:?}");
        }
    }
}
