use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::MomentOrder;
use crate::nn::Activation;
use crate::numerics::LOG_FLOOR;

fn default_seed() -> u64 {
    0
}

fn default_log_every() -> usize {
    100
}

/// Hyperparameters of one training run.
///
/// `seed` and `log_every` live at the top level of a run file and are copied
/// in by the loader, so they are not part of this object's JSON form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the transport loss.
    pub alpha: f64,
    /// Weight of the equal-movement entropy loss.
    pub beta: f64,
    /// Weight of the class-aware moment loss.
    pub gamma: f64,
    /// Include the generator's adversarial terms.
    pub adversarial: bool,
    pub q: u32,
    pub lr: f64,
    pub batch_size: usize,
    pub iters: usize,
    #[serde(skip, default = "default_seed")]
    pub seed: u64,
    #[serde(skip, default = "default_log_every")]
    pub log_every: usize,
    pub feature_dim: usize,
    pub g_hidden: Vec<usize>,
    pub c_hidden: Vec<usize>,
    pub t_hidden: Vec<usize>,
    pub d_hidden: Vec<usize>,
    pub activation: Activation,
    /// Keep probability for hidden activations of G.
    pub dropout_keep_g: f64,
    /// Keep probability for hidden activations of C, T and D.
    pub dropout_keep_heads: f64,
    /// Also drop units of G's output layer.
    pub dropout_adapted_layer: bool,
    pub polyak_decay: f64,
    pub log_floor: f64,
    /// Inner-product scale of the moment kernel; `None` means `1/feature_dim`.
    pub hmm_scale: Option<f64>,
    /// T reuses C's network.
    pub share_ct: bool,
    /// Collapse D to a source/target classifier. Incompatible with `alpha > 0`.
    pub binary_discriminator: bool,
    /// Replace T's target rows by a Sinkhorn plan with this ε.
    pub sinkhorn_epsilon: Option<f64>,
    /// Smoothing of the logged transport-cost estimate.
    pub w_smoothing: f64,
    /// Fraction of the source held out for snapshot selection.
    pub val_fraction: f64,
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.01,
            adversarial: true,
            q: 3,
            lr: 1e-4,
            batch_size: 128,
            iters: 3000,
            seed: 0,
            log_every: default_log_every(),
            feature_dim: 16,
            g_hidden: vec![64, 64],
            c_hidden: vec![],
            t_hidden: vec![],
            d_hidden: vec![64],
            activation: Activation::Relu,
            dropout_keep_g: 0.8,
            dropout_keep_heads: 0.8,
            dropout_adapted_layer: false,
            polyak_decay: 0.998,
            log_floor: LOG_FLOOR,
            hmm_scale: None,
            share_ct: false,
            binary_discriminator: false,
            sinkhorn_epsilon: None,
            w_smoothing: 0.99,
            val_fraction: 0.1,
            select_best: true,
        }
    }
}

/// Loss groups switched on by each ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub adversarial: bool,
    pub transport: bool,
    pub entropy: bool,
    pub hmm: bool,
}

impl AblationRow {
    pub const ROWS: [AblationRow; 7] = [
        AblationRow::new(false, false, false, false),
        AblationRow::new(true, false, false, false),
        AblationRow::new(true, true, false, false),
        AblationRow::new(true, true, true, false),
        AblationRow::new(true, true, false, true),
        AblationRow::new(true, false, true, true),
        AblationRow::new(true, true, true, true),
    ];

    pub const fn new(adversarial: bool, transport: bool, entropy: bool, hmm: bool) -> Self {
        Self {
            adversarial,
            transport,
            entropy,
            hmm,
        }
    }

    /// Row by its 1-based number.
    pub fn number(n: usize) -> Result<Self> {
        n.checked_sub(1)
            .and_then(|i| Self::ROWS.get(i).copied())
            .ok_or_else(|| Error::Config(format!("ablation row must be 1..=7, got {n}")))
    }
}

impl TrainConfig {
    pub fn moment_order(&self) -> Result<MomentOrder> {
        MomentOrder::new(self.q).map_err(|e| Error::Config(format!("q: {e}")))
    }

    pub fn resolved_hmm_scale(&self) -> f64 {
        self.hmm_scale.unwrap_or(1.0 / self.feature_dim as f64)
    }

    /// Zeroes the weights of the groups the row leaves out, keeping the
    /// configured weights of the rest.
    pub fn with_ablation(&self, row: AblationRow) -> Self {
        let mut c = self.clone();
        c.adversarial = row.adversarial;
        if !row.transport {
            c.alpha = 0.0;
        }
        if !row.entropy {
            c.beta = 0.0;
        }
        if !row.hmm {
            c.gamma = 0.0;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, format!("must be a finite value >= 0, got {v}"));
            }
        }
        self.moment_order()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad(
                "batch_size",
                format!("must be >= 2, got {}", self.batch_size),
            );
        }
        if self.log_every == 0 {
            return bad("log_every", "must be >= 1".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be >= 1".into());
        }
        for (name, w) in [
            ("g_hidden", &self.g_hidden),
            ("c_hidden", &self.c_hidden),
            ("t_hidden", &self.t_hidden),
            ("d_hidden", &self.d_hidden),
        ] {
            if w.contains(&0) {
                return bad(name, "layer widths must be positive".into());
            }
        }
        for (name, k) in [
            ("dropout_keep_g", self.dropout_keep_g),
            ("dropout_keep_heads", self.dropout_keep_heads),
        ] {
            if !(k > 0.0 && k <= 1.0) {
                return bad(name, format!("must lie in (0, 1], got {k}"));
            }
        }
        if !(0.0..1.0).contains(&self.polyak_decay) {
            return bad(
                "polyak_decay",
                format!("must lie in [0, 1), got {}", self.polyak_decay),
            );
        }
        if !(self.log_floor > 0.0 && self.log_floor < 1.0) {
            return bad(
                "log_floor",
                format!("must lie in (0, 1), got {}", self.log_floor),
            );
        }
        if let Some(s) = self.hmm_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad("hmm_scale", format!("must be positive, got {s}"));
            }
        }
        if let Some(e) = self.sinkhorn_epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return bad("sinkhorn_epsilon", format!("must be positive, got {e}"));
            }
        }
        if self.binary_discriminator && self.alpha > 0.0 {
            return bad(
                "binary_discriminator",
                "a two-output discriminator provides no class costs; set alpha to 0".into(),
            );
        }
        if self.share_ct && self.c_hidden != self.t_hidden {
            return bad(
                "share_ct",
                "c_hidden and t_hidden must match when T reuses C".into(),
            );
        }
        if !(0.0..1.0).contains(&self.w_smoothing) {
            return bad(
                "w_smoothing",
                format!("must lie in [0, 1), got {}", self.w_smoothing),
            );
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return bad(
                "val_fraction",
                format!("must lie in [0, 0.5), got {}", self.val_fraction),
            );
        }
        Ok(())
    }
}
