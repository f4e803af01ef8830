use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::serial::NetworkDoc;
use crate::nn::{MlpParams, MlpSpec, Network, OutputHead};
use crate::numerics::{Matrix, SeededStream};

/// Generator G, classifier C, transport head T and discriminator D.
///
/// With `share_ct` the transport head is C itself and `t` is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClothModel {
    pub g: Network,
    pub c: Network,
    pub t: Option<Network>,
    pub d: Network,
    pub num_classes: usize,
}

/// Gradients of one loss; `None` for networks the loss does not update.
#[derive(Clone, Debug, Default)]
pub struct ModelGrads {
    pub g: Option<MlpParams>,
    pub c: Option<MlpParams>,
    pub t: Option<MlpParams>,
    pub d: Option<MlpParams>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetId {
    G,
    C,
    T,
    D,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl ClothModel {
    pub fn new(
        cfg: &TrainConfig,
        input_dim: usize,
        num_classes: usize,
        stream: &mut SeededStream,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let p = cfg.feature_dim;
        let mut g_spec = MlpSpec::new(
            widths(input_dim, &cfg.g_hidden, p),
            cfg.activation,
            OutputHead::Activated,
        )
        .with_dropout(cfg.dropout_keep_g);
        g_spec.output_dropout = cfg.dropout_adapted_layer;
        let head = |hidden: &[usize], out: usize| {
            MlpSpec::new(widths(p, hidden, out), cfg.activation, OutputHead::Softmax)
                .with_dropout(cfg.dropout_keep_heads)
        };
        let d_out = if cfg.binary_discriminator {
            2
        } else {
            num_classes + 1
        };
        let rho = cfg.polyak_decay;
        let g = Network::init(g_spec, rho, &mut stream.substream("init/g"))?;
        let c = Network::init(
            head(&cfg.c_hidden, num_classes),
            rho,
            &mut stream.substream("init/c"),
        )?;
        let t = if cfg.share_ct {
            None
        } else {
            Some(Network::init(
                head(&cfg.t_hidden, num_classes),
                rho,
                &mut stream.substream("init/t"),
            )?)
        };
        let d = Network::init(
            head(&cfg.d_hidden, d_out),
            rho,
            &mut stream.substream("init/d"),
        )?;
        Ok(Self {
            g,
            c,
            t,
            d,
            num_classes,
        })
    }

    pub fn t_net(&self) -> &Network {
        self.t.as_ref().unwrap_or(&self.c)
    }

    pub fn feature_dim(&self) -> usize {
        self.g.spec.output_width()
    }

    pub fn input_dim(&self) -> usize {
        self.g.spec.input_width()
    }

    /// True when D carries one output per class plus the target output.
    pub fn class_aware_d(&self) -> bool {
        self.d.spec.output_width() == self.num_classes + 1
    }

    pub fn net(&self, id: NetId) -> Option<&Network> {
        match id {
            NetId::G => Some(&self.g),
            NetId::C => Some(&self.c),
            NetId::T => self.t.as_ref(),
            NetId::D => Some(&self.d),
        }
    }

    pub fn net_mut(&mut self, id: NetId) -> Option<&mut Network> {
        match id {
            NetId::G => Some(&mut self.g),
            NetId::C => Some(&mut self.c),
            NetId::T => self.t.as_mut(),
            NetId::D => Some(&mut self.d),
        }
    }

    /// Live parameters of the listed networks, concatenated.
    pub fn flat_params(&self, ids: &[NetId]) -> Vec<f64> {
        ids.iter()
            .filter_map(|id| self.net(*id))
            .flat_map(|n| n.params.to_flat())
            .collect()
    }

    pub fn set_flat_params(&mut self, ids: &[NetId], flat: &[f64]) -> Result<()> {
        let mut at = 0;
        for id in ids {
            if let Some(n) = self.net_mut(*id) {
                let len = n.params.len();
                let chunk = flat
                    .get(at..at + len)
                    .ok_or_else(|| Error::Dimension("flat parameter vector too short".into()))?;
                n.params.assign_flat(chunk)?;
                at += len;
            }
        }
        if at != flat.len() {
            return Err(Error::Dimension("flat parameter vector too long".into()));
        }
        Ok(())
    }

    /// Class probabilities of the Polyak-averaged C∘G.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        self.c.predict_shadow(&self.g.predict_shadow(x)?)
    }

    /// Argmax of [`Self::predict_proba`]; ties go to the lowest class.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.predict_proba(x)?.iter_rows().map(argmax).collect())
    }

    pub fn is_finite(&self) -> bool {
        [Some(&self.g), Some(&self.c), self.t.as_ref(), Some(&self.d)]
            .into_iter()
            .flatten()
            .all(|n| n.params.is_finite())
    }

    pub fn to_json(&self, config: &TrainConfig) -> Result<String> {
        let doc = ModelDoc {
            format: MODEL_FORMAT.into(),
            config_hash: config_hash(config)?,
            num_classes: self.num_classes,
            g: (&self.g).into(),
            c: (&self.c).into(),
            t: self.t.as_ref().map(Into::into),
            d: (&self.d).into(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses a model document, returning the model and its config hash.
    pub fn from_json(text: &str) -> Result<(Self, String)> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        if doc.format != MODEL_FORMAT {
            return Err(Error::Data(format!(
                "unsupported model format {:?}",
                doc.format
            )));
        }
        let model = ClothModel {
            g: doc.g.into_network()?,
            c: doc.c.into_network()?,
            t: doc.t.map(NetworkDoc::into_network).transpose()?,
            d: doc.d.into_network()?,
            num_classes: doc.num_classes,
        };
        Ok((model, doc.config_hash))
    }

    pub fn save(&self, path: &Path, config: &TrainConfig) -> Result<()> {
        fs::write(path, self.to_json(config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

pub const MODEL_FORMAT: &str = "cloth-model/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format: String,
    config_hash: String,
    num_classes: usize,
    g: NetworkDoc,
    c: NetworkDoc,
    t: Option<NetworkDoc>,
    d: NetworkDoc,
}

/// SHA-256 of the config's JSON form plus its seed.
pub fn config_hash(config: &TrainConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update(config.seed.to_le_bytes());
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
