use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use super::config::TrainConfig;
use super::losses::{
    discriminator_loss, generator_loss, GeneratorWeights, LossOutput, LossSettings,
};
use super::model::{ClothModel, ModelGrads};
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededStream};

pub const METRICS_HEADER: &str = "iter,L_C,L_D,L_t,L_ent,L_HMM,W_est,src_acc,tgt_acc,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainMetricsRow {
    pub iter: usize,
    pub l_c: f64,
    pub l_d: f64,
    pub l_t: f64,
    pub l_ent: f64,
    pub l_hmm: f64,
    pub w_est: f64,
    pub src_acc: f64,
    pub tgt_acc: f64,
    pub wall_ms: u64,
}

impl TrainMetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.l_c,
            self.l_d,
            self.l_t,
            self.l_ent,
            self.l_hmm,
            self.w_est,
            self.src_acc,
            self.tgt_acc,
            self.wall_ms
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_c,
            self.l_d,
            self.l_t,
            self.l_ent,
            self.l_hmm,
            self.w_est,
            self.src_acc,
            self.tgt_acc,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Consumer of the metrics stream.
pub trait MetricsSink {
    fn record(&mut self, row: &TrainMetricsRow) -> Result<()>;
}

impl MetricsSink for Vec<TrainMetricsRow> {
    fn record(&mut self, row: &TrainMetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Discards every row.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &TrainMetricsRow) -> Result<()> {
        Ok(())
    }
}

/// Writes the header on creation, then one CSV line per row.
pub struct CsvSink<W: Write> {
    out: W,
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for CsvSink<W> {
    fn record(&mut self, row: &TrainMetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.csv_line())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Accuracy, per-class accuracy and confusion counts of the shadow C∘G.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes absent from the dataset.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(model: &ClothModel, data: &Dataset) -> Result<EvalReport> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Data("evaluation needs labels".into()))?;
    let m = model.num_classes;
    let mut confusion = vec![vec![0; m]; m];
    if !data.is_empty() {
        for (&y, p) in labels.iter().zip(model.predict(data.features())?) {
            confusion[y][p] += 1;
        }
    }
    let correct: usize = (0..m).map(|k| confusion[k][k]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[k] as f64 / n as f64)
        })
        .collect();
    Ok(EvalReport {
        accuracy: if data.is_empty() {
            0.0
        } else {
            correct as f64 / data.len() as f64
        },
        per_class,
        confusion,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Selected snapshot (the final model when selection is off).
    pub model: ClothModel,
    pub selected_iter: usize,
    pub selected_val_acc: Option<f64>,
    pub final_w_est: f64,
    /// Generator steps in which no source class was present for the moment loss.
    pub hmm_skips: usize,
    pub last_parts: super::losses::LossParts,
    pub last_l_d: f64,
}

#[derive(Debug)]
pub enum TrainError {
    Invalid(Error),
    /// A non-finite loss or gradient stopped training; `checkpoint` holds the
    /// model as of the last successful step.
    Aborted {
        error: Error,
        iter: usize,
        checkpoint: Box<ClothModel>,
    },
}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Invalid(e)
    }
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Invalid(e) => write!(f, "{e}"),
            TrainError::Aborted { error, iter, .. } => {
                write!(f, "training aborted at iteration {iter}: {error}")
            }
        }
    }
}

impl std::error::Error for TrainError {}

fn finite_grads(g: &ModelGrads) -> bool {
    [&g.g, &g.c, &g.t, &g.d]
        .into_iter()
        .flatten()
        .all(|p| p.is_finite())
}

fn check_step(out: &LossOutput, what: &str) -> Result<()> {
    if !out.value.is_finite() {
        return Err(Error::Training(format!("{what} loss is {}", out.value)));
    }
    if !finite_grads(&out.grads) {
        return Err(Error::Training(format!("{what} gradient is not finite")));
    }
    Ok(())
}

fn apply(model: &mut ClothModel, grads: &ModelGrads, lr: f64) -> Result<()> {
    if let Some(g) = &grads.g {
        model.g.step(g, lr)?;
    }
    if let Some(g) = &grads.c {
        model.c.step(g, lr)?;
    }
    if let (Some(g), Some(t)) = (&grads.t, model.t.as_mut()) {
        t.step(g, lr)?;
    }
    if let Some(g) = &grads.d {
        model.d.step(g, lr)?;
    }
    Ok(())
}

fn accuracy_or_zero(model: &ClothModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    Ok(evaluate(model, data)?.accuracy)
}

/// Alternating training. Each iteration samples fresh batches and updates D,
/// then samples fresh batches and updates G, C and T on the weighted
/// generator objective. A metrics row is emitted every `log_every`
/// iterations.
///
/// The target dataset's labels are read only to report `tgt_acc`; the loss
/// path receives its features alone.
pub fn train(
    config: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    sink: &mut dyn MetricsSink,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let m = source.num_classes();
    if source.labels().is_none() {
        return Err(Error::Data("source dataset needs labels".into()).into());
    }
    if source.dim() != target.dim() {
        return Err(Error::Dimension(format!(
            "source has {} features, target {}",
            source.dim(),
            target.dim()
        ))
        .into());
    }
    if target.num_classes() != m {
        return Err(Error::Data("source and target disagree on the class count".into()).into());
    }

    let root = SeededStream::new(config.seed);
    let select = config.select_best && config.val_fraction > 0.0;
    let (train_src, val_src) = if select {
        source.split(config.val_fraction, &mut root.substream("split"))
    } else {
        (source.clone(), source.subset(&[]))
    };
    let target_x: &Matrix = target.unlabeled().features();
    let b = config.batch_size;
    if b > train_src.len() || b > target_x.rows() {
        return Err(Error::Config(format!(
            "batch_size {b} exceeds the {} source training rows or {} target rows",
            train_src.len(),
            target_x.rows()
        ))
        .into());
    }

    let mut model = ClothModel::new(config, source.dim(), m, &mut root.substream("init"))?;
    let settings = LossSettings::from_config(config)?;
    let weights = GeneratorWeights::from_config(config);
    // D feeds nothing when neither the adversarial nor the transport terms are on
    let train_d = weights.adversarial != 0.0 || weights.transport != 0.0;
    let dropout = config.dropout_keep_g < 1.0 || config.dropout_keep_heads < 1.0;

    let mut d_src = batch_iter(train_src.len(), b, root.substream("batches/d/source"))?;
    let mut d_tgt = batch_iter(target_x.rows(), b, root.substream("batches/d/target"))?;
    let mut g_src = batch_iter(train_src.len(), b, root.substream("batches/g/source"))?;
    let mut g_tgt = batch_iter(target_x.rows(), b, root.substream("batches/g/target"))?;
    let mut drop_rng = root.substream("dropout");
    let src_labels = train_src.labels().unwrap();

    let start = Instant::now();
    let mut w_est = f64::NAN;
    let mut l_d = 0.0;
    let mut hmm_skips = 0;
    let mut best: Option<(f64, usize, ClothModel)> = None;
    let mut last_parts = Default::default();
    let eval_src = if val_src.is_empty() {
        &train_src
    } else {
        &val_src
    };

    for it in 1..=config.iters {
        let abort = |error: Error, model: &ClothModel| TrainError::Aborted {
            error,
            iter: it,
            checkpoint: Box::new(model.clone()),
        };

        if train_d {
            let si = d_src.next().unwrap();
            let ti = d_tgt.next().unwrap();
            let ys: Vec<usize> = si.iter().map(|&i| src_labels[i]).collect();
            let out = discriminator_loss(
                &model,
                &train_src.features().select_rows(&si),
                &ys,
                &target_x.select_rows(&ti),
                &settings,
                dropout.then_some(&mut drop_rng),
            )
            .map_err(|e| abort(e, &model))?;
            check_step(&out, "discriminator").map_err(|e| abort(e, &model))?;
            apply(&mut model, &out.grads, config.lr).map_err(|e| abort(e, &model))?;
            l_d = out.value;
        }

        let si = g_src.next().unwrap();
        let ti = g_tgt.next().unwrap();
        let ys: Vec<usize> = si.iter().map(|&i| src_labels[i]).collect();
        let out = generator_loss(
            &model,
            &train_src.features().select_rows(&si),
            &ys,
            &target_x.select_rows(&ti),
            &weights,
            &settings,
            true,
            dropout.then_some(&mut drop_rng),
        )
        .map_err(|e| abort(e, &model))?;
        check_step(&out, "generator").map_err(|e| abort(e, &model))?;
        apply(&mut model, &out.grads, config.lr).map_err(|e| abort(e, &model))?;

        if out.parts.hmm_classes == 0 {
            hmm_skips += 1;
        }
        let wt = out.parts.transport_target;
        w_est = if it == 1 {
            wt
        } else {
            config.w_smoothing * w_est + (1.0 - config.w_smoothing) * wt
        };
        last_parts = out.parts;

        if it % config.log_every == 0 || it == config.iters {
            let src_acc = accuracy_or_zero(&model, eval_src)?;
            if it % config.log_every == 0 {
                let tgt_acc = accuracy_or_zero(&model, target)?;
                let row = TrainMetricsRow {
                    iter: it,
                    l_c: out.parts.classifier,
                    l_d,
                    l_t: out.parts.transport,
                    l_ent: out.parts.entropy,
                    l_hmm: out.parts.hmm,
                    w_est,
                    src_acc,
                    tgt_acc,
                    wall_ms: start.elapsed().as_millis() as u64,
                };
                sink.record(&row)?;
            }
            if select && best.as_ref().is_none_or(|(acc, _, _)| src_acc >= *acc) {
                best = Some((src_acc, it, model.clone()));
            }
        }
    }

    let (model, selected_iter, selected_val_acc) = match best {
        Some((acc, it, snap)) => (snap, it, Some(acc)),
        None => (model, config.iters, None),
    };
    Ok(TrainOutput {
        model,
        selected_iter,
        selected_val_acc,
        final_w_est: w_est,
        hmm_skips,
        last_parts,
        last_l_d: l_d,
    })
}
