//! Multilayer perceptrons with hand-written reverse-mode gradients, Adam with
//! Polyak parameter averaging, and a central-difference gradient checker.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{softmax_into, Matrix, SeededStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the activation value.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

/// What the last layer emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Linear,
    Softmax,
    /// The hidden activation applied to the last layer; used for feature extractors.
    Activated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_head: OutputHead,
    /// Keep probability of the dropout applied after every hidden activation.
    pub dropout_keep: f64,
    /// Also apply dropout to an `Activated` output layer.
    #[serde(default)]
    pub output_dropout: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden_activation: Activation, output_head: OutputHead) -> Self {
        Self {
            widths,
            hidden_activation,
            output_head,
            dropout_keep: 1.0,
            output_dropout: false,
        }
    }

    pub fn with_dropout(mut self, keep: f64) -> Self {
        self.dropout_keep = keep;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Parameter(format!(
                "an MLP needs at least two widths, got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Parameter(format!(
                "zero layer width in {:?}",
                self.widths
            )));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Parameter(format!(
                "dropout keep {} outside (0, 1]",
                self.dropout_keep
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn dropout_after(&self, layer: usize) -> bool {
        if self.dropout_keep >= 1.0 {
            return false;
        }
        let last = layer + 2 == self.widths.len();
        !last || (self.output_dropout && self.output_head == OutputHead::Activated)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in × fan_out`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Uniform Glorot initialisation with zero biases.
    pub fn glorot(spec: &MlpSpec, stream: &mut SeededStream) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    weight: stream.random_matrix(w[0], w[1], -limit, limit),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Layer {
                weight: Matrix::zeros(w[0], w[1]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalars in canonical order: per layer, weights row-major then biases.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return dim_err(format!(
                "{} values for {} parameters",
                flat.len(),
                self.len()
            ));
        }
        for (p, v) in self.iter_mut().zip(flat) {
            *p = *v;
        }
        Ok(())
    }

    pub fn from_flat(spec: &MlpSpec, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(spec);
        p.assign_flat(flat)?;
        Ok(p)
    }

    pub fn add_assign(&mut self, other: &MlpParams) -> Result<()> {
        if self.len() != other.len() {
            return dim_err("parameter sets differ in size");
        }
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    fn matches(&self, spec: &MlpSpec) -> bool {
        self.layers.len() + 1 == spec.widths.len()
            && self
                .layers
                .iter()
                .zip(spec.widths.windows(2))
                .all(|(l, w)| l.weight.shape() == (w[0], w[1]) && l.bias.len() == w[1])
    }
}

/// Forward-pass mode. Training draws inverted-dropout masks from the stream;
/// evaluation is deterministic and uses no mask.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SeededStream),
}

/// Intermediate values retained for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input of each layer, after dropout of the previous activation.
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    /// Activation (before dropout) of each layer; for a softmax head, the probabilities.
    post: Vec<Matrix>,
    /// Inverted-dropout multipliers applied to each layer's activation.
    masks: Vec<Option<Matrix>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }
}

pub fn forward(
    params: &MlpParams,
    spec: &MlpSpec,
    batch: &Matrix,
    mut mode: Mode<'_>,
) -> Result<(Matrix, ForwardCache)> {
    if !params.matches(spec) {
        return Err(Error::Contract(
            "parameters do not match the MLP spec".into(),
        ));
    }
    if batch.cols() != spec.input_width() {
        return dim_err(format!(
            "batch has {} columns, network expects {}",
            batch.cols(),
            spec.input_width()
        ));
    }
    let n_layers = params.layers.len();
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(n_layers),
        pre: Vec::with_capacity(n_layers),
        post: Vec::with_capacity(n_layers),
        masks: Vec::with_capacity(n_layers),
    };
    let mut a = batch.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut pre = a.matmul(&layer.weight)?;
        for r in 0..pre.rows() {
            for (v, b) in pre.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let last = l + 1 == n_layers;
        let post = if !last || spec.output_head == OutputHead::Activated {
            let mut h = pre.clone();
            for v in h.as_mut_slice() {
                *v = spec.hidden_activation.apply(*v);
            }
            h
        } else if spec.output_head == OutputHead::Softmax {
            let mut p = Matrix::zeros(pre.rows(), pre.cols());
            for r in 0..pre.rows() {
                softmax_into(pre.row(r), p.row_mut(r));
            }
            p
        } else {
            pre.clone()
        };

        let mask = match &mut mode {
            Mode::Train(stream) if spec.dropout_after(l) => {
                let keep = spec.dropout_keep;
                let mut m = Matrix::zeros(post.rows(), post.cols());
                for v in m.as_mut_slice() {
                    *v = if stream.next_f64() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    };
                }
                Some(m)
            }
            _ => None,
        };
        let mut next = post.clone();
        if let Some(m) = &mask {
            for (v, k) in next.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *v *= k;
            }
        }
        cache.inputs.push(std::mem::replace(&mut a, next));
        cache.pre.push(pre);
        cache.post.push(post);
        cache.masks.push(mask);
    }
    Ok((a, cache))
}

/// Reverse pass. `grad_outputs` holds ∂L/∂output for each row of the batch;
/// the returned gradients are those of the batch-summed loss.
pub fn backward(
    params: &MlpParams,
    spec: &MlpSpec,
    cache: &ForwardCache,
    grad_outputs: &Matrix,
) -> Result<(MlpParams, Matrix)> {
    let n_layers = params.layers.len();
    if cache.pre.len() != n_layers || !params.matches(spec) {
        return Err(Error::Contract(
            "forward cache was produced by a different network".into(),
        ));
    }
    for (l, layer) in params.layers.iter().enumerate() {
        if cache.inputs[l].cols() != layer.weight.rows()
            || cache.pre[l].cols() != layer.weight.cols()
        {
            return Err(Error::Contract(format!("stale forward cache at layer {l}")));
        }
    }
    let out_shape = cache.post[n_layers - 1].shape();
    if grad_outputs.shape() != out_shape {
        return Err(Error::Contract(format!(
            "output gradient {:?} does not match cached output {:?}",
            grad_outputs.shape(),
            out_shape
        )));
    }

    let mut grads = params.zeros_like();
    // gradient w.r.t. the (post-dropout) output of the current layer
    let mut g = grad_outputs.clone();
    for l in (0..n_layers).rev() {
        let last = l + 1 == n_layers;
        let pre = &cache.pre[l];
        let post = &cache.post[l];
        let mut dpre = g;
        if let Some(mask) = &cache.masks[l] {
            for (v, k) in dpre.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *v *= k;
            }
        }
        if !last || spec.output_head == OutputHead::Activated {
            for ((d, &z), &h) in dpre
                .as_mut_slice()
                .iter_mut()
                .zip(pre.as_slice())
                .zip(post.as_slice())
            {
                *d *= spec.hidden_activation.derivative(z, h);
            }
        } else if spec.output_head == OutputHead::Softmax {
            for r in 0..dpre.rows() {
                let p = post.row(r);
                let row = dpre.row_mut(r);
                let inner: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
                for (d, &pi) in row.iter_mut().zip(p) {
                    *d = pi * (*d - inner);
                }
            }
        }
        let layer = &params.layers[l];
        grads.layers[l].weight = cache.inputs[l].t_matmul(&dpre)?;
        grads.layers[l].bias = dpre.col_sums();
        g = dpre.matmul_t(&layer.weight)?;
    }
    Ok((grads, g))
}

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: MlpParams,
    pub second: MlpParams,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &MlpParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }
}

/// Exponential moving average of the live parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyakShadow {
    pub decay: f64,
    pub params: MlpParams,
}

impl PolyakShadow {
    pub fn new(params: &MlpParams, decay: f64) -> Self {
        Self {
            decay,
            params: params.clone(),
        }
    }

    pub fn update(&mut self, live: &MlpParams) {
        let rho = self.decay;
        for (s, p) in self.params.iter_mut().zip(live.iter()) {
            *s = rho * *s + (1.0 - rho) * p;
        }
    }
}

/// One Adam step followed by the Polyak update `shadow ← ρ·shadow + (1−ρ)·params`.
/// Nothing is modified when a gradient is non-finite.
pub fn adam_polyak_step(
    params: &mut MlpParams,
    grads: &MlpParams,
    adam: &mut AdamState,
    shadow: &mut PolyakShadow,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len()
        || adam.first.len() != params.len()
        || shadow.params.len() != params.len()
    {
        return dim_err("optimizer state does not match parameter shape");
    }
    if let Some((k, g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Training(format!(
            "non-finite gradient {g} at flat parameter index {k}"
        )));
    }
    adam.step += 1;
    let (b1, b2, eps) = (adam.beta1, adam.beta2, adam.eps);
    let bc1 = 1.0 - b1.powf(adam.step as f64);
    let bc2 = 1.0 - b2.powf(adam.step as f64);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(adam.first.iter_mut())
        .zip(adam.second.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    shadow.update(params);
    Ok(())
}

/// Largest relative error between an analytic gradient and central differences,
/// `|analytic − fd| / max(1e-8, |fd|)`, over every coordinate.
///
/// `loss` returns the value and analytic gradient at the given point.
pub fn grad_check<F>(mut loss: F, params: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + h;
        let (fp, _) = loss(&x);
        x[k] = orig - h;
        let (fm, _) = loss(&x);
        x[k] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let err = (analytic[k] - fd).abs() / fd.abs().max(1e-8);
        worst = worst.max(err);
    }
    worst
}

/// Parameters, optimizer state and shadow of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: MlpSpec,
    pub params: MlpParams,
    pub adam: AdamState,
    pub shadow: PolyakShadow,
}

impl Network {
    pub fn init(spec: MlpSpec, polyak_decay: f64, stream: &mut SeededStream) -> Result<Self> {
        let params = MlpParams::glorot(&spec, stream)?;
        Ok(Self {
            adam: AdamState::new(&params),
            shadow: PolyakShadow::new(&params, polyak_decay),
            spec,
            params,
        })
    }

    pub fn forward(&self, batch: &Matrix, mode: Mode<'_>) -> Result<(Matrix, ForwardCache)> {
        forward(&self.params, &self.spec, batch, mode)
    }

    /// Evaluation-mode output of the Polyak-averaged parameters.
    pub fn predict_shadow(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(forward(&self.shadow.params, &self.spec, batch, Mode::Eval)?.0)
    }

    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_outputs: &Matrix,
    ) -> Result<(MlpParams, Matrix)> {
        backward(&self.params, &self.spec, cache, grad_outputs)
    }

    pub fn step(&mut self, grads: &MlpParams, lr: f64) -> Result<()> {
        adam_polyak_step(
            &mut self.params,
            grads,
            &mut self.adam,
            &mut self.shadow,
            lr,
        )
    }
}

/// Serialization with every float stored as the 16-hex-digit image of its bits,
/// so a round trip is bit-exact.
pub mod serial {
    use super::*;

    pub fn encode(values: impl IntoIterator<Item = f64>) -> Vec<String> {
        values
            .into_iter()
            .map(|v| format!("{:016x}", v.to_bits()))
            .collect()
    }

    pub fn decode(words: &[String]) -> Result<Vec<f64>> {
        words
            .iter()
            .map(|w| {
                u64::from_str_radix(w, 16)
                    .map(f64::from_bits)
                    .map_err(|e| Error::Data(format!("bad hex float {w:?}: {e}")))
            })
            .collect()
    }

    #[derive(Clone, Debug, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct NetworkDoc {
        pub spec: MlpSpec,
        pub params: Vec<String>,
        pub adam_beta1: String,
        pub adam_beta2: String,
        pub adam_eps: String,
        pub adam_step: u64,
        pub adam_first: Vec<String>,
        pub adam_second: Vec<String>,
        pub polyak_decay: String,
        pub shadow: Vec<String>,
    }

    fn scalar(w: &str) -> Result<f64> {
        Ok(decode(&[w.to_string()])?[0])
    }

    impl From<&Network> for NetworkDoc {
        fn from(n: &Network) -> Self {
            NetworkDoc {
                spec: n.spec.clone(),
                params: encode(n.params.iter().copied()),
                adam_beta1: encode([n.adam.beta1]).remove(0),
                adam_beta2: encode([n.adam.beta2]).remove(0),
                adam_eps: encode([n.adam.eps]).remove(0),
                adam_step: n.adam.step,
                adam_first: encode(n.adam.first.iter().copied()),
                adam_second: encode(n.adam.second.iter().copied()),
                polyak_decay: encode([n.shadow.decay]).remove(0),
                shadow: encode(n.shadow.params.iter().copied()),
            }
        }
    }

    impl NetworkDoc {
        pub fn into_network(self) -> Result<Network> {
            self.spec.validate()?;
            let params = MlpParams::from_flat(&self.spec, &decode(&self.params)?)?;
            let adam = AdamState {
                beta1: scalar(&self.adam_beta1)?,
                beta2: scalar(&self.adam_beta2)?,
                eps: scalar(&self.adam_eps)?,
                step: self.adam_step,
                first: MlpParams::from_flat(&self.spec, &decode(&self.adam_first)?)?,
                second: MlpParams::from_flat(&self.spec, &decode(&self.adam_second)?)?,
            };
            let shadow = PolyakShadow {
                decay: scalar(&self.polyak_decay)?,
                params: MlpParams::from_flat(&self.spec, &decode(&self.shadow)?)?,
            };
            Ok(Network {
                spec: self.spec,
                params,
                adam,
                shadow,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{clamped_ln, clamped_ln_grad};

    fn tanh_spec(widths: Vec<usize>, head: OutputHead) -> MlpSpec {
        MlpSpec::new(widths, Activation::Tanh, head)
    }

    #[test]
    fn spec_validation() {
        assert!(tanh_spec(vec![3], OutputHead::Linear).validate().is_err());
        assert!(tanh_spec(vec![3, 2], OutputHead::Linear)
            .with_dropout(0.0)
            .validate()
            .is_err());
        assert!(tanh_spec(vec![3, 2], OutputHead::Linear)
            .with_dropout(1.0)
            .validate()
            .is_ok());
        assert_eq!(
            tanh_spec(vec![3, 4, 2], OutputHead::Linear).param_count(),
            16 + 10
        );
    }

    #[test]
    fn zero_weights_give_bias_path() {
        let spec = tanh_spec(vec![3, 4, 2], OutputHead::Linear);
        let mut p = MlpParams::zeros(&spec);
        p.layers[0].bias = vec![0.5, -0.5, 1.0, 0.0];
        p.layers[1].bias = vec![0.25, -2.0];
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]]).unwrap();
        let (out, _) = forward(&p, &spec, &x, Mode::Eval).unwrap();
        for r in out.iter_rows() {
            assert_eq!(r, &[0.25, -2.0]);
        }
    }

    #[test]
    fn identity_layer_is_identity_map() {
        let spec = tanh_spec(vec![3, 3], OutputHead::Linear);
        let p = MlpParams {
            layers: vec![Layer {
                weight: Matrix::identity(3),
                bias: vec![0.0; 3],
            }],
        };
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.5]]).unwrap();
        let (out, _) = forward(&p, &spec, &x, Mode::Eval).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn softmax_head_rows_sum_to_one() {
        let spec = tanh_spec(vec![4, 6, 5], OutputHead::Softmax);
        let mut s = SeededStream::new(2);
        let p = MlpParams::glorot(&spec, &mut s).unwrap();
        let x = s.random_matrix(7, 4, -3.0, 3.0);
        let (out, _) = forward(&p, &spec, &x, Mode::Eval).unwrap();
        for r in out.iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let spec = tanh_spec(vec![4, 2], OutputHead::Linear);
        let p = MlpParams::zeros(&spec);
        let x = Matrix::zeros(2, 3);
        assert!(matches!(
            forward(&p, &spec, &x, Mode::Eval),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let spec = tanh_spec(vec![3, 5, 2], OutputHead::Softmax);
        let mut s = SeededStream::new(4);
        let p = MlpParams::glorot(&spec, &mut s).unwrap();
        let x = s.random_matrix(4, 3, -1.0, 1.0);
        let (_, cache) = forward(&p, &spec, &x, Mode::Eval).unwrap();
        let (g, gx) = backward(&p, &spec, &cache, &Matrix::zeros(4, 2)).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(gx.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_layer_sum_loss_gradient_is_column_sums() {
        // loss = Σ outputs  ⇒  ∂/∂W[i][j] = Σ_rows x[r][i], ∂/∂b[j] = n
        let spec = tanh_spec(vec![2, 3], OutputHead::Linear);
        let mut s = SeededStream::new(9);
        let p = MlpParams::glorot(&spec, &mut s).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]).unwrap();
        let (_, cache) = forward(&p, &spec, &x, Mode::Eval).unwrap();
        let (g, _) = backward(&p, &spec, &cache, &Matrix::filled(3, 3, 1.0)).unwrap();
        for j in 0..3 {
            assert!((g.layers[0].weight[(0, j)] - 4.5).abs() < 1e-14);
            assert!((g.layers[0].weight[(1, j)] - 1.5).abs() < 1e-14);
            assert_eq!(g.layers[0].bias[j], 3.0);
        }
    }

    #[test]
    fn mismatched_cache_is_contract_error() {
        let spec_a = tanh_spec(vec![3, 4, 2], OutputHead::Linear);
        let spec_b = tanh_spec(vec![3, 2], OutputHead::Linear);
        let mut s = SeededStream::new(1);
        let pa = MlpParams::glorot(&spec_a, &mut s).unwrap();
        let pb = MlpParams::glorot(&spec_b, &mut s).unwrap();
        let x = s.random_matrix(2, 3, -1.0, 1.0);
        let (_, cache) = forward(&pa, &spec_a, &x, Mode::Eval).unwrap();
        assert!(matches!(
            backward(&pb, &spec_b, &cache, &Matrix::zeros(2, 2)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            backward(&pa, &spec_a, &cache, &Matrix::zeros(3, 2)),
            Err(Error::Contract(_))
        ));
    }

    fn softmax_ce_loss<'a>(
        spec: &'a MlpSpec,
        x: &'a Matrix,
        labels: &'a [usize],
    ) -> impl FnMut(&[f64]) -> (f64, Vec<f64>) + 'a {
        let labels = labels.to_vec();
        move |flat: &[f64]| {
            let p = MlpParams::from_flat(spec, flat).unwrap();
            let (out, cache) = forward(&p, spec, x, Mode::Eval).unwrap();
            let n = x.rows() as f64;
            let mut g = Matrix::zeros(out.rows(), out.cols());
            let mut loss = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                loss -= clamped_ln(out[(r, y)]) / n;
                g[(r, y)] = -clamped_ln_grad(out[(r, y)]) / n;
            }
            let (grads, _) = backward(&p, spec, &cache, &g).unwrap();
            (loss, grads.to_flat())
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (seed, act, head) in [
            (1, Activation::Tanh, OutputHead::Softmax),
            (2, Activation::Tanh, OutputHead::Linear),
            (3, Activation::Tanh, OutputHead::Activated),
            (4, Activation::Relu, OutputHead::Softmax),
        ] {
            let spec = MlpSpec::new(vec![3, 6, 4, 3], act, head);
            let mut s = SeededStream::new(seed);
            let p = MlpParams::glorot(&spec, &mut s).unwrap();
            let x = s.random_matrix(5, 3, -1.5, 1.5);
            let w = s.random_matrix(5, 3, -1.0, 1.0);
            // loss = Σ w ⊙ f(x)
            let loss = |flat: &[f64]| {
                let p = MlpParams::from_flat(&spec, flat).unwrap();
                let (out, cache) = forward(&p, &spec, &x, Mode::Eval).unwrap();
                let value: f64 = out
                    .as_slice()
                    .iter()
                    .zip(w.as_slice())
                    .map(|(a, b)| a * b)
                    .sum();
                let (g, _) = backward(&p, &spec, &cache, &w).unwrap();
                (value, g.to_flat())
            };
            let err = grad_check(loss, &p.to_flat(), 1e-5);
            assert!(err < 1e-4, "{act:?}/{head:?}: relative error {err}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let spec = tanh_spec(vec![3, 5, 2], OutputHead::Softmax);
        let mut s = SeededStream::new(12);
        let p = MlpParams::glorot(&spec, &mut s).unwrap();
        let x0 = s.random_matrix(2, 3, -1.0, 1.0);
        let w = s.random_matrix(2, 2, -1.0, 1.0);
        let loss = |flat: &[f64]| {
            let x = Matrix::from_vec(2, 3, flat.to_vec()).unwrap();
            let (out, cache) = forward(&p, &spec, &x, Mode::Eval).unwrap();
            let value: f64 = out
                .as_slice()
                .iter()
                .zip(w.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            let (_, gx) = backward(&p, &spec, &cache, &w).unwrap();
            (value, gx.into_vec())
        };
        assert!(grad_check(loss, x0.as_slice(), 1e-5) < 1e-4);
    }

    #[test]
    fn grad_check_examples() {
        let params = [0.3, -1.2, 2.5, 0.0, 4.0];
        let quad = |x: &[f64]| (0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.to_vec());
        assert!(grad_check(quad, &params, 1e-5) < 1e-7);

        let constant = |x: &[f64]| (3.0, vec![0.0; x.len()]);
        assert_eq!(grad_check(constant, &params, 1e-5), 0.0);

        let spec = tanh_spec(vec![4, 6, 3], OutputHead::Softmax);
        let mut s = SeededStream::new(5);
        let p = MlpParams::glorot(&spec, &mut s).unwrap();
        let x = s.random_matrix(6, 4, -1.0, 1.0);
        let labels = [0, 1, 2, 2, 1, 0];
        let err = grad_check(softmax_ce_loss(&spec, &x, &labels), &p.to_flat(), 1e-5);
        assert!(err < 1e-4, "softmax+CE relative error {err}");
    }

    #[test]
    fn dropout_train_masks_and_eval_is_deterministic() {
        let spec = tanh_spec(vec![4, 64, 2], OutputHead::Linear).with_dropout(0.5);
        let mut s = SeededStream::new(6);
        let p = MlpParams::glorot(&spec, &mut s).unwrap();
        let x = s.random_matrix(3, 4, -1.0, 1.0);
        let (e1, _) = forward(&p, &spec, &x, Mode::Eval).unwrap();
        let (e2, _) = forward(&p, &spec, &x, Mode::Eval).unwrap();
        assert_eq!(e1, e2);
        let mut ds = SeededStream::new(99);
        let (t, cache) = forward(&p, &spec, &x, Mode::Train(&mut ds)).unwrap();
        assert_ne!(t, e1);
        let mask = cache.masks[0].as_ref().unwrap();
        assert!(mask.as_slice().iter().all(|v| *v == 0.0 || *v == 2.0));
        assert!(cache.masks[1].is_none());
    }

    #[test]
    fn dropout_gradients_match_finite_differences_with_fixed_mask() {
        let spec = tanh_spec(vec![3, 8, 2], OutputHead::Linear).with_dropout(0.8);
        let mut s = SeededStream::new(8);
        let p = MlpParams::glorot(&spec, &mut s).unwrap();
        let x = s.random_matrix(4, 3, -1.0, 1.0);
        let loss = |flat: &[f64]| {
            let p = MlpParams::from_flat(&spec, flat).unwrap();
            let mut ds = SeededStream::new(1234);
            let (out, cache) = forward(&p, &spec, &x, Mode::Train(&mut ds)).unwrap();
            let ones = Matrix::filled(out.rows(), out.cols(), 1.0);
            let (g, _) = backward(&p, &spec, &cache, &ones).unwrap();
            (out.sum(), g.to_flat())
        };
        assert!(grad_check(loss, &p.to_flat(), 1e-5) < 1e-4);
    }

    fn scalar_net(value: f64, decay: f64) -> (MlpParams, AdamState, PolyakShadow) {
        let p = MlpParams {
            layers: vec![Layer {
                weight: Matrix::from_vec(1, 1, vec![value]).unwrap(),
                bias: vec![],
            }],
        };
        let a = AdamState::new(&p);
        let s = PolyakShadow::new(&p, decay);
        (p, a, s)
    }

    fn grad_of(v: f64) -> MlpParams {
        scalar_net(v, 0.0).0
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        for g in [3.7, -0.01, 250.0] {
            let (mut p, mut a, mut s) = scalar_net(1.0, 0.998);
            adam_polyak_step(&mut p, &grad_of(g), &mut a, &mut s, 1e-3).unwrap();
            let moved = 1.0 - p.layers[0].weight[(0, 0)];
            assert!(
                (moved - 1e-3 * g.signum()).abs() < 1e-8,
                "g={g}: moved {moved}"
            );
        }
    }

    #[test]
    fn zero_gradients_freeze_params_and_shadow_converges() {
        let (mut p, mut a, mut s) = scalar_net(2.0, 0.5);
        s.params.layers[0].weight[(0, 0)] = 0.0;
        for _ in 0..60 {
            adam_polyak_step(&mut p, &grad_of(0.0), &mut a, &mut s, 1e-2).unwrap();
        }
        assert_eq!(p.layers[0].weight[(0, 0)], 2.0);
        assert!((s.params.layers[0].weight[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn shadow_contracts_geometrically() {
        let (mut p, mut a, mut s) = scalar_net(1.0, 0.9);
        s.params.layers[0].weight[(0, 0)] = 0.0;
        let mut gap = 1.0;
        for _ in 0..10 {
            adam_polyak_step(&mut p, &grad_of(0.0), &mut a, &mut s, 1e-2).unwrap();
            let new_gap = 1.0 - s.params.layers[0].weight[(0, 0)];
            assert!((new_gap - 0.9 * gap).abs() < 1e-12);
            gap = new_gap;
        }
    }

    #[test]
    fn zero_decay_shadow_tracks_params() {
        let (mut p, mut a, mut s) = scalar_net(1.0, 0.0);
        for g in [1.0, -2.0, 0.5] {
            adam_polyak_step(&mut p, &grad_of(g), &mut a, &mut s, 0.1).unwrap();
            assert_eq!(s.params, p);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let (mut p, mut a, mut s) = scalar_net(1.0, 0.9);
        let before = p.clone();
        let err = adam_polyak_step(&mut p, &grad_of(f64::NAN), &mut a, &mut s, 0.1);
        assert!(matches!(err, Err(Error::Training(_))));
        assert_eq!(p, before);
        assert_eq!(a.step, 0);
    }

    #[test]
    fn network_doc_round_trip_is_bit_exact() {
        let spec = tanh_spec(vec![3, 4, 2], OutputHead::Softmax);
        let mut s = SeededStream::new(77);
        let mut net = Network::init(spec, 0.998, &mut s).unwrap();
        let g = net.params.zeros_like();
        let mut g2 = g.clone();
        for (i, v) in g2.iter_mut().enumerate() {
            *v = (i as f64).sin() * 1e-3 + f64::EPSILON;
        }
        net.step(&g2, 1e-3).unwrap();
        let json = serde_json::to_string(&serial::NetworkDoc::from(&net)).unwrap();
        let back: serial::NetworkDoc = serde_json::from_str(&json).unwrap();
        let back = back.into_network().unwrap();
        assert_eq!(back, net);
        for (a, b) in back.params.iter().zip(net.params.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
