//! Fully-connected network with a hand-written reverse pass.
//!
//! Parameters are flattened layer by layer: the weight matrix of a layer
//! (`out x in`, row-major) followed by its bias vector. Hidden layers apply the
//! model's activation; the output layer is linear.
//!
//! # Model file
//!
//! ```text
//! {"dims":[2,8,3],"activation":"relu","weights":[[...],[...]],"biases":[[...],[...]]}
//! ```
//!
//! Each `weights` entry is the row-major `out x in` matrix of one layer. Floats
//! are written with 17 significant digits in exponent form, which round-trips
//! bit-exactly.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::LogitGradTriple;
use crate::error::{invalid, Error, Result};
use crate::numkit::{rand_normal, Mat64, Rng, Vec64};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x`; the ReLU subgradient at 0 is 0.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(invalid(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    weights: Vec<Mat64>,
    biases: Vec<Vec64>,
    activation: Activation,
}

/// Inputs and pre-activations of every layer for one batch.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// `inputs[l]` is the (batch x dims[l]) input of layer `l`.
    inputs: Vec<Mat64>,
    /// `pre[l]` is the (batch x dims[l+1]) pre-activation of layer `l`.
    pre: Vec<Mat64>,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Mat64::rows)
    }
}

/// Per-stream parameter gradients, each of the flattened parameter length.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradTriple {
    pub tog: Vec64,
    pub tcg: Vec64,
    pub ncg: Vec64,
}

impl ParamGradTriple {
    pub fn summed(&self) -> Vec64 {
        self.tog
            .iter()
            .zip(&self.tcg)
            .zip(&self.ncg)
            .map(|((a, b), c)| a + b + c)
            .collect()
    }
}

/// Loss weights applied to the three streams before backpropagation, i.e.
/// `(alpha, tau^2 beta1, tau^2 beta2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamWeights {
    pub tog: f64,
    pub tcg: f64,
    pub ncg: f64,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(invalid(format!(
            "layer dims must list at least two positive sizes, got {dims:?}"
        )));
    }
    Ok(())
}

impl MlpModel {
    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        check_dims(dims)?;
        let weights = dims.windows(2).map(|w| Mat64::zeros(w[1], w[0])).collect();
        let biases = dims[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases.
    pub fn he_init(dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(dims, activation)?;
        for w in &mut m.weights {
            let std = (2.0 / w.cols() as f64).sqrt();
            let draws = rand_normal(rng, w.rows() * w.cols(), std);
            w.data_mut().copy_from_slice(&draws);
        }
        Ok(m)
    }

    pub fn from_parts(
        dims: Vec<usize>,
        activation: Activation,
        weights: Vec<Mat64>,
        biases: Vec<Vec64>,
    ) -> Result<Self> {
        check_dims(&dims)?;
        let layers = dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(invalid(format!(
                "{layers} layers need {layers} weight matrices and bias vectors, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rows() != dims[l + 1] || w.cols() != dims[l] || b.len() != dims[l + 1] {
                return Err(invalid(format!(
                    "layer {l}: weight {}x{} / bias {} do not match dims {} -> {}",
                    w.rows(),
                    w.cols(),
                    b.len(),
                    dims[l],
                    dims[l + 1]
                )));
            }
        }
        Ok(Self {
            dims,
            weights,
            biases,
            activation,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Mat64] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec64] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Flattened parameter range of each layer.
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.dims
            .windows(2)
            .map(|w| {
                let r = start..start + w[0] * w[1] + w[1];
                start = r.end;
                r
            })
            .collect()
    }

    pub fn params(&self) -> Vec64 {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut rest = params;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let (wp, tail) = rest.split_at(w.data().len());
            w.data_mut().copy_from_slice(wp);
            let (bp, tail) = tail.split_at(b.len());
            b.copy_from_slice(bp);
            rest = tail;
        }
        Ok(())
    }

    /// `theta <- theta + delta`.
    pub fn apply_delta(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.param_count() {
            return Err(invalid(format!(
                "expected {} parameter deltas, got {}",
                self.param_count(),
                delta.len()
            )));
        }
        let mut rest = delta;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for (p, d) in w.data_mut().iter_mut().chain(b.iter_mut()).zip(rest) {
                *p += d;
            }
            rest = &rest[w.data().len() + b.len()..];
        }
        Ok(())
    }

    fn check_input(&self, inputs: &Mat64) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(invalid(format!(
                "input has {} features, model expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &Mat64) -> Mat64 {
        let w = &self.weights[l];
        let b = &self.biases[l];
        let mut out = Mat64::zeros(x.rows(), w.rows());
        for (xi, oi) in x.iter_rows().zip(0..x.rows()) {
            let row = out.row_mut(oi);
            for (j, o) in row.iter_mut().enumerate() {
                *o = b[j] + crate::numkit::dot(w.row(j), xi);
            }
        }
        out
    }

    /// Logits (batch x C) and the tape needed for the reverse pass.
    pub fn forward(&self, inputs: &Mat64) -> Result<(Mat64, ForwardTape)> {
        self.check_input(inputs)?;
        let layers = self.weights.len();
        let mut tape = ForwardTape {
            inputs: Vec::with_capacity(layers),
            pre: Vec::with_capacity(layers),
        };
        let mut x = inputs.clone();
        for l in 0..layers {
            let z = self.affine(l, &x);
            let next = if l + 1 < layers {
                let mut a = z.clone();
                for v in a.data_mut() {
                    *v = self.activation.apply(*v);
                }
                a
            } else {
                z.clone()
            };
            tape.inputs.push(x);
            tape.pre.push(z);
            x = next;
        }
        Ok((x, tape))
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, inputs: &Mat64) -> Result<Mat64> {
        self.check_input(inputs)?;
        let layers = self.weights.len();
        let mut x = inputs.clone();
        for l in 0..layers {
            let mut z = self.affine(l, &x);
            if l + 1 < layers {
                for v in z.data_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            x = z;
        }
        Ok(x)
    }

    /// Batch-averaged parameter gradient of a loss whose per-sample logit
    /// gradients are the rows of `dlogits`.
    pub fn backward_from_logit_grad(&self, tape: &ForwardTape, dlogits: &Mat64) -> Result<Vec64> {
        let n = tape.batch_size();
        if tape.inputs.len() != self.weights.len() {
            return Err(invalid("tape does not match the model's layer count"));
        }
        if dlogits.rows() != n || dlogits.cols() != self.output_dim() {
            return Err(invalid(format!(
                "logit gradient is {}x{}, expected {n}x{}",
                dlogits.rows(),
                dlogits.cols(),
                self.output_dim()
            )));
        }
        let ranges = self.layer_ranges();
        let mut grad = vec![0.0; self.param_count()];
        let inv_n = 1.0 / n.max(1) as f64;
        let mut delta = dlogits.clone();
        for l in (0..self.weights.len()).rev() {
            let w = &self.weights[l];
            let (gw, gb) = grad[ranges[l].clone()].split_at_mut(w.rows() * w.cols());
            let input = &tape.inputs[l];
            for s in 0..n {
                let d = delta.row(s);
                let x = input.row(s);
                for (j, &dj) in d.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj * inv_n;
                    let row = &mut gw[j * w.cols()..(j + 1) * w.cols()];
                    for (g, &xk) in row.iter_mut().zip(x) {
                        *g += dj * xk * inv_n;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let pre = &tape.pre[l - 1];
            let mut prev = Mat64::zeros(n, w.cols());
            for s in 0..n {
                let d = delta.row(s);
                let out = prev.row_mut(s);
                for (j, &dj) in d.iter().enumerate() {
                    for (o, &wjk) in out.iter_mut().zip(w.row(j)) {
                        *o += dj * wjk;
                    }
                }
                for (o, &z) in out.iter_mut().zip(pre.row(s)) {
                    *o *= self.activation.derivative(z);
                }
            }
            delta = prev;
        }
        Ok(grad)
    }

    /// One reverse pass per stream, each pre-scaled by its loss weight.
    pub fn param_grad_triple(
        &self,
        tape: &ForwardTape,
        triples: &[LogitGradTriple],
        weights: StreamWeights,
    ) -> Result<ParamGradTriple> {
        let n = tape.batch_size();
        if triples.len() != n {
            return Err(invalid(format!(
                "{} logit gradient triples for a batch of {n}",
                triples.len()
            )));
        }
        let c = self.output_dim();
        let stack = |pick: fn(&LogitGradTriple) -> &Vec64, w: f64| -> Result<Mat64> {
            let mut m = Mat64::zeros(n, c);
            for (s, t) in triples.iter().enumerate() {
                let g = pick(t);
                if g.len() != c {
                    return Err(invalid(format!(
                        "logit gradient of length {} for {c} classes",
                        g.len()
                    )));
                }
                for (o, v) in m.row_mut(s).iter_mut().zip(g) {
                    *o = w * v;
                }
            }
            Ok(m)
        };
        Ok(ParamGradTriple {
            tog: self.backward_from_logit_grad(tape, &stack(|t| &t.tog, weights.tog)?)?,
            tcg: self.backward_from_logit_grad(tape, &stack(|t| &t.tcg, weights.tcg)?)?,
            ncg: self.backward_from_logit_grad(tape, &stack(|t| &t.ncg, weights.ncg)?)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Mat64::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl TryFrom<ModelFile> for MlpModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        check_dims(&f.dims)?;
        if f.weights.len() != f.dims.len() - 1 {
            return Err(invalid(format!(
                "dims describe {} layers but {} weight matrices are present",
                f.dims.len() - 1,
                f.weights.len()
            )));
        }
        let weights = f
            .weights
            .into_iter()
            .enumerate()
            .map(|(l, w)| Mat64::from_vec(f.dims[l + 1], f.dims[l], w))
            .collect::<Result<Vec<_>>>()?;
        MlpModel::from_parts(f.dims, f.activation, weights, f.biases)
    }
}

/// JSON formatter that writes every float with 17 significant digits.
struct ExactFloats;

impl serde_json::ser::Formatter for ExactFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub fn model_to_json(model: &MlpModel) -> Result<String> {
    if !model.is_finite() {
        return Err(Error::Validation(
            "model contains non-finite parameters".into(),
        ));
    }
    let file = ModelFile {
        dims: model.dims.clone(),
        activation: model.activation,
        weights: model.weights.iter().map(|w| w.data().to_vec()).collect(),
        biases: model.biases.clone(),
    };
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloats);
    file.serialize(&mut ser)
        .map_err(|e| Error::Validation(e.to_string()))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn model_from_json(text: &str, path: &Path) -> Result<MlpModel> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    let model = MlpModel::try_from(file).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        column: 0,
        msg: e.to_string(),
    })?;
    if !model.is_finite() {
        return Err(Error::Validation(format!(
            "{}: model contains non-finite parameters",
            path.display()
        )));
    }
    Ok(model)
}

pub fn save_model(model: &MlpModel, path: &Path) -> Result<()> {
    let text = model_to_json(model)?;
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    model_from_json(&text, path)
}
