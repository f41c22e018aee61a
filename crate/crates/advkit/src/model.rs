//! Sequential classifier models: dense/conv stacks with a softmax head.
//!
//! `forward` returns logits of shape `[B, K]`; probabilities are obtained by
//! applying the softmax op where they are needed, so attack losses can
//! differentiate straight through the head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{softmax_rows, Tensor};

/// Architecture family and widths, parseable from tags like `mlp:32,32`,
/// `cnn:8,16`, or `linear`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchSpec {
    /// Fully connected stack with the given hidden widths (empty = linear).
    Mlp { hidden: Vec<usize> },
    /// Two-ish conv blocks (3x3 conv, relu, 2x2 pool each) then a dense head.
    Cnn { channels: Vec<usize> },
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_widths = |spec: &str, tag: &str| -> Result<Vec<usize>> {
            spec.split(',')
                .map(|w| {
                    w.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::config("arch", format!("bad width `{w}` in `{tag}`")))
                })
                .collect()
        };
        match s {
            "linear" => Ok(ArchSpec::Mlp { hidden: vec![] }),
            "mlp" => Ok(ArchSpec::Mlp { hidden: vec![32, 32] }),
            "cnn" => Ok(ArchSpec::Cnn { channels: vec![8, 16] }),
            other => {
                if let Some(widths) = other.strip_prefix("mlp:") {
                    Ok(ArchSpec::Mlp { hidden: parse_widths(widths, other)? })
                } else if let Some(widths) = other.strip_prefix("cnn:") {
                    Ok(ArchSpec::Cnn { channels: parse_widths(widths, other)? })
                } else {
                    Err(Error::config("arch", format!("unknown architecture tag `{other}`")))
                }
            }
        }
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchSpec::Mlp { hidden } if hidden.is_empty() => write!(f, "linear"),
            ArchSpec::Mlp { hidden } => {
                let ws: Vec<String> = hidden.iter().map(|w| w.to_string()).collect();
                write!(f, "mlp:{}", ws.join(","))
            }
            ArchSpec::Cnn { channels } => {
                let ws: Vec<String> = channels.iter().map(|w| w.to_string()).collect();
                write!(f, "cnn:{}", ws.join(","))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense { weight: Tensor, bias: Tensor },
    Conv2d { weight: Tensor, bias: Tensor },
    Relu,
    MaxPool2,
    Flatten,
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "max_pool2",
            Layer::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: ArchSpec,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<Layer>,
}

fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        // Box-Muller on two uniform draws keeps the stream layout obvious.
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        data.push(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos());
    }
    Tensor::new(shape, data).expect("init shape").with_grad()
}

impl Model {
    /// Build a randomly initialized model for inputs of `input_shape`
    /// (per-sample shape, no batch axis) and `num_classes` outputs.
    pub fn build(
        arch: &ArchSpec,
        input_shape: &[usize],
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        match arch {
            ArchSpec::Mlp { hidden } => {
                let mut dim: usize = input_shape.iter().product();
                if input_shape.len() > 1 {
                    layers.push(Layer::Flatten);
                }
                for &h in hidden {
                    layers.push(Layer::Dense {
                        weight: he_normal(vec![dim, h], dim, rng),
                        bias: Tensor::zeros(vec![h]).with_grad(),
                    });
                    layers.push(Layer::Relu);
                    dim = h;
                }
                layers.push(Layer::Dense {
                    weight: he_normal(vec![dim, num_classes], dim, rng),
                    bias: Tensor::zeros(vec![num_classes]).with_grad(),
                });
            }
            ArchSpec::Cnn { channels } => {
                if input_shape.len() != 3 {
                    return Err(Error::shape(
                        "Model::build",
                        format!("cnn expects [C,H,W] inputs, got {input_shape:?}"),
                    ));
                }
                let (mut c, mut h, mut w) = (input_shape[0], input_shape[1], input_shape[2]);
                for &f in channels {
                    if h < 4 || w < 4 {
                        return Err(Error::shape(
                            "Model::build",
                            format!("input {input_shape:?} too small for {} conv blocks", channels.len()),
                        ));
                    }
                    let fan_in = c * 9;
                    layers.push(Layer::Conv2d {
                        weight: he_normal(vec![f, c, 3, 3], fan_in, rng),
                        bias: Tensor::zeros(vec![f]).with_grad(),
                    });
                    layers.push(Layer::Relu);
                    layers.push(Layer::MaxPool2);
                    c = f;
                    h = (h - 2) / 2;
                    w = (w - 2) / 2;
                }
                layers.push(Layer::Flatten);
                let dim = c * h * w;
                layers.push(Layer::Dense {
                    weight: he_normal(vec![dim, num_classes], dim, rng),
                    bias: Tensor::zeros(vec![num_classes]).with_grad(),
                });
            }
        }
        Ok(Self { arch: arch.clone(), input_shape: input_shape.to_vec(), num_classes, layers })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Layer-qualified names aligned with `params()` order.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Dense { .. } | Layer::Conv2d { .. } => {
                    out.push(format!("layers.{i}.weight"));
                    out.push(format!("layers.{i}.bias"));
                }
                _ => {}
            }
        }
        out
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.ndim() < 2 || &batch.shape()[1..] != self.input_shape.as_slice() {
            return Err(Error::shape(
                "model input",
                format!(
                    "batch shape {:?} does not match input contract [B, {:?}]",
                    batch.shape(),
                    self.input_shape
                ),
            ));
        }
        Ok(())
    }

    /// Record a forward pass with parameters as gradient-tracked leaves.
    /// Returns the logits var plus one var per parameter in `params()` order.
    pub fn forward_trainable(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        self.forward_impl(tape, x, true)
    }

    /// Record a forward pass with frozen parameters (gradients flow only to
    /// the input, which is what the attacks need).
    pub fn forward_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward_impl(tape, x, false)?.0)
    }

    fn forward_impl(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let mut cur = x;
        let mut param_vars = Vec::new();
        let bind = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let with_layer = |e: Error| match e {
                Error::Shape { detail, .. } => {
                    Error::shape(format!("layer {i} ({})", layer.kind()), detail)
                }
                other => other,
            };
            cur = match layer {
                Layer::Dense { weight, bias } => {
                    let w = bind(tape, weight);
                    let b = bind(tape, bias);
                    param_vars.push(w);
                    param_vars.push(b);
                    let z = tape.matmul(cur, w).map_err(with_layer)?;
                    tape.add_bias(z, b).map_err(with_layer)?
                }
                Layer::Conv2d { weight, bias } => {
                    let w = bind(tape, weight);
                    let b = bind(tape, bias);
                    param_vars.push(w);
                    param_vars.push(b);
                    tape.conv2d(cur, w, b).map_err(with_layer)?
                }
                Layer::Relu => tape.relu(cur),
                Layer::MaxPool2 => tape.max_pool2(cur).map_err(with_layer)?,
                Layer::Flatten => {
                    let b = tape.shape(cur)[0];
                    let rest: usize = tape.shape(cur)[1..].iter().product();
                    tape.reshape(cur, vec![b, rest]).map_err(with_layer)?
                }
            };
        }
        Ok((cur, param_vars))
    }

    /// Plain inference: logits `[B, K]` for a batch `[B, ...]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let logits = self.forward_on(&mut tape, x)?;
        Ok(tape.tensor(logits))
    }

    /// Softmax probabilities for a batch.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        let logits = self.forward(batch)?;
        let k = self.num_classes;
        Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), k))
    }

    /// Hard labels for a batch (lowest-index tie-break).
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(self.forward(batch)?.argmax_rows())
    }

    /// Copy tape gradients back into the parameter tensors, accumulating
    /// with anything already there.
    pub fn absorb_grads(&mut self, tape: &Tape, param_vars: &[Var]) {
        for (param, &var) in self.params_mut().into_iter().zip(param_vars) {
            if let Some(g) = tape.grad(var) {
                match &mut param.grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => param.grad = Some(g.data().to_vec()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad = None;
        }
    }

    // ---- checkpoint format -------------------------------------------------
    //
    // Flat key-value text, one parameter per line:
    //
    //   advkit-checkpoint v1
    //   meta.arch = mlp:32,32
    //   meta.input_shape = 8
    //   meta.classes = 3
    //   layers.0.weight = [8,32] 0.1 -0.25 ...
    //
    // Values use Rust's shortest round-trip float formatting, so save/load
    // is bit-exact.

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("advkit-checkpoint v1\n");
        out.push_str(&format!("meta.arch = {}\n", self.arch));
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("meta.input_shape = {}\n", dims.join(" ")));
        out.push_str(&format!("meta.classes = {}\n", self.num_classes));
        for (name, p) in self.param_names().into_iter().zip(self.params()) {
            let dims: Vec<String> = p.shape().iter().map(|d| d.to_string()).collect();
            let vals: Vec<String> = p.data().iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!("{name} = [{}] {}\n", dims.join(","), vals.join(" ")));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), &e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), &e))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != "advkit-checkpoint v1" {
            return Err(Error::Format {
                path: path.display().to_string(),
                position: "line 1".into(),
                detail: format!("bad header `{header}`"),
            });
        }
        let mut arch = None;
        let mut input_shape = None;
        let mut classes = None;
        let mut params: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |detail: String| Error::Format {
                path: path.display().to_string(),
                position: format!("line {}", lineno + 2),
                detail,
            };
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| bad("expected `key = value`".into()))?;
            match key {
                "meta.arch" => arch = Some(value.parse::<ArchSpec>()?),
                "meta.input_shape" => {
                    let dims: std::result::Result<Vec<usize>, _> =
                        value.split_whitespace().map(str::parse).collect();
                    input_shape = Some(dims.map_err(|e| bad(format!("bad shape: {e}")))?);
                }
                "meta.classes" => {
                    classes = Some(value.parse().map_err(|e| bad(format!("bad classes: {e}")))?)
                }
                name => {
                    let rest = value
                        .strip_prefix('[')
                        .ok_or_else(|| bad("expected `[shape] values`".into()))?;
                    let (dims, vals) = rest
                        .split_once("] ")
                        .ok_or_else(|| bad("expected `[shape] values`".into()))?;
                    let shape: std::result::Result<Vec<usize>, _> =
                        dims.split(',').map(|d| d.trim().parse()).collect();
                    let data: std::result::Result<Vec<f64>, _> =
                        vals.split_whitespace().map(str::parse).collect();
                    params.push((
                        name.to_string(),
                        shape.map_err(|e| bad(format!("bad shape: {e}")))?,
                        data.map_err(|e| bad(format!("bad value: {e}")))?,
                    ));
                }
            }
        }
        let arch = arch.ok_or_else(|| Error::config("meta.arch", "missing from checkpoint"))?;
        let input_shape =
            input_shape.ok_or_else(|| Error::config("meta.input_shape", "missing"))?;
        let classes = classes.ok_or_else(|| Error::config("meta.classes", "missing"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::build(&arch, &input_shape, classes, &mut rng)?;
        let names = model.param_names();
        if names.len() != params.len() {
            return Err(Error::config(
                "checkpoint",
                format!("expected {} parameters, found {}", names.len(), params.len()),
            ));
        }
        for ((expect_name, slot), (name, shape, data)) in
            names.iter().zip(model.params_mut()).zip(params)
        {
            if *expect_name != name || slot.shape() != shape.as_slice() {
                return Err(Error::config(
                    "checkpoint",
                    format!("parameter `{name}` {shape:?} does not match model `{expect_name}` {:?}", slot.shape()),
                ));
            }
            slot.data_mut().copy_from_slice(&data);
        }
        Ok(model)
    }
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::cross_entropy_value;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn zero_linear(inputs: usize, k: usize) -> Model {
        let mut m =
            Model::build(&ArchSpec::Mlp { hidden: vec![] }, &[inputs], k, &mut rng(0)).unwrap();
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        m
    }

    #[test]
    fn zero_weight_linear_gives_zero_logits_and_uniform_softmax() {
        let m = zero_linear(4, 3);
        let x = Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.7, 0.0, 0.0, 1.0, -2.0]).unwrap();
        let logits = m.forward(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let p = m.predict_proba(&x).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn identity_linear_maps_one_hot_to_its_class() {
        let mut m = zero_linear(3, 3);
        {
            let mut ps = m.params_mut();
            let w = &mut ps[0];
            for i in 0..3 {
                w.data_mut()[i * 3 + i] = 1.0;
            }
        }
        let x = Tensor::row(vec![0.0, 0.0, 1.0]);
        let logits = m.forward(&x).unwrap();
        assert_eq!(logits.data(), &[0.0, 0.0, 1.0]);
        assert_eq!(m.predict(&x).unwrap(), vec![2]);
    }

    #[test]
    fn two_layer_mlp_matches_hand_matrix_oracle() {
        // Straight-line recomputation of the same arithmetic with nested
        // loops, independent of the tape.
        let arch = ArchSpec::Mlp { hidden: vec![5] };
        let m = Model::build(&arch, &[4], 3, &mut rng(7)).unwrap();
        let x = Tensor::new(vec![2, 4], vec![0.1, 0.9, -0.4, 0.2, 0.0, 1.0, 0.5, -0.5]).unwrap();
        let logits = m.forward(&x).unwrap();

        let ps = m.params();
        let (w1, b1, w2, b2) = (ps[0], ps[1], ps[2], ps[3]);
        let mut expected = vec![0.0; 2 * 3];
        for b in 0..2 {
            let mut h = vec![0.0; 5];
            for j in 0..5 {
                let mut s = b1.data()[j];
                for i in 0..4 {
                    s += x.data()[b * 4 + i] * w1.data()[i * 5 + j];
                }
                h[j] = s.max(0.0);
            }
            for k in 0..3 {
                let mut s = b2.data()[k];
                for j in 0..5 {
                    s += h[j] * w2.data()[j * 3 + k];
                }
                expected[b * 3 + k] = s;
            }
        }
        for (got, want) in logits.data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn param_count_is_constant_and_matches_arch() {
        let m = Model::build(&ArchSpec::Mlp { hidden: vec![8, 8] }, &[4], 3, &mut rng(1)).unwrap();
        // 4*8 + 8 + 8*8 + 8 + 8*3 + 3
        assert_eq!(m.param_count(), 32 + 8 + 64 + 8 + 24 + 3);
    }

    #[test]
    fn shape_mismatch_names_offending_layer() {
        let m = Model::build(&ArchSpec::Mlp { hidden: vec![4] }, &[6], 2, &mut rng(2)).unwrap();
        let bad = Tensor::new(vec![1, 5], vec![0.0; 5]).unwrap();
        let err = m.forward(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("input"), "unexpected error: {msg}");
    }

    #[test]
    fn cnn_forward_shapes_and_gradients_flow() {
        let arch = ArchSpec::Cnn { channels: vec![2, 3] };
        let m = Model::build(&arch, &[1, 12, 12], 4, &mut rng(3)).unwrap();
        let x = Tensor::filled(vec![2, 1, 12, 12], 0.5);
        let logits = m.forward(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 4]);
        assert!(logits.all_finite());

        let targets = Tensor::new(
            vec![2, 4],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let mut m2 = m.clone();
        let (lv, pvars) = m2.forward_trainable(&mut tape, xv).unwrap();
        let loss = tape.cross_entropy(lv, &targets).unwrap();
        tape.backward(loss).unwrap();
        m2.absorb_grads(&tape, &pvars);
        assert!(m2.params().iter().all(|p| p.grad.is_some()));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = Model::build(&ArchSpec::Mlp { hidden: vec![7] }, &[5], 3, &mut rng(11)).unwrap();
        m.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        for (a, b) in m.params().iter().zip(loaded.params()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let x = Tensor::new(vec![1, 5], vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), loaded.forward(&x).unwrap().data());
    }

    #[test]
    fn arch_tags_round_trip() {
        for tag in ["linear", "mlp:32,32", "mlp:64", "cnn:8,16"] {
            let spec: ArchSpec = tag.parse().unwrap();
            assert_eq!(spec.to_string(), tag);
        }
        assert!("resnet".parse::<ArchSpec>().is_err());
    }

    #[test]
    fn ce_value_helper_agrees_with_tape_op() {
        let m = Model::build(&ArchSpec::Mlp { hidden: vec![6] }, &[3], 3, &mut rng(5)).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.2, 0.4, 0.6, 0.9, 0.1, 0.0]).unwrap();
        let t = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5]).unwrap();
        let logits = m.forward(&x).unwrap();
        let direct = cross_entropy_value(&logits, &t).unwrap();
        assert!(direct >= 0.0);
    }
}
