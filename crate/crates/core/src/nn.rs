//! Fixed-architecture multilayer perceptron with exact gradients.
//!
//! Parameters live in one flat `Vec<f64>`: for each layer, the weight matrix
//! (row-major, `out × in`) followed by its bias. Hidden layers use ReLU. The
//! network ends in either a dueling head (value and advantage streams,
//! combined as `Q = V + A - mean(A)`) or a plain logit head used for
//! behavior cloning.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{read_json, write_json};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Dueling,
    Logits,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub n_actions: usize,
    pub head: Head,
}

impl Architecture {
    pub fn dueling(input_dim: usize, hidden: &[usize], n_actions: usize) -> Self {
        Self { input_dim, hidden: hidden.to_vec(), n_actions, head: Head::Dueling }
    }

    pub fn logits(input_dim: usize, hidden: &[usize], n_actions: usize) -> Self {
        Self { input_dim, hidden: hidden.to_vec(), n_actions, head: Head::Logits }
    }

    /// Layer table in parameter order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, inputs: usize, outputs: usize| {
            out.push(LayerSpec { name, inputs, outputs, offset });
            offset += outputs * inputs + outputs;
        };
        let mut prev = self.input_dim;
        for (i, &h) in self.hidden.iter().enumerate() {
            push(format!("hidden{}", i + 1), prev, h);
            prev = h;
        }
        match self.head {
            Head::Dueling => {
                push("value".into(), prev, 1);
                push("advantage".into(), prev, self.n_actions);
            }
            Head::Logits => push("logits".into(), prev, self.n_actions),
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.layers().iter().map(|l| l.outputs * l.inputs + l.outputs).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    /// Start of the weight block; the bias follows it.
    pub offset: usize,
}

impl LayerSpec {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }

    fn contains(&self, index: usize) -> bool {
        (self.offset..self.bias_range().end).contains(&index)
    }
}

/// Activations retained from a forward pass for backpropagation.
pub struct ForwardCache {
    /// Input to each hidden layer and, last, the input to the head.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub arch: Architecture,
    pub params: Vec<f64>,
}

impl Network {
    /// Fan-in scaled uniform initialization: every weight and bias of a layer
    /// with `n` inputs is drawn from `U(-1/sqrt(n), 1/sqrt(n))`.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; arch.n_params()];
        for layer in arch.layers() {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for p in &mut params[layer.offset..layer.bias_range().end] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Self { arch, params }
    }

    pub fn zeros(arch: Architecture) -> Self {
        let params = vec![0.0; arch.n_params()];
        Self { arch, params }
    }

    pub fn layer(&self, name: &str) -> Option<LayerSpec> {
        self.arch.layers().into_iter().find(|l| l.name == name)
    }

    fn weight<'a>(&'a self, l: &LayerSpec) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((l.outputs, l.inputs), &self.params[l.weight_range()]).unwrap()
    }

    fn bias(&self, l: &LayerSpec) -> ndarray::ArrayView1<'_, f64> {
        ndarray::ArrayView1::from(&self.params[l.bias_range()])
    }

    fn affine(&self, x: &ArrayView2<f64>, l: &LayerSpec) -> Array2<f64> {
        let mut z = x.dot(&self.weight(l).t());
        z += &self.bias(l);
        z
    }

    /// Outputs per row of `states`: Q-values for a dueling head, logits otherwise.
    pub fn forward(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(states)?.0)
    }

    pub fn forward_cached(&self, states: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if states.ncols() != self.arch.input_dim {
            return Err(Error::Dimension { expected: self.arch.input_dim, got: states.ncols() });
        }
        let layers = self.arch.layers();
        let n_hidden = self.arch.hidden.len();
        let mut inputs = Vec::with_capacity(n_hidden + 1);
        let mut pre = Vec::with_capacity(n_hidden);
        let mut x = states.to_owned();
        for l in &layers[..n_hidden] {
            let z = self.affine(&x.view(), l);
            let a = z.mapv(|v| v.max(0.0));
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        let out = match self.arch.head {
            Head::Dueling => {
                let v = self.affine(&x.view(), &layers[n_hidden]);
                let adv = self.affine(&x.view(), &layers[n_hidden + 1]);
                dueling_combine(&v, &adv)
            }
            Head::Logits => self.affine(&x.view(), &layers[n_hidden]),
        };
        inputs.push(x);
        Ok((out, ForwardCache { inputs, pre }))
    }

    /// Value and advantage streams separately (dueling head only).
    pub fn value_advantage(&self, states: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        if self.arch.head != Head::Dueling {
            return Err(Error::Domain("value/advantage split needs a dueling head".into()));
        }
        let (_, cache) = self.forward_cached(states)?;
        let layers = self.arch.layers();
        let n = self.arch.hidden.len();
        let h = cache.inputs.last().unwrap().view();
        let v = self.affine(&h, &layers[n]).column(0).to_owned();
        let a = self.affine(&h, &layers[n + 1]);
        Ok((v, a))
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient `upstream` on the network outputs (zeros on entries the
    /// loss does not read).
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Vec<f64> {
        let layers = self.arch.layers();
        let n_hidden = self.arch.hidden.len();
        let mut grads = vec![0.0; self.params.len()];
        let h = cache.inputs.last().unwrap();

        let mut dh = match self.arch.head {
            Head::Dueling => {
                let (lv, la) = (&layers[n_hidden], &layers[n_hidden + 1]);
                let dv = upstream.sum_axis(Axis(1)).insert_axis(Axis(1));
                let mean = upstream.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
                let da = &upstream - &mean;
                self.accumulate(&mut grads, lv, &dv.view(), &h.view());
                self.accumulate(&mut grads, la, &da.view(), &h.view());
                dv.dot(&self.weight(lv)) + da.dot(&self.weight(la))
            }
            Head::Logits => {
                let l = &layers[n_hidden];
                self.accumulate(&mut grads, l, &upstream, &h.view());
                upstream.dot(&self.weight(l))
            }
        };

        for i in (0..n_hidden).rev() {
            let l = &layers[i];
            let mut dz = dh;
            ndarray::Zip::from(&mut dz).and(&cache.pre[i]).for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            self.accumulate(&mut grads, l, &dz.view(), &cache.inputs[i].view());
            dh = dz.dot(&self.weight(l));
        }
        grads
    }

    fn accumulate(&self, grads: &mut [f64], l: &LayerSpec, dz: &ArrayView2<f64>, x: &ArrayView2<f64>) {
        let dw = dz.t().dot(x);
        for (g, v) in grads[l.weight_range()].iter_mut().zip(dw.iter()) {
            *g += v;
        }
        let db = dz.sum_axis(Axis(0));
        for (g, v) in grads[l.bias_range()].iter_mut().zip(db.iter()) {
            *g += v;
        }
    }

    /// Name of the layer owning parameter `index`.
    pub fn layer_of(&self, index: usize) -> String {
        self.arch
            .layers()
            .into_iter()
            .find(|l| l.contains(index))
            .map(|l| l.name)
            .unwrap_or_else(|| "<out of range>".into())
    }
}

fn dueling_combine(v: &Array2<f64>, adv: &Array2<f64>) -> Array2<f64> {
    let mean = adv.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
    let mut q = adv - &mean;
    q += v;
    q
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    /// One update of `net` in place. Rejects non-finite gradients before
    /// touching any state.
    pub fn step(&mut self, net: &mut Network, grads: &[f64]) -> Result<()> {
        if grads.len() != net.params.len() || self.m.len() != net.params.len() {
            return Err(Error::Dimension { expected: net.params.len(), got: grads.len() });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in layer `{}` (parameter {i})",
                net.layer_of(i)
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..grads.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            net.params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Online network plus its periodically synchronized target copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuelingQNet {
    pub online: Network,
    pub target: Network,
}

impl DuelingQNet {
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let online = Network::new(arch, seed);
        Self { target: online.clone(), online }
    }

    /// Hard copy of the online parameters into the target network.
    pub fn sync_target(&mut self) {
        self.target.params.copy_from_slice(&self.online.params);
    }
}

pub const CHECKPOINT_FORMAT: &str = "enteral-rl/checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    /// Resolved training configuration, echoed for provenance.
    pub config: serde_json::Value,
    pub arch: Architecture,
    pub params: Vec<f64>,
    pub target_params: Option<Vec<f64>>,
    pub optimizer: Option<Adam>,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(
        net: &Network,
        target: Option<&Network>,
        optimizer: Option<&Adam>,
        step: u64,
        config: serde_json::Value,
        config_hash: &str,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            config,
            arch: net.arch.clone(),
            params: net.params.clone(),
            target_params: target.map(|t| t.params.clone()),
            optimizer: optimizer.cloned(),
            step,
        }
    }

    pub fn network(&self) -> Network {
        Network { arch: self.arch.clone(), params: self.params.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = read_json(path)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        let n = ck.arch.n_params();
        let target_ok = ck.target_params.as_ref().map_or(true, |t| t.len() == n);
        let opt_ok = ck.optimizer.as_ref().map_or(true, |o| o.m.len() == n && o.v.len() == n);
        if ck.params.len() != n || !target_ok || !opt_ok {
            return Err(Error::Schema(format!(
                "{}: parameter arrays do not match the declared architecture ({n} parameters)",
                path.display()
            )));
        }
        if ck.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Schema(format!("{}: non-finite parameters", path.display())));
        }
        Ok(ck)
    }
}
