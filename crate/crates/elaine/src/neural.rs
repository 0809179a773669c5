//! Hand-rolled dense network kernel: forward/backward passes with explicit
//! caches, a Gaussian reparameterization head, Adam, and a finite-difference
//! gradient checker. Everything is f64; gradients are derived by hand and the
//! checker exists to keep them honest.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{ElaineError, Result};

/// Hard bound applied to raw log-variances before exponentiation.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(&self, pre: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Sigmoid => pre.mapv(sigmoid),
            Activation::Relu => pre.mapv(|x| x.max(0.0)),
            Activation::Identity => pre.clone(),
        }
    }

    /// Derivative with respect to the pre-activation. The relu subgradient at
    /// exactly zero is taken as zero.
    fn derivative(&self, pre: &Array2<f64>, out: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Sigmoid => out.mapv(|y| y * (1.0 - y)),
            Activation::Relu => pre.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            Activation::Identity => Array2::ones(pre.raw_dim()),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer `y = act(x W + b)` with `W` of shape
/// `(input, output)`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Glorot-uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero
    /// biases.
    pub fn new(input: usize, output: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let w = Array2::from_shape_fn((input, output), |_| rng.gen_range(-bound..=bound));
        DenseLayer {
            w,
            b: Array1::zeros(output),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Returns `(activated output, pre-activation)`.
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        assert_eq!(
            x.ncols(),
            self.input_dim(),
            "layer fed {} columns, expects {}",
            x.ncols(),
            self.input_dim()
        );
        let mut pre = x.dot(&self.w);
        pre += &self.b;
        (self.activation.apply(&pre), pre)
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn append_params(&self, out: &mut Vec<f64>) {
        out.extend(self.w.iter());
        out.extend(self.b.iter());
    }

    /// Consumes `self.param_count()` values from the front of `src`.
    pub fn read_params(&mut self, src: &mut &[f64]) {
        for w in self.w.iter_mut() {
            *w = src[0];
            *src = &src[1..];
        }
        for b in self.b.iter_mut() {
            *b = src[0];
            *src = &src[1..];
        }
    }
}

/// Gradients of one dense layer, in the same shapes as its parameters.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        LayerGrad {
            dw: Array2::zeros(layer.w.raw_dim()),
            db: Array1::zeros(layer.b.raw_dim()),
        }
    }

    pub fn append_params(&self, out: &mut Vec<f64>) {
        out.extend(self.dw.iter());
        out.extend(self.db.iter());
    }
}

/// Stack of dense layers; may be empty, in which case it is the identity.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    input_dim: usize,
    output_dim: usize,
}

/// Forward-pass cache: `inputs[i]` feeds layer `i`, `pres[i]` is its
/// pre-activation, and `inputs.last()` is the final output.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pres: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.inputs.last().unwrap()
    }
}

impl Mlp {
    /// `dims` runs input -> hidden... -> output. Hidden layers use
    /// `hidden_act`, the final layer `output_act`.
    pub fn new(
        dims: &[usize],
        hidden_act: Activation,
        output_act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(!dims.is_empty(), "layer stack needs at least one dimension");
        assert!(
            dims.iter().all(|&d| d > 0),
            "layer dimensions must be positive"
        );
        let mut layers = Vec::new();
        for i in 0..dims.len().saturating_sub(1) {
            let act = if i + 1 == dims.len() - 1 {
                output_act
            } else {
                hidden_act
            };
            layers.push(DenseLayer::new(dims[i], dims[i + 1], act, rng));
        }
        Mlp {
            layers,
            input_dim: dims[0],
            output_dim: *dims.last().unwrap(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        assert_eq!(x.ncols(), self.input_dim, "input width mismatch");
        let mut inputs = vec![x.clone()];
        let mut pres = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, pre) = layer.forward(inputs.last().unwrap());
            pres.push(pre);
            inputs.push(out);
        }
        (inputs.last().unwrap().clone(), MlpCache { inputs, pres })
    }

    /// Forward without keeping the cache.
    pub fn infer(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward(x).0
    }

    /// Backpropagate `upstream = dL/d(output)` through the cached pass.
    /// Returns `dL/d(input)` and per-layer parameter gradients.
    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: &Array2<f64>,
    ) -> (Array2<f64>, Vec<LayerGrad>) {
        assert_eq!(upstream.ncols(), self.output_dim, "upstream width mismatch");
        let mut delta = upstream.clone();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let dact = layer
                .activation
                .derivative(&cache.pres[i], &cache.inputs[i + 1]);
            let dpre = &delta * &dact;
            grads.push(LayerGrad {
                dw: cache.inputs[i].t().dot(&dpre),
                db: dpre.sum_axis(Axis(0)),
            });
            delta = dpre.dot(&layer.w.t());
        }
        grads.reverse();
        (delta, grads)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn append_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            layer.append_params(out);
        }
    }

    pub fn read_params(&mut self, src: &mut &[f64]) {
        for layer in &mut self.layers {
            layer.read_params(src);
        }
    }
}

/// Projection of a hidden representation onto a diagonal Gaussian: two
/// identity-activated linear layers for the mean and the log-variance, the
/// latter clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]` before use.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub mu: DenseLayer,
    pub logvar: DenseLayer,
}

/// Cache of one head projection.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
    logvar_raw: Array2<f64>,
}

impl GaussianHead {
    pub fn new(input: usize, latent: usize, rng: &mut impl Rng) -> Self {
        GaussianHead {
            mu: DenseLayer::new(input, latent, Activation::Identity, rng),
            logvar: DenseLayer::new(input, latent, Activation::Identity, rng),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.output_dim()
    }

    pub fn project(&self, h: &Array2<f64>) -> HeadCache {
        let (mu, _) = self.mu.forward(h);
        let (logvar_raw, _) = self.logvar.forward(h);
        let logvar = logvar_raw.mapv(|x| x.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
        HeadCache {
            mu,
            logvar,
            logvar_raw,
        }
    }

    /// Gradients through both projections. `dmu`/`dlogvar` are with respect
    /// to the clamped outputs; the clamp blocks gradient outside its range.
    pub fn backward(
        &self,
        h: &Array2<f64>,
        cache: &HeadCache,
        dmu: &Array2<f64>,
        dlogvar: &Array2<f64>,
    ) -> (Array2<f64>, LayerGrad, LayerGrad) {
        let gate = cache
            .logvar_raw
            .mapv(|x| if x.abs() < LOGVAR_CLAMP { 1.0 } else { 0.0 });
        let dlogvar_raw = dlogvar * &gate;

        let mu_grad = LayerGrad {
            dw: h.t().dot(dmu),
            db: dmu.sum_axis(Axis(0)),
        };
        let lv_grad = LayerGrad {
            dw: h.t().dot(&dlogvar_raw),
            db: dlogvar_raw.sum_axis(Axis(0)),
        };
        let dh = dmu.dot(&self.mu.w.t()) + dlogvar_raw.dot(&self.logvar.w.t());
        (dh, mu_grad, lv_grad)
    }

    pub fn param_count(&self) -> usize {
        self.mu.param_count() + self.logvar.param_count()
    }

    pub fn append_params(&self, out: &mut Vec<f64>) {
        self.mu.append_params(out);
        self.logvar.append_params(out);
    }

    pub fn read_params(&mut self, src: &mut &[f64]) {
        self.mu.read_params(src);
        self.logvar.read_params(src);
    }
}

/// Reparameterized draw `z = mu + exp(logvar / 2) * eps`, with `eps` supplied
/// by the caller so the whole pass stays a deterministic function.
pub fn sample_latent(
    head: &GaussianHead,
    h: &Array2<f64>,
    eps: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let cache = head.project(h);
    let z = reparameterize(&cache.mu, &cache.logvar, eps);
    (z, cache.mu, cache.logvar)
}

pub fn reparameterize(mu: &Array2<f64>, logvar: &Array2<f64>, eps: &Array2<f64>) -> Array2<f64> {
    assert_eq!(mu.raw_dim(), logvar.raw_dim(), "mu/logvar shape mismatch");
    assert_eq!(mu.raw_dim(), eps.raw_dim(), "mu/eps shape mismatch");
    mu + &(logvar.mapv(|x| (0.5 * x).exp()) * eps)
}

/// Batch-averaged KL divergence of diagonal Gaussians against the unit
/// Gaussian: `mean_rows sum_d 0.5 * (exp(lv) + mu^2 - 1 - lv)`.
pub fn kl_unit_gaussian(mu: &Array2<f64>, logvar: &Array2<f64>) -> f64 {
    assert_eq!(mu.raw_dim(), logvar.raw_dim(), "mu/logvar shape mismatch");
    assert!(mu.nrows() > 0, "kl needs at least one row");
    let total: f64 = mu
        .iter()
        .zip(logvar.iter())
        .map(|(&m, &l)| 0.5 * (l.exp() + m * m - 1.0 - l))
        .sum();
    total / mu.nrows() as f64
}

/// Gradients of [`kl_unit_gaussian`] with respect to `mu` and `logvar`.
pub fn kl_unit_gaussian_grad(mu: &Array2<f64>, logvar: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let b = mu.nrows() as f64;
    let dmu = mu.mapv(|m| m / b);
    let dlv = logvar.mapv(|l| 0.5 * (l.exp() - 1.0) / b);
    (dmu, dlv)
}

/// Adam with bias-corrected first and second moments over one flat parameter
/// vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, param_count: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Central finite differences of a scalar function of a flat parameter
/// vector.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Largest elementwise relative error between two gradient vectors. The
/// denominator is floored at 1e-3 so finite-difference roundoff on entries
/// whose true gradient vanishes cannot dominate the comparison.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Shape of one parameter tensor inside a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorShape {
    Matrix(usize, usize),
    Vector(usize),
}

impl TensorShape {
    pub fn len(&self) -> usize {
        match *self {
            TensorShape::Matrix(r, c) => r * c,
            TensorShape::Vector(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Versioned binary checkpoint: tensor shape table, concatenated row-major
/// parameters, and optionally the Adam state needed to resume training.
#[derive(Debug, Clone)]
pub struct CheckpointBlob {
    pub shapes: Vec<TensorShape>,
    pub params: Vec<f64>,
    pub adam: Option<Adam>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ELNB";
const CHECKPOINT_VERSION: u32 = 1;

impl CheckpointBlob {
    pub fn validate(&self) -> Result<()> {
        let expect: usize = self.shapes.iter().map(TensorShape::len).sum();
        if expect != self.params.len() {
            return Err(ElaineError::Checkpoint(format!(
                "shape table wants {expect} parameters, blob carries {}",
                self.params.len()
            )));
        }
        if let Some(adam) = &self.adam {
            if adam.m.len() != self.params.len() || adam.v.len() != self.params.len() {
                return Err(ElaineError::Checkpoint(
                    "optimizer state length does not match parameters".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        buf.write_u64::<LittleEndian>(self.shapes.len() as u64)
            .unwrap();
        for shape in &self.shapes {
            match *shape {
                TensorShape::Matrix(r, c) => {
                    buf.push(2);
                    buf.write_u64::<LittleEndian>(r as u64).unwrap();
                    buf.write_u64::<LittleEndian>(c as u64).unwrap();
                }
                TensorShape::Vector(n) => {
                    buf.push(1);
                    buf.write_u64::<LittleEndian>(n as u64).unwrap();
                }
            }
        }
        buf.write_u64::<LittleEndian>(self.params.len() as u64)
            .unwrap();
        for &x in &self.params {
            buf.write_f64::<LittleEndian>(x).unwrap();
        }
        match &self.adam {
            None => buf.push(0),
            Some(adam) => {
                buf.push(1);
                buf.write_f64::<LittleEndian>(adam.lr).unwrap();
                buf.write_f64::<LittleEndian>(adam.beta1).unwrap();
                buf.write_f64::<LittleEndian>(adam.beta2).unwrap();
                buf.write_f64::<LittleEndian>(adam.eps).unwrap();
                buf.write_u64::<LittleEndian>(adam.t).unwrap();
                for &x in adam.m.iter().chain(adam.v.iter()) {
                    buf.write_f64::<LittleEndian>(x).unwrap();
                }
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(data: &[u8]) -> Result<CheckpointBlob> {
        let bad = |msg: &str| ElaineError::Checkpoint(msg.to_string());
        let mut cur = Cursor::new(data);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| bad("truncated checkpoint header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint blob"));
        }
        let version = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| bad("truncated checkpoint header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(ElaineError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let shape_count = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("truncated shape table"))? as usize;
        let mut shapes = Vec::with_capacity(shape_count);
        for _ in 0..shape_count {
            let mut kind = [0u8; 1];
            cur.read_exact(&mut kind)
                .map_err(|_| bad("truncated shape table"))?;
            let shape = match kind[0] {
                1 => TensorShape::Vector(
                    cur.read_u64::<LittleEndian>()
                        .map_err(|_| bad("truncated shape table"))? as usize,
                ),
                2 => {
                    let r = cur
                        .read_u64::<LittleEndian>()
                        .map_err(|_| bad("truncated shape table"))?
                        as usize;
                    let c = cur
                        .read_u64::<LittleEndian>()
                        .map_err(|_| bad("truncated shape table"))?
                        as usize;
                    TensorShape::Matrix(r, c)
                }
                k => return Err(ElaineError::Checkpoint(format!("unknown tensor kind {k}"))),
            };
            shapes.push(shape);
        }
        let param_count = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("truncated parameter block"))? as usize;
        let mut params = Vec::with_capacity(param_count);
        for _ in 0..param_count {
            params.push(
                cur.read_f64::<LittleEndian>()
                    .map_err(|_| bad("truncated parameter block"))?,
            );
        }
        let mut flag = [0u8; 1];
        cur.read_exact(&mut flag)
            .map_err(|_| bad("truncated optimizer flag"))?;
        let adam = match flag[0] {
            0 => None,
            1 => {
                let lr = cur
                    .read_f64::<LittleEndian>()
                    .map_err(|_| bad("truncated optimizer state"))?;
                let beta1 = cur
                    .read_f64::<LittleEndian>()
                    .map_err(|_| bad("truncated optimizer state"))?;
                let beta2 = cur
                    .read_f64::<LittleEndian>()
                    .map_err(|_| bad("truncated optimizer state"))?;
                let eps = cur
                    .read_f64::<LittleEndian>()
                    .map_err(|_| bad("truncated optimizer state"))?;
                let t = cur
                    .read_u64::<LittleEndian>()
                    .map_err(|_| bad("truncated optimizer state"))?;
                let mut m = Vec::with_capacity(param_count);
                for _ in 0..param_count {
                    m.push(
                        cur.read_f64::<LittleEndian>()
                            .map_err(|_| bad("truncated optimizer state"))?,
                    );
                }
                let mut v = Vec::with_capacity(param_count);
                for _ in 0..param_count {
                    v.push(
                        cur.read_f64::<LittleEndian>()
                            .map_err(|_| bad("truncated optimizer state"))?,
                    );
                }
                Some(Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    t,
                    m,
                    v,
                })
            }
            k => {
                return Err(ElaineError::Checkpoint(format!(
                    "unknown optimizer flag {k}"
                )))
            }
        };
        let blob = CheckpointBlob {
            shapes,
            params,
            adam,
        };
        blob.validate()?;
        Ok(blob)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| ElaineError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CheckpointBlob> {
        let path = path.as_ref();
        let data = std::fs::read(path).map_err(|e| ElaineError::io(path, e))?;
        CheckpointBlob::from_bytes(&data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn mlp_params(mlp: &Mlp) -> Vec<f64> {
        let mut out = Vec::new();
        mlp.append_params(&mut out);
        out
    }

    fn set_mlp_params(mlp: &mut Mlp, params: &[f64]) {
        let mut src = params;
        mlp.read_params(&mut src);
        assert!(src.is_empty());
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut layer = DenseLayer::new(3, 3, Activation::Identity, &mut rng(0));
        layer.w = Array2::eye(3);
        layer.b.fill(0.0);
        let x = array![[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]];
        let (out, pre) = layer.forward(&x);
        assert_eq!(out, x);
        assert_eq!(pre, x);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!(sigmoid(30.0) < 1.0 + 1e-12);
    }

    #[test]
    fn glorot_init_respects_bounds_and_zero_biases() {
        let layer = DenseLayer::new(40, 60, Activation::Relu, &mut rng(3));
        let bound = (6.0 / 100.0f64).sqrt();
        for &w in layer.w.iter() {
            assert!(w.abs() <= bound);
        }
        assert!(layer.b.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn forward_matches_a_naive_reimplementation() {
        // Independent oracle: the same three-layer pass written as plain
        // nested loops.
        let mlp = Mlp::new(
            &[4, 5, 3, 2],
            Activation::Relu,
            Activation::Sigmoid,
            &mut rng(11),
        );
        let x = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 7 + j * 3) as f64 * 0.13).sin());
        let (out, _) = mlp.forward(&x);

        let mut cur: Vec<Vec<f64>> = (0..x.nrows())
            .map(|r| x.row(r).iter().copied().collect())
            .collect();
        for (li, layer) in mlp.layers.iter().enumerate() {
            let mut next = vec![vec![0.0; layer.output_dim()]; cur.len()];
            for (r, row) in cur.iter().enumerate() {
                for c in 0..layer.output_dim() {
                    let mut acc = layer.b[c];
                    for (k, &xv) in row.iter().enumerate() {
                        acc += xv * layer.w[[k, c]];
                    }
                    next[r][c] = if li == mlp.layers.len() - 1 {
                        1.0 / (1.0 + (-acc).exp())
                    } else {
                        acc.max(0.0)
                    };
                }
            }
            cur = next;
        }
        for r in 0..out.nrows() {
            for c in 0..out.ncols() {
                assert!(
                    (out[[r, c]] - cur[r][c]).abs() < 1e-12,
                    "({r}, {c}): {} vs {}",
                    out[[r, c]],
                    cur[r][c]
                );
            }
        }
    }

    #[test]
    fn linear_layer_gradients_have_closed_form() {
        // L = sum(out) with identity activation: dW = X^T 1, db = batch size.
        let mlp = Mlp::new(&[3, 2], Activation::Relu, Activation::Identity, &mut rng(4));
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let (out, cache) = mlp.forward(&x);
        let upstream = Array2::ones(out.raw_dim());
        let (dx, grads) = mlp.backward(&cache, &upstream);
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(grads[0].dw[[i, j]], x[[0, i]] + x[[1, i]]);
            }
        }
        assert_eq!(grads[0].db, array![2.0, 2.0]);
        for r in 0..2 {
            for c in 0..3 {
                let want: f64 = (0..2).map(|j| mlp.layers[0].w[[c, j]]).sum();
                assert!((dx[[r, c]] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mlp = Mlp::new(
            &[4, 6, 3],
            Activation::Relu,
            Activation::Sigmoid,
            &mut rng(5),
        );
        let x = Array2::from_shape_fn((2, 4), |(i, j)| (i + j) as f64 * 0.1);
        let (out, cache) = mlp.forward(&x);
        let (dx, grads) = mlp.backward(&cache, &Array2::zeros(out.raw_dim()));
        assert!(dx.iter().all(|&v| v == 0.0));
        for g in grads {
            assert!(g.dw.iter().all(|&v| v == 0.0));
            assert!(g.db.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut mlp = Mlp::new(
            &[3, 4, 2],
            Activation::Sigmoid,
            Activation::Sigmoid,
            &mut rng(6),
        );
        let x = Array2::from_shape_fn((5, 3), |(i, j)| ((i * 3 + j) as f64 * 0.7).cos());
        // L = sum(out^2)
        let (out, cache) = mlp.forward(&x);
        let upstream = out.mapv(|y| 2.0 * y);
        let (_, grads) = mlp.backward(&cache, &upstream);
        let mut analytic = Vec::new();
        for g in &grads {
            g.append_params(&mut analytic);
        }

        let base = mlp_params(&mlp);
        let numeric = finite_difference_gradient(
            |p| {
                set_mlp_params(&mut mlp, p);
                let (o, _) = mlp.forward(&x);
                o.iter().map(|y| y * y).sum()
            },
            &base,
            1e-5,
        );
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn empty_stack_is_the_identity() {
        let mlp = Mlp::new(&[4], Activation::Relu, Activation::Sigmoid, &mut rng(1));
        assert_eq!(mlp.param_count(), 0);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let (out, cache) = mlp.forward(&x);
        assert_eq!(out, x);
        let upstream = Array2::from_elem((3, 4), 2.0);
        let (dx, grads) = mlp.backward(&cache, &upstream);
        assert_eq!(dx, upstream);
        assert!(grads.is_empty());
    }

    #[test]
    fn reparameterization_special_cases() {
        let mu = array![[0.25, -0.75]];
        let logvar = Array2::zeros((1, 2));
        let z = reparameterize(&mu, &logvar, &Array2::zeros((1, 2)));
        assert_eq!(z, mu);
        let z = reparameterize(&mu, &logvar, &Array2::ones((1, 2)));
        assert_eq!(z, array![[1.25, 0.25]]);
    }

    #[test]
    fn reparameterized_draws_have_the_right_moments() {
        let n = 100_000;
        let mu_val = 0.7;
        let sigma = 0.5;
        let mu = Array2::from_elem((n, 1), mu_val);
        let logvar = Array2::from_elem((n, 1), (sigma * sigma) as f64).mapv(f64::ln);
        let mut r = rng(8);
        let eps = Array2::from_shape_fn((n, 1), |_| {
            // Box-Muller keeps this test free of distribution helpers.
            let u1: f64 = r.gen_range(f64::EPSILON..1.0);
            let u2: f64 = r.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        let z = reparameterize(&mu, &logvar, &eps);
        let mean = z.sum() / n as f64;
        let var = z.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!((mean - mu_val).abs() < 3.0 * sigma / (n as f64).sqrt());
        assert!((var.sqrt() - sigma).abs() < 0.01);
    }

    #[test]
    fn head_clamps_logvar_and_blocks_its_gradient() {
        let mut head = GaussianHead::new(2, 1, &mut rng(9));
        head.logvar.b.fill(50.0);
        let h = array![[0.1, 0.2]];
        let cache = head.project(&h);
        assert_eq!(cache.logvar[[0, 0]], LOGVAR_CLAMP);
        let dmu = Array2::zeros((1, 1));
        let dlv = Array2::ones((1, 1));
        let (dh, _, lv_grad) = head.backward(&h, &cache, &dmu, &dlv);
        assert!(lv_grad.dw.iter().all(|&v| v == 0.0));
        assert!(lv_grad.db.iter().all(|&v| v == 0.0));
        assert!(dh.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(
            kl_unit_gaussian(&Array2::zeros((3, 4)), &Array2::zeros((3, 4))),
            0.0
        );
        let kl = kl_unit_gaussian(&array![[1.0]], &array![[0.0]]);
        assert!((kl - 0.5).abs() < 1e-15);
        // Batch averaging: rows with mu 1 and mu 0 average to 0.25.
        let kl = kl_unit_gaussian(&array![[1.0], [0.0]], &Array2::zeros((2, 1)));
        assert!((kl - 0.25).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo_estimate() {
        // Oracle: KL(q || p) = E_q[log q(z) - log p(z)] estimated by
        // sampling from q = N(0.5, 0.25).
        let mu = 0.5f64;
        let var = 0.25f64;
        let closed = kl_unit_gaussian(&array![[mu]], &array![[var.ln()]]);
        let mut r = rng(10);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let u1: f64 = r.gen_range(f64::EPSILON..1.0);
            let u2: f64 = r.gen::<f64>();
            let eps = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            let z = mu + var.sqrt() * eps;
            let log_q = -0.5 * ((z - mu) * (z - mu) / var + var.ln());
            let log_p = -0.5 * (z * z);
            acc += log_q - log_p;
        }
        let mc = acc / n as f64;
        assert!(
            (mc - closed).abs() < 0.01 * closed,
            "monte carlo {mc} vs closed form {closed}"
        );
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mu = array![[0.4, -0.2], [1.1, 0.3]];
        let logvar = array![[0.5, -0.6], [0.1, -1.2]];
        let (dmu, dlv) = kl_unit_gaussian_grad(&mu, &logvar);
        for r in 0..2 {
            for c in 0..2 {
                let h = 1e-6;
                let mut up = mu.clone();
                up[[r, c]] += h;
                let mut down = mu.clone();
                down[[r, c]] -= h;
                let num =
                    (kl_unit_gaussian(&up, &logvar) - kl_unit_gaussian(&down, &logvar)) / (2.0 * h);
                assert!((dmu[[r, c]] - num).abs() < 1e-8);

                let mut up = logvar.clone();
                up[[r, c]] += h;
                let mut down = logvar.clone();
                down[[r, c]] -= h;
                let num = (kl_unit_gaussian(&mu, &up) - kl_unit_gaussian(&mu, &down)) / (2.0 * h);
                assert!((dlv[[r, c]] - num).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut adam = Adam::new(0.1, 3);
        let mut params = vec![1.0, -2.0, 0.5];
        adam.step(&mut params, &[0.0, 0.0, 0.0]);
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_has_bias_corrected_magnitude() {
        let mut adam = Adam::new(0.05, 2);
        let mut params = vec![1.0, 1.0];
        let grads = [0.3, -4.0];
        adam.step(&mut params, &grads);
        for (i, &g) in grads.iter().enumerate() {
            let want = 1.0 - adam.lr * g / (g.abs() + adam.eps);
            assert!(
                (params[i] - want).abs() < 1e-12,
                "param {i}: {} vs {want}",
                params[i]
            );
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut adam = Adam::new(0.1, 1);
        let mut params = vec![5.0];
        for _ in 0..500 {
            let g = 2.0 * params[0];
            adam.step(&mut params, &[g]);
        }
        assert!(params[0].abs() < 0.1, "ended at {}", params[0]);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let mut adam = Adam::new(0.01, 5);
        let mut params = vec![0.25, -1.5, 3.0, 0.0, 9.25];
        adam.step(&mut params, &[0.1, -0.2, 0.3, 0.0, -0.4]);
        let blob = CheckpointBlob {
            shapes: vec![TensorShape::Matrix(2, 2), TensorShape::Vector(1)],
            params: params.clone(),
            adam: Some(adam.clone()),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        blob.save(&path).unwrap();
        let back = CheckpointBlob::load(&path).unwrap();
        assert_eq!(back.shapes, blob.shapes);
        assert_eq!(back.params, params);
        let restored = back.adam.unwrap();
        assert_eq!(restored.t, adam.t);
        assert_eq!(restored.m, adam.m);
        assert_eq!(restored.v, adam.v);
        assert_eq!(restored.lr, adam.lr);
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch_and_corruption() {
        let blob = CheckpointBlob {
            shapes: vec![TensorShape::Matrix(2, 3)],
            params: vec![0.0; 5],
            adam: None,
        };
        assert!(blob.to_bytes().is_err());

        let good = CheckpointBlob {
            shapes: vec![TensorShape::Vector(2)],
            params: vec![1.0, 2.0],
            adam: None,
        };
        let bytes = good.to_bytes().unwrap();
        assert!(CheckpointBlob::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(CheckpointBlob::from_bytes(&wrong_magic).is_err());
    }

    proptest::proptest! {
        #[test]
        fn kl_is_nonnegative(
            mu in proptest::collection::vec(-3.0f64..3.0, 4),
            lv in proptest::collection::vec(-4.0f64..4.0, 4),
        ) {
            let mu = Array2::from_shape_vec((2, 2), mu).unwrap();
            let lv = Array2::from_shape_vec((2, 2), lv).unwrap();
            proptest::prop_assert!(kl_unit_gaussian(&mu, &lv) >= 0.0);
        }
    }
}
