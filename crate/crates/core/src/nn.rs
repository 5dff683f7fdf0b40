//! Fully-connected ReLU network with exact backpropagation and Adam.
//!
//! Parameters live in one flat `Vec<f64>`, layer by layer, each layer's
//! weight matrix (row-major, `out x in`) followed by its bias vector. That
//! layout is shared by the gradient vector, the Adam moments and the
//! checkpoint format.
//!
//! Batched passes go through `matrixmultiply::dgemm`, whose kernel selection
//! depends on the CPU features detected at runtime. Results are bit-identical
//! run to run on one machine; across machines with different SIMD support the
//! last bits of a sum may differ.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::NetError;

const MAGIC: &[u8; 4] = b"MLPW";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

/// ReLU on hidden layers, identity on the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<LayerSlot>,
    params: Vec<f64>,
}

/// Per-layer outputs of a batched forward pass, kept for `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    /// `outputs[0]` is the input; `outputs[l + 1]` is layer `l` after its
    /// activation.
    outputs: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Network output, `batch x out` row-major.
    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("cache holds at least the input")
    }
}

fn layout(dims: &[usize]) -> (Vec<LayerSlot>, usize) {
    let mut offset = 0;
    let layers = dims
        .windows(2)
        .map(|w| {
            let slot = LayerSlot {
                fan_in: w[0],
                fan_out: w[1],
                weights: offset,
                bias: offset + w[0] * w[1],
            };
            offset += w[0] * w[1] + w[1];
            slot
        })
        .collect();
    (layers, offset)
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(dims: &[usize]) -> Result<Self, NetError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NetError::TooFewLayers);
        }
        let (layers, count) = layout(dims);
        Ok(Self {
            dims: dims.to_vec(),
            layers,
            params: vec![0.0; count],
        })
    }

    /// He-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self, NetError> {
        let mut net = Self::zeros(dims)?;
        for slot in net.layers.clone() {
            let limit = (6.0 / slot.fan_in as f64).sqrt();
            for w in &mut net.params[slot.weights..slot.bias] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    /// Square single-layer net computing the identity map.
    pub fn identity(dim: usize) -> Self {
        let mut net = Self::zeros(&[dim, dim]).expect("dim > 0");
        for i in 0..dim {
            net.params[i * dim + i] = 1.0;
        }
        net
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self, NetError> {
        let mut net = Self::zeros(dims)?;
        if params.len() != net.params.len() {
            return Err(NetError::DimensionMismatch {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Weights of `layer` as an `out x in` row-major slice.
    pub fn weights(&self, layer: usize) -> &[f64] {
        let s = self.layers[layer];
        &self.params[s.weights..s.bias]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.layers[layer];
        &mut self.params[s.weights..s.bias]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = self.layers[layer];
        &self.params[s.bias..s.bias + s.fan_out]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.layers[layer];
        &mut self.params[s.bias..s.bias + s.fan_out]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_input(x.len(), 1)?;
        let mut current = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, slot) in self.layers.iter().enumerate() {
            let w = &self.params[slot.weights..slot.bias];
            let b = &self.params[slot.bias..slot.bias + slot.fan_out];
            let mut next: Vec<f64> = w
                .chunks_exact(slot.fan_in)
                .zip(b)
                .map(|(row, bias)| row.iter().zip(&current).map(|(a, c)| a * c).sum::<f64>() + bias)
                .collect();
            if l < last {
                relu_in_place(&mut next);
            }
            current = next;
        }
        Ok(current)
    }

    /// Forward pass over `batch` row-major samples, keeping what `backward`
    /// needs.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<ForwardCache, NetError> {
        self.check_input(x.len(), batch)?;
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, slot) in self.layers.iter().enumerate() {
            let input = outputs.last().unwrap();
            let b = &self.params[slot.bias..slot.bias + slot.fan_out];
            let mut out: Vec<f64> = Vec::with_capacity(batch * slot.fan_out);
            for _ in 0..batch {
                out.extend_from_slice(b);
            }
            // out (batch x fan_out) += input (batch x fan_in) * W^T
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    slot.fan_in,
                    slot.fan_out,
                    1.0,
                    input.as_ptr(),
                    slot.fan_in as isize,
                    1,
                    self.params[slot.weights..].as_ptr(),
                    1,
                    slot.fan_in as isize,
                    1.0,
                    out.as_mut_ptr(),
                    slot.fan_out as isize,
                    1,
                );
            }
            if l < last {
                relu_in_place(&mut out);
            }
            outputs.push(out);
        }
        Ok(ForwardCache { batch, outputs })
    }

    /// Reverse-mode gradient of `sum_b <upstream_b, output_b>` with respect to
    /// every parameter, summed over the batch. `upstream` is `batch x out`.
    ///
    /// ReLU's derivative at exactly zero is taken as zero.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Vec<f64> {
        let mut grads = vec![0.0; self.params.len()];
        self.backward_into(cache, upstream, &mut grads);
        grads
    }

    /// Like [`Mlp::backward`] but accumulates into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache, upstream: &[f64], grads: &mut [f64]) {
        let batch = cache.batch;
        assert_eq!(upstream.len(), batch * self.output_dim());
        assert_eq!(grads.len(), self.params.len());
        let mut delta = upstream.to_vec();
        for (l, slot) in self.layers.iter().enumerate().rev() {
            let input = &cache.outputs[l];
            // dW (fan_out x fan_in) += delta^T (fan_out x batch) * input (batch x fan_in)
            unsafe {
                matrixmultiply::dgemm(
                    slot.fan_out,
                    batch,
                    slot.fan_in,
                    1.0,
                    delta.as_ptr(),
                    1,
                    slot.fan_out as isize,
                    input.as_ptr(),
                    slot.fan_in as isize,
                    1,
                    1.0,
                    grads[slot.weights..].as_mut_ptr(),
                    slot.fan_in as isize,
                    1,
                );
            }
            let db = &mut grads[slot.bias..slot.bias + slot.fan_out];
            for row in delta.chunks_exact(slot.fan_out) {
                for (g, d) in db.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l == 0 {
                break;
            }
            // delta_prev (batch x fan_in) = delta (batch x fan_out) * W (fan_out x fan_in)
            let mut prev = vec![0.0; batch * slot.fan_in];
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    slot.fan_out,
                    slot.fan_in,
                    1.0,
                    delta.as_ptr(),
                    slot.fan_out as isize,
                    1,
                    self.params[slot.weights..].as_ptr(),
                    slot.fan_in as isize,
                    1,
                    0.0,
                    prev.as_mut_ptr(),
                    slot.fan_in as isize,
                    1,
                );
            }
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    fn check_input(&self, len: usize, batch: usize) -> Result<(), NetError> {
        let expected = self.input_dim() * batch;
        if len != expected {
            return Err(NetError::DimensionMismatch { expected, got: len });
        }
        Ok(())
    }

    /// Writes the binary checkpoint: magic, format version, layer count and
    /// layer dims as little-endian `u32`, then every parameter as
    /// little-endian `f64` in layer order (weights row-major, then biases).
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), NetError> {
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one network written by [`Mlp::write_to`], leaving any trailing
    /// bytes unread.
    pub fn read_from<R: Read>(input: &mut R) -> Result<Self, NetError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NetError::Format("bad magic".into()));
        }
        let version = read_u32(input)?;
        if version != FORMAT_VERSION {
            return Err(NetError::Format(format!("unsupported version {version}")));
        }
        let n = read_u32(input)? as usize;
        if !(2..=64).contains(&n) {
            return Err(NetError::Format(format!("implausible layer count {n}")));
        }
        let dims = (0..n)
            .map(|_| read_u32(input).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let mut net = Self::zeros(&dims)?;
        for p in net.params.iter_mut() {
            *p = read_f64(input)?;
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn relu_in_place(xs: &mut [f64]) {
    for x in xs {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32, NetError> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_f64<R: Read>(input: &mut R) -> Result<f64, NetError> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grads.len(), self.first.len());
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_two_one() -> Mlp {
        // hidden = relu([1 -1; 0.5 2] x + [0, -1]), y = [2 -3] hidden + 0.5
        Mlp::from_params(
            &[2, 2, 1],
            vec![1.0, -1.0, 0.5, 2.0, 0.0, -1.0, 2.0, -3.0, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[3, 8, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, -4.0, 9.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_net() {
        let x = [0.3, -2.0, 7.5];
        assert_eq!(Mlp::identity(3).forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn hand_computed_two_layer() {
        // x = (1, 2): z = (1 - 2, 0.5 + 4 - 1) = (-1, 3.5) -> h = (0, 3.5)
        // y = 2·0 - 3·3.5 + 0.5 = -10
        let net = two_two_one();
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![-10.0]);
        let cache = net.forward_batch(&[1.0, 2.0, 3.0, 0.0], 2).unwrap();
        // x = (3, 0): z = (3, 0.5) -> y = 6 - 1.5 + 0.5 = 5
        assert_eq!(cache.output(), &[-10.0, 5.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let net = two_two_one();
        assert!(matches!(
            net.forward(&[1.0]),
            Err(NetError::DimensionMismatch {
                expected: 2,
                got: 1
            })
        ));
        assert!(net.forward_batch(&[1.0, 2.0, 3.0], 2).is_err());
        assert!(matches!(Mlp::zeros(&[4]), Err(NetError::TooFewLayers)));
    }

    #[test]
    fn linear_gradient_is_input() {
        let net = Mlp::from_params(&[1, 1], vec![0.7, 0.0]).unwrap();
        let cache = net.forward_batch(&[3.0], 1).unwrap();
        let g = net.backward(&cache, &[1.0]);
        assert_eq!(g, vec![3.0, 1.0]);
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        // Unit 0 gets z = -1 at x = (1, 2), so its incoming weights get nothing.
        let net = two_two_one();
        let cache = net.forward_batch(&[1.0, 2.0], 1).unwrap();
        let g = net.backward(&cache, &[1.0]);
        assert_eq!(&g[0..2], &[0.0, 0.0]);
        assert_eq!(g[4], 0.0);
        // Unit exactly at zero: z = 0 also counts as dead.
        let net = Mlp::from_params(&[1, 1, 1], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let cache = net.forward_batch(&[0.0], 1).unwrap();
        assert_eq!(net.backward(&cache, &[1.0]), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = vec![1.0, -2.0];
        let mut adam = AdamState::new(2, AdamConfig::default());
        adam.step(&mut params, &[0.0, 0.0]);
        assert_eq!(params, vec![1.0, -2.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        let mut params = vec![0.0, 0.0, 0.0];
        let grads = [0.5, -3.0, 1e-3];
        let mut adam = AdamState::new(3, AdamConfig::with_lr(0.01));
        adam.step(&mut params, &grads);
        for (p, g) in params.iter().zip(grads) {
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-15, "{p} vs {expected}");
            assert!((p + 0.01 * g.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_repeated_gradient_does_not_grow() {
        // With a constant g both bias-corrected moments equal g and g², so
        // both steps are lr·|g|/(|g| + ε).
        let mut params = vec![0.0];
        let mut adam = AdamState::new(1, AdamConfig::default());
        adam.step(&mut params, &[2.0]);
        let first = params[0].abs();
        let before = params[0];
        adam.step(&mut params, &[2.0]);
        let second = (params[0] - before).abs();
        assert!(second <= first + 1e-12, "{second} > {first}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[5, 7, 3], &mut rng).unwrap();
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"MLPW");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        assert_eq!(buf.len(), 12 + 3 * 4 + 8 * net.n_params());
        let back = Mlp::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.dims(), net.dims());
        assert!(back
            .params()
            .iter()
            .zip(net.params())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        net.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), buf);
        assert_eq!(Mlp::load(&path).unwrap(), net);

        buf[0] = b'X';
        assert!(matches!(
            Mlp::read_from(&mut buf.as_slice()),
            Err(NetError::Format(_))
        ));
    }

    #[test]
    fn he_init_is_seeded_and_bounded() {
        let a = Mlp::new(&[4, 256, 21], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = Mlp::new(&[4, 256, 21], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let limit = (6.0f64 / 4.0).sqrt();
        assert!(a.weights(0).iter().all(|w| w.abs() <= limit));
        assert!(a.bias(0).iter().all(|b| *b == 0.0));
        assert_eq!(a.n_params(), 4 * 256 + 256 + 256 * 21 + 21);
    }
}
