//! The deep Q-network: a two-hidden-layer MLP built from scratch.
//!
//! Parameters are 32-bit floats; all arithmetic runs in f64 so analytic
//! gradients can be checked against central finite differences at tight
//! tolerance. The loss for one sample is the squared TD error on the chosen
//! action's output alone; the other five outputs receive zero gradient.
//!
//! Dropout is inverted: surviving hidden units are scaled by 1/keep during
//! training so inference needs no rescaling. `keep_prob = 1.0` disables
//! dropout entirely and consumes no randomness.
//!
//! Checkpoint format (little-endian): magic `HQDN`, version u32, count of
//! layer sizes u32, the sizes as u32 each, then for every weight layer its
//! matrix row-major [out][in] as f32 followed by its bias vector as f32.
//! Round-trips are bit-exact.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HQDN";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    in_len: usize,
    out_len: usize,
    /// Row-major [out][in].
    weights: Vec<f32>,
    biases: Vec<f32>,
}

impl Layer {
    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TrainCache {
    input: Vec<f64>,
    /// Per hidden layer: pre-activation, post-relu-post-dropout output, and
    /// the dropout multiplier applied to each unit (1/keep or 0).
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    scale: Vec<Vec<f64>>,
}

/// MLP with layer sizes [input, hidden, hidden, outputs].
#[derive(Debug, Clone)]
pub struct QNetwork {
    layers: Vec<Layer>,
    keep_prob: f64,
    cache: Option<TrainCache>,
}

impl PartialEq for QNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl QNetwork {
    /// Weights drawn from a zero-mean normal with scale 1/sqrt(fan_in);
    /// biases start at zero.
    pub fn init<R: Rng>(
        input_len: usize,
        hidden: usize,
        outputs: usize,
        keep_prob: f64,
        rng: &mut R,
    ) -> QNetwork {
        let sizes = [input_len, hidden, hidden, outputs];
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for win in sizes.windows(2) {
            let (in_len, out_len) = (win[0], win[1]);
            let normal = Normal::new(0.0f64, 1.0 / (in_len as f64).sqrt()).unwrap();
            let weights = (0..in_len * out_len)
                .map(|_| normal.sample(rng) as f32)
                .collect();
            layers.push(Layer {
                in_len,
                out_len,
                weights,
                biases: vec![0.0; out_len],
            });
        }
        QNetwork { layers, keep_prob, cache: None }
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map(|l| l.in_len).unwrap_or(0)
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map(|l| l.out_len).unwrap_or(0)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.layers.iter().map(|l| l.in_len).collect();
        s.push(self.output_len());
        s
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    /// Dropout keep-probability is a training knob, not part of checkpoints.
    pub fn set_keep_prob(&mut self, keep_prob: f64) {
        self.keep_prob = keep_prob;
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// All parameters in serialization order: per layer, weights then biases.
    pub fn flatten_params(&self) -> Vec<f32> {
        let mut flat = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            flat.extend_from_slice(&l.weights);
            flat.extend_from_slice(&l.biases);
        }
        flat
    }

    pub fn set_params(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        self.cache = None;
        Ok(())
    }

    fn check_input(&self, input: &[f32]) -> Result<()> {
        if input.len() != self.input_len() {
            return Err(Error::ShapeMismatch(format!(
                "input length {} != network input {}",
                input.len(),
                self.input_len()
            )));
        }
        Ok(())
    }

    fn affine(layer: &Layer, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..layer.out_len {
            let row = &layer.weights[o * layer.in_len..(o + 1) * layer.in_len];
            let mut acc = layer.biases[o] as f64;
            for (w, x) in row.iter().zip(input) {
                acc += *w as f64 * *x;
            }
            out.push(acc);
        }
    }

    /// Deterministic forward pass without dropout.
    pub fn forward_infer(&self, input: &[f32]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut act: Vec<f64> = input.iter().map(|v| *v as f64).collect();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            Self::affine(layer, &act, &mut next);
            if i < last {
                for v in next.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            std::mem::swap(&mut act, &mut next);
        }
        Ok(act)
    }

    /// Forward pass with dropout on the hidden layers; caches activations
    /// for a following [`backward`](Self::backward) call.
    pub fn forward_train<R: Rng>(&mut self, input: &[f32], rng: &mut R) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let input_f64: Vec<f64> = input.iter().map(|v| *v as f64).collect();
        let hidden_count = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(hidden_count);
        let mut post = Vec::with_capacity(hidden_count);
        let mut scale = Vec::with_capacity(hidden_count);
        let mut act = input_f64.clone();
        let mut z = Vec::new();
        for layer in &self.layers[..hidden_count] {
            Self::affine(layer, &act, &mut z);
            pre.push(z.clone());
            let mut s = vec![1.0f64; layer.out_len];
            if self.keep_prob < 1.0 {
                let inv = 1.0 / self.keep_prob;
                for m in s.iter_mut() {
                    *m = if rng.gen::<f64>() < self.keep_prob { inv } else { 0.0 };
                }
            }
            act = z
                .iter()
                .zip(&s)
                .map(|(v, m)| if *v > 0.0 { *v * *m } else { 0.0 })
                .collect();
            post.push(act.clone());
            scale.push(s);
        }
        let mut q = Vec::new();
        Self::affine(&self.layers[hidden_count], &act, &mut q);
        self.cache = Some(TrainCache { input: input_f64, pre, post, scale });
        Ok(q)
    }

    /// Gradients of 0.5 * td_error^2 where td_error sits on output `action`.
    /// Requires the activations cached by the latest train-mode forward.
    pub fn backward_into(
        &self,
        action: usize,
        td_error: f64,
        grads: &mut Gradients,
    ) -> Result<()> {
        let cache = self.cache.as_ref().ok_or(Error::StaleCache)?;
        if action >= self.output_len() {
            return Err(Error::InvalidAction(action));
        }
        grads.check_shape(self)?;
        let last = self.layers.len() - 1;

        // output layer: only the chosen action's row carries gradient
        let out_layer = &self.layers[last];
        let h_last = &cache.post[last - 1];
        {
            let g = &mut grads.layers[last];
            let row = &mut g.dw[action * out_layer.in_len..(action + 1) * out_layer.in_len];
            for (dw, h) in row.iter_mut().zip(h_last) {
                *dw += td_error * *h;
            }
            g.db[action] += td_error;
        }
        // gradient wrt the last hidden output
        let w_row = &out_layer.weights[action * out_layer.in_len..(action + 1) * out_layer.in_len];
        let mut delta: Vec<f64> = w_row.iter().map(|w| *w as f64 * td_error).collect();

        for li in (0..last).rev() {
            let layer = &self.layers[li];
            // through dropout and relu
            for (i, d) in delta.iter_mut().enumerate() {
                let m = cache.scale[li][i];
                *d = if cache.pre[li][i] > 0.0 { *d * m } else { 0.0 };
            }
            let below: &[f64] = if li == 0 { &cache.input } else { &cache.post[li - 1] };
            {
                let g = &mut grads.layers[li];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &mut g.dw[o * layer.in_len..(o + 1) * layer.in_len];
                    for (dw, x) in row.iter_mut().zip(below) {
                        *dw += *d * *x;
                    }
                    g.db[o] += *d;
                }
            }
            if li > 0 {
                let mut next_delta = vec![0.0f64; layer.in_len];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.in_len..(o + 1) * layer.in_len];
                    for (nd, w) in next_delta.iter_mut().zip(row) {
                        *nd += *w as f64 * *d;
                    }
                }
                delta = next_delta;
            }
        }
        Ok(())
    }

    pub fn backward(&self, action: usize, td_error: f64) -> Result<Gradients> {
        let mut grads = Gradients::zeros_for(self);
        self.backward_into(action, td_error, &mut grads)?;
        Ok(grads)
    }

    #[cfg(test)]
    pub(crate) fn cached_hidden(&self, layer: usize) -> &[f64] {
        &self.cache.as_ref().unwrap().post[layer]
    }

    pub fn save(&self) -> Vec<u8> {
        let sizes = self.sizes();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
        for s in &sizes {
            out.extend_from_slice(&(*s as u32).to_le_bytes());
        }
        for l in &self.layers {
            for w in &l.weights {
                out.extend_from_slice(&w.to_le_bytes());
            }
            for b in &l.biases {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out
    }

    pub fn load(bytes: &[u8]) -> Result<QNetwork> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).ok_or_else(|| Error::Format("overflow".into()))?;
            if end > bytes.len() {
                return Err(Error::Format(format!(
                    "truncated: wanted {n} bytes at offset {pos}, file has {}",
                    bytes.len()
                )));
            }
            let slice = &bytes[*pos..end];
            *pos = end;
            Ok(slice)
        };
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Format("bad magic, expected HQDN".into()));
        }
        let version = read_u32(&mut pos)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n_sizes = read_u32(&mut pos)? as usize;
        if n_sizes < 2 || n_sizes > 16 {
            return Err(Error::Format(format!("implausible layer count {n_sizes}")));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            let s = read_u32(&mut pos)? as usize;
            if s == 0 {
                return Err(Error::Format("zero layer size".into()));
            }
            sizes.push(s);
        }
        let mut layers = Vec::with_capacity(n_sizes - 1);
        for win in sizes.windows(2) {
            let (in_len, out_len) = (win[0], win[1]);
            let wbytes = take(&mut pos, in_len * out_len * 4)?;
            let weights = wbytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let bbytes = take(&mut pos, out_len * 4)?;
            let biases = bbytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            layers.push(Layer { in_len, out_len, weights, biases });
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after parameters",
                bytes.len() - pos
            )));
        }
        Ok(QNetwork { layers, keep_prob: 1.0, cache: None })
    }

    pub fn save_to_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.save())?;
        Ok(())
    }

    pub fn load_from_file(path: &std::path::Path) -> Result<QNetwork> {
        let bytes = std::fs::read(path)?;
        QNetwork::load(&bytes)
    }
}

#[derive(Debug, Clone)]
struct GradLayer {
    dw: Vec<f64>,
    db: Vec<f64>,
}

/// Parameter gradients, shaped like the network they came from.
#[derive(Debug, Clone)]
pub struct Gradients {
    layers: Vec<GradLayer>,
}

impl Gradients {
    pub fn zeros_for(net: &QNetwork) -> Gradients {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| GradLayer {
                    dw: vec![0.0; l.weights.len()],
                    db: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    fn check_shape(&self, net: &QNetwork) -> Result<()> {
        if self.layers.len() != net.layers.len()
            || self
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(g, l)| g.dw.len() != l.weights.len() || g.db.len() != l.biases.len())
        {
            return Err(Error::ShapeMismatch("gradient shape != network shape".into()));
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            for v in l.dw.iter_mut().chain(l.db.iter_mut()) {
                *v *= factor;
            }
        }
    }

    /// Flat view in the same order as [`QNetwork::flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for l in &self.layers {
            flat.extend_from_slice(&l.dw);
            flat.extend_from_slice(&l.db);
        }
        flat
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.dw.iter().chain(l.db.iter()))
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// Adam with bias correction; moments are kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<GradLayer>,
    v: Vec<GradLayer>,
}

impl Adam {
    pub fn new(net: &QNetwork, learning_rate: f64) -> Adam {
        let zeros = Gradients::zeros_for(net);
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.layers.clone(),
            v: zeros.layers,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Invalidates the network's training cache.
    pub fn apply(&mut self, net: &mut QNetwork, grads: &Gradients) -> Result<()> {
        grads.check_shape(net)?;
        if self.m.len() != net.layers.len() {
            return Err(Error::ShapeMismatch("optimizer state shape != network".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let g = &grads.layers[li];
            let m = &mut self.m[li];
            let v = &mut self.v[li];
            for (i, w) in layer.weights.iter_mut().enumerate() {
                let grad = g.dw[i];
                m.dw[i] = self.beta1 * m.dw[i] + (1.0 - self.beta1) * grad;
                v.dw[i] = self.beta2 * v.dw[i] + (1.0 - self.beta2) * grad * grad;
                let update = self.learning_rate * (m.dw[i] / c1) / ((v.dw[i] / c2).sqrt() + self.epsilon);
                *w = (*w as f64 - update) as f32;
            }
            for (i, b) in layer.biases.iter_mut().enumerate() {
                let grad = g.db[i];
                m.db[i] = self.beta1 * m.db[i] + (1.0 - self.beta1) * grad;
                v.db[i] = self.beta2 * v.db[i] + (1.0 - self.beta2) * grad * grad;
                let update = self.learning_rate * (m.db[i] / c1) / ((v.db[i] / c2).sqrt() + self.epsilon);
                *b = (*b as f64 - update) as f32;
            }
        }
        net.cache = None;
        Ok(())
    }
}
