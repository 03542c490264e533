//! Stacked GRU refiner with a linear output head.
//!
//! Vectors are rows and weights multiply on the right (`x · W`), so an
//! input-to-gate matrix has shape `in_dim × hidden`. Per layer and step:
//!
//! ```text
//! r = σ(x·Wxr + h_prev·Whr + br)
//! u = σ(x·Wxu + h_prev·Whu + bu)
//! c = act(x·Wxc + r ⊙ (h_prev·Whc) + bc)
//! h = (1 − u) ⊙ h_prev + u ⊙ c
//! ```
//!
//! The reset gate multiplies the projected previous state, not the state
//! itself. `act` is the logistic function by default; `tanh` is available
//! through [`Candidate::Tanh`]. Inverted dropout sits between layers and in
//! front of the head. Hidden state starts at zero for every sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Candidate {
    #[default]
    Sigmoid,
    Tanh,
}

impl Candidate {
    pub fn name(self) -> &'static str {
        match self {
            Candidate::Sigmoid => "sigmoid",
            Candidate::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sigmoid" => Some(Candidate::Sigmoid),
            "tanh" => Some(Candidate::Tanh),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Candidate::Sigmoid => sigmoid(x),
            Candidate::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Candidate::Sigmoid => y * (1.0 - y),
            Candidate::Tanh => 1.0 - y * y,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weights of one GRU layer. Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayerParams {
    pub in_dim: usize,
    pub hidden: usize,
    pub w_xr: Vec<f64>,
    pub w_xu: Vec<f64>,
    pub w_xc: Vec<f64>,
    pub w_hr: Vec<f64>,
    pub w_hu: Vec<f64>,
    pub w_hc: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_u: Vec<f64>,
    pub b_c: Vec<f64>,
}

impl GruLayerParams {
    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        let wx = vec![0.0; in_dim * hidden];
        let wh = vec![0.0; hidden * hidden];
        let b = vec![0.0; hidden];
        Self {
            in_dim,
            hidden,
            w_xr: wx.clone(),
            w_xu: wx.clone(),
            w_xc: wx,
            w_hr: wh.clone(),
            w_hu: wh.clone(),
            w_hc: wh,
            b_r: b.clone(),
            b_u: b.clone(),
            b_c: b,
        }
    }

    fn tensors(&self) -> [(&'static str, &Vec<f64>, [usize; 2]); 9] {
        let (i, h) = (self.in_dim, self.hidden);
        [
            ("w_xr", &self.w_xr, [i, h]),
            ("w_xu", &self.w_xu, [i, h]),
            ("w_xc", &self.w_xc, [i, h]),
            ("w_hr", &self.w_hr, [h, h]),
            ("w_hu", &self.w_hu, [h, h]),
            ("w_hc", &self.w_hc, [h, h]),
            ("b_r", &self.b_r, [1, h]),
            ("b_u", &self.b_u, [1, h]),
            ("b_c", &self.b_c, [1, h]),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.w_xr,
            &mut self.w_xu,
            &mut self.w_xc,
            &mut self.w_hr,
            &mut self.w_hu,
            &mut self.w_hc,
            &mut self.b_r,
            &mut self.b_u,
            &mut self.b_c,
        ]
    }

    fn check_shapes(&self) -> Result<()> {
        for (name, t, [r, c]) in self.tensors() {
            if t.len() != r * c {
                return Err(Error::dim(format!("GRU tensor {name}"), r * c, t.len()));
            }
        }
        Ok(())
    }
}

/// Gate values kept from a forward step for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    pub c: Vec<f64>,
    /// `h_prev · Whc`, before the reset gate is applied.
    pub hc: Vec<f64>,
    pub h: Vec<f64>,
}

/// Layer sizes of a network. The output head maps back to `input`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkDims {
    pub input: usize,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruNetwork {
    pub layers: Vec<GruLayerParams>,
    /// `top_hidden × out_dim`.
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
    pub dropout: f64,
    pub candidate: Candidate,
}

/// Per-step state and masks recorded by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `steps[t][layer]`.
    pub steps: Vec<Vec<StepCache>>,
    /// `masks[t][layer]` scales layer output before it feeds the next stage.
    pub masks: Vec<Vec<Option<Vec<f64>>>>,
    /// Input of the output head at each step (masked top hidden state).
    pub head_in: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Hidden states `h[t][layer]`.
    pub fn hidden_states(&self) -> impl Iterator<Item = Vec<&[f64]>> + '_ {
        self.steps
            .iter()
            .map(|layers| layers.iter().map(|s| s.h.as_slice()).collect())
    }
}

impl GruNetwork {
    pub fn zeros(dims: &NetworkDims) -> Self {
        let mut layers = Vec::with_capacity(dims.hidden.len());
        let mut in_dim = dims.input;
        for &h in &dims.hidden {
            layers.push(GruLayerParams::zeros(in_dim, h));
            in_dim = h;
        }
        Self {
            layers,
            out_w: vec![0.0; in_dim * dims.input],
            out_b: vec![0.0; dims.input],
            dropout: 0.0,
            candidate: Candidate::Sigmoid,
        }
    }

    /// Zero tensor of identical shape, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(&self.dims());
        z.dropout = self.dropout;
        z.candidate = self.candidate;
        z
    }

    pub fn dims(&self) -> NetworkDims {
        NetworkDims {
            input: self.input_dim(),
            hidden: self.layers.iter().map(|l| l.hidden).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(self.out_b.len(), |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.out_b.len()
    }

    fn top_hidden(&self) -> usize {
        self.layers.last().map_or(self.input_dim(), |l| l.hidden)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t, _)| t.len()).sum()
    }

    /// All tensors with stable names and `[rows, cols]` shapes, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &[f64], [usize; 2])> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t, shape) in layer.tensors() {
                out.push((format!("layer{l}.{name}"), t.as_slice(), shape));
            }
        }
        out.push(("head.w".into(), &self.out_w, [self.top_hidden(), self.output_dim()]));
        out.push(("head.b".into(), &self.out_b, [1, self.output_dim()]));
        out
    }

    /// Mutable views in the same order as [`GruNetwork::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            for t in layer.tensors_mut() {
                out.push(t.as_mut_slice());
            }
        }
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        let mut expect_in = self.input_dim();
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.in_dim != expect_in {
                return Err(Error::dim(format!("layer {l} input"), expect_in, layer.in_dim));
            }
            layer.check_shapes()?;
            expect_in = layer.hidden;
        }
        let rows = self.top_hidden();
        if self.out_w.len() != rows * self.output_dim() {
            return Err(Error::dim("head weights", rows * self.output_dim(), self.out_w.len()));
        }
        Ok(())
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &GruNetwork, scale: f64) {
        let src: Vec<&[f64]> = other.tensors().into_iter().map(|(_, t, _)| t).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }
}

fn is_bias(name: &str) -> bool {
    name.contains(".b")
}

/// Glorot-uniform weights, zero biases. Fully determined by `seed`.
pub fn init_params(dims: &NetworkDims, seed: u64) -> GruNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = GruNetwork::zeros(dims);
    let shapes: Vec<(bool, [usize; 2])> = net
        .tensors()
        .iter()
        .map(|(name, _, s)| (is_bias(name), *s))
        .collect();
    for (t, (bias, [rows, cols])) in net.tensors_mut().into_iter().zip(shapes) {
        if bias {
            continue;
        }
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        for v in t.iter_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
    }
    net
}

/// `y += x · W` for row-major `W` with `y.len()` columns. Zero inputs are skipped.
#[inline]
fn vec_mat_acc(x: &[f64], w: &[f64], y: &mut [f64]) {
    let cols = y.len();
    for (xi, row) in x.iter().zip(w.chunks_exact(cols)) {
        if *xi == 0.0 {
            continue;
        }
        for (yj, wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
}

/// `out += W · d`, i.e. `out[i] += Σ_j W[i, j] d[j]`.
#[inline]
fn mat_vec_acc(w: &[f64], d: &[f64], out: &mut [f64]) {
    for (oi, row) in out.iter_mut().zip(w.chunks_exact(d.len())) {
        *oi += row.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dW += xᵀ d`.
#[inline]
fn outer_acc(dw: &mut [f64], x: &[f64], d: &[f64]) {
    for (xi, row) in x.iter().zip(dw.chunks_exact_mut(d.len())) {
        if *xi == 0.0 {
            continue;
        }
        for (w, dj) in row.iter_mut().zip(d) {
            *w += xi * dj;
        }
    }
}

/// One GRU step. Returns the new hidden state inside the cache.
pub fn gru_step(
    params: &GruLayerParams,
    candidate: Candidate,
    x: &[f64],
    h_prev: &[f64],
) -> Result<StepCache> {
    if x.len() != params.in_dim {
        return Err(Error::dim("GRU step input", params.in_dim, x.len()));
    }
    if h_prev.len() != params.hidden {
        return Err(Error::dim("GRU step hidden state", params.hidden, h_prev.len()));
    }
    let mut ar = params.b_r.clone();
    let mut au = params.b_u.clone();
    let mut ac = params.b_c.clone();
    vec_mat_acc(x, &params.w_xr, &mut ar);
    vec_mat_acc(x, &params.w_xu, &mut au);
    vec_mat_acc(x, &params.w_xc, &mut ac);
    vec_mat_acc(h_prev, &params.w_hr, &mut ar);
    vec_mat_acc(h_prev, &params.w_hu, &mut au);
    let mut hc = vec![0.0; params.hidden];
    vec_mat_acc(h_prev, &params.w_hc, &mut hc);

    let r: Vec<f64> = ar.iter().map(|&a| sigmoid(a)).collect();
    let u: Vec<f64> = au.iter().map(|&a| sigmoid(a)).collect();
    let c: Vec<f64> = ac
        .iter()
        .zip(&r)
        .zip(&hc)
        .map(|((&a, &ri), &m)| candidate.apply(a + ri * m))
        .collect();
    let h: Vec<f64> = (0..params.hidden)
        .map(|k| (1.0 - u[k]) * h_prev[k] + u[k] * c[k])
        .collect();
    Ok(StepCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        r,
        u,
        c,
        hc,
        h,
    })
}

/// Backward through one step. Accumulates parameter gradients into `grads`
/// and returns `(dx, dh_prev)`; `dx` is skipped (empty) unless requested.
fn gru_step_backward(
    params: &GruLayerParams,
    candidate: Candidate,
    cache: &StepCache,
    dh: &[f64],
    grads: &mut GruLayerParams,
    want_dx: bool,
) -> (Vec<f64>, Vec<f64>) {
    let n = params.hidden;
    let mut da_r = vec![0.0; n];
    let mut da_u = vec![0.0; n];
    let mut da_c = vec![0.0; n];
    let mut dhc = vec![0.0; n];
    let mut dh_prev = vec![0.0; n];
    for k in 0..n {
        let (r, u, c) = (cache.r[k], cache.u[k], cache.c[k]);
        let dc = dh[k] * u;
        let du = dh[k] * (c - cache.h_prev[k]);
        dh_prev[k] = dh[k] * (1.0 - u);
        da_c[k] = dc * candidate.grad_from_output(c);
        let dr = da_c[k] * cache.hc[k];
        dhc[k] = da_c[k] * r;
        da_r[k] = dr * r * (1.0 - r);
        da_u[k] = du * u * (1.0 - u);
    }

    outer_acc(&mut grads.w_xr, &cache.x, &da_r);
    outer_acc(&mut grads.w_xu, &cache.x, &da_u);
    outer_acc(&mut grads.w_xc, &cache.x, &da_c);
    outer_acc(&mut grads.w_hr, &cache.h_prev, &da_r);
    outer_acc(&mut grads.w_hu, &cache.h_prev, &da_u);
    outer_acc(&mut grads.w_hc, &cache.h_prev, &dhc);
    for k in 0..n {
        grads.b_r[k] += da_r[k];
        grads.b_u[k] += da_u[k];
        grads.b_c[k] += da_c[k];
    }

    mat_vec_acc(&params.w_hr, &da_r, &mut dh_prev);
    mat_vec_acc(&params.w_hu, &da_u, &mut dh_prev);
    mat_vec_acc(&params.w_hc, &dhc, &mut dh_prev);

    let mut dx = Vec::new();
    if want_dx {
        dx = vec![0.0; params.in_dim];
        mat_vec_acc(&params.w_xr, &da_r, &mut dx);
        mat_vec_acc(&params.w_xu, &da_u, &mut dx);
        mat_vec_acc(&params.w_xc, &da_c, &mut dx);
    }
    (dx, dh_prev)
}

fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Runs the network over a sequence from a zero initial state.
///
/// In [`Mode::Train`] with non-zero dropout, masks are drawn from `rng_seed`
/// in `(step, layer, unit)` order.
pub fn forward<V: AsRef<[f64]>>(
    net: &GruNetwork,
    sequence: &[V],
    mode: Mode,
    rng_seed: u64,
) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
    let use_dropout = mode == Mode::Train && net.dropout > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut hidden: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.hidden]).collect();
    let mut outputs = Vec::with_capacity(sequence.len());
    let mut cache = ForwardCache {
        steps: Vec::with_capacity(sequence.len()),
        masks: Vec::with_capacity(sequence.len()),
        head_in: Vec::with_capacity(sequence.len()),
    };

    for x in sequence {
        let x = x.as_ref();
        if x.len() != net.input_dim() {
            return Err(Error::dim("input frame", net.input_dim(), x.len()));
        }
        let mut input = x.to_vec();
        let mut step_caches = Vec::with_capacity(net.layers.len());
        let mut step_masks = Vec::with_capacity(net.layers.len());
        for (l, layer) in net.layers.iter().enumerate() {
            let sc = gru_step(layer, net.candidate, &input, &hidden[l])?;
            hidden[l].copy_from_slice(&sc.h);
            input = sc.h.clone();
            if use_dropout {
                let mask = dropout_mask(&mut rng, layer.hidden, net.dropout);
                input.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                step_masks.push(Some(mask));
            } else {
                step_masks.push(None);
            }
            step_caches.push(sc);
        }
        let mut y = net.out_b.clone();
        vec_mat_acc(&input, &net.out_w, &mut y);
        outputs.push(y);
        cache.steps.push(step_caches);
        cache.masks.push(step_masks);
        cache.head_in.push(input);
    }
    Ok((outputs, cache))
}

/// Backpropagation through time. Returns the gradient of
/// `Σ_t <grad_outputs[t], ŷ[t]>` with respect to every parameter.
pub fn backward<V: AsRef<[f64]>>(
    net: &GruNetwork,
    cache: &ForwardCache,
    grad_outputs: &[V],
) -> Result<GruNetwork> {
    let mut grads = net.zeros_like();
    backward_into(net, cache, grad_outputs, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into an existing gradient buffer.
pub fn backward_into<V: AsRef<[f64]>>(
    net: &GruNetwork,
    cache: &ForwardCache,
    grad_outputs: &[V],
    grads: &mut GruNetwork,
) -> Result<()> {
    let steps = cache.steps.len();
    if grad_outputs.len() != steps {
        return Err(Error::dim("output gradient steps", steps, grad_outputs.len()));
    }
    if cache.steps.iter().any(|s| s.len() != net.layers.len()) {
        return Err(Error::InvalidConfig(
            "forward cache was produced by a network with a different layer count".into(),
        ));
    }
    let n_layers = net.layers.len();
    let top = net.top_hidden();
    let mut dh_next: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.hidden]).collect();

    for t in (0..steps).rev() {
        let dy = grad_outputs[t].as_ref();
        if dy.len() != net.output_dim() {
            return Err(Error::dim("output gradient", net.output_dim(), dy.len()));
        }
        if cache.head_in[t].len() != top {
            return Err(Error::dim("cached head input", top, cache.head_in[t].len()));
        }
        for (b, g) in grads.out_b.iter_mut().zip(dy) {
            *b += g;
        }
        outer_acc(&mut grads.out_w, &cache.head_in[t], dy);
        let mut d_above = vec![0.0; top];
        mat_vec_acc(&net.out_w, dy, &mut d_above);

        for l in (0..n_layers).rev() {
            if let Some(mask) = &cache.masks[t][l] {
                d_above.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
            }
            let dh: Vec<f64> = d_above.iter().zip(&dh_next[l]).map(|(a, b)| a + b).collect();
            let (dx, dh_prev) = gru_step_backward(
                &net.layers[l],
                net.candidate,
                &cache.steps[t][l],
                &dh,
                &mut grads.layers[l],
                l > 0,
            );
            dh_next[l] = dh_prev;
            d_above = dx;
        }
    }
    Ok(())
}
