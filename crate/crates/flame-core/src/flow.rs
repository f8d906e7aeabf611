//! Conditional normalizing flow over forecast patches.
//!
//! Each coupling layer applies a per-dimension affine transform
//! `x_j = z_j * exp(s_j) + t_j` whose scale and shift come from a masked
//! two-layer MLP reading only earlier noise dimensions (in the layer's
//! autoregressive order) plus the full condition vector. The masked
//! conditioner keeps the Jacobian triangular, so the log-determinant is the
//! plain sum of the scales and both directions are exact: the forward
//! (sampling) direction runs in one pass, the inverse (density) direction
//! reconstructs one dimension at a time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ParamId, Params, Tape, Var};
use crate::error::{FlameError, Result};
use crate::tensor::Tensor;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Connection-pattern matrix over the concatenated `[noise, condition]`
/// vector, 1-based in its accessors: entry `(n, k)` is zero exactly when
/// `n < k <= p`; condition rows are visible everywhere.
#[derive(Debug, Clone)]
pub struct CouplingMask {
    pub p: usize,
    pub d: usize,
    m: Tensor,
}

/// Build the coupling connection mask for `p` noise and `d` condition dims.
pub fn build_mask(p: usize, d: usize) -> Result<CouplingMask> {
    if p < 1 || d < 1 {
        return Err(FlameError::InvalidArgument(
            "mask needs p >= 1 and d >= 1".into(),
        ));
    }
    let total = p + d;
    let mut m = Tensor::zeros(&[total, total]);
    for n in 1..=total {
        for k in 1..=total {
            let zero = n < k && k <= p;
            m.set2(n - 1, k - 1, if zero { 0.0 } else { 1.0 });
        }
    }
    Ok(CouplingMask { p, d, m })
}

impl CouplingMask {
    /// 1-based entry accessor.
    pub fn entry(&self, n: usize, k: usize) -> f64 {
        self.m.get2(n - 1, k - 1)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.m
    }
}

/// Configuration of a [`FlowHead`].
#[derive(Debug, Clone)]
pub struct FlowConfig {
    /// Patch size (noise dimensions per token).
    pub p: usize,
    /// Condition width (model dimension).
    pub d: usize,
    /// Number of coupling layers.
    pub couple_layers: usize,
    /// Hidden width of each masked conditioner.
    pub cond_hidden: usize,
    /// Scale clamp: `s = s_max * tanh(s_hat)`.
    pub s_max: f64,
    /// Reverse the autoregressive order in every second layer.
    pub alternate_order: bool,
}

impl FlowConfig {
    pub fn new(p: usize, d: usize, couple_layers: usize) -> Self {
        FlowConfig {
            p,
            d,
            couple_layers,
            cond_hidden: 2 * (p + d),
            s_max: 5.0,
            alternate_order: false,
        }
    }
}

/// Masks for a two-layer masked conditioner in a given dimension order.
///
/// Degrees follow the usual masked-autoregressive recipe: noise input at
/// order position `q` has degree `q+1`, condition inputs degree `0`, hidden
/// units cycle degrees `0..p`, and outputs for the dimension at position `q`
/// connect only to strictly smaller degrees. Composing the two masks makes
/// scale and shift for a dimension depend on earlier dimensions and the
/// condition block only — never on itself.
fn conditioner_masks(p: usize, d: usize, hidden: usize, order: &[usize]) -> (Tensor, Tensor) {
    let mut pos_of = vec![0usize; p];
    for (pos, &dim) in order.iter().enumerate() {
        pos_of[dim] = pos;
    }
    let deg_in: Vec<usize> = (0..p + d)
        .map(|n| if n < p { pos_of[n] + 1 } else { 0 })
        .collect();
    let deg_hidden: Vec<usize> = (0..hidden).map(|h| h % p).collect();

    let mut m1 = Tensor::zeros(&[p + d, hidden]);
    for n in 0..p + d {
        for h in 0..hidden {
            if deg_hidden[h] >= deg_in[n] {
                m1.set2(n, h, 1.0);
            }
        }
    }
    // Outputs: columns 0..p are scales, p..2p are shifts, indexed by dim.
    let mut m2 = Tensor::zeros(&[hidden, 2 * p]);
    for h in 0..hidden {
        for j in 0..p {
            if pos_of[j] + 1 > deg_hidden[h] {
                m2.set2(h, j, 1.0);
                m2.set2(h, p + j, 1.0);
            }
        }
    }
    (m1, m2)
}

/// One masked affine coupling layer.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    m1: Tensor,
    m2: Tensor,
    /// `order[pos]` is the dimension handled at autoregressive position `pos`.
    order: Vec<usize>,
    s_max: f64,
}

impl CouplingLayer {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn masks(&self) -> (&Tensor, &Tensor) {
        (&self.m1, &self.m2)
    }
}

/// Stack of coupling layers conditioned on a token vector.
#[derive(Debug, Clone)]
pub struct FlowHead {
    pub layers: Vec<CouplingLayer>,
    pub p: usize,
    pub d: usize,
    pub s_max: f64,
}

impl FlowHead {
    /// Register all layer parameters. The final conditioner layer starts at
    /// zero, so the whole head is the identity map at initialization.
    pub fn new(params: &mut Params, cfg: &FlowConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.couple_layers < 1 {
            return Err(FlameError::InvalidArgument(
                "flow needs at least one coupling layer".into(),
            ));
        }
        if cfg.p < 1 || cfg.d < 1 {
            return Err(FlameError::InvalidArgument(
                "flow needs p >= 1 and d >= 1".into(),
            ));
        }
        let mut layers = Vec::with_capacity(cfg.couple_layers);
        for k in 0..cfg.couple_layers {
            let order: Vec<usize> = if cfg.alternate_order && k % 2 == 1 {
                (0..cfg.p).rev().collect()
            } else {
                (0..cfg.p).collect()
            };
            let (m1, m2) = conditioner_masks(cfg.p, cfg.d, cfg.cond_hidden, &order);
            let fan_in = (cfg.p + cfg.d) as f64;
            let scale = (1.0 / fan_in).sqrt();
            let w1 = params.register(
                &format!("flow.layer{k}.w1"),
                random_tensor(rng, &[cfg.p + cfg.d, cfg.cond_hidden], scale),
            );
            let b1 = params.register(
                &format!("flow.layer{k}.b1"),
                Tensor::zeros(&[cfg.cond_hidden]),
            );
            let w2 = params.register(
                &format!("flow.layer{k}.w2"),
                Tensor::zeros(&[cfg.cond_hidden, 2 * cfg.p]),
            );
            let b2 = params.register(&format!("flow.layer{k}.b2"), Tensor::zeros(&[2 * cfg.p]));
            layers.push(CouplingLayer {
                w1,
                b1,
                w2,
                b2,
                m1,
                m2,
                order,
                s_max: cfg.s_max,
            });
        }
        Ok(FlowHead {
            layers,
            p: cfg.p,
            d: cfg.d,
            s_max: cfg.s_max,
        })
    }

    /// Overwrite the zero-initialized output layers with random weights;
    /// used by tests that need a non-identity flow.
    pub fn randomize(&self, params: &mut Params, rng: &mut ChaCha8Rng, scale: f64) {
        for layer in &self.layers {
            for id in [layer.w2, layer.b2] {
                let t = params.value(id).clone();
                *params.value_mut(id) = random_tensor(rng, t.shape(), scale);
            }
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * scale)
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

/// Evaluate one conditioner: returns `(s, t)` with the clamp applied.
fn conditioner(
    params: &Params,
    layer: &CouplingLayer,
    z: &[f64],
    o: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = layer.order.len();
    let mut input = Vec::with_capacity(z.len() + o.len());
    input.extend_from_slice(z);
    input.extend_from_slice(o);
    let x = Tensor::row(&input);
    let w1m = params.value(layer.w1).mul(&layer.m1)?;
    let h = x
        .matmul(&w1m)?
        .add_bias(params.value(layer.b1))?
        .map(f64::tanh);
    let w2m = params.value(layer.w2).mul(&layer.m2)?;
    let out = h.matmul(&w2m)?.add_bias(params.value(layer.b2))?;
    let data = out.data();
    let s = (0..p).map(|j| layer.s_max * data[j].tanh()).collect();
    let t = (0..p).map(|j| data[p + j]).collect();
    Ok((s, t))
}

/// Push noise through one layer: `x_j = z_j * exp(s_j) + t_j`.
///
/// The conditioner reads `z`, which is fully known here, so a single pass
/// produces every dimension's scale and shift.
pub fn coupling_forward(
    params: &Params,
    layer: &CouplingLayer,
    z: &[f64],
    o: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let (s, t) = conditioner(params, layer, z, o)?;
    let x: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(j, &zj)| zj * s[j].exp() + t[j])
        .collect();
    let logdet = s.iter().sum();
    Ok((x, logdet))
}

/// Invert one layer dimension by dimension along the autoregressive order.
/// Returns `z` and the inverse log-determinant `-sum(s)`.
pub fn coupling_inverse(
    params: &Params,
    layer: &CouplingLayer,
    x: &[f64],
    o: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let p = layer.order.len();
    let mut z = vec![0.0; p];
    let mut logdet = 0.0;
    for pos in 0..p {
        // Dimensions at later positions are still zero; the mask guarantees
        // they cannot influence the scale and shift read off at `dim`.
        let (s, t) = conditioner(params, layer, &z, o)?;
        let dim = layer.order[pos];
        z[dim] = (x[dim] - t[dim]) * (-s[dim]).exp();
        logdet -= s[dim];
    }
    Ok((z, logdet))
}

/// Draw `n_samples` patches conditioned on `o`. Deterministic given the rng
/// state; an empty tensor comes back for `n_samples = 0`.
pub fn sample(
    params: &Params,
    head: &FlowHead,
    o: &[f64],
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let p = head.p;
    let mut out = Vec::with_capacity(n_samples * p);
    for _ in 0..n_samples {
        let mut x: Vec<f64> = (0..p)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        for layer in &head.layers {
            let (next, _) = coupling_forward(params, layer, &x, o)?;
            x = next;
        }
        out.extend_from_slice(&x);
    }
    Tensor::from_vec(&[n_samples, p], out)
}

/// Exact log density of a patch under the conditioned flow.
pub fn log_prob(params: &Params, head: &FlowHead, target: &[f64], o: &[f64]) -> Result<f64> {
    let mut z = target.to_vec();
    let mut logdet = 0.0;
    for layer in head.layers.iter().rev() {
        let (next, ld) = coupling_inverse(params, layer, &z, o)?;
        z = next;
        logdet += ld;
    }
    let base: f64 = z.iter().map(|&v| -HALF_LN_2PI - 0.5 * v * v).sum();
    Ok(base + logdet)
}

/// Per-tape bindings of the flow parameters with pre-masked weights.
pub struct FlowTapeVars {
    layers: Vec<LayerVars>,
    p: usize,
    s_max: f64,
}

struct LayerVars {
    w1m: Var,
    b1: Var,
    w2m: Var,
    b2: Var,
    order: Vec<usize>,
}

impl FlowHead {
    /// Bind parameters into a tape; masked weights are materialized once and
    /// shared by every token and inversion step on this tape.
    pub fn bind(&self, tape: &mut Tape, params: &Params) -> Result<FlowTapeVars> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w1 = tape.param(params, layer.w1);
            let m1 = tape.constant(layer.m1.clone());
            let w1m = tape.mul(w1, m1)?;
            let b1 = tape.param(params, layer.b1);
            let w2 = tape.param(params, layer.w2);
            let m2 = tape.constant(layer.m2.clone());
            let w2m = tape.mul(w2, m2)?;
            let b2 = tape.param(params, layer.b2);
            layers.push(LayerVars {
                w1m,
                b1,
                w2m,
                b2,
                order: layer.order.clone(),
            });
        }
        Ok(FlowTapeVars {
            layers,
            p: self.p,
            s_max: self.s_max,
        })
    }
}

/// Differentiable log density of one target patch given a condition row.
///
/// `target` is a constant `[1, p]` row; `o` is a `[1, d]` tape value through
/// which gradients flow back into the backbone.
pub fn log_prob_tape(
    tape: &mut Tape,
    flow: &FlowTapeVars,
    target: &Tensor,
    o: Var,
) -> Result<Var> {
    let p = flow.p;
    let x_top = tape.constant(target.clone());
    let mut x = x_top;
    let mut s_total: Option<Var> = None;
    for layer in flow.layers.iter().rev() {
        let mut z_known = tape.constant(Tensor::zeros(&[1, p]));
        for pos in 0..p {
            let dim = layer.order[pos];
            let inp = tape.concat_cols(&[z_known, o])?;
            let h_lin = tape.matmul(inp, layer.w1m)?;
            let h_lin = tape.add_bias(h_lin, layer.b1)?;
            let h = tape.tanh(h_lin);
            let out = tape.matmul(h, layer.w2m)?;
            let out = tape.add_bias(out, layer.b2)?;
            let s_hat = tape.slice_cols(out, dim, 1)?;
            let s_hat_t = tape.tanh(s_hat);
            let s = tape.scale(s_hat_t, flow.s_max);
            let t = tape.slice_cols(out, p + dim, 1)?;
            let x_j = tape.slice_cols(x, dim, 1)?;
            let centered = tape.sub(x_j, t)?;
            let neg_s = tape.scale(s, -1.0);
            let inv_scale = tape.exp(neg_s);
            let z_j = tape.mul(centered, inv_scale)?;
            let z_pad = tape.pad_cols(z_j, p, dim)?;
            z_known = tape.add(z_known, z_pad)?;
            s_total = Some(match s_total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        x = z_known;
    }
    let base = tape.gaussian_logpdf(x);
    let s_sum_mat = s_total.expect("p >= 1");
    let s_sum = tape.sum(s_sum_mat);
    let neg = tape.scale(s_sum, -1.0);
    tape.add(base, neg)
}
