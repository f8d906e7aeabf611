//! Sequence backbone: multi-head self-attention encoder blocks, selective
//! state-space decoder layers with a Legendre-diagonal initialization, and
//! cross-attention enhancer blocks.
//!
//! Every block exists twice: recorded on a [`Tape`] for training, and as a
//! plain-`f64` path for inference. The two share the same tensor kernels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ParamId, Params, Tape, Var};
use crate::error::{FlameError, Result};
use crate::tensor::{gelu, softplus, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Shared backbone dimensions.
#[derive(Debug, Clone, Copy)]
pub struct BackboneConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Inner width of the state-space mixer.
    pub d_inner: usize,
    /// States per channel in the selective scan.
    pub n_state: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(FlameError::InvalidArgument(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(FlameError::InvalidArgument(
                "encoder and decoder need at least one layer".into(),
            ));
        }
        if self.n_state == 0 || self.d_inner == 0 || self.ffn == 0 {
            return Err(FlameError::InvalidArgument(
                "state size, inner dim and ffn dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let scale = (1.0 / rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * scale)
        .collect();
    Tensor::from_vec(&[rows, cols], data).expect("shape/data agree")
}

fn register_linear(
    params: &mut Params,
    rng: &mut ChaCha8Rng,
    name: &str,
    rows: usize,
    cols: usize,
) -> (ParamId, ParamId) {
    let w = params.register(&format!("{name}.w"), xavier(rng, rows, cols));
    let b = params.register(&format!("{name}.b"), Tensor::zeros(&[cols]));
    (w, b)
}

fn register_layer_norm(params: &mut Params, name: &str, d: usize) -> (ParamId, ParamId) {
    let g = params.register(
        &format!("{name}.g"),
        Tensor::from_vec(&[d], vec![1.0; d]).expect("ones"),
    );
    let b = params.register(&format!("{name}.b"), Tensor::zeros(&[d]));
    (g, b)
}

/// Pre-norm attention block: attention sublayer plus feed-forward sublayer,
/// both with residual skips. Cross-attention blocks carry a separate norm
/// for the key/value source.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub heads: usize,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln_q: (ParamId, ParamId),
    ln_kv: Option<(ParamId, ParamId)>,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln_ffn: (ParamId, ParamId),
}

impl AttentionBlock {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &BackboneConfig,
        cross: bool,
    ) -> Self {
        let d = cfg.d;
        let (wq, bq) = register_linear(params, rng, &format!("{name}.q"), d, d);
        let (wk, bk) = register_linear(params, rng, &format!("{name}.k"), d, d);
        let (wv, bv) = register_linear(params, rng, &format!("{name}.v"), d, d);
        let (wo, bo) = register_linear(params, rng, &format!("{name}.o"), d, d);
        let ln_q = register_layer_norm(params, &format!("{name}.ln_q"), d);
        let ln_kv = cross.then(|| register_layer_norm(params, &format!("{name}.ln_kv"), d));
        let (ffn_w1, ffn_b1) = register_linear(params, rng, &format!("{name}.ffn1"), d, cfg.ffn);
        let (ffn_w2, ffn_b2) = register_linear(params, rng, &format!("{name}.ffn2"), cfg.ffn, d);
        let ln_ffn = register_layer_norm(params, &format!("{name}.ln_ffn"), d);
        AttentionBlock {
            heads: cfg.heads,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln_q,
            ln_kv,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            ln_ffn,
        }
    }

    /// Tape forward. `kv` is the key/value source; pass `None` for
    /// self-attention over `x`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: Var,
        kv: Option<Var>,
    ) -> Result<Var> {
        let d = tape.value(x).cols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let gq = tape.param(params, self.ln_q.0);
        let bq_ln = tape.param(params, self.ln_q.1);
        let xq = tape.layer_norm_rows(x, gq, bq_ln, LN_EPS)?;
        let xkv = match kv {
            Some(kv_var) => {
                let (g_id, b_id) = self.ln_kv.expect("cross block has kv norm");
                let g = tape.param(params, g_id);
                let b = tape.param(params, b_id);
                tape.layer_norm_rows(kv_var, g, b, LN_EPS)?
            }
            None => xq,
        };

        let wq = tape.param(params, self.wq);
        let bq = tape.param(params, self.bq);
        let q = tape.linear(xq, wq, bq)?;
        let wk = tape.param(params, self.wk);
        let bk = tape.param(params, self.bk);
        let k = tape.linear(xkv, wk, bk)?;
        let wv = tape.param(params, self.wv);
        let bv = tape.param(params, self.bv);
        let v = tape.linear(xkv, wv, bv)?;

        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kht = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kht)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat_cols(&head_outs)?;
        let wo = tape.param(params, self.wo);
        let bo = tape.param(params, self.bo);
        let proj = tape.linear(ctx, wo, bo)?;
        let x = tape.add(x, proj)?;

        let gf = tape.param(params, self.ln_ffn.0);
        let bf = tape.param(params, self.ln_ffn.1);
        let xn = tape.layer_norm_rows(x, gf, bf, LN_EPS)?;
        let w1 = tape.param(params, self.ffn_w1);
        let b1 = tape.param(params, self.ffn_b1);
        let hidden = tape.linear(xn, w1, b1)?;
        let hidden = tape.gelu(hidden);
        let w2 = tape.param(params, self.ffn_w2);
        let b2 = tape.param(params, self.ffn_b2);
        let ff = tape.linear(hidden, w2, b2)?;
        tape.add(x, ff)
    }

    /// Tape-free forward mirroring [`AttentionBlock::forward_tape`].
    pub fn forward_pure(
        &self,
        params: &Params,
        x: &Tensor,
        kv: Option<&Tensor>,
    ) -> Result<Tensor> {
        let d = x.cols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let ln = |t: &Tensor, ids: (ParamId, ParamId)| -> Result<Tensor> {
            t.layer_norm_rows(params.value(ids.0), params.value(ids.1), LN_EPS)
        };
        let lin = |t: &Tensor, w: ParamId, b: ParamId| -> Result<Tensor> {
            t.matmul(params.value(w))?.add_bias(params.value(b))
        };

        let xq = ln(x, self.ln_q)?;
        let xkv = match kv {
            Some(kv_t) => ln(kv_t, self.ln_kv.expect("cross block has kv norm"))?,
            None => xq.clone(),
        };
        let q = lin(&xq, self.wq, self.bq)?;
        let k = lin(&xkv, self.wk, self.bk)?;
        let v = lin(&xkv, self.wv, self.bv)?;

        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let attn = qh.matmul(&kh.transpose()?)?.scale(scale).softmax_rows()?;
            heads.push(attn.matmul(&vh)?);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        let ctx = Tensor::concat_cols(&refs)?;
        let x = x.add(&lin(&ctx, self.wo, self.bo)?)?;

        let xn = ln(&x, self.ln_ffn)?;
        let hidden = lin(&xn, self.ffn_w1, self.ffn_b1)?.map(gelu);
        let ff = lin(&hidden, self.ffn_w2, self.ffn_b2)?;
        x.add(&ff)
    }
}

/// Selective state-space mixer layer.
///
/// Per step and channel: `m_t = exp(-delta_t * a) ⊙ m_{t-1} + delta_t u_t B_t`
/// with readout `y_t = m_t C_t + D ⊙ u_t`, gated and projected back to the
/// model width with a residual. `delta` goes through softplus and `a` is
/// stored in log space, so every decay factor lies strictly inside (0, 1).
#[derive(Debug, Clone)]
pub struct SsdLayer {
    pub d_inner: usize,
    pub n_state: usize,
    ln: (ParamId, ParamId),
    w_in: ParamId,
    b_in: ParamId,
    w_dt: ParamId,
    b_dt: ParamId,
    w_b: ParamId,
    b_b: ParamId,
    w_c: ParamId,
    b_c: ParamId,
    a_log: ParamId,
    d_skip: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

impl SsdLayer {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &BackboneConfig,
    ) -> Self {
        let (d, di, n) = (cfg.d, cfg.d_inner, cfg.n_state);
        let ln = register_layer_norm(params, &format!("{name}.ln"), d);
        let (w_in, b_in) = register_linear(params, rng, &format!("{name}.in"), d, 2 * di);
        let (w_dt, b_dt) = register_linear(params, rng, &format!("{name}.dt"), d, di);
        // Step sizes start log-uniform in [1e-3, 0.1], spreading the initial
        // decay factors over the state dimensions.
        {
            let b = params.value_mut(b_dt);
            for v in b.data_mut() {
                let dt = 10f64.powf(rng.gen_range(-3.0..-1.0));
                *v = (dt.exp() - 1.0).ln(); // softplus inverse
            }
        }
        let (w_b, b_b) = register_linear(params, rng, &format!("{name}.b"), d, n);
        let (w_c, b_c) = register_linear(params, rng, &format!("{name}.c"), d, n);
        let a_log = params.register(&format!("{name}.a_log"), init_legs_diag_log(n));
        let d_skip = params.register(
            &format!("{name}.d_skip"),
            Tensor::from_vec(&[1, di], vec![1.0; di]).expect("ones"),
        );
        let (w_out, b_out) = register_linear(params, rng, &format!("{name}.out"), di, d);
        SsdLayer {
            d_inner: di,
            n_state: n,
            ln,
            w_in,
            b_in,
            w_dt,
            b_dt,
            w_b,
            b_b,
            w_c,
            b_c,
            a_log,
            d_skip,
            w_out,
            b_out,
        }
    }

    /// Continuous-time diagonal `-exp(a_log)`; `[-1, -2, ..., -N]` right
    /// after construction.
    pub fn continuous_diag(&self, params: &Params) -> Vec<f64> {
        params
            .value(self.a_log)
            .data()
            .iter()
            .map(|&v| -v.exp())
            .collect()
    }

    /// Per-step decay factors `exp(-delta * exp(a_log))` for a shared step.
    pub fn decay_factors(&self, params: &Params, delta: f64) -> Vec<f64> {
        params
            .value(self.a_log)
            .data()
            .iter()
            .map(|&v| (-delta * v.exp()).exp())
            .collect()
    }

    /// Tape forward over a `[T, d]` sequence.
    pub fn forward_tape(&self, tape: &mut Tape, params: &Params, x: Var) -> Result<Var> {
        let t_len = tape.value(x).rows();
        let di = self.d_inner;

        let g = tape.param(params, self.ln.0);
        let b = tape.param(params, self.ln.1);
        let xn = tape.layer_norm_rows(x, g, b, LN_EPS)?;

        let w_in = tape.param(params, self.w_in);
        let b_in = tape.param(params, self.b_in);
        let ug = tape.linear(xn, w_in, b_in)?;
        let u = tape.slice_cols(ug, 0, di)?;
        let gate = tape.slice_cols(ug, di, di)?;

        let w_dt = tape.param(params, self.w_dt);
        let b_dt = tape.param(params, self.b_dt);
        let dt_lin = tape.linear(xn, w_dt, b_dt)?;
        let delta = tape.softplus(dt_lin);

        let w_b = tape.param(params, self.w_b);
        let b_b = tape.param(params, self.b_b);
        let bmat = tape.linear(xn, w_b, b_b)?;
        let w_c = tape.param(params, self.w_c);
        let b_c = tape.param(params, self.b_c);
        let cmat = tape.linear(xn, w_c, b_c)?;

        let a_log = tape.param(params, self.a_log);
        let a_row = tape.exp(a_log); // [1, N]
        let d_skip = tape.param(params, self.d_skip);

        let mut m = tape.constant(Tensor::zeros(&[di, self.n_state]));
        let mut rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let delta_t = tape.slice_rows(delta, t, 1)?;
            let delta_col = tape.transpose(delta_t)?;
            let da = tape.matmul(delta_col, a_row)?;
            let neg_da = tape.scale(da, -1.0);
            let decay = tape.exp(neg_da);
            let u_t = tape.slice_rows(u, t, 1)?;
            let du = tape.mul(delta_t, u_t)?;
            let du_col = tape.transpose(du)?;
            let b_t = tape.slice_rows(bmat, t, 1)?;
            let inject = tape.matmul(du_col, b_t)?;
            let decayed = tape.mul(decay, m)?;
            m = tape.add(decayed, inject)?;
            let c_t = tape.slice_rows(cmat, t, 1)?;
            let c_col = tape.transpose(c_t)?;
            let y_col = tape.matmul(m, c_col)?;
            let y_row = tape.transpose(y_col)?;
            let skip = tape.mul(d_skip, u_t)?;
            rows.push(tape.add(y_row, skip)?);
        }
        let y = tape.concat_rows(&rows)?;
        let gate_act = tape.gelu(gate);
        let gated = tape.mul(y, gate_act)?;
        let w_out = tape.param(params, self.w_out);
        let b_out = tape.param(params, self.b_out);
        let out = tape.linear(gated, w_out, b_out)?;
        tape.add(x, out)
    }

    fn projections(&self, params: &Params, x: &Tensor) -> Result<SsdProjections> {
        let xn = x.layer_norm_rows(params.value(self.ln.0), params.value(self.ln.1), LN_EPS)?;
        let ug = xn
            .matmul(params.value(self.w_in))?
            .add_bias(params.value(self.b_in))?;
        let u = ug.slice_cols(0, self.d_inner)?;
        let gate = ug.slice_cols(self.d_inner, self.d_inner)?;
        let delta = xn
            .matmul(params.value(self.w_dt))?
            .add_bias(params.value(self.b_dt))?
            .map(softplus);
        let bmat = xn
            .matmul(params.value(self.w_b))?
            .add_bias(params.value(self.b_b))?;
        let cmat = xn
            .matmul(params.value(self.w_c))?
            .add_bias(params.value(self.b_c))?;
        let a: Vec<f64> = params
            .value(self.a_log)
            .data()
            .iter()
            .map(|&v| v.exp())
            .collect();
        Ok(SsdProjections {
            u,
            gate,
            delta,
            bmat,
            cmat,
            a,
        })
    }

    /// Tape-free forward; the recurrence runs through the blocked scan.
    pub fn forward_pure(&self, params: &Params, x: &Tensor, chunk: usize) -> Result<Tensor> {
        let pr = self.projections(params, x)?;
        let y = scan_chunked(
            &pr,
            params.value(self.d_skip).data(),
            self.d_inner,
            self.n_state,
            chunk,
        );
        self.finish(params, x, &pr, y)
    }

    /// Tape-free forward with the plain sequential recurrence; the oracle for
    /// scan-equivalence checks.
    pub fn forward_pure_sequential(&self, params: &Params, x: &Tensor) -> Result<Tensor> {
        let pr = self.projections(params, x)?;
        let y = scan_sequential(
            &pr,
            params.value(self.d_skip).data(),
            self.d_inner,
            self.n_state,
        );
        self.finish(params, x, &pr, y)
    }

    fn finish(
        &self,
        params: &Params,
        x: &Tensor,
        pr: &SsdProjections,
        y: Vec<f64>,
    ) -> Result<Tensor> {
        let y = Tensor::from_vec(&[x.rows(), self.d_inner], y)?;
        let gated = y.mul(&pr.gate.map(gelu))?;
        let out = gated
            .matmul(params.value(self.w_out))?
            .add_bias(params.value(self.b_out))?;
        x.add(&out)
    }
}

fn init_legs_diag_log(n: usize) -> Tensor {
    let data = (1..=n).map(|k| (k as f64).ln()).collect();
    Tensor::from_vec(&[1, n], data).expect("shape/data agree")
}

struct SsdProjections {
    u: Tensor,
    gate: Tensor,
    delta: Tensor,
    bmat: Tensor,
    cmat: Tensor,
    a: Vec<f64>,
}

/// Plain left-to-right scan; the reference ordering.
fn scan_sequential(pr: &SsdProjections, d_skip: &[f64], di: usize, n: usize) -> Vec<f64> {
    let t_len = pr.u.rows();
    let mut m = vec![0.0; di * n];
    let mut y = vec![0.0; t_len * di];
    for t in 0..t_len {
        for i in 0..di {
            let dt = pr.delta.get2(t, i);
            let du = dt * pr.u.get2(t, i);
            let mut acc = 0.0;
            for s in 0..n {
                let decay = (-dt * pr.a[s]).exp();
                let v = decay * m[i * n + s] + du * pr.bmat.get2(t, s);
                m[i * n + s] = v;
                acc += v * pr.cmat.get2(t, s);
            }
            y[t * di + i] = acc + d_skip[i] * pr.u.get2(t, i);
        }
    }
    y
}

/// Blocked scan: per-chunk `(prod decay, folded input)` aggregates are
/// combined across chunks first, then outputs are expanded inside each chunk
/// from its aggregate-derived initial state.
fn scan_chunked(
    pr: &SsdProjections,
    d_skip: &[f64],
    di: usize,
    n: usize,
    chunk: usize,
) -> Vec<f64> {
    let chunk = chunk.max(1);
    let t_len = pr.u.rows();
    let mut y = vec![0.0; t_len * di];
    let mut m_init = vec![0.0; di * n];
    let mut t0 = 0;
    while t0 < t_len {
        let t1 = (t0 + chunk).min(t_len);
        // Aggregate pair over [t0, t1): state_out = prod ⊙ state_in + fold.
        let mut prod = vec![1.0; di * n];
        let mut fold = vec![0.0; di * n];
        for t in t0..t1 {
            for i in 0..di {
                let dt = pr.delta.get2(t, i);
                let du = dt * pr.u.get2(t, i);
                for s in 0..n {
                    let decay = (-dt * pr.a[s]).exp();
                    prod[i * n + s] *= decay;
                    fold[i * n + s] = decay * fold[i * n + s] + du * pr.bmat.get2(t, s);
                }
            }
        }
        // Expand outputs within the chunk from the chunk-initial state.
        let mut m = m_init.clone();
        for t in t0..t1 {
            for i in 0..di {
                let dt = pr.delta.get2(t, i);
                let du = dt * pr.u.get2(t, i);
                let mut acc = 0.0;
                for s in 0..n {
                    let decay = (-dt * pr.a[s]).exp();
                    let v = decay * m[i * n + s] + du * pr.bmat.get2(t, s);
                    m[i * n + s] = v;
                    acc += v * pr.cmat.get2(t, s);
                }
                y[t * di + i] = acc + d_skip[i] * pr.u.get2(t, i);
            }
        }
        // Advance the carried state via the aggregates, not the expansion.
        for j in 0..di * n {
            m_init[j] = prod[j] * m_init[j] + fold[j];
        }
        t0 = t1;
    }
    y
}

/// Encoder, decoder, and enhancer stacks.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub encoder: Vec<AttentionBlock>,
    pub ssd: Vec<SsdLayer>,
    pub mca: Vec<AttentionBlock>,
    enc_final_ln: (ParamId, ParamId),
    dec_final_ln: (ParamId, ParamId),
}

impl Backbone {
    pub fn new(params: &mut Params, rng: &mut ChaCha8Rng, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = (0..cfg.enc_layers)
            .map(|i| AttentionBlock::new(params, rng, &format!("enc{i}"), cfg, false))
            .collect();
        let ssd = (0..cfg.dec_layers)
            .map(|i| SsdLayer::new(params, rng, &format!("ssd{i}"), cfg))
            .collect();
        let mca = (0..cfg.dec_layers)
            .map(|i| AttentionBlock::new(params, rng, &format!("mca{i}"), cfg, true))
            .collect();
        let enc_final_ln = register_layer_norm(params, "enc_final_ln", cfg.d);
        let dec_final_ln = register_layer_norm(params, "dec_final_ln", cfg.d);
        Ok(Backbone {
            cfg: *cfg,
            encoder,
            ssd,
            mca,
            enc_final_ln,
            dec_final_ln,
        })
    }

    /// Bidirectional self-attention encoding of the fused tokens.
    pub fn msa_encode_tape(&self, tape: &mut Tape, params: &Params, h: Var) -> Result<Var> {
        let mut x = h;
        for blk in &self.encoder {
            x = blk.forward_tape(tape, params, x, None)?;
        }
        let g = tape.param(params, self.enc_final_ln.0);
        let b = tape.param(params, self.enc_final_ln.1);
        tape.layer_norm_rows(x, g, b, LN_EPS)
    }

    pub fn msa_encode_pure(&self, params: &Params, h: &Tensor) -> Result<Tensor> {
        let mut x = h.clone();
        for blk in &self.encoder {
            x = blk.forward_pure(params, &x, None)?;
        }
        x.layer_norm_rows(
            params.value(self.enc_final_ln.0),
            params.value(self.enc_final_ln.1),
            LN_EPS,
        )
    }

    /// Causal selective scan over `[history tokens ++ placeholders]`,
    /// returning all rows; callers keep the trailing block.
    pub fn ssd_scan_tape(&self, tape: &mut Tape, params: &Params, inputs: Var) -> Result<Var> {
        let mut x = inputs;
        for layer in &self.ssd {
            x = layer.forward_tape(tape, params, x)?;
        }
        Ok(x)
    }

    pub fn ssd_scan_pure(&self, params: &Params, inputs: &Tensor, chunk: usize) -> Result<Tensor> {
        let mut x = inputs.clone();
        for layer in &self.ssd {
            x = layer.forward_pure(params, &x, chunk)?;
        }
        Ok(x)
    }

    pub fn ssd_scan_pure_sequential(&self, params: &Params, inputs: &Tensor) -> Result<Tensor> {
        let mut x = inputs.clone();
        for layer in &self.ssd {
            x = layer.forward_pure_sequential(params, &x)?;
        }
        Ok(x)
    }

    /// Cross-attention enhancement of the future tokens against the encoded
    /// history, finished with a layer norm.
    pub fn mca_enhance_tape(
        &self,
        tape: &mut Tape,
        params: &Params,
        f: Var,
        h_enc: Var,
    ) -> Result<Var> {
        let mut x = f;
        for blk in &self.mca {
            x = blk.forward_tape(tape, params, x, Some(h_enc))?;
        }
        let g = tape.param(params, self.dec_final_ln.0);
        let b = tape.param(params, self.dec_final_ln.1);
        tape.layer_norm_rows(x, g, b, LN_EPS)
    }

    pub fn mca_enhance_pure(&self, params: &Params, f: &Tensor, h_enc: &Tensor) -> Result<Tensor> {
        let mut x = f.clone();
        for blk in &self.mca {
            x = blk.forward_pure(params, &x, Some(h_enc))?;
        }
        x.layer_norm_rows(
            params.value(self.dec_final_ln.0),
            params.value(self.dec_final_ln.1),
            LN_EPS,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            d: 8,
            heads: 2,
            ffn: 16,
            d_inner: 16,
            n_state: 4,
            enc_layers: 1,
            dec_layers: 1,
        }
    }

    fn backbone_with(seed: u64) -> (Params, Backbone) {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = Backbone::new(&mut params, &mut rng, &tiny_cfg()).unwrap();
        (params, bb)
    }

    fn random_rows(seed: u64, rows: usize, cols: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[rows, cols], data).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg();
        cfg.d = 9; // not divisible by heads = 2
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.dec_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tape_and_pure_encoder_agree() {
        let (params, bb) = backbone_with(1);
        let x = random_rows(2, 5, 8);
        let pure = bb.msa_encode_pure(&params, &x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = bb.msa_encode_tape(&mut tape, &params, xv).unwrap();
        let taped = tape.value(out);
        for (a, b) in pure.data().iter().zip(taped.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let (params, bb) = backbone_with(3);
        let x = random_rows(4, 6, 8);
        let out = bb.msa_encode_pure(&params, &x).unwrap();
        let perm: Vec<usize> = (0..6).rev().collect();
        let mut shuffled = Tensor::zeros(&[6, 8]);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                shuffled.set2(dst, c, x.get2(src, c));
            }
        }
        let out_shuffled = bb.msa_encode_pure(&params, &shuffled).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!(
                    (out_shuffled.get2(dst, c) - out.get2(src, c)).abs() < 1e-12,
                    "row {dst}"
                );
            }
        }
    }

    #[test]
    fn single_token_attention_is_value_path() {
        // One key means softmax weight 1: the attention context must equal
        // the value projection of that token.
        let (params, bb) = backbone_with(5);
        let blk = &bb.encoder[0];
        let x = random_rows(6, 1, 8);
        let xn = x
            .layer_norm_rows(params.value(blk.ln_q.0), params.value(blk.ln_q.1), LN_EPS)
            .unwrap();
        let v = xn
            .matmul(params.value(blk.wv))
            .unwrap()
            .add_bias(params.value(blk.bv))
            .unwrap();
        let proj = v
            .matmul(params.value(blk.wo))
            .unwrap()
            .add_bias(params.value(blk.bo))
            .unwrap();
        let after_attn = x.add(&proj).unwrap();
        let xn2 = after_attn
            .layer_norm_rows(
                params.value(blk.ln_ffn.0),
                params.value(blk.ln_ffn.1),
                LN_EPS,
            )
            .unwrap();
        let hidden = xn2
            .matmul(params.value(blk.ffn_w1))
            .unwrap()
            .add_bias(params.value(blk.ffn_b1))
            .unwrap()
            .map(gelu);
        let expect = after_attn
            .add(
                &hidden
                    .matmul(params.value(blk.ffn_w2))
                    .unwrap()
                    .add_bias(params.value(blk.ffn_b2))
                    .unwrap(),
            )
            .unwrap();
        let got = blk.forward_pure(&params, &x, None).unwrap();
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_output_finite_for_large_inputs() {
        let (params, bb) = backbone_with(7);
        let mut x = random_rows(8, 4, 8);
        for v in x.data_mut() {
            *v *= 1e3;
        }
        let out = bb.msa_encode_pure(&params, &x).unwrap();
        assert!(out.all_finite());
    }

    #[test]
    fn ssd_zero_input_zero_bias_maps_to_zero() {
        let (mut params, bb) = backbone_with(9);
        let layer = &bb.ssd[0];
        // Zero all biases of the layer so the zero sequence maps to itself.
        for id in [layer.b_in, layer.b_dt, layer.b_b, layer.b_c, layer.b_out] {
            for v in params.value_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let x = Tensor::zeros(&[5, 8]);
        let out = layer.forward_pure_sequential(&params, &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn legs_diagonal_initialization() {
        let (params, bb) = backbone_with(11);
        let diag = bb.ssd[0].continuous_diag(&params);
        let expect = [-1.0, -2.0, -3.0, -4.0];
        for (a, b) in diag.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let factors = bb.ssd[0].decay_factors(&params, 0.01);
        for (n, f) in factors.iter().enumerate() {
            let expect = (-(n as f64 + 1.0) * 0.01).exp();
            assert!((f - expect).abs() < 1e-12);
            assert!(*f > 0.0 && *f < 1.0);
        }
    }

    #[test]
    fn decay_factors_bounded_for_any_input() {
        let (params, bb) = backbone_with(13);
        let layer = &bb.ssd[0];
        let x = {
            let mut t = random_rows(14, 6, 8);
            for v in t.data_mut() {
                *v *= 100.0;
            }
            t
        };
        let pr = layer.projections(&params, &x).unwrap();
        for t in 0..6 {
            for i in 0..layer.d_inner {
                let dt = pr.delta.get2(t, i);
                assert!(dt > 0.0, "softplus keeps delta positive");
                for s in 0..layer.n_state {
                    let decay = (-dt * pr.a[s]).exp();
                    assert!(decay > 0.0 && decay < 1.0);
                }
            }
        }
    }

    #[test]
    fn chunked_scan_matches_sequential_oracle() {
        for seed in 0..10u64 {
            let mut params = Params::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cfg = tiny_cfg();
            cfg.n_state = 3 + (seed as usize % 5);
            let bb = Backbone::new(&mut params, &mut rng, &cfg).unwrap();
            let x = random_rows(seed + 100, 33, 8);
            for chunk in [1, 4, 7, 16, 64] {
                let a = bb.ssd_scan_pure(&params, &x, chunk).unwrap();
                let b = bb.ssd_scan_pure_sequential(&params, &x).unwrap();
                for (u, v) in a.data().iter().zip(b.data()) {
                    assert!((u - v).abs() < 1e-10, "seed {seed} chunk {chunk}");
                }
            }
        }
    }

    #[test]
    fn tape_scan_matches_pure_sequential() {
        let (params, bb) = backbone_with(15);
        let x = random_rows(16, 7, 8);
        let pure = bb.ssd_scan_pure_sequential(&params, &x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = bb.ssd_scan_tape(&mut tape, &params, xv).unwrap();
        for (a, b) in pure.data().iter().zip(tape.value(out).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_is_causal_exactly() {
        let (params, bb) = backbone_with(17);
        let x = random_rows(18, 9, 8);
        let base = bb.ssd_scan_pure_sequential(&params, &x).unwrap();
        // Perturb row 5; rows 0..5 must be bit-identical.
        let mut xp = x.clone();
        for c in 0..8 {
            xp.set2(5, c, xp.get2(5, c) + 3.0);
        }
        let out = bb.ssd_scan_pure_sequential(&params, &xp).unwrap();
        for t in 0..5 {
            for c in 0..8 {
                assert_eq!(out.get2(t, c), base.get2(t, c), "({t},{c})");
            }
        }
        let moved = (5..9).any(|t| (0..8).any(|c| out.get2(t, c) != base.get2(t, c)));
        assert!(moved);
    }

    #[test]
    fn mca_single_key_attends_wholly() {
        let (params, bb) = backbone_with(19);
        let blk = &bb.mca[0];
        let f = random_rows(20, 3, 8);
        let h = random_rows(21, 1, 8);
        // With one key every query's context is that key's value projection.
        let hn = h
            .layer_norm_rows(
                params.value(blk.ln_kv.unwrap().0),
                params.value(blk.ln_kv.unwrap().1),
                LN_EPS,
            )
            .unwrap();
        let v = hn
            .matmul(params.value(blk.wv))
            .unwrap()
            .add_bias(params.value(blk.bv))
            .unwrap();
        let got = blk.forward_pure(&params, &f, Some(&h)).unwrap();
        let mut ctx = Tensor::zeros(&[3, 8]);
        for r in 0..3 {
            for c in 0..8 {
                ctx.set2(r, c, v.get2(0, c));
            }
        }
        let proj = ctx
            .matmul(params.value(blk.wo))
            .unwrap()
            .add_bias(params.value(blk.bo))
            .unwrap();
        let after = f.add(&proj).unwrap();
        let xn = after
            .layer_norm_rows(
                params.value(blk.ln_ffn.0),
                params.value(blk.ln_ffn.1),
                LN_EPS,
            )
            .unwrap();
        let hidden = xn
            .matmul(params.value(blk.ffn_w1))
            .unwrap()
            .add_bias(params.value(blk.ffn_b1))
            .unwrap()
            .map(gelu);
        let expect = after
            .add(
                &hidden
                    .matmul(params.value(blk.ffn_w2))
                    .unwrap()
                    .add_bias(params.value(blk.ffn_b2))
                    .unwrap(),
            )
            .unwrap();
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mca_zero_value_projection_reduces_to_ffn_residual() {
        let (mut params, bb) = backbone_with(23);
        let blk = &bb.mca[0];
        for id in [blk.wv, blk.bv, blk.bo] {
            for v in params.value_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let f = random_rows(24, 2, 8);
        let h = random_rows(25, 4, 8);
        let got = blk.forward_pure(&params, &f, Some(&h)).unwrap();
        // The attention sublayer contributes exactly nothing.
        let xn = f
            .layer_norm_rows(
                params.value(blk.ln_ffn.0),
                params.value(blk.ln_ffn.1),
                LN_EPS,
            )
            .unwrap();
        let hidden = xn
            .matmul(params.value(blk.ffn_w1))
            .unwrap()
            .add_bias(params.value(blk.ffn_b1))
            .unwrap()
            .map(gelu);
        let expect = f
            .add(
                &hidden
                    .matmul(params.value(blk.ffn_w2))
                    .unwrap()
                    .add_bias(params.value(blk.ffn_b2))
                    .unwrap(),
            )
            .unwrap();
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mca_tape_matches_pure_and_gradients_flow() {
        let (mut params, bb) = backbone_with(27);
        let f = random_rows(28, 3, 8);
        let h = random_rows(29, 5, 8);
        let pure = bb.mca_enhance_pure(&params, &f, &h).unwrap();
        let mut tape = Tape::new();
        let fv = tape.constant(f);
        let hv = tape.constant(h);
        let out = bb.mca_enhance_tape(&mut tape, &params, fv, hv).unwrap();
        for (a, b) in pure.data().iter().zip(tape.value(out).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let loss = tape.sum(out);
        tape.backward(loss).unwrap();
        params.zero_grads();
        tape.accumulate_grads(&mut params);
        let touched = params
            .ids()
            .filter(|&id| params.grad(id).data().iter().any(|&g| g != 0.0))
            .count();
        assert!(touched > 0);
    }
}
