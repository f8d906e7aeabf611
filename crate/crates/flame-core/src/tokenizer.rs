//! Input pipeline: instance normalization, non-overlapping patches, linear
//! embedding, FFT period detection, period-aligned environmental patches, and
//! the fixed Legendre encoding that turns variable-length context windows
//! into constant-size tokens.

use std::collections::BTreeMap;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{FlameError, Result};
use crate::legendre::{self, DiscretizedOperator, Method};
use crate::tensor::Tensor;

/// Default epsilon for instance normalization.
pub const DEFAULT_EPS: f64 = 1e-5;

/// One univariate window of a series.
#[derive(Debug, Clone)]
pub struct SeriesWindow {
    pub values: Vec<f64>,
    /// Index of the first sample in the originating channel.
    pub sample_index_origin: usize,
}

impl SeriesWindow {
    pub fn new(values: Vec<f64>) -> Self {
        SeriesWindow {
            values,
            sample_index_origin: 0,
        }
    }
}

/// Normalization statistics kept for denormalizing forecasts.
///
/// The optional affine pair is a fixed (non-trained) rescaling hook applied
/// after standardization; the default `(1, 0)` leaves it inert.
#[derive(Debug, Clone, Copy)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub eps: f64,
    pub gamma: f64,
    pub beta: f64,
}

/// Standardize a window to zero mean and unit population std.
pub fn instance_normalize(values: &[f64]) -> Result<(Vec<f64>, NormStats)> {
    instance_normalize_with(values, DEFAULT_EPS, 1.0, 0.0)
}

/// Standardize with explicit epsilon and fixed affine rescaling.
pub fn instance_normalize_with(
    values: &[f64],
    eps: f64,
    gamma: f64,
    beta: f64,
) -> Result<(Vec<f64>, NormStats)> {
    if values.is_empty() {
        return Err(FlameError::InvalidArgument(
            "instance_normalize: empty window".into(),
        ));
    }
    if gamma == 0.0 {
        return Err(FlameError::InvalidArgument(
            "instance_normalize: gamma must be nonzero".into(),
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let stats = NormStats {
        mean,
        std,
        eps,
        gamma,
        beta,
    };
    let scale = gamma / (std + eps);
    let out = values.iter().map(|v| (v - mean) * scale + beta).collect();
    Ok((out, stats))
}

/// Invert [`instance_normalize`].
pub fn denormalize(values: &[f64], stats: &NormStats) -> Vec<f64> {
    let scale = (stats.std + stats.eps) / stats.gamma;
    values
        .iter()
        .map(|v| (v - stats.beta) * scale + stats.mean)
        .collect()
}

/// Non-overlapping patches of a window, left-padded when needed.
#[derive(Debug, Clone)]
pub struct PatchSet {
    /// `n × p` patch matrix.
    pub patches: Tensor,
    pub patch_size: usize,
    /// Number of left-pad samples that were prepended.
    pub pad: usize,
}

impl PatchSet {
    pub fn num_patches(&self) -> usize {
        self.patches.rows()
    }
}

/// Split a window into `ceil(T/p)` non-overlapping length-`p` patches.
///
/// When `p` does not divide `T` the window is left-padded by repeating its
/// first value, which adds no spurious level jump or spectral energy.
pub fn patch(window: &[f64], p: usize) -> Result<PatchSet> {
    if p < 1 {
        return Err(FlameError::InvalidArgument(
            "patch size must be >= 1".into(),
        ));
    }
    if window.is_empty() {
        return Err(FlameError::InvalidArgument("patch: empty window".into()));
    }
    let t = window.len();
    let n = t.div_ceil(p);
    let pad = n * p - t;
    let mut data = Vec::with_capacity(n * p);
    data.extend(std::iter::repeat(window[0]).take(pad));
    data.extend_from_slice(window);
    Ok(PatchSet {
        patches: Tensor::from_vec(&[n, p], data)?,
        patch_size: p,
        pad,
    })
}

/// Row-wise affine embedding of patches into model space.
pub fn embed(patches: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    patches.matmul(weight)?.add_bias(bias)
}

/// Dominant period of a window from the amplitude spectrum.
///
/// The DC bin is excluded; ties resolve to the lowest frequency. A window
/// with no measurable non-DC energy (e.g. a constant) reports period `T`.
pub fn detect_period(window: &[f64]) -> Result<usize> {
    let t = window.len();
    if t < 4 {
        return Err(FlameError::InvalidArgument(format!(
            "detect_period needs at least 4 samples, got {t}"
        )));
    }
    let mut buf: Vec<Complex<f64>> = window.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(t).process(&mut buf);

    let mut best_bin = 0;
    let mut best_amp = 0.0;
    for (bin, c) in buf.iter().enumerate().take(t / 2 + 1).skip(1) {
        let amp = c.norm();
        if amp > best_amp {
            best_amp = amp;
            best_bin = bin;
        }
    }
    let max_abs = window.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if best_bin == 0 || best_amp <= 1e-9 * t as f64 * max_abs {
        return Ok(t);
    }
    Ok(t.div_ceil(best_bin).clamp(2, t))
}

/// Padding length that extends a patch to the smallest period multiple.
pub fn align_padding(p: usize, period: usize) -> usize {
    debug_assert!(p >= 1 && period >= 1);
    (p + period - 1) / period * period - p
}

/// Period-aligned environmental patches covering each original patch.
#[derive(Debug, Clone)]
pub struct EnvPatchSet {
    /// `n × (p + s)` matrix; row `i` ends where patch `i` ends.
    pub patches: Tensor,
    pub patch_size: usize,
    pub pad_len: usize,
    pub period: usize,
}

/// Build the length-`p+s` environmental patch for every length-`p` patch.
///
/// The window is first padded exactly as [`patch`] pads it, then left-padded
/// by `s` more repeated first values so each environmental slice covers its
/// patch.
pub fn build_env_patches(
    window: &[f64],
    p: usize,
    s: usize,
    period: usize,
) -> Result<EnvPatchSet> {
    let base = patch(window, p)?;
    let n = base.num_patches();
    let first = window[0];
    let mut padded = Vec::with_capacity(s + n * p);
    padded.extend(std::iter::repeat(first).take(s + base.pad));
    padded.extend_from_slice(window);

    let width = p + s;
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        // Patch i ends at base-padded coordinate (i+1)*p, shifted by s here.
        let end = s + (i + 1) * p;
        data.extend_from_slice(&padded[end - width..end]);
    }
    Ok(EnvPatchSet {
        patches: Tensor::from_vec(&[n, width], data)?,
        patch_size: p,
        pad_len: s,
        period,
    })
}

/// Legendre encoder for environmental patches.
///
/// Each length-`p+s` patch is compressed by a fixed (untrainable)
/// sliding-window operator with `theta = p+s` and unit sample spacing; the
/// token is the final memory cell. Exact zero-order-hold stepping is used
/// because forward Euler turns unstable whenever the window is shorter than
/// the operator order. Steppers are cached per window length.
pub struct EnvEncoder {
    order: usize,
    cache: BTreeMap<usize, DiscretizedOperator>,
    warned_short_window: bool,
}

impl EnvEncoder {
    pub fn new(order: usize) -> Self {
        EnvEncoder {
            order,
            cache: BTreeMap::new(),
            warned_short_window: false,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Encode every environmental patch into a fixed-size token row.
    pub fn encode(&mut self, env: &EnvPatchSet) -> Result<Tensor> {
        let width = env.patches.cols();
        if self.order < width && !self.warned_short_window {
            log::warn!(
                "environmental window {width} exceeds memory order {}; \
                 compression is lossy for rough inputs",
                self.order
            );
            self.warned_short_window = true;
        }
        if !self.cache.contains_key(&width) {
            let op = legendre::build_legt(self.order, width as f64)?;
            let disc = legendre::discretize(&op, 1.0, Method::ExactExponential)?;
            self.cache.insert(width, disc);
        }
        let disc = &self.cache[&width];
        let n = env.patches.rows();
        let mut out = Vec::with_capacity(n * self.order);
        for i in 0..n {
            let row = &env.patches.data()[i * width..(i + 1) * width];
            let state = legendre::compress_disc(disc, row)?;
            out.extend_from_slice(state.m.as_slice());
        }
        Tensor::from_vec(&[n, self.order], out)
    }
}

/// Fuse embedded tokens with environmental tokens by elementwise sum.
pub fn fuse(tokens: &Tensor, env_tokens: &Tensor) -> Result<Tensor> {
    tokens.add(env_tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_window_normalizes_to_zero() {
        let (out, stats) = instance_normalize(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0]);
        assert_eq!(stats.mean, 2.0);
        assert_eq!(stats.std, 0.0);
    }

    #[test]
    fn population_statistics() {
        let (_, stats) = instance_normalize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(stats.mean, 2.0);
        assert!((stats.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn normalize_round_trip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..64).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let (norm, stats) = instance_normalize(&xs).unwrap();
        let back = denormalize(&norm, &stats);
        for (a, b) in xs.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_round_trip_is_identity() {
        let xs = [0.4, -1.2, 3.3, 0.0, 2.2];
        let (norm, stats) = instance_normalize_with(&xs, 1e-5, 2.5, -0.7).unwrap();
        let back = denormalize(&norm, &stats);
        for (a, b) in xs.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_exact_division() {
        let window: Vec<f64> = (0..96).map(|i| i as f64).collect();
        let ps = patch(&window, 48).unwrap();
        assert_eq!(ps.num_patches(), 2);
        assert_eq!(ps.pad, 0);
    }

    #[test]
    fn patch_left_pads_with_first_value() {
        let window: Vec<f64> = (0..100).map(|i| i as f64 + 7.0).collect();
        let ps = patch(&window, 48).unwrap();
        assert_eq!(ps.num_patches(), 3);
        assert_eq!(ps.pad, 44);
        for j in 0..44 {
            assert_eq!(ps.patches.get2(0, j), 7.0);
        }
        assert_eq!(ps.patches.get2(0, 44), 7.0);
        assert_eq!(ps.patches.get2(2, 47), 106.0);
    }

    #[test]
    fn unpadded_patches_tile_the_window() {
        let window: Vec<f64> = (0..96).map(|i| (i as f64).sin()).collect();
        let ps = patch(&window, 24).unwrap();
        assert_eq!(ps.pad, 0);
        assert_eq!(ps.patches.data(), window.as_slice());
    }

    #[test]
    fn patch_rejects_zero_size() {
        assert!(patch(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn embed_identity_weight_passes_patches_through() {
        let ps = patch(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::zeros(&[2]);
        let tokens = embed(&ps.patches, &eye, &zero).unwrap();
        assert_eq!(tokens.data(), ps.patches.data());
    }

    #[test]
    fn embed_zero_patches_zero_bias_gives_zero() {
        let patches = Tensor::zeros(&[3, 4]);
        let w = Tensor::from_vec(&[4, 5], (0..20).map(|i| i as f64).collect()).unwrap();
        let tokens = embed(&patches, &w, &Tensor::zeros(&[5])).unwrap();
        assert!(tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn detect_period_pure_sine() {
        let t = 480;
        let window: Vec<f64> = (0..t)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / 96.0).sin())
            .collect();
        assert_eq!(detect_period(&window).unwrap(), 96);
    }

    #[test]
    fn detect_period_integer_cycles() {
        let t: usize = 480;
        for k in 2..=10usize {
            let window: Vec<f64> = (0..t)
                .map(|i| (2.0 * std::f64::consts::PI * k as f64 * i as f64 / t as f64).sin())
                .collect();
            let p = detect_period(&window).unwrap();
            assert_eq!(p, t.div_ceil(k), "k={k}");
            if t % k == 0 {
                assert_eq!(p, t / k, "k={k} divides T");
            }
        }
    }

    #[test]
    fn detect_period_constant_falls_back_to_window_length() {
        let window = vec![3.5; 128];
        assert_eq!(detect_period(&window).unwrap(), 128);
    }

    #[test]
    fn detect_period_larger_amplitude_wins() {
        let t = 480;
        let window: Vec<f64> = (0..t)
            .map(|i| {
                let x = i as f64;
                (2.0 * std::f64::consts::PI * x / 96.0).sin()
                    + 0.2 * (2.0 * std::f64::consts::PI * x / 24.0).sin()
            })
            .collect();
        assert_eq!(detect_period(&window).unwrap(), 96);
    }

    #[test]
    fn detect_period_rejects_tiny_windows() {
        assert!(detect_period(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn align_padding_examples() {
        assert_eq!(align_padding(48, 24), 0);
        assert_eq!(align_padding(48, 36), 24);
        assert_eq!(align_padding(48, 48), 0);
        assert_eq!(align_padding(48, 50), 2);
    }

    #[test]
    fn align_padding_exhaustive_invariant() {
        for p in 1..=128usize {
            for period in 1..=128usize {
                let s = align_padding(p, period);
                assert_eq!((p + s) % period, 0, "p={p} P={period}");
                assert!(s < period, "p={p} P={period} s={s}");
            }
        }
    }

    #[test]
    fn env_patches_cover_their_patches() {
        let window: Vec<f64> = (0..96).map(|i| (i as f64 * 0.11).sin()).collect();
        let p = 8;
        let period = detect_period(&window).unwrap();
        let s = align_padding(p, period);
        let env = build_env_patches(&window, p, s, period).unwrap();
        let base = patch(&window, p).unwrap();
        assert_eq!(env.patches.rows(), base.num_patches());
        for i in 0..env.patches.rows() {
            let tail = env.patches.slice_rows(i, 1).unwrap();
            let tail = tail.slice_cols(s, p).unwrap();
            let h = base.patches.slice_rows(i, 1).unwrap();
            assert_eq!(tail.data(), h.data(), "patch {i}");
        }
    }

    #[test]
    fn env_patches_with_zero_padding_equal_patches() {
        let window: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let env = build_env_patches(&window, 8, 0, 8).unwrap();
        let base = patch(&window, 8).unwrap();
        assert_eq!(env.patches.data(), base.patches.data());
    }

    #[test]
    fn env_patch_spans_match_index_arithmetic() {
        // Index oracle: entry (i, j) of the env matrix equals the fully
        // padded window at absolute position i*p + j.
        let window: Vec<f64> = (0..50).map(|i| i as f64 * 1.5 - 3.0).collect();
        let (p, s) = (8, 4);
        let env = build_env_patches(&window, p, s, 4).unwrap();
        let base = patch(&window, p).unwrap();
        let total_pad = s + base.pad;
        let padded: Vec<f64> = std::iter::repeat(window[0])
            .take(total_pad)
            .chain(window.iter().copied())
            .collect();
        for i in 0..env.patches.rows() {
            for j in 0..(p + s) {
                assert_eq!(env.patches.get2(i, j), padded[i * p + j], "({i},{j})");
            }
        }
        // Trailing p entries of each env patch equal the padded patch row.
        for i in 0..env.patches.rows() {
            for j in 0..p {
                assert_eq!(env.patches.get2(i, s + j), base.patches.get2(i, j));
            }
        }
    }

    #[test]
    fn env_encoding_of_zero_patch_is_zero() {
        let mut enc = EnvEncoder::new(6);
        let env = build_env_patches(&vec![0.0; 32], 8, 8, 8).unwrap();
        let tokens = enc.encode(&env).unwrap();
        assert!(tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn env_encoding_constant_patch_approaches_steady_state() {
        // One window is all the transient ever gets to decay over (the patch
        // length equals the memory window), and the operator is non-normal:
        // the leading coefficient lands within 1e-2 of the steady solve while
        // mid-order coefficients keep residuals up to ~0.08.
        let c = 1.3;
        let order = 32;
        let mut enc = EnvEncoder::new(order);
        let env = build_env_patches(&vec![c; 512], 512, 0, 512).unwrap();
        let tokens = enc.encode(&env).unwrap();
        let op = legendre::build_legt(order, 512.0).unwrap();
        let target: DVector<f64> = op.a.clone().lu().solve(&(&op.b * c)).unwrap();
        assert!((tokens.get2(0, 0) - target[0]).abs() < 1e-2);
        for j in 0..order {
            assert!(
                (tokens.get2(0, j) - target[j]).abs() < 0.15,
                "coef {j}: {} vs {}",
                tokens.get2(0, j),
                target[j]
            );
        }
    }

    #[test]
    fn env_encoding_fixed_size_across_window_lengths() {
        let mut enc = EnvEncoder::new(5);
        for width in [8usize, 24, 96] {
            let env = build_env_patches(&vec![1.0; width * 2], width, 0, width).unwrap();
            let tokens = enc.encode(&env).unwrap();
            assert_eq!(tokens.cols(), 5);
        }
    }

    #[test]
    fn env_encoding_is_origin_invariant() {
        let mut enc = EnvEncoder::new(6);
        let pattern: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin()).collect();
        // Same patch values embedded at different positions of two windows.
        let w1: Vec<f64> = pattern.iter().copied().chain(pattern.iter().copied()).collect();
        let env1 = build_env_patches(&w1, 24, 0, 24).unwrap();
        let t1 = enc.encode(&env1).unwrap();
        let row0 = t1.slice_rows(0, 1).unwrap();
        let row1 = t1.slice_rows(1, 1).unwrap();
        assert_eq!(row0.data(), row1.data());
    }

    #[test]
    fn env_encoding_stays_bounded_when_window_is_shorter_than_order() {
        // p + s < order is the regime where Euler stepping would explode.
        let mut enc = EnvEncoder::new(32);
        let window: Vec<f64> = (0..32).map(|i| (i as f64 * 0.9).sin()).collect();
        let env = build_env_patches(&window, 8, 0, 4).unwrap();
        let tokens = enc.encode(&env).unwrap();
        let max = tokens.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(max < 10.0, "tokens blew up: {max}");
    }

    #[test]
    fn fuse_is_commutative_sum() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![0.5, -1.0, 0.0, 2.0]).unwrap();
        let ab = fuse(&a, &b).unwrap();
        let ba = fuse(&b, &a).unwrap();
        assert_eq!(ab, ba);
        let zero = Tensor::zeros(&[2, 2]);
        assert_eq!(fuse(&a, &zero).unwrap(), a);
        assert_eq!(fuse(&zero, &b).unwrap(), b);
    }
}
