//! Legendre memory operators: construction, discretization, recurrent
//! compression of a signal into a fixed-size memory cell, and delay
//! reconstruction of the compressed window.
//!
//! Two measure variants are supported. The translated variant (`LegT`)
//! summarizes a sliding window of fixed length `theta` with a time-invariant
//! `(A, B)` pair; the scaled variant (`LegS`) summarizes all history with
//! per-step `1/t` rescaling. Both store `A`, `B` with the measure's
//! normalization folded in, so a unit time step uses `A` and `B` directly.

use nalgebra::{DMatrix, DVector};

use crate::error::{FlameError, Result};

/// Measure variant of a Legendre operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Sliding-window measure over `[t - theta, t]`.
    LegT { theta: f64 },
    /// Uniform measure over all history `[0, t]`.
    LegS,
}

/// The `(A, B)` pair of a Legendre memory ODE together with its order.
#[derive(Debug, Clone)]
pub struct LegendreOperator {
    pub variant: Variant,
    pub order: usize,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Discretization rule applied to the continuous operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Forward Euler: `Abar = I - dt*A`, `Bbar = dt*B`.
    Euler,
    /// Tustin transform; unconditionally stable for stable operators.
    Bilinear,
    /// Exact matrix-exponential zero-order hold.
    ExactExponential,
}

/// Discrete-time stepper derived from a [`LegendreOperator`].
///
/// For `LegT` the matrices are fixed. For `LegS` they are rebuilt each step
/// with the `1/t` factor, `t` being the 1-based step index so the first step
/// stays finite.
#[derive(Debug, Clone)]
pub struct DiscretizedOperator {
    pub abar: DMatrix<f64>,
    pub bbar: DVector<f64>,
    pub dt: f64,
    pub method: Method,
    pub time_varying: bool,
    a: DMatrix<f64>,
    b: DVector<f64>,
}

/// The memory cell: coefficients of the compressed history in the shifted
/// Legendre basis, plus the number of updates applied.
#[derive(Debug, Clone)]
pub struct MemoryState {
    pub m: DVector<f64>,
    pub steps: usize,
}

impl MemoryState {
    pub fn zeros(order: usize) -> Self {
        MemoryState {
            m: DVector::zeros(order),
            steps: 0,
        }
    }
}

/// Build the sliding-window operator of the given order.
///
/// `B_n = (2n+1)(-1)^n / theta`; `A_{nk} = (2n+1)(-1)^{n-k} / theta` below the
/// diagonal and `(2n+1)/theta` on and above it.
pub fn build_legt(order: usize, theta: f64) -> Result<LegendreOperator> {
    if order < 1 {
        return Err(FlameError::InvalidArgument(format!(
            "order must be >= 1, got {order}"
        )));
    }
    if !(theta > 0.0) {
        return Err(FlameError::InvalidArgument(format!(
            "theta must be positive, got {theta}"
        )));
    }
    let a = DMatrix::from_fn(order, order, |n, k| {
        let base = (2 * n + 1) as f64 / theta;
        if n > k {
            base * if (n - k) % 2 == 0 { 1.0 } else { -1.0 }
        } else {
            base
        }
    });
    let b = DVector::from_fn(order, |n, _| {
        (2 * n + 1) as f64 / theta * if n % 2 == 0 { 1.0 } else { -1.0 }
    });
    Ok(LegendreOperator {
        variant: Variant::LegT { theta },
        order,
        a,
        b,
    })
}

/// Build the scaled (all-history) operator of the given order.
///
/// `B_n = sqrt(2n+1)`; `A` is lower triangular with `n+1` on the diagonal and
/// `sqrt(2n+1)*sqrt(2k+1)` below it.
pub fn build_legs(order: usize) -> Result<LegendreOperator> {
    if order < 1 {
        return Err(FlameError::InvalidArgument(format!(
            "order must be >= 1, got {order}"
        )));
    }
    let a = DMatrix::from_fn(order, order, |n, k| {
        if n > k {
            ((2 * n + 1) as f64).sqrt() * ((2 * k + 1) as f64).sqrt()
        } else if n == k {
            (n + 1) as f64
        } else {
            0.0
        }
    });
    let b = DVector::from_fn(order, |n, _| ((2 * n + 1) as f64).sqrt());
    Ok(LegendreOperator {
        variant: Variant::LegS,
        order,
        a,
        b,
    })
}

/// Matrix exponential by scaling and squaring with a Taylor series.
/// Adequate for the small, moderately scaled matrices used here.
pub fn matrix_exp(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.norm();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = m / 2f64.powi(squarings as i32);
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=40 {
        term = (&term * &scaled) / k as f64;
        sum += &term;
        if term.norm() < 1e-18 * sum.norm() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

fn invert(m: DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let norm = m.norm();
    let det = m.determinant();
    m.try_inverse().ok_or_else(|| {
        FlameError::Numerical(format!(
            "{context}: singular matrix (det {det:.3e}, norm {norm:.3e})"
        ))
    })
}

fn discrete_pair(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    dt: f64,
    method: Method,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    match method {
        Method::Euler => Ok((&eye - a * dt, b * dt)),
        Method::Bilinear => {
            let half = a * (dt / 2.0);
            let inv = invert(&eye + &half, "bilinear discretization")?;
            Ok((&inv * (&eye - &half), &inv * (b * dt)))
        }
        Method::ExactExponential => {
            // Augmented exponential yields both the hold matrix and the
            // integrated input column without an explicit inverse.
            let mut aug = DMatrix::<f64>::zeros(n + 1, n + 1);
            aug.view_mut((0, 0), (n, n)).copy_from(&(-a * dt));
            aug.view_mut((0, n), (n, 1)).copy_from(&(b * dt));
            let e = matrix_exp(&aug);
            let abar = e.view((0, 0), (n, n)).into_owned();
            let bbar = DVector::from_fn(n, |i, _| e[(i, n)]);
            Ok((abar, bbar))
        }
    }
}

/// Discretize an operator with the given step size and rule.
pub fn discretize(op: &LegendreOperator, dt: f64, method: Method) -> Result<DiscretizedOperator> {
    if !(dt > 0.0) {
        return Err(FlameError::InvalidArgument(format!(
            "dt must be positive, got {dt}"
        )));
    }
    if let Variant::LegT { theta } = op.variant {
        if dt > theta {
            log::warn!("discretize: dt {dt} exceeds window length theta {theta}");
        }
    }
    let time_varying = matches!(op.variant, Variant::LegS);
    let (abar, bbar) = if time_varying {
        // Step matrices are rebuilt per step; stored pair is the t = 1 form.
        step_pair_legs(&op.a, &op.b, 1, method)?
    } else {
        discrete_pair(&op.a, &op.b, dt, method)?
    };
    Ok(DiscretizedOperator {
        abar,
        bbar,
        dt,
        method,
        time_varying,
        a: op.a.clone(),
        b: op.b.clone(),
    })
}

fn step_pair_legs(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    t: usize,
    method: Method,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    // The 1/t measure rescaling cancels dt: the effective step uses A/t, B/t
    // with unit hold regardless of the sampling interval.
    let tf = t as f64;
    discrete_pair(&(a / tf), &(b / tf), 1.0, method)
}

/// Advance the memory cell one step with input sample `f_t`.
pub fn step(state: &mut MemoryState, disc: &DiscretizedOperator, f_t: f64) -> Result<()> {
    if state.m.len() != disc.abar.nrows() {
        return Err(FlameError::shapes(
            "step: state/operator order",
            &[state.m.len()],
            &[disc.abar.nrows()],
        ));
    }
    if !f_t.is_finite() {
        return Err(FlameError::NonFinite(format!(
            "step input at step {}",
            state.steps
        )));
    }
    if disc.time_varying {
        let (abar, bbar) = step_pair_legs(&disc.a, &disc.b, state.steps + 1, disc.method)?;
        state.m = &abar * &state.m + &bbar * f_t;
    } else {
        state.m = &disc.abar * &state.m + &disc.bbar * f_t;
    }
    state.steps += 1;
    Ok(())
}

/// Fold [`step`] over a series from the zero state using the default Euler
/// discretization.
pub fn compress(op: &LegendreOperator, dt: f64, series: &[f64]) -> Result<MemoryState> {
    compress_with(op, dt, Method::Euler, series)
}

/// Fold [`step`] over a series from the zero state with an explicit rule.
pub fn compress_with(
    op: &LegendreOperator,
    dt: f64,
    method: Method,
    series: &[f64],
) -> Result<MemoryState> {
    if series.is_empty() {
        return Err(FlameError::InvalidArgument(
            "compress: empty series".into(),
        ));
    }
    let disc = discretize(op, dt, method)?;
    compress_disc(&disc, series)
}

/// Fold [`step`] over a series from the zero state using a pre-built stepper.
pub fn compress_disc(disc: &DiscretizedOperator, series: &[f64]) -> Result<MemoryState> {
    if series.is_empty() {
        return Err(FlameError::InvalidArgument(
            "compress: empty series".into(),
        ));
    }
    let mut state = MemoryState::zeros(disc.abar.nrows());
    for &f in series {
        step(&mut state, disc, f)?;
    }
    Ok(state)
}

/// Evaluate the `i`-th shifted Legendre polynomial on `[0, 1]`.
///
/// Uses the Bonnet three-term recurrence at `x = 2r - 1`, which is stable at
/// every order and lands exactly on `1` and `(-1)^i` at the endpoints. The
/// explicit binomial expansion (see [`shifted_legendre_binomial`]) cancels
/// catastrophically past order ~15 and is kept only as a low-order oracle.
pub fn shifted_legendre(i: usize, r: f64) -> f64 {
    let x = 2.0 * r - 1.0;
    if i == 0 {
        return 1.0;
    }
    let mut prev = 1.0;
    let mut cur = x;
    for k in 1..i {
        let next = ((2 * k + 1) as f64 * x * cur - k as f64 * prev) / (k + 1) as f64;
        prev = cur;
        cur = next;
    }
    cur
}

/// Explicit expansion `(-1)^i sum_j C(i,j) C(i+j,j) (-r)^j` with exact
/// 128-bit integer binomials. Only valid for `i <= 30`; see
/// [`shifted_legendre`] for the general evaluator.
pub fn shifted_legendre_binomial(i: usize, r: f64) -> Result<f64> {
    if i > 30 {
        return Err(FlameError::Range(format!(
            "binomial expansion limited to order 30, got {i}"
        )));
    }
    fn binom(n: u32, k: u32) -> i128 {
        let k = k.min(n - k.min(n));
        let mut acc: i128 = 1;
        for j in 0..k {
            acc = acc * (n - j) as i128 / (j + 1) as i128;
        }
        acc
    }
    let mut sum = 0.0;
    let mut neg_r_pow = 1.0;
    for j in 0..=i as u32 {
        let c = binom(i as u32, j) * binom(i as u32 + j, j);
        sum += c as f64 * neg_r_pow;
        neg_r_pow *= -r;
    }
    Ok(if i % 2 == 0 { sum } else { -sum })
}

/// Recover the input `theta_prime` time units in the past from a `LegT`
/// memory cell.
pub fn reconstruct(
    state: &MemoryState,
    op: &LegendreOperator,
    theta_prime: f64,
) -> Result<f64> {
    let theta = match op.variant {
        Variant::LegT { theta } => theta,
        Variant::LegS => {
            return Err(FlameError::Unsupported(
                "delay reconstruction is defined for LegT only".into(),
            ))
        }
    };
    if !(0.0..=theta).contains(&theta_prime) {
        return Err(FlameError::Range(format!(
            "theta_prime {theta_prime} outside [0, {theta}]"
        )));
    }
    let r = theta_prime / theta;
    Ok((0..op.order)
        .map(|i| shifted_legendre(i, r) * state.m[i])
        .sum())
}

/// Root-mean-square reconstruction error of a compressed series over a grid
/// of delays. True values are linearly interpolated from the samples.
pub fn reconstruction_error(
    op: &LegendreOperator,
    dt: f64,
    method: Method,
    series: &[f64],
    grid: &[f64],
) -> Result<f64> {
    let theta = match op.variant {
        Variant::LegT { theta } => theta,
        Variant::LegS => {
            return Err(FlameError::Unsupported(
                "reconstruction error is defined for LegT only".into(),
            ))
        }
    };
    if grid.iter().any(|&g| !(0.0..=theta).contains(&g)) {
        return Err(FlameError::Range("delay grid outside [0, theta]".into()));
    }
    let state = compress_with(op, dt, method, series)?;
    let last = series.len() - 1;
    let mut sq = 0.0;
    for &delay in grid {
        let rec = reconstruct(&state, op, delay)?;
        let pos = last as f64 - delay / dt;
        let lo = pos.floor().max(0.0) as usize;
        let hi = (lo + 1).min(last);
        let frac = pos - lo as f64;
        let truth = series[lo] * (1.0 - frac) + series[hi] * frac;
        sq += (rec - truth) * (rec - truth);
    }
    Ok((sq / grid.len() as f64).sqrt())
}
