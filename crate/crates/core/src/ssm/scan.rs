//! Zero-order-hold discretization and the selective scan.
//!
//! All buffers are row-major. Per-timestep transition tensors are laid out
//! `L × D_inner × N`; projections `B`/`C` are `L × N`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Float, Tensor};

/// Below this `|Δ·a|` the exact ZOH input gain is replaced by its Taylor limit.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-6;

/// Discretized transition `ā = exp(Δa)` and input gain `(exp(Δa) − 1)/a`
/// for one diagonal entry, so that `b̄ = gain · b`.
#[inline]
pub fn zoh_coeff<T: Float>(delta: T, a: T) -> (T, T) {
    let z = delta * a;
    let a_bar = z.exp();
    let gain = if z.abs() < T::of(ZOH_SERIES_THRESHOLD) {
        delta * (T::one() + z * T::of(0.5))
    } else {
        delta * z.exp_m1() / z
    };
    (a_bar, gain)
}

/// Partial derivatives of the ZOH gain `(exp(Δa) − 1)/a` with respect to
/// `Δ` and `a`, consistent with the branch taken by [`zoh_coeff`].
#[inline]
pub fn zoh_gain_grad<T: Float>(delta: T, a: T) -> (T, T) {
    let z = delta * a;
    if z.abs() < T::of(ZOH_SERIES_THRESHOLD) {
        return (T::one() + z, delta * delta * T::of(0.5));
    }
    let d_delta = z.exp();
    // (z·eᶻ − eᶻ + 1)/z², expanded near zero where the closed form cancels.
    let phi = if z.abs() < T::of(1e-3) {
        T::of(0.5) + z / T::of(3.0) + z * z / T::of(8.0) + z * z * z / T::of(30.0)
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    };
    (d_delta, delta * delta * phi)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanMode {
    /// Reference left-to-right recurrence.
    #[default]
    Sequential,
    /// Work-efficient up-sweep/down-sweep scan over the associative pair
    /// composition, parallelized across channels.
    Parallel,
}

/// Elementwise ZOH over a diagonal state matrix.
///
/// `a` is `D_inner × N` (strictly negative in practice), `delta` is
/// `L × D_inner`, `b` is `L × N`. Returns `(ā, b̄)`, both `L × D_inner × N`.
pub fn discretize_zoh<T: Float>(
    a: &Tensor<T>,
    delta: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (di, n) = a.dims2()?;
    let (l, di2) = delta.dims2()?;
    let (l2, n2) = b.dims2()?;
    if di != di2 || l != l2 || n != n2 {
        return Err(Error::dim(
            "discretize_zoh",
            format!("a {:?}, delta {:?}, b {:?}", a.shape(), delta.shape(), b.shape()),
        ));
    }
    let mut a_bar = Vec::with_capacity(l * di * n);
    let mut b_bar = Vec::with_capacity(l * di * n);
    for t in 0..l {
        for d in 0..di {
            let dt = delta.data()[t * di + d];
            for s in 0..n {
                let (ab, gain) = zoh_coeff(dt, a.data()[d * n + s]);
                a_bar.push(ab);
                b_bar.push(gain * b.data()[t * n + s]);
            }
        }
    }
    Ok((
        Tensor::new([l, di, n], a_bar)?,
        Tensor::new([l, di, n], b_bar)?,
    ))
}

/// Combines `first` then `second`: `(a, b) ∘ (a′, b′) = (a·a′, a′·b + b′)`.
#[inline]
pub fn compose<T: Float>(first: (T, T), second: (T, T)) -> (T, T) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

/// In-place inclusive scan of affine maps `h ↦ a·h + b` starting from
/// `h₀ = 0`; on return `seq[t].1 == h_t`.
///
/// Blelloch formulation: an up-sweep builds subtree aggregates, a
/// down-sweep turns them into exclusive prefixes, and a final combine with
/// each element yields the inclusive result.
pub fn blelloch_scan<T: Float>(seq: &mut [(T, T)]) {
    let len = seq.len();
    if len == 0 {
        return;
    }
    let size = len.next_power_of_two();
    let identity = (T::one(), T::zero());
    let mut tree: Vec<(T, T)> = Vec::with_capacity(size);
    tree.extend_from_slice(seq);
    tree.resize(size, identity);

    let mut stride = 1;
    while stride < size {
        let mut i = 2 * stride - 1;
        while i < size {
            tree[i] = compose(tree[i - stride], tree[i]);
            i += 2 * stride;
        }
        stride *= 2;
    }
    tree[size - 1] = identity;
    stride = size / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < size {
            let left = tree[i - stride];
            tree[i - stride] = tree[i];
            tree[i] = compose(tree[i], left);
            i += 2 * stride;
        }
        stride /= 2;
    }
    for (elem, excl) in seq.iter_mut().zip(&tree) {
        *elem = compose(*excl, *elem);
    }
}

/// Runs the recurrence `h_t = ā_t ⊙ h_{t−1} + (b̄x)_t` and returns every
/// state, `L × D_inner × N`.
pub fn scan_states<T: Float>(
    a_bar: &[T],
    bx: &[T],
    l: usize,
    width: usize,
    mode: ScanMode,
) -> Vec<T> {
    match mode {
        ScanMode::Sequential => {
            let mut h = vec![T::zero(); l * width];
            for t in 0..l {
                let cur = t * width;
                for j in 0..width {
                    let prev = if t == 0 { T::zero() } else { h[cur - width + j] };
                    h[cur + j] = a_bar[cur + j] * prev + bx[cur + j];
                }
            }
            h
        }
        ScanMode::Parallel => {
            let columns: Vec<Vec<(T, T)>> = parallel::install(|| {
                (0..width)
                    .into_par_iter()
                    .map(|j| {
                        let mut seq: Vec<(T, T)> = (0..l)
                            .map(|t| (a_bar[t * width + j], bx[t * width + j]))
                            .collect();
                        blelloch_scan(&mut seq);
                        seq
                    })
                    .collect()
            });
            let mut h = vec![T::zero(); l * width];
            for (j, col) in columns.iter().enumerate() {
                for (t, &(_, state)) in col.iter().enumerate() {
                    h[t * width + j] = state;
                }
            }
            h
        }
    }
}

/// Reads out `y_t[d] = Σ_n C_t[n]·h_t[d,n] + D_skip[d]·x_t[d]`.
pub fn readout<T: Float>(
    h: &[T],
    c: &[T],
    x: &[T],
    d_skip: &[T],
    l: usize,
    di: usize,
    n: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); l * di];
    for t in 0..l {
        let ct = &c[t * n..(t + 1) * n];
        for d in 0..di {
            let hs = &h[(t * di + d) * n..(t * di + d + 1) * n];
            let mut acc = T::zero();
            for s in 0..n {
                acc += ct[s] * hs[s];
            }
            y[t * di + d] = acc + d_skip[d] * x[t * di + d];
        }
    }
    y
}

/// Selective scan with readout.
///
/// `a_bar`, `bx` are `L × D_inner × N`; `c` is `L × N`; `x` is
/// `L × D_inner`; `d_skip` has length `D_inner`. `L = 0` yields an empty
/// output.
pub fn selective_scan<T: Float>(
    a_bar: &Tensor<T>,
    bx: &Tensor<T>,
    c: &Tensor<T>,
    x: &Tensor<T>,
    d_skip: &[T],
    mode: ScanMode,
) -> Result<Tensor<T>> {
    let (l, di, n) = a_bar.dims3()?;
    if bx.shape() != a_bar.shape()
        || c.shape() != [l, n]
        || x.shape() != [l, di]
        || d_skip.len() != di
    {
        return Err(Error::dim(
            "selective_scan",
            format!(
                "a_bar {:?}, bx {:?}, c {:?}, x {:?}, d_skip [{}]",
                a_bar.shape(),
                bx.shape(),
                c.shape(),
                x.shape(),
                d_skip.len()
            ),
        ));
    }
    let h = scan_states(a_bar.data(), bx.data(), l, di * n, mode);
    Tensor::new([l, di], readout(&h, c.data(), x.data(), d_skip, l, di, n))
}
