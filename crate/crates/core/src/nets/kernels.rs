//! Single-sample CNN kernels on planar `[channel][y][x]` buffers.
//!
//! Convolutions are 3×3, stride 1, zero padding 1, lowered to GEMM through
//! im2col. Everything is generic over [`Real`] so the same code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

pub trait Real:
    Float + Default + Send + Sync + Sum + AddAssign + MulAssign + std::fmt::Debug + 'static
{
    /// `c = alpha * a·b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn to_f32(self) -> f32;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |r: usize, cc: usize, rs: isize, cs: isize| {
                    if r == 0 || cc == 0 {
                        0
                    } else {
                        (r as isize - 1) * rs + (cc as isize - 1) * cs + 1
                    }
                };
                assert!(a.len() as isize >= span(m, k, rsa, csa));
                assert!(b.len() as isize >= span(k, n, rsb, csb));
                assert!(c.len() as isize >= span(m, n, rsc, csc));
                // SAFETY: the asserts above bound every strided access
                // inside the slices; `c` is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            #[inline]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn to_f32(self) -> f32 {
                self as f32
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Lowers `input` (`c × h × w`) to `cols` (`c·9 × h·w`).
pub fn im2col3x3<T: Real>(input: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * 9 * hw);
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3x3`]: scatters-adds `cols` back into `grad_input`.
pub fn col2im3x3_add<T: Real>(cols: &[T], c: usize, h: usize, w: usize, grad_input: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut grad_input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, &s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
}

/// `out (c_out × hw) = weight (c_out × c_in·9) · cols + bias`.
pub fn conv_forward<T: Real>(
    cols: &[T],
    weight: &[T],
    bias: &[T],
    c_out: usize,
    k: usize,
    hw: usize,
    out: &mut [T],
) {
    for (o, row) in out.chunks_exact_mut(hw).enumerate() {
        row.iter_mut().for_each(|v| *v = bias[o]);
    }
    T::gemm(
        c_out,
        k,
        hw,
        T::one(),
        weight,
        k as isize,
        1,
        cols,
        hw as isize,
        1,
        T::one(),
        out,
        hw as isize,
        1,
    );
}

/// Accumulates weight/bias gradients and, when requested, writes the
/// gradient w.r.t. `cols` into `grad_cols`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    cols: &[T],
    weight: &[T],
    grad_out: &[T],
    c_out: usize,
    k: usize,
    hw: usize,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    grad_cols: Option<&mut [T]>,
) {
    T::gemm(
        c_out,
        hw,
        k,
        T::one(),
        grad_out,
        hw as isize,
        1,
        cols,
        1,
        hw as isize,
        T::one(),
        grad_weight,
        k as isize,
        1,
    );
    for (o, row) in grad_out.chunks_exact(hw).enumerate() {
        grad_bias[o] += row.iter().copied().sum::<T>();
    }
    if let Some(gc) = grad_cols {
        T::gemm(
            k,
            c_out,
            hw,
            T::one(),
            weight,
            1,
            k as isize,
            grad_out,
            hw as isize,
            1,
            T::zero(),
            gc,
            hw as isize,
            1,
        );
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// 2×2 stride-2 max pooling (odd trailing rows/columns are dropped). Returns
/// the pooled map; `argmax` receives the flat source index of each output.
pub fn maxpool2<T: Real>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    argmax: Option<&mut Vec<u32>>,
) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::new();
    let track = argmax.is_some();
    if track {
        idx.reserve(c * oh * ow);
    }
    for ci in 0..c {
        let base = ci * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for cand in [best + 1, best + w, best + w + 1] {
                    if input[cand] > input[best] {
                        best = cand;
                    }
                }
                out.push(input[best]);
                if track {
                    idx.push(best as u32);
                }
            }
        }
    }
    if let Some(a) = argmax {
        *a = idx;
    }
    out
}

pub fn global_avg_pool<T: Real>(input: &[T], c: usize, hw: usize) -> Vec<T> {
    let scale = T::one() / T::from_f64(hw as f64);
    input
        .chunks_exact(hw)
        .take(c)
        .map(|p| p.iter().copied().sum::<T>() * scale)
        .collect()
}

/// `out = weight (n_out × n_in) · x + bias`.
pub fn linear<T: Real>(x: &[T], weight: &[T], bias: &[T], n_out: usize) -> Vec<T> {
    let n_in = x.len();
    (0..n_out)
        .map(|o| {
            let row = &weight[o * n_in..(o + 1) * n_in];
            row.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>() + bias[o]
        })
        .collect()
}

/// Accumulates linear-layer parameter gradients and returns `dL/dx`.
pub fn linear_backward<T: Real>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) -> Vec<T> {
    let n_in = x.len();
    let mut gx = vec![T::zero(); n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        grad_bias[o] += g;
        let row = &weight[o * n_in..(o + 1) * n_in];
        let grow = &mut grad_weight[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] += g * x[i];
            gx[i] += g * row[i];
        }
    }
    gx
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

/// Vector-Jacobian product of softmax: maps `dL/dsoftmax` to `dL/dlogits`.
pub fn softmax_backward<T: Real>(probs: &[T], grad_probs: &[T]) -> Vec<T> {
    let dot: T = probs.iter().zip(grad_probs).map(|(&p, &g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(&p, &g)| p * (g - dot))
        .collect()
}
