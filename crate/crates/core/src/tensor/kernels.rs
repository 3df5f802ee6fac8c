// Raw row-major kernels shared by forward and backward passes.

/// `c = op(a) * op(b) (+ c when accumulate)` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`. Transposition is expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A strided matrix view into a flat buffer: element `(r, c)` lives at
/// `offset + r * rs + c * cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        View { offset, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        View { rs: self.cs, cs: self.rs, ..self }
    }

    fn fits(&self, rows: usize, cols: usize, len: usize) -> bool {
        rows == 0 || cols == 0 || self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs < len
    }
}

/// `c = alpha * a * b + beta * c` on strided views, `a` is `m x k`, `b` is
/// `k x n`. Views must not alias (`c` is written through a separate buffer).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], View),
    b: (&[f64], View),
    beta: f64,
    c: (&mut [f64], View),
) {
    assert!(a.1.fits(m, k, a.0.len()) && b.1.fits(k, n, b.0.len()) && c.1.fits(m, n, c.0.len()));
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every addressed element was bounds-checked above, and `c` is
    // a distinct mutable borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr().add(a.1.offset),
            a.1.rs as isize,
            a.1.cs as isize,
            b.0.as_ptr().add(b.1.offset),
            b.1.rs as isize,
            b.1.cs as isize,
            beta,
            c.0.as_mut_ptr().add(c.1.offset),
            c.1.rs as isize,
            c.1.cs as isize,
        );
    }
}

/// `exp` for finite inputs via range reduction to `|r| <= ln2 / 2` and a
/// degree-13 Taylor polynomial. Branch-free so that loops over it vectorize;
/// relative error stays within a few ulps. Inputs below -708 clamp to a tiny
/// normal number instead of underflowing.
#[inline(always)]
pub(crate) fn exp_fast(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.clamp(-708.0, 709.0);
    // Adding 1.5 * 2^52 rounds to the nearest integer without a libm call.
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let shifted = x * LOG2E + SHIFTER;
    let n = shifted - SHIFTER;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    // The low mantissa bits of `shifted` hold n in two's complement, which
    // keeps the whole function in integer ops that vectorize. n is in
    // [-1022, 1023] after clamping, so 2^n is a normal number.
    let n_bits = shifted.to_bits().wrapping_sub(SHIFTER.to_bits());
    p * f64::from_bits(n_bits.wrapping_add(1023) << 52)
}

#[inline(always)]
pub(crate) fn tanh_fast(u: f64) -> f64 {
    let e = exp_fast(-2.0 * u.abs());
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

/// True when no entry is NaN or infinite.
pub(crate) fn all_finite(data: &[f64]) -> bool {
    // v * 0 is NaN exactly when v is not finite; independent lanes vectorize.
    let mut acc = [0.0f64; 4];
    let chunks = data.chunks_exact(4);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..4 {
            acc[i] += c[i] * 0.0;
        }
    }
    let rest: f64 = tail.iter().map(|v| v * 0.0).sum();
    (acc[0] + acc[1] + acc[2] + acc[3] + rest) == 0.0
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = exp_fast(v - max);
    }
    let inv = 1.0 / out.iter().sum::<f64>();
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub(crate) fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU (tanh form) and the tanh it used, which the backward pass reuses.
#[inline(always)]
pub(crate) fn gelu_with_tanh(x: f64) -> (f64, f64) {
    let t = tanh_fast(GELU_C * (x + GELU_A * x * x * x));
    (0.5 * x * (1.0 + t), t)
}

/// Derivative of GELU at `x` given `t`, the tanh computed in the forward pass.
#[inline(always)]
pub(crate) fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
