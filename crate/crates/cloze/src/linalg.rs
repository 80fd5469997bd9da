//! Dense kernels for the miniature transformer: a register-tiled gemm with
//! runtime SIMD dispatch (AVX-512 / AVX2 / portable), plus row softmax,
//! layer norm, and the activation slices used by forward and backward passes.
//!
//! Everything is generic over [`Scalar`] so the same code runs in f32 for
//! training and f64 for finite-difference gradient checks.

use crate::scalar::Scalar;

/// Row-major 2-D tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![S::ZERO; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self^T` as a new matrix.
    pub fn transposed(&self) -> Mat<S> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum SimdLevel {
    Avx512,
    Avx2,
    Portable,
}

fn simd_level() -> SimdLevel {
    #[cfg(target_arch = "x86_64")]
    {
        use std::sync::OnceLock;
        static LEVEL: OnceLock<SimdLevel> = OnceLock::new();
        return *LEVEL.get_or_init(|| {
            if is_x86_feature_detected!("avx512f") {
                SimdLevel::Avx512
            } else if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                SimdLevel::Avx2
            } else {
                SimdLevel::Portable
            }
        });
    }
    #[cfg(not(target_arch = "x86_64"))]
    SimdLevel::Portable
}

/// C[m,n] += A[m,k] @ B[k,n], 4xNR register tile, edge rows/cols on a slower path.
#[inline(always)]
fn gemm_tile<S: Scalar, const NR: usize>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let mut i = 0;
    while i < m {
        let ih = (m - i).min(MR);
        let mut o = 0;
        while o < n {
            let ow = (n - o).min(NR);
            if ih == MR && ow == NR {
                let mut acc = [[S::ZERO; NR]; MR];
                for kk in 0..k {
                    let br = &b[kk * n + o..kk * n + o + NR];
                    for r in 0..MR {
                        let av = a[(i + r) * k + kk];
                        let ar = &mut acc[r];
                        for cc in 0..NR {
                            ar[cc] = av.mul_add(br[cc], ar[cc]);
                        }
                    }
                }
                for r in 0..MR {
                    let cr = &mut c[(i + r) * n + o..(i + r) * n + o + NR];
                    for cc in 0..NR {
                        cr[cc] = cr[cc] + acc[r][cc];
                    }
                }
            } else {
                for r in 0..ih {
                    for kk in 0..k {
                        let av = a[(i + r) * k + kk];
                        let br = &b[kk * n + o..kk * n + o + ow];
                        let cr = &mut c[(i + r) * n + o..(i + r) * n + o + ow];
                        for cc in 0..ow {
                            cr[cc] = av.mul_add(br[cc], cr[cc]);
                        }
                    }
                }
            }
            o += NR;
        }
        i += MR;
    }
}

macro_rules! gemm_arch {
    ($fn64:ident, $fn32:ident, $fn16:ident, $feat:literal) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = $feat)]
        unsafe fn $fn64<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
            gemm_tile::<S, 64>(a, b, c, m, k, n)
        }
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = $feat)]
        unsafe fn $fn32<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
            gemm_tile::<S, 32>(a, b, c, m, k, n)
        }
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = $feat)]
        unsafe fn $fn16<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
            gemm_tile::<S, 16>(a, b, c, m, k, n)
        }
    };
}

gemm_arch!(gemm_avx512_64, gemm_avx512_32, gemm_avx512_16, "avx512f");
gemm_arch!(gemm_avx2_64, gemm_avx2_32, gemm_avx2_16, "avx2,fma");

/// C[m,n] += A[m,k] @ B[k,n]. All row-major, fully accumulating.
pub fn gemm_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let level = simd_level();
    #[cfg(target_arch = "x86_64")]
    {
        match level {
            SimdLevel::Avx512 => unsafe {
                if n >= 64 {
                    return gemm_avx512_64(a, b, c, m, k, n);
                } else if n >= 32 {
                    return gemm_avx512_32(a, b, c, m, k, n);
                } else {
                    return gemm_avx512_16(a, b, c, m, k, n);
                }
            },
            SimdLevel::Avx2 => unsafe {
                if n >= 64 {
                    return gemm_avx2_64(a, b, c, m, k, n);
                } else if n >= 32 {
                    return gemm_avx2_32(a, b, c, m, k, n);
                } else {
                    return gemm_avx2_16(a, b, c, m, k, n);
                }
            },
            SimdLevel::Portable => {}
        }
    }
    let _ = level;
    if n >= 32 {
        gemm_tile::<S, 32>(a, b, c, m, k, n)
    } else {
        gemm_tile::<S, 16>(a, b, c, m, k, n)
    }
}

/// C[k,n] += A^T @ B for row-major A[m,k], B[m,n]: a rank-1 update per
/// row of A, keeping C hot. Preferable when C is small and m is large.
#[inline(always)]
fn gemm_tn_impl<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for (k1, &av) in ar.iter().enumerate() {
            let cr = &mut c[k1 * n..(k1 + 1) * n];
            for (cv, &bv) in cr.iter_mut().zip(br) {
                *cv = av.mul_add(bv, *cv);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_tn_avx512<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    gemm_tn_impl(a, b, c, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_tn_avx2<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    gemm_tn_impl(a, b, c, m, k, n)
}

/// C[k,n] += A^T[k,m] @ B[m,n] without materializing A^T.
pub fn gemm_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    match simd_level() {
        SimdLevel::Avx512 => return unsafe { gemm_tn_avx512(a, b, c, m, k, n) },
        SimdLevel::Avx2 => return unsafe { gemm_tn_avx2(a, b, c, m, k, n) },
        SimdLevel::Portable => {}
    }
    gemm_tn_impl(a, b, c, m, k, n)
}

/// C[m,n] = A[m,k] @ B[k,n].
pub fn gemm<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    c[..m * n].iter_mut().for_each(|v| *v = S::ZERO);
    gemm_acc(a, b, c, m, k, n);
}

/// out[cols,rows] = a[rows,cols]^T, into a caller-provided buffer.
pub fn transpose_into<S: Scalar>(a: &[S], rows: usize, cols: usize, out: &mut [S]) {
    debug_assert!(a.len() >= rows * cols && out.len() >= rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// y += alpha * x
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::ZERO; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            acc[l] = acc[l] + a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut s = S::ZERO;
    for l in 0..8 {
        s = s + acc[l];
    }
    for i in chunks * 8..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

// ---------------------------------------------------------------------------
// fast transcendental slices
// ---------------------------------------------------------------------------

/// Elementwise transcendental slices. f32 runs vectorizable polynomial
/// approximations (~1e-6 relative error) under SIMD dispatch; f64 stays on
/// libm for gradient-check accuracy.
pub trait ExpSlice: Scalar {
    fn exp_slice(xs: &mut [Self]);
    /// x <- exp(x - shift), fused.
    fn exp_sub_slice(xs: &mut [Self], shift: Self) {
        for x in xs.iter_mut() {
            *x = *x - shift;
        }
        Self::exp_slice(xs);
    }
    /// x <- gelu(x), tanh form.
    fn gelu_slice(xs: &mut [Self]);
    /// dv <- dv * gelu'(pre)
    fn gelu_prime_mul(pre: &[Self], dv: &mut [Self]);
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

impl ExpSlice for f64 {
    fn exp_slice(xs: &mut [f64]) {
        for x in xs.iter_mut() {
            *x = x.exp();
        }
    }

    fn gelu_slice(xs: &mut [f64]) {
        for x in xs.iter_mut() {
            let u = GELU_C * (*x + GELU_A * *x * *x * *x);
            *x = 0.5 * *x * (1.0 + u.tanh());
        }
    }

    fn gelu_prime_mul(pre: &[f64], dv: &mut [f64]) {
        for (d, &x) in dv.iter_mut().zip(pre) {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        }
    }
}

#[inline(always)]
fn exp_slice_f32_impl(xs: &mut [f32]) {
    for x in xs.iter_mut() {
        *x = fast_exp_f32(*x);
    }
}

#[inline(always)]
fn exp_sub_slice_f32_impl(xs: &mut [f32], shift: f32) {
    for x in xs.iter_mut() {
        *x = fast_exp_f32(*x - shift);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512dq,avx512vl")]
unsafe fn exp_sub_f32_avx512(xs: &mut [f32], shift: f32) {
    exp_sub_slice_f32_impl(xs, shift)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn exp_sub_f32_avx2(xs: &mut [f32], shift: f32) {
    exp_sub_slice_f32_impl(xs, shift)
}

/// Branch-free tanh via the exp polynomial; saturates smoothly at |y| >= 9.
#[inline(always)]
fn fast_tanh_f32(y: f32) -> f32 {
    let yc = y.clamp(-9.0, 9.0);
    let e2 = fast_exp_f32(2.0 * yc);
    (e2 - 1.0) / (e2 + 1.0)
}

#[inline(always)]
fn gelu_slice_f32_impl(xs: &mut [f32]) {
    const C: f32 = GELU_C as f32;
    const A: f32 = GELU_A as f32;
    for x in xs.iter_mut() {
        let v = *x;
        let u = C * (v + A * v * v * v);
        *x = 0.5 * v * (1.0 + fast_tanh_f32(u));
    }
}

#[inline(always)]
fn gelu_prime_mul_f32_impl(pre: &[f32], dv: &mut [f32]) {
    const C: f32 = GELU_C as f32;
    const A: f32 = GELU_A as f32;
    for (d, &x) in dv.iter_mut().zip(pre) {
        let u = C * (x + A * x * x * x);
        let t = fast_tanh_f32(u);
        let du = C * (1.0 + 3.0 * A * x * x);
        *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    }
}

macro_rules! slice_arch {
    ($exp:ident, $gelu:ident, $gelup:ident, $feat:literal) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = $feat)]
        unsafe fn $exp(xs: &mut [f32]) {
            exp_slice_f32_impl(xs)
        }
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = $feat)]
        unsafe fn $gelu(xs: &mut [f32]) {
            gelu_slice_f32_impl(xs)
        }
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = $feat)]
        unsafe fn $gelup(pre: &[f32], dv: &mut [f32]) {
            gelu_prime_mul_f32_impl(pre, dv)
        }
    };
}

slice_arch!(exp_f32_avx512, gelu_f32_avx512, gelup_f32_avx512, "avx512f,avx512dq,avx512vl");
slice_arch!(exp_f32_avx2, gelu_f32_avx2, gelup_f32_avx2, "avx2,fma");

impl ExpSlice for f32 {
    fn exp_slice(xs: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        match simd_level() {
            SimdLevel::Avx512 => return unsafe { exp_f32_avx512(xs) },
            SimdLevel::Avx2 => return unsafe { exp_f32_avx2(xs) },
            SimdLevel::Portable => {}
        }
        exp_slice_f32_impl(xs)
    }

    fn exp_sub_slice(xs: &mut [f32], shift: f32) {
        #[cfg(target_arch = "x86_64")]
        match simd_level() {
            SimdLevel::Avx512 => return unsafe { exp_sub_f32_avx512(xs, shift) },
            SimdLevel::Avx2 => return unsafe { exp_sub_f32_avx2(xs, shift) },
            SimdLevel::Portable => {}
        }
        exp_sub_slice_f32_impl(xs, shift)
    }

    fn gelu_slice(xs: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        match simd_level() {
            SimdLevel::Avx512 => return unsafe { gelu_f32_avx512(xs) },
            SimdLevel::Avx2 => return unsafe { gelu_f32_avx2(xs) },
            SimdLevel::Portable => {}
        }
        gelu_slice_f32_impl(xs)
    }

    fn gelu_prime_mul(pre: &[f32], dv: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        match simd_level() {
            SimdLevel::Avx512 => return unsafe { gelup_f32_avx512(pre, dv) },
            SimdLevel::Avx2 => return unsafe { gelup_f32_avx2(pre, dv) },
            SimdLevel::Portable => {}
        }
        gelu_prime_mul_f32_impl(pre, dv)
    }
}

/// exp(x) = 2^(x*log2(e)); 2^f by degree-5 minimax on [-0.5,0.5], scale by 2^n.
#[inline(always)]
fn fast_exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    let x = x.clamp(-87.0, 88.0);
    let t = x * LOG2E;
    let n = t.round();
    let f = t - n;
    // 2^f for f in [-0.5, 0.5]
    const C0: f32 = 1.000_000_0;
    const C1: f32 = 0.693_147_2;
    const C2: f32 = 0.240_226_51;
    const C3: f32 = 0.055_504_11;
    const C4: f32 = 0.009_618_13;
    const C5: f32 = 0.001_333_55;
    const C6: f32 = 0.000_154_04;
    let p = C6
        .mul_add(f, C5)
        .mul_add(f, C4)
        .mul_add(f, C3)
        .mul_add(f, C2)
        .mul_add(f, C1)
        .mul_add(f, C0);
    let bits = ((n as i32 + 127) as u32) << 23;
    p * f32::from_bits(bits)
}

/// tanh built on `exp_slice`-compatible scalar exp.
#[inline(always)]
pub fn tanh_via_exp<S: ExpSlice>(x: S) -> S {
    let two = S::from_f64(2.0);
    let xa = x.to_f64s();
    if xa > 9.0 {
        return S::ONE;
    }
    if xa < -9.0 {
        return -S::ONE;
    }
    let mut buf = [two * x];
    S::exp_slice(&mut buf);
    let e2x = buf[0];
    (e2x - S::ONE) / (e2x + S::ONE)
}

// ---------------------------------------------------------------------------
// softmax / layernorm
// ---------------------------------------------------------------------------

/// In-place softmax over each row of a [rows, cols] buffer.
pub fn softmax_rows<S: ExpSlice>(x: &mut [S], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        // lane-parallel max and sum so the reductions vectorize
        let mut mx = [row[0]; 8];
        let chunks = cols / 8;
        for c in 0..chunks {
            for l in 0..8 {
                let v = row[c * 8 + l];
                if v > mx[l] {
                    mx[l] = v;
                }
            }
        }
        let mut max = mx[0];
        for l in 1..8 {
            if mx[l] > max {
                max = mx[l];
            }
        }
        for &v in &row[chunks * 8..] {
            if v > max {
                max = v;
            }
        }
        S::exp_sub_slice(row, max);
        let mut acc = [S::ZERO; 8];
        for c in 0..chunks {
            for l in 0..8 {
                acc[l] = acc[l] + row[c * 8 + l];
            }
        }
        let mut sum = S::ZERO;
        for l in 0..8 {
            sum = sum + acc[l];
        }
        for &v in &row[chunks * 8..] {
            sum = sum + v;
        }
        let inv = S::ONE / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Backward of row softmax: given s = softmax(z) and ds, computes dz in place
/// (overwrites ds). dz = s * (ds - sum(ds * s)).
pub fn softmax_rows_backward<S: Scalar>(s: &[S], ds: &mut [S], rows: usize, cols: usize) {
    for r in 0..rows {
        let srow = &s[r * cols..(r + 1) * cols];
        let drow = &mut ds[r * cols..(r + 1) * cols];
        let mut acc = [S::ZERO; 8];
        let chunks = cols / 8;
        for c in 0..chunks {
            for l in 0..8 {
                acc[l] = acc[l] + srow[c * 8 + l] * drow[c * 8 + l];
            }
        }
        let mut tot = S::ZERO;
        for l in 0..8 {
            tot = tot + acc[l];
        }
        for c in chunks * 8..cols {
            tot = tot + srow[c] * drow[c];
        }
        for c in 0..cols {
            drow[c] = srow[c] * (drow[c] - tot);
        }
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Layer norm without affine params. Writes normalized rows to `out` and
/// per-row (mean, rstd) to the stat buffers.
pub fn layernorm_rows<S: Scalar>(
    x: &[S],
    rows: usize,
    cols: usize,
    out: &mut [S],
    mean: &mut [S],
    rstd: &mut [S],
) {
    let inv_n = S::from_f64(1.0 / cols as f64);
    let eps = S::from_f64(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let mut mu = S::ZERO;
        for &v in xr {
            mu = mu + v;
        }
        mu = mu * inv_n;
        let mut var = S::ZERO;
        for &v in xr {
            let d = v - mu;
            var = var + d * d;
        }
        var = var * inv_n;
        let rs = S::ONE / (var + eps).sqrt();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - mu) * rs;
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
}

/// Backward of `layernorm_rows`: accumulates dx += J^T dy using cached stats.
pub fn layernorm_rows_backward<S: Scalar>(
    x: &[S],
    mean: &[S],
    rstd: &[S],
    dy: &[S],
    rows: usize,
    cols: usize,
    dx: &mut [S],
) {
    let inv_n = S::from_f64(1.0 / cols as f64);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let dxr = &mut dx[r * cols..(r + 1) * cols];
        let mu = mean[r];
        let rs = rstd[r];
        // xhat = (x - mu) * rs
        let mut sum_dy = S::ZERO;
        let mut sum_dy_xhat = S::ZERO;
        for c in 0..cols {
            let xhat = (xr[c] - mu) * rs;
            sum_dy = sum_dy + dyr[c];
            sum_dy_xhat = sum_dy_xhat + xhat * dyr[c];
        }
        let a = sum_dy * inv_n;
        let b = sum_dy_xhat * inv_n;
        for c in 0..cols {
            let xhat = (xr[c] - mu) * rs;
            dxr[c] = dxr[c] + rs * (dyr[c] - a - xhat * b);
        }
    }
}
