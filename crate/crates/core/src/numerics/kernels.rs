//! Dense kernels behind the heavier graph ops: GEMM, 3D convolution,
//! average pooling and trilinear upsampling.
//!
//! Volumes are channel-major `[C, H, W, Z]` with `Z` contiguous.

/// `c = a · b + beta · c` with explicit row/column strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a_strides;
    let (rsb, csb) = b_strides;
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: bounds of every strided access were asserted above and `c`
    // does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub ks: usize,
    pub dims: [usize; 3],
}

impl ConvGeom {
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn patch(&self) -> usize {
        self.cin * self.ks * self.ks * self.ks
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k` with
/// "same" padding `pad`.
#[inline]
fn tap_range(len: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

fn for_each_tap(geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let ks = geom.ks;
    let pad = ks / 2;
    let [h, w, z] = geom.dims;
    let n = geom.voxels();
    for ci in 0..geom.cin {
        for kx in 0..ks {
            let (xlo, xhi) = tap_range(h, kx, pad);
            for ky in 0..ks {
                let (ylo, yhi) = tap_range(w, ky, pad);
                for kz in 0..ks {
                    let (zlo, zhi) = tap_range(z, kz, pad);
                    if zlo >= zhi {
                        continue;
                    }
                    let row = ((ci * ks + kx) * ks + ky) * ks + kz;
                    for x in xlo..xhi {
                        let sx = x + kx - pad;
                        for y in ylo..yhi {
                            let sy = y + ky - pad;
                            let dst = row * n + (x * w + y) * z + zlo;
                            let src = ci * n + (sx * w + sy) * z + zlo + kz - pad;
                            f(dst, src, zhi - zlo);
                        }
                    }
                }
            }
        }
    }
}

fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    // every element is written exactly once, in order, so no zero-fill
    let ks = geom.ks;
    let pad = ks / 2;
    let [h, w, z] = geom.dims;
    let mut col = Vec::with_capacity(geom.patch() * geom.voxels());
    for ci in 0..geom.cin {
        for kx in 0..ks {
            for ky in 0..ks {
                for kz in 0..ks {
                    let (zlo, zhi) = tap_range(z, kz, pad);
                    for xo in 0..h {
                        let sx = (xo + kx).checked_sub(pad).filter(|&v| v < h);
                        for yo in 0..w {
                            let sy = (yo + ky).checked_sub(pad).filter(|&v| v < w);
                            match (sx, sy) {
                                (Some(sx), Some(sy)) if zlo < zhi => {
                                    let src = ci * h * w * z + (sx * w + sy) * z + zlo + kz - pad;
                                    col.resize(col.len() + zlo, 0.0);
                                    col.extend_from_slice(&x[src..src + zhi - zlo]);
                                    col.resize(col.len() + z - zhi, 0.0);
                                }
                                _ => col.resize(col.len() + z, 0.0),
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_acc(col: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    for_each_tap(geom, |dst, src, len| {
        for (o, c) in dx[src..src + len].iter_mut().zip(&col[dst..dst + len]) {
            *o += c;
        }
    });
}

// Direct kernels: the input is zero-padded and flattened so that every tap
// becomes a constant shift. Output voxel (x, y, z) sits at
// `j = x·plane + y·zp + z` and tap (c, kx, ky, kz) reads `j + off`. Flat
// positions that fall on padding are computed and then dropped.

/// Flat output columns per micro-tile; flat buffers are padded to a multiple.
const NJ: usize = 8;

#[derive(Debug, Clone, Copy)]
struct Padded {
    pad: usize,
    zp: usize,
    plane: usize,
    vol: usize,
    /// Flat output length rounded up to `NJ`.
    len: usize,
}

impl Padded {
    fn new(geom: &ConvGeom) -> Self {
        let pad = geom.ks / 2;
        let [h, w, z] = geom.dims;
        let (wp, zp) = (w + 2 * pad, z + 2 * pad);
        let plane = wp * zp;
        let span = (h - 1) * plane + (w - 1) * zp + z;
        Self { pad, zp, plane, vol: (h + 2 * pad) * plane, len: span.div_ceil(NJ) * NJ }
    }

    /// Zero-padded copy of a `[c, H, W, Z]` volume with `NJ` zeros of slack.
    fn pad(&self, x: &[f64], c: usize, dims: [usize; 3]) -> Vec<f64> {
        let [h, w, z] = dims;
        let mut out = vec![0.0; c * self.vol + NJ];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let src = ((ch * h + i) * w + j) * z;
                    let dst = ch * self.vol + (i + self.pad) * self.plane + (j + self.pad) * self.zp + self.pad;
                    out[dst..dst + z].copy_from_slice(&x[src..src + z]);
                }
            }
        }
        out
    }

    /// Shift of every (channel, kx, ky, kz) tap, in weight order.
    fn offsets(&self, c: usize, ks: usize) -> Vec<usize> {
        let mut offs = Vec::with_capacity(c * ks * ks * ks);
        for ch in 0..c {
            for kx in 0..ks {
                for ky in 0..ks {
                    for kz in 0..ks {
                        offs.push(ch * self.vol + kx * self.plane + ky * self.zp + kz);
                    }
                }
            }
        }
        offs
    }

    /// Flat `[rows, len]` buffer holding a `[m, H, W, Z]` volume, padding
    /// positions zero.
    fn flatten(&self, x: &[f64], m: usize, rows: usize, dims: [usize; 3]) -> Vec<f64> {
        let [h, w, z] = dims;
        let mut out = vec![0.0; rows * self.len];
        for o in 0..m {
            for i in 0..h {
                for j in 0..w {
                    let src = ((o * h + i) * w + j) * z;
                    let dst = o * self.len + i * self.plane + j * self.zp;
                    out[dst..dst + z].copy_from_slice(&x[src..src + z]);
                }
            }
        }
        out
    }

    fn unflatten(&self, flat: &[f64], m: usize, dims: [usize; 3]) -> Vec<f64> {
        let [h, w, z] = dims;
        let mut out = Vec::with_capacity(m * h * w * z);
        for o in 0..m {
            for i in 0..h {
                for j in 0..w {
                    let src = o * self.len + i * self.plane + j * self.zp;
                    out.extend_from_slice(&flat[src..src + z]);
                }
            }
        }
        out
    }
}

#[cfg(target_arch = "x86_64")]
fn has_fma() -> bool {
    std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
}

/// `out[o, j] = Σ_k w[o, k] · src[offs[k] + j]` for `o < m`, `j < len`.
/// Every product is fused (`mul_add`), so results do not depend on the
/// instruction set; only speed does.
fn shifted_gemm(w: &[f64], m: usize, offs: &[usize], src: &[f64], len: usize) -> Vec<f64> {
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { avx::shifted_gemm(w, m, offs, src, len) };
    }
    shifted_gemm_impl(w, m, offs, src, len)
}

fn shifted_gemm_impl(w: &[f64], m: usize, offs: &[usize], src: &[f64], len: usize) -> Vec<f64> {
    const MO: usize = 4;
    let kk = offs.len();
    debug_assert_eq!(len % NJ, 0);
    assert!(offs.iter().all(|&o| o + len <= src.len()));
    let mut out = vec![0.0; m * len];
    let mut wt = vec![0.0; kk * MO];
    for o0 in (0..m).step_by(MO) {
        let mo = (m - o0).min(MO);
        for k in 0..kk {
            for r in 0..MO {
                wt[k * MO + r] = if r < mo { w[(o0 + r) * kk + k] } else { 0.0 };
            }
        }
        for j0 in (0..len).step_by(NJ) {
            let mut acc = [[0.0f64; NJ]; MO];
            for (k, &off) in offs.iter().enumerate() {
                let s: &[f64; NJ] = src[off + j0..off + j0 + NJ].try_into().unwrap();
                let wk: &[f64; MO] = wt[k * MO..k * MO + MO].try_into().unwrap();
                for r in 0..MO {
                    for l in 0..NJ {
                        acc[r][l] = wk[r].mul_add(s[l], acc[r][l]);
                    }
                }
            }
            for (r, a) in acc.iter().enumerate().take(mo) {
                out[(o0 + r) * len + j0..(o0 + r) * len + j0 + NJ].copy_from_slice(a);
            }
        }
    }
    out
}

/// `r[o, k] = Σ_j a[o, j] · src[offs[k] + j]`; `a` is `[⌈m/4⌉·4, len]`.
fn shifted_gemm_nt(a: &[f64], m: usize, len: usize, offs: &[usize], src: &[f64]) -> Vec<f64> {
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { avx::shifted_gemm_nt(a, m, len, offs, src) };
    }
    shifted_gemm_nt_impl(a, m, len, offs, src)
}

fn shifted_gemm_nt_impl(a: &[f64], m: usize, len: usize, offs: &[usize], src: &[f64]) -> Vec<f64> {
    const MO: usize = 4;
    const KB: usize = 2;
    const L: usize = 4;
    let kk = offs.len();
    debug_assert_eq!(len % L, 0);
    assert!(a.len() >= m.div_ceil(MO) * MO * len);
    assert!(offs.iter().all(|&o| o + len <= src.len()));
    let mut out = vec![0.0; m * kk];
    for o0 in (0..m).step_by(MO) {
        for k0 in (0..kk).step_by(KB) {
            let ks: [usize; KB] = std::array::from_fn(|c| offs[(k0 + c).min(kk - 1)]);
            let mut acc = [[[0.0f64; L]; KB]; MO];
            for j0 in (0..len).step_by(L) {
                let av: [&[f64; L]; MO] = std::array::from_fn(|r| {
                    let at = (o0 + r) * len + j0;
                    a[at..at + L].try_into().unwrap()
                });
                let sv: [&[f64; L]; KB] = std::array::from_fn(|c| src[ks[c] + j0..ks[c] + j0 + L].try_into().unwrap());
                for r in 0..MO {
                    for c in 0..KB {
                        for l in 0..L {
                            acc[r][c][l] = av[r][l].mul_add(sv[c][l], acc[r][c][l]);
                        }
                    }
                }
            }
            for (r, row) in acc.iter().enumerate().take((m - o0).min(MO)) {
                for (c, lanes) in row.iter().enumerate().take((kk - k0).min(KB)) {
                    out[(o0 + r) * kk + k0 + c] = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
                }
            }
        }
    }
    out
}

/// AVX2/FMA builds of the shifted kernels. They perform exactly the same
/// fused operations in the same order as the portable versions.
#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;

    use super::NJ;

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn shifted_gemm_nt(a: &[f64], m: usize, len: usize, offs: &[usize], src: &[f64]) -> Vec<f64> {
        const MO: usize = 4;
        let kk = offs.len();
        assert_eq!(len % 4, 0);
        assert!(a.len() >= m.div_ceil(MO) * MO * len);
        assert!(offs.iter().all(|&o| o + len <= src.len()));
        let mut out = vec![0.0; m * kk];
        let lanes = |v: __m256d| {
            let mut l = [0.0; 4];
            // SAFETY: `l` holds exactly 4 values.
            unsafe { _mm256_storeu_pd(l.as_mut_ptr(), v) };
            (l[0] + l[1]) + (l[2] + l[3])
        };
        for o0 in (0..m).step_by(MO) {
            // SAFETY (all loads below): rows o0..o0+4 lie within a.len() and
            // every tap read ends at off + len <= src.len(), asserted above.
            let (a0, a1, a2, a3) = unsafe {
                let p = a.as_ptr().add(o0 * len);
                (p, p.add(len), p.add(2 * len), p.add(3 * len))
            };
            for k0 in (0..kk).step_by(2) {
                let s0 = unsafe { src.as_ptr().add(offs[k0]) };
                let s1 = unsafe { src.as_ptr().add(offs[(k0 + 1).min(kk - 1)]) };
                let mut acc = [_mm256_setzero_pd(); 8];
                let mut j = 0;
                while j < len {
                    unsafe {
                        let (x0, x1) = (_mm256_loadu_pd(s0.add(j)), _mm256_loadu_pd(s1.add(j)));
                        let g = _mm256_loadu_pd(a0.add(j));
                        acc[0] = _mm256_fmadd_pd(g, x0, acc[0]);
                        acc[1] = _mm256_fmadd_pd(g, x1, acc[1]);
                        let g = _mm256_loadu_pd(a1.add(j));
                        acc[2] = _mm256_fmadd_pd(g, x0, acc[2]);
                        acc[3] = _mm256_fmadd_pd(g, x1, acc[3]);
                        let g = _mm256_loadu_pd(a2.add(j));
                        acc[4] = _mm256_fmadd_pd(g, x0, acc[4]);
                        acc[5] = _mm256_fmadd_pd(g, x1, acc[5]);
                        let g = _mm256_loadu_pd(a3.add(j));
                        acc[6] = _mm256_fmadd_pd(g, x0, acc[6]);
                        acc[7] = _mm256_fmadd_pd(g, x1, acc[7]);
                    }
                    j += 4;
                }
                for r in 0..(m - o0).min(MO) {
                    for c in 0..(kk - k0).min(2) {
                        out[(o0 + r) * kk + k0 + c] = lanes(acc[2 * r + c]);
                    }
                }
            }
        }
        out
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn shifted_gemm(w: &[f64], m: usize, offs: &[usize], src: &[f64], len: usize) -> Vec<f64> {
        const MO: usize = 4;
        let kk = offs.len();
        assert_eq!(len % NJ, 0);
        assert!(w.len() >= m * kk);
        assert!(offs.iter().all(|&o| o + len <= src.len()));
        let mut out = vec![0.0; m * len];
        let mut wt = vec![0.0; kk * MO];
        let sp = src.as_ptr();
        for o0 in (0..m).step_by(MO) {
            let mo = (m - o0).min(MO);
            for k in 0..kk {
                for r in 0..MO {
                    wt[k * MO + r] = if r < mo { w[(o0 + r) * kk + k] } else { 0.0 };
                }
            }
            for j0 in (0..len).step_by(NJ) {
                let mut acc = [[_mm256_setzero_pd(); 2]; MO];
                for (k, &off) in offs.iter().enumerate() {
                    // SAFETY: off + j0 + NJ <= len + off <= src.len(), asserted above.
                    let (s0, s1) = unsafe { (_mm256_loadu_pd(sp.add(off + j0)), _mm256_loadu_pd(sp.add(off + j0 + 4))) };
                    for (r, a) in acc.iter_mut().enumerate() {
                        let wr = _mm256_set1_pd(wt[k * MO + r]);
                        a[0] = _mm256_fmadd_pd(wr, s0, a[0]);
                        a[1] = _mm256_fmadd_pd(wr, s1, a[1]);
                    }
                }
                for (r, a) in acc.iter().enumerate().take(mo) {
                    let at = (o0 + r) * len + j0;
                    let dst = &mut out[at..at + NJ];
                    // SAFETY: `dst` holds exactly 8 values.
                    unsafe {
                        _mm256_storeu_pd(dst.as_mut_ptr(), a[0]);
                        _mm256_storeu_pd(dst.as_mut_ptr().add(4), a[1]);
                    }
                }
            }
        }
        out
    }
}

/// Whether a k > 1 convolution runs on the shifted direct kernels rather than
/// im2col + GEMM. GEMM packing costs about as much as the multiply itself
/// when the output side has few channels, while the direct kernels pay for
/// the padding columns they compute and drop, which dominates on small
/// volumes.
fn prefer_direct(geom: &ConvGeom) -> bool {
    geom.cout <= 8 && geom.dims.iter().all(|&d| d >= 8)
}

pub(crate) fn conv3d_forward(x: &[f64], weight: &[f64], bias: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let n = geom.voxels();
    let patch = geom.patch();
    let mut out = if geom.ks > 1 && prefer_direct(geom) {
        let p = Padded::new(geom);
        let xp = p.pad(x, geom.cin, geom.dims);
        let flat = shifted_gemm(weight, geom.cout, &p.offsets(geom.cin, geom.ks), &xp, p.len);
        p.unflatten(&flat, geom.cout, geom.dims)
    } else {
        let mut out = vec![0.0; geom.cout * n];
        if geom.ks == 1 {
            gemm(geom.cout, patch, n, weight, (patch, 1), x, (n, 1), 0.0, &mut out);
        } else {
            gemm(geom.cout, patch, n, weight, (patch, 1), &im2col(x, geom), (n, 1), 0.0, &mut out);
        }
        out
    };
    for (o, b) in bias.iter().enumerate() {
        out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += b);
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`; each only when requested.
pub(crate) fn conv3d_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    geom: &ConvGeom,
    want: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let n = geom.voxels();
    let patch = geom.patch();
    let (cin, cout, ks) = (geom.cin, geom.cout, geom.ks);
    let db = want.2.then(|| (0..cout).map(|o| grad_out[o * n..(o + 1) * n].iter().sum()).collect());
    let direct = ks > 1 && prefer_direct(geom);
    let p = Padded::new(geom);

    let dw = want.1.then(|| {
        if direct {
            // dW[o, (c, k)] = Σ_j dOut[o, j] · xpad[c, j + k]
            let g = p.flatten(grad_out, cout, cout.div_ceil(4) * 4, geom.dims);
            return shifted_gemm_nt(&g, cout, p.len, &p.offsets(cin, ks), &p.pad(x, cin, geom.dims));
        }
        let owned;
        let col: &[f64] = if ks == 1 {
            x
        } else {
            owned = im2col(x, geom);
            &owned
        };
        let mut dw = vec![0.0; cout * patch];
        // dW[cout, patch] = dOut[cout, n] · colᵀ[n, patch]
        gemm(cout, n, patch, grad_out, (n, 1), col, (1, n), 0.0, &mut dw);
        dw
    });

    let dx = want.0.then(|| {
        // The direct kernel computes the `cin` rows in blocks of 4.
        if direct && cin >= 4 {
            // dX is the same-padded correlation of dOut with the flipped,
            // transposed kernel.
            let taps = ks * ks * ks;
            let mut wt = vec![0.0; cin * cout * taps];
            for o in 0..cout {
                for c in 0..cin {
                    for t in 0..taps {
                        wt[(c * cout + o) * taps + taps - 1 - t] = weight[(o * cin + c) * taps + t];
                    }
                }
            }
            let gp = p.pad(grad_out, cout, geom.dims);
            let flat = shifted_gemm(&wt, cin, &p.offsets(cout, ks), &gp, p.len);
            return p.unflatten(&flat, cin, geom.dims);
        }
        // dcol[patch, n] = Wᵀ[patch, cout] · dOut[cout, n]
        let mut dcol = vec![0.0; patch * n];
        gemm(patch, cout, n, weight, (1, patch), grad_out, (n, 1), 0.0, &mut dcol);
        if ks == 1 {
            return dcol;
        }
        let mut dx = vec![0.0; cin * n];
        col2im_acc(&dcol, geom, &mut dx);
        dx
    });

    (dx, dw, db)
}

pub(crate) fn avg_pool2_forward(x: &[f64], channels: usize, dims: [usize; 3]) -> Vec<f64> {
    let [h, w, z] = dims;
    let (oh, ow, oz) = (h / 2, w / 2, z / 2);
    let mut out = vec![0.0; channels * oh * ow * oz];
    for c in 0..channels {
        let src = &x[c * h * w * z..(c + 1) * h * w * z];
        let dst = &mut out[c * oh * ow * oz..(c + 1) * oh * ow * oz];
        for i in 0..oh {
            for j in 0..ow {
                for k in 0..oz {
                    let mut s = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let base = ((2 * i + di) * w + 2 * j + dj) * z + 2 * k;
                            s += src[base] + src[base + 1];
                        }
                    }
                    dst[(i * ow + j) * oz + k] = s * 0.125;
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(g: &[f64], channels: usize, dims: [usize; 3]) -> Vec<f64> {
    let [h, w, z] = dims;
    let (oh, ow, oz) = (h / 2, w / 2, z / 2);
    let mut dx = vec![0.0; channels * h * w * z];
    for c in 0..channels {
        let gs = &g[c * oh * ow * oz..(c + 1) * oh * ow * oz];
        let dst = &mut dx[c * h * w * z..(c + 1) * h * w * z];
        for i in 0..oh {
            for j in 0..ow {
                for k in 0..oz {
                    let v = gs[(i * ow + j) * oz + k] * 0.125;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let base = ((2 * i + di) * w + 2 * j + dj) * z + 2 * k;
                            dst[base] += v;
                            dst[base + 1] += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Linear interpolation taps for doubling an axis of length `n`
/// (half-pixel centers, edge-clamped).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

/// Resamples axis `axis` (0..3) of a `[C, d0, d1, d2]` volume with `taps`.
/// `forward` applies the interpolation; otherwise its transpose.
fn resample_axis(
    x: &[f64],
    channels: usize,
    dims: [usize; 3],
    axis: usize,
    taps: &[(usize, usize, f64, f64)],
    forward: bool,
) -> (Vec<f64>, [usize; 3]) {
    let (in_len, out_len) = if forward { (taps.len() / 2, taps.len()) } else { (taps.len(), taps.len() / 2) };
    debug_assert_eq!(dims[axis], in_len);
    let mut out_dims = dims;
    out_dims[axis] = out_len;
    let outer: usize = channels * dims[..axis].iter().product::<usize>();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * out_len * inner];
    for o in 0..outer {
        let src = &x[o * in_len * inner..(o + 1) * in_len * inner];
        let dst = &mut out[o * out_len * inner..(o + 1) * out_len * inner];
        if inner == 1 {
            for (t, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
                if forward {
                    dst[t] = w0 * src[i0] + w1 * src[i1];
                } else {
                    dst[i0] += w0 * src[t];
                    dst[i1] += w1 * src[t];
                }
            }
            continue;
        }
        for (t, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            if forward {
                let d = &mut dst[t * inner..(t + 1) * inner];
                let a = &src[i0 * inner..(i0 + 1) * inner];
                let b = &src[i1 * inner..(i1 + 1) * inner];
                for ((d, a), b) in d.iter_mut().zip(a).zip(b) {
                    *d = w0 * a + w1 * b;
                }
            } else {
                let g = &src[t * inner..(t + 1) * inner];
                for (j, &gv) in g.iter().enumerate() {
                    dst[i0 * inner + j] += w0 * gv;
                    dst[i1 * inner + j] += w1 * gv;
                }
            }
        }
    }
    (out, out_dims)
}

pub(crate) fn upsample2_forward(x: &[f64], channels: usize, dims: [usize; 3]) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut d = dims;
    for axis in 0..3 {
        let taps = upsample_taps(dims[axis]);
        let (next, nd) = resample_axis(&cur, channels, d, axis, &taps, true);
        cur = next;
        d = nd;
    }
    cur
}

/// `dims` are the *input* (low-resolution) dims of the forward pass.
pub(crate) fn upsample2_backward(g: &[f64], channels: usize, dims: [usize; 3]) -> Vec<f64> {
    let mut cur = g.to_vec();
    let mut d = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
    for axis in (0..3).rev() {
        let taps = upsample_taps(dims[axis]);
        let (next, nd) = resample_axis(&cur, channels, d, axis, &taps, false);
        cur = next;
        d = nd;
    }
    cur
}
