//! Low-level numeric kernels shared by forward and backward passes.

/// Row-major GEMM: `c = alpha * op(a) * op(b) + beta * c`, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`. `a` is stored as `m x k` (or `k x m` when
/// `trans_a`), likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k);
    debug_assert!(b.len() >= k * n);
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements checked by the debug assertions.
    unsafe {
        matrixmultiply::dgemm(
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
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.ph;
        let wp = w + 2 * self.pw;
        if hp < self.kh || wp < self.kw || self.sh == 0 || self.sw == 0 {
            return None;
        }
        Some(((hp - self.kh) / self.sh + 1, (wp - self.kw) / self.sw + 1))
    }

    pub fn transposed_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ho = ((h.checked_sub(1)?) * self.sh + self.kh).checked_sub(2 * self.ph)?;
        let wo = ((w.checked_sub(1)?) * self.sw + self.kw).checked_sub(2 * self.pw)?;
        Some((ho, wo))
    }
}

/// Output columns `lo..hi` whose input column `ox*s + k - p` lies in `0..w`.
fn valid_cols(wo: usize, w: usize, s: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if w + p > k { (w + p - k).div_ceil(s).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds a `c x h x w` image into a `(c*kh*kw) x (ho*wo)` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let npix = ho * wo;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                let (lo, hi) = valid_cols(wo, w, g.sw, kj, g.pw);
                for oy in 0..ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    drow[..lo].fill(0.0);
                    drow[hi..].fill(0.0);
                    if lo < hi {
                        let start = lo * g.sw + kj - g.pw;
                        if g.sw == 1 {
                            drow[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (d, s) in drow[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.sw)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the image.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    ho: usize,
    wo: usize,
    img: &mut [f64],
) {
    let npix = ho * wo;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * npix..(row + 1) * npix];
                let (lo, hi) = valid_cols(wo, w, g.sw, kj, g.pw);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.sw + kj - g.pw;
                for oy in 0..ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo + lo..oy * wo + hi];
                    if g.sw == 1 {
                        for (d, s) in drow[start..start + hi - lo].iter_mut().zip(srow) {
                            *d += s;
                        }
                    } else {
                        for (d, s) in drow[start..].iter_mut().step_by(g.sw).zip(srow) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// True for a 3x3 kernel with unit stride and unit padding.
pub fn is_same3(g: &ConvGeom) -> bool {
    g.kh == 3 && g.kw == 3 && g.sh == 1 && g.sw == 1 && g.ph == 1 && g.pw == 1
}

/// Per-channel `scale * y + shift`, optionally followed by ELU, applied to a
/// convolution output as it is written.
#[derive(Clone, Copy, Debug)]
pub struct Affine<'a> {
    pub scale: &'a [f64],
    pub shift: &'a [f64],
    pub elu: bool,
}

impl Affine<'_> {
    #[inline(always)]
    fn write(&self, ch: usize, dst: &mut [f64], src: &[f64]) {
        let (a, b) = (self.scale[ch], self.shift[ch]);
        for (d, &v) in dst.iter_mut().zip(src) {
            let y = a * v + b;
            *d = if self.elu && y <= 0.0 { y.exp_m1() } else { y };
        }
    }

    /// Applies the transform in place to `channels` planes of `plane` values,
    /// repeated over the batch.
    pub fn apply(&self, data: &mut [f64], channels: usize, plane: usize) {
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let (a, b) = (self.scale[i % channels], self.shift[i % channels]);
            for v in chunk {
                let y = a * *v + b;
                *v = if self.elu && y <= 0.0 { y.exp_m1() } else { y };
            }
        }
    }
}

/// Direct 3x3 convolution with unit stride and zero padding of one, for one
/// `cin x h x w` image. `w` is `[cout, cin, 3, 3]`; `out` is `cout x h x w`
/// and is overwritten, passing through `post` when given.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_same(
    img: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    cout: usize,
    out: &mut [f64],
    post: Option<&Affine>,
) {
    let wp = w + 2;
    let hp = h + 2;
    let mut pad = vec![0.0; cin * hp * wp];
    for ci in 0..cin {
        for y in 0..h {
            let d = (ci * hp + y + 1) * wp + 1;
            pad[d..d + w].copy_from_slice(&img[(ci * h + y) * w..(ci * h + y + 1) * w]);
        }
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at run time.
            unsafe { conv3x3_avx2(&pad, cin, h, w, weights, cout, out, post) };
            return;
        }
    }
    conv3x3_padded(&pad, cin, h, w, weights, cout, out, post);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn conv3x3_avx2(
    pad: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    cout: usize,
    out: &mut [f64],
    post: Option<&Affine>,
) {
    conv3x3_padded(pad, cin, h, w, weights, cout, out, post)
}

/// Output rows are built four channels at a time so each loaded input tap
/// feeds four accumulators.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn conv3x3_padded(
    pad: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    cout: usize,
    out: &mut [f64],
    post: Option<&Affine>,
) {
    let wp = w + 2;
    let hp = h + 2;
    let mut acc = vec![0.0; 4 * w];
    for y in 0..h {
        let mut o = 0;
        while o < cout {
            let nb = (cout - o).min(4);
            acc.fill(0.0);
            for ci in 0..cin {
                let base = ci * hp * wp + y * wp;
                let r0 = &pad[base..base + wp];
                let r1 = &pad[base + wp..base + 2 * wp];
                let r2 = &pad[base + 2 * wp..base + 3 * wp];
                let tap = |b: usize| &weights[((o + b) * cin + ci) * 9..][..9];
                if nb == 4 {
                    let (k0, k1, k2, k3) = (tap(0), tap(1), tap(2), tap(3));
                    let (a0, rest) = acc.split_at_mut(w);
                    let (a1, rest) = rest.split_at_mut(w);
                    let (a2, a3) = rest.split_at_mut(w);
                    for x in 0..w {
                        let v = [
                            r0[x],
                            r0[x + 1],
                            r0[x + 2],
                            r1[x],
                            r1[x + 1],
                            r1[x + 2],
                            r2[x],
                            r2[x + 1],
                            r2[x + 2],
                        ];
                        let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
                        for j in 0..9 {
                            s0 += k0[j] * v[j];
                            s1 += k1[j] * v[j];
                            s2 += k2[j] * v[j];
                            s3 += k3[j] * v[j];
                        }
                        a0[x] += s0;
                        a1[x] += s1;
                        a2[x] += s2;
                        a3[x] += s3;
                    }
                } else {
                    for b in 0..nb {
                        let k = tap(b);
                        let a = &mut acc[b * w..(b + 1) * w];
                        for x in 0..w {
                            a[x] += k[0] * r0[x]
                                + k[1] * r0[x + 1]
                                + k[2] * r0[x + 2]
                                + k[3] * r1[x]
                                + k[4] * r1[x + 1]
                                + k[5] * r1[x + 2]
                                + k[6] * r2[x]
                                + k[7] * r2[x + 1]
                                + k[8] * r2[x + 2];
                        }
                    }
                }
            }
            for b in 0..nb {
                let d = ((o + b) * h + y) * w;
                let src = &acc[b * w..(b + 1) * w];
                match post {
                    Some(p) => p.write(o + b, &mut out[d..d + w], src),
                    None => out[d..d + w].copy_from_slice(src),
                }
            }
            o += nb;
        }
    }
}

/// `[cout, cin, 3, 3]` weights rearranged for the input gradient: the result
/// is `[cin, cout, 3, 3]` with each kernel rotated by 180 degrees.
pub fn flip_transpose3x3(weights: &[f64], cout: usize, cin: usize) -> Vec<f64> {
    let mut t = vec![0.0; weights.len()];
    for o in 0..cout {
        for i in 0..cin {
            for j in 0..9 {
                t[(i * cout + o) * 9 + 8 - j] = weights[(o * cin + i) * 9 + j];
            }
        }
    }
    t
}

/// Row-major strides for `shape`, with zero stride on broadcast axes of size 1
/// when `out` differs.
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == out[i] { acc } else { 0 };
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `out_shape`, passing the flat output index and the
/// flat indices into two broadcast operands.
pub fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let inner = out_shape[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    while o < total {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // advance outer multi-index
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
