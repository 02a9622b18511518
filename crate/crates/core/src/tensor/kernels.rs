//! Raw numeric kernels shared by the graph ops.

use rayon::prelude::*;

use super::graph::{ConvSpec, PoolSpec};

/// `c = a·b + beta·c` for row-major matrices; `ta`/`tb` read the stored
/// operand transposed (a stored as k×m, b stored as n×k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements (checked above
    // in debug builds and guaranteed by every caller), and the strides address
    // only those elements.
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

/// Output extents of a 3D convolution/pool, or `None` when non-positive.
pub(crate) fn out_extents(
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        let span = input[a] + 2 * pad[a];
        if span < kernel[a] || stride[a] == 0 {
            return None;
        }
        out[a] = (span - kernel[a]) / stride[a] + 1;
    }
    Some(out)
}

struct ConvGeom {
    cin_g: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin_g * self.k[0] * self.k[1] * self.k[2]
    }

    fn col_cols(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2]
    }

    /// Output positions `[lo, hi)` along axis `a` whose input index
    /// `z·s + k − p` falls inside the input.
    fn valid(&self, a: usize, k: usize) -> (usize, usize) {
        let (s, p, n) = (self.s[a], self.p[a], self.inp[a]);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if n + p > k { (n + p - k).div_ceil(s) } else { 0 };
        (lo.min(self.out[a]), hi.min(self.out[a]).max(lo.min(self.out[a])))
    }

    /// Fills `cols` (col_rows × col_cols) from one group's input channels.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let [d, h, w] = self.inp;
        let [_, oh, ow] = self.out;
        let ncols = self.col_cols();
        let sw = self.s[2];
        let mut row = 0;
        for c in 0..self.cin_g {
            let xc = &x[c * d * h * w..(c + 1) * d * h * w];
            for kd in 0..self.k[0] {
                let (d0, d1) = self.valid(0, kd);
                for kh in 0..self.k[1] {
                    let (h0, h1) = self.valid(1, kh);
                    for kw in 0..self.k[2] {
                        let (w0, w1) = self.valid(2, kw);
                        let dst = &mut cols[row * ncols..(row + 1) * ncols];
                        let plane = oh * ow;
                        dst[..d0 * plane].fill(0.0);
                        dst[d1 * plane..].fill(0.0);
                        for zd in d0..d1 {
                            let id = zd * self.s[0] + kd - self.p[0];
                            dst[zd * plane..zd * plane + h0 * ow].fill(0.0);
                            dst[zd * plane + h1 * ow..(zd + 1) * plane].fill(0.0);
                            for zh in h0..h1 {
                                let ih = zh * self.s[1] + kh - self.p[1];
                                let src = &xc[(id * h + ih) * w..(id * h + ih + 1) * w];
                                let o = (zd * oh + zh) * ow;
                                dst[o..o + w0].fill(0.0);
                                dst[o + w1..o + ow].fill(0.0);
                                let base = w0 * sw + kw - self.p[2];
                                for (j, v) in dst[o + w0..o + w1].iter_mut().enumerate() {
                                    *v = src[base + j * sw];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into one group's input gradient.
    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let [d, h, w] = self.inp;
        let [_, oh, ow] = self.out;
        let ncols = self.col_cols();
        let sw = self.s[2];
        let mut row = 0;
        for c in 0..self.cin_g {
            let gc = &mut gx[c * d * h * w..(c + 1) * d * h * w];
            for kd in 0..self.k[0] {
                let (d0, d1) = self.valid(0, kd);
                for kh in 0..self.k[1] {
                    let (h0, h1) = self.valid(1, kh);
                    for kw in 0..self.k[2] {
                        let (w0, w1) = self.valid(2, kw);
                        let src = &cols[row * ncols..(row + 1) * ncols];
                        for zd in d0..d1 {
                            let id = zd * self.s[0] + kd - self.p[0];
                            for zh in h0..h1 {
                                let ih = zh * self.s[1] + kh - self.p[1];
                                let dst = &mut gc[(id * h + ih) * w..(id * h + ih + 1) * w];
                                let o = (zd * oh + zh) * ow;
                                let base = w0 * sw + kw - self.p[2];
                                for (j, v) in src[o + w0..o + w1].iter().enumerate() {
                                    dst[base + j * sw] += v;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

fn geom(x_shape: &[usize], w_shape: &[usize], spec: &ConvSpec, out: [usize; 3]) -> ConvGeom {
    ConvGeom {
        cin_g: w_shape[1],
        inp: [x_shape[2], x_shape[3], x_shape[4]],
        out,
        k: [w_shape[2], w_shape[3], w_shape[4]],
        s: spec.stride,
        p: spec.padding,
    }
}

/// Grouped 3D cross-correlation, x: [N,Cin,D,H,W], w: [Cout,Cin/g,kd,kh,kw].
pub fn conv3d_forward(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    spec: &ConvSpec,
    out: [usize; 3],
) -> Vec<f64> {
    let n = x_shape[0];
    let cin = x_shape[1];
    let cout = w_shape[0];
    let g = spec.groups;
    let cout_g = cout / g;
    let geo = geom(x_shape, w_shape, spec, out);
    let in_vol = x_shape[2] * x_shape[3] * x_shape[4];
    let p = geo.col_cols();
    let ck = geo.col_rows();
    let mut y = vec![0.0; n * cout * p];
    y.par_chunks_mut(cout * p)
        .zip(x.par_chunks(cin * in_vol))
        .for_each(|(yn, xn)| {
            let mut cols = vec![0.0; ck * p];
            for gi in 0..g {
                let xg = &xn[gi * geo.cin_g * in_vol..(gi + 1) * geo.cin_g * in_vol];
                geo.im2col(xg, &mut cols);
                let wg = &w[gi * cout_g * ck..(gi + 1) * cout_g * ck];
                let yg = &mut yn[gi * cout_g * p..(gi + 1) * cout_g * p];
                gemm(cout_g, ck, p, wg, false, &cols, false, yg, 0.0);
            }
        });
    y
}

/// Input and weight gradients of [`conv3d_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    spec: &ConvSpec,
    out: [usize; 3],
    gy: &[f64],
    want_gx: bool,
    want_gw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let n = x_shape[0];
    let cin = x_shape[1];
    let cout = w_shape[0];
    let g = spec.groups;
    let cout_g = cout / g;
    let geo = geom(x_shape, w_shape, spec, out);
    let in_vol = x_shape[2] * x_shape[3] * x_shape[4];
    let p = geo.col_cols();
    let ck = geo.col_rows();

    let gx = want_gx.then(|| {
        let mut gx = vec![0.0; x.len()];
        gx.par_chunks_mut(cin * in_vol)
            .zip(gy.par_chunks(cout * p))
            .for_each(|(gxn, gyn)| {
                let mut cols = vec![0.0; ck * p];
                for gi in 0..g {
                    let wg = &w[gi * cout_g * ck..(gi + 1) * cout_g * ck];
                    let gyg = &gyn[gi * cout_g * p..(gi + 1) * cout_g * p];
                    gemm(ck, cout_g, p, wg, true, gyg, false, &mut cols, 0.0);
                    let gxg = &mut gxn[gi * geo.cin_g * in_vol..(gi + 1) * geo.cin_g * in_vol];
                    geo.col2im(&cols, gxg);
                }
            });
        gx
    });

    let gw = want_gw.then(|| {
        let mut gw = vec![0.0; w.len()];
        let mut cols = vec![0.0; ck * p];
        for ni in 0..n {
            let xn = &x[ni * cin * in_vol..(ni + 1) * cin * in_vol];
            let gyn = &gy[ni * cout * p..(ni + 1) * cout * p];
            for gi in 0..g {
                let xg = &xn[gi * geo.cin_g * in_vol..(gi + 1) * geo.cin_g * in_vol];
                geo.im2col(xg, &mut cols);
                let gyg = &gyn[gi * cout_g * p..(gi + 1) * cout_g * p];
                let gwg = &mut gw[gi * cout_g * ck..(gi + 1) * cout_g * ck];
                gemm(cout_g, p, ck, gyg, false, &cols, true, gwg, 1.0);
            }
        }
        gw
    });
    (gx, gw)
}

/// Max pooling over [N,C,D,H,W]; returns values and flat argmax indices.
pub(crate) fn maxpool3d_forward(
    x: &[f64],
    shape: &[usize],
    spec: &PoolSpec,
    out: [usize; 3],
) -> (Vec<f64>, Vec<usize>) {
    let nc = shape[0] * shape[1];
    let [d, h, w] = [shape[2], shape[3], shape[4]];
    let [od, oh, ow] = out;
    let vol = d * h * w;
    let ovol = od * oh * ow;
    let mut y = vec![f64::NEG_INFINITY; nc * ovol];
    let mut arg = vec![usize::MAX; nc * ovol];
    for c in 0..nc {
        let base = c * vol;
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let o = c * ovol + (zd * oh + zh) * ow + zw;
                    for kd in 0..spec.kernel[0] {
                        let id = (zd * spec.stride[0] + kd) as isize - spec.padding[0] as isize;
                        if id < 0 || id as usize >= d {
                            continue;
                        }
                        for kh in 0..spec.kernel[1] {
                            let ih = (zh * spec.stride[1] + kh) as isize - spec.padding[1] as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            for kw in 0..spec.kernel[2] {
                                let iw = (zw * spec.stride[2] + kw) as isize - spec.padding[2] as isize;
                                if iw < 0 || iw as usize >= w {
                                    continue;
                                }
                                let i = base + (id as usize * h + ih as usize) * w + iw as usize;
                                if x[i] > y[o] {
                                    y[o] = x[i];
                                    arg[o] = i;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (y, arg)
}

/// Numerically stable softmax over contiguous rows of length `n`.
pub fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks(n).zip(y.chunks_mut(n)) {
        let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (yi, &xi) in yr.iter_mut().zip(xr) {
            *yi = (xi - m).exp();
            s += *yi;
        }
        for yi in yr.iter_mut() {
            *yi /= s;
        }
    }
    y
}

pub(crate) fn log_softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks(n).zip(y.chunks_mut(n)) {
        let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xr.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for (yi, &xi) in yr.iter_mut().zip(xr) {
            *yi = xi - lse;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn out_extent_formula() {
        assert_eq!(out_extents([7, 24, 24], [5, 3, 3], [1, 2, 2], [2, 1, 1]), Some([7, 12, 12]));
        assert_eq!(out_extents([1, 2, 2], [1, 3, 3], [1, 1, 1], [0, 0, 0]), None);
    }

    fn naive_conv(x: &[f64], xs: [usize; 5], w: &[f64], ws: [usize; 5], spec: &ConvSpec, out: [usize; 3]) -> Vec<f64> {
        let [n, cin, d, h, wd] = xs;
        let [cout, cg, kd, kh, kw] = ws;
        let og = cout / spec.groups;
        let mut y = vec![0.0; n * cout * out[0] * out[1] * out[2]];
        let mut o = 0;
        for b in 0..n {
            for co in 0..cout {
                let gi = co / og;
                for zd in 0..out[0] {
                    for zh in 0..out[1] {
                        for zw in 0..out[2] {
                            let mut acc = 0.0;
                            for c in 0..cg {
                                for a in 0..kd {
                                    for e in 0..kh {
                                        for f in 0..kw {
                                            let id = (zd * spec.stride[0] + a) as isize - spec.padding[0] as isize;
                                            let ih = (zh * spec.stride[1] + e) as isize - spec.padding[1] as isize;
                                            let iw = (zw * spec.stride[2] + f) as isize - spec.padding[2] as isize;
                                            if id < 0 || ih < 0 || iw < 0 || id as usize >= d || ih as usize >= h || iw as usize >= wd {
                                                continue;
                                            }
                                            let ci = gi * cg + c;
                                            let xv = x[(((b * cin + ci) * d + id as usize) * h + ih as usize) * wd + iw as usize];
                                            acc += xv * w[(((co * cg + c) * kd + a) * kh + e) * kw + f];
                                        }
                                    }
                                }
                            }
                            y[o] = acc;
                            o += 1;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_sum_and_col2im_is_adjoint() {
        let cases = [
            ([2, 2, 5, 7, 6], [4, 2, 3, 3, 3], ConvSpec::new([1, 2, 2], [1, 1, 1])),
            ([1, 4, 6, 5, 5], [4, 1, 5, 1, 1], ConvSpec::new([1, 1, 1], [2, 0, 0]).grouped(4)),
            ([1, 1, 4, 9, 9], [3, 1, 1, 3, 3], ConvSpec::new([2, 3, 2], [0, 2, 1])),
        ];
        for (xs, ws, spec) in cases {
            let x: Vec<f64> = (0..xs.iter().product::<usize>()).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect();
            let w: Vec<f64> = (0..ws.iter().product::<usize>()).map(|i| ((i * 13 % 17) as f64 - 8.0) / 5.0).collect();
            let out = out_extents([xs[2], xs[3], xs[4]], [ws[2], ws[3], ws[4]], spec.stride, spec.padding).unwrap();
            let y = conv3d_forward(&x, &xs, &w, &ws, &spec, out);
            let r = naive_conv(&x, xs, &w, ws, &spec, out);
            for (a, b) in y.iter().zip(&r) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            let geo = geom(&xs, &ws, &spec, out);
            let vol = xs[2] * xs[3] * xs[4];
            let xg = &x[..geo.cin_g * vol];
            let mut cols = vec![0.0; geo.col_rows() * geo.col_cols()];
            geo.im2col(xg, &mut cols);
            let c: Vec<f64> = (0..cols.len()).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let mut back = vec![0.0; xg.len()];
            geo.col2im(&c, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = xg.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
