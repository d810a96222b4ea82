use rand::Rng;

use super::{kaiming_normal, Layer, Param, Tensor};

/// 2D convolution lowered to im2col + sgemm.
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: (usize, usize),
    weight: Param,
    bias: Option<Param>,
    cache: Option<Tensor>,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }
}

fn im2col(x: &[f32], g: &Geometry, col: &mut [f32]) {
    let cols = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_span(g, kx);
                    line[..lo].iter_mut().for_each(|v| *v = 0.0);
                    line[hi..].iter_mut().for_each(|v| *v = 0.0);
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pw;
                        line[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (ox, v) in line.iter_mut().enumerate().take(hi).skip(lo) {
                            *v = src[ox * g.stride + kx - g.pw];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column lies inside the image.
fn valid_span(g: &Geometry, kx: usize) -> (usize, usize) {
    // ix = ox·stride + kx − pw must satisfy 0 ≤ ix < w
    let lo = if kx >= g.pw { 0 } else { (g.pw - kx).div_ceil(g.stride) };
    let hi = if g.w + g.pw <= kx {
        0
    } else {
        ((g.w + g.pw - kx - 1) / g.stride + 1).min(g.ow)
    };
    (lo.min(hi), hi)
}

/// `dx += col2im(Wᵀ · dY)`, one column-matrix row at a time.
fn input_grad(weight: &[f32], dy: &[f32], out_ch: usize, g: &Geometry, dx: &mut [f32], row_buf: &mut [f32]) {
    let (rows, cols) = (g.rows(), g.cols());
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                row_buf.iter_mut().for_each(|v| *v = 0.0);
                for (o, dyo) in dy.chunks_exact(cols).enumerate().take(out_ch) {
                    let w = weight[o * rows + row];
                    for (d, s) in row_buf.iter_mut().zip(dyo) {
                        *d += w * s;
                    }
                }
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &row_buf[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pw;
                        for (d, s) in dst[ix0..ix0 + hi - lo].iter_mut().zip(&line[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * g.stride + kx - g.pw] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 16];
    let (ca, cb) = (a.chunks_exact(16), b.chunks_exact(16));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..16 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// `c[m×n] = alpha · op(a)[m×k] · op(b)[k×n] + beta · c`, strides in elements.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie within the given slices.
    unsafe {
        matrixmultiply::sgemm(
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

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: (usize, usize),
        bias: bool,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        assert!(stride >= 1 && kernel.0 >= 1 && kernel.1 >= 1);
        let fan_in = in_ch * kernel.0 * kernel.1;
        let n = out_ch * fan_in;
        let weight = Param::weight(
            format!("{name}.weight"),
            vec![out_ch, in_ch, kernel.0, kernel.1],
            kaiming_normal(rng, n, fan_in, gain),
        );
        let bias = bias.then(|| Param::weight(format!("{name}.bias"), vec![out_ch], vec![0.0; out_ch]));
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight,
            bias,
            cache: None,
        }
    }

    /// Square-kernel shorthand.
    #[allow(clippy::too_many_arguments)]
    pub fn square<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        Self::new(name, in_ch, out_ch, (k, k), stride, (pad, pad), bias, gain, rng)
    }

    pub fn weight_mut(&mut self) -> &mut Param {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> Option<&mut Param> {
        self.bias.as_mut()
    }

    fn geometry(&self, c: usize, h: usize, w: usize) -> Geometry {
        assert_eq!(c, self.in_ch, "conv input channels");
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.pad;
        assert!(h + 2 * ph >= kh && w + 2 * pw >= kw, "conv input smaller than kernel");
        Geometry {
            c,
            h,
            w,
            kh,
            kw,
            stride: self.stride,
            ph,
            pw,
            oh: (h + 2 * ph - kh) / self.stride + 1,
            ow: (w + 2 * pw - kw) / self.stride + 1,
        }
    }

    fn run(&self, x: &Tensor) -> Tensor {
        let g = self.geometry(x.c, x.h, x.w);
        let (rows, cols) = (g.rows(), g.cols());
        let mut out = Tensor::zeros(x.n, self.out_ch, g.oh, g.ow);
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * cols] };
        for i in 0..x.n {
            let xs = x.sample(i);
            let b: &[f32] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut col);
                &col
            };
            let os = out.sample_mut(i);
            gemm(
                self.out_ch,
                rows,
                cols,
                &self.weight.value,
                rows as isize,
                1,
                b,
                cols as isize,
                1,
                0.0,
                os,
            );
            if let Some(bias) = &self.bias {
                for (oc, plane) in os.chunks_mut(cols).enumerate() {
                    let bv = bias.value[oc];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }
}

impl Layer for Conv2d {
    fn forward(&self, x: &Tensor) -> Tensor {
        self.run(x)
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let out = self.run(x);
        self.cache = Some(x.clone());
        out
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let x = self.cache.take().expect("conv backward without forward_train");
        let g = self.geometry(x.c, x.h, x.w);
        let (rows, cols) = (g.rows(), g.cols());
        assert_eq!(grad.shape(), [x.n, self.out_ch, g.oh, g.ow], "conv grad shape");
        let want_w = self.weight.wants_grad();
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * cols] };
        let mut row_buf = if need_input_grad && !g.is_pointwise() {
            vec![0.0; cols]
        } else {
            Vec::new()
        };
        for i in 0..x.n {
            let dy = grad.sample(i);
            if want_w {
                let xs = x.sample(i);
                let b: &[f32] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &g, &mut col);
                    &col
                };
                // dW[o][r] += dY[o] · col[r]
                for (o, dyo) in dy.chunks_exact(cols).enumerate() {
                    let wrow = &mut self.weight.grad[o * rows..(o + 1) * rows];
                    for (r, gw) in wrow.iter_mut().enumerate() {
                        *gw += dot(dyo, &b[r * cols..(r + 1) * cols]);
                    }
                }
            }
            if let Some(bias) = self.bias.as_mut().filter(|b| b.wants_grad()) {
                for (oc, plane) in dy.chunks(cols).enumerate() {
                    bias.grad[oc] += plane.iter().sum::<f32>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = dx.sample_mut(i);
                if g.is_pointwise() {
                    gemm(rows, self.out_ch, cols, &self.weight.value, 1, rows as isize, dy, cols as isize, 1, 0.0, dxs);
                } else {
                    input_grad(&self.weight.value, dy, self.out_ch, &g, dxs, &mut row_buf);
                }
            }
        }
        dx
    }

    fn output_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let g = self.geometry(c, h, w);
        (self.out_ch, g.oh, g.ow)
    }

    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (oc, oh, ow) = conv.output_dims(x.c, x.h, x.w);
        let (kh, kw) = conv.kernel;
        let mut out = Tensor::zeros(x.n, oc, oh, ow);
        let w = &conv.weight.value;
        for n in 0..x.n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]) as f64;
                        for c in 0..x.c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad.0 as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((n * x.c + c) * x.h + iy as usize) * x.w + ix as usize];
                                    acc += (w[((o * x.c + c) * kh + ky) * kw + kx] * xv) as f64;
                                }
                            }
                        }
                        out.data[((n * oc + o) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 0), (1, 1, 0), (4, 2, 3), (7, 2, 3)] {
            let mut conv = Conv2d::square("c", 3, 5, k, s, p, true, 1.0, &mut rng);
            conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3, 0.0, 0.5];
            let x = random_tensor(&mut rng, 2, 3, 11, 9);
            let fast = conv.forward(&x);
            let slow = naive(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b} for k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::square("c", 2, 3, k, s, p, true, 1.0, &mut rng);
            let x = random_tensor(&mut rng, 2, 2, 6, 5);
            let out = conv.forward_train(&x);
            let upstream = random_tensor(&mut rng, out.n, out.c, out.h, out.w);
            let dx = conv.backward(&upstream, true).unwrap();
            let loss = |c: &Conv2d, x: &Tensor| -> f64 {
                c.forward(x).data.iter().zip(&upstream.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            };
            let eps = 1e-2f32;
            for idx in [0, 7, 13, x.len() - 1] {
                let mut xp = x.clone();
                xp.data[idx] += eps;
                let mut xm = x.clone();
                xm.data[idx] -= eps;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps as f64);
                assert!((fd - dx.data[idx] as f64).abs() < 1e-2, "dx[{idx}] {fd} vs {}", dx.data[idx]);
            }
            let wg = conv.weight.grad.clone();
            for idx in [0, 5, wg.len() - 1] {
                let mut cp = Conv2d::square("c", 2, 3, k, s, p, true, 1.0, &mut rng);
                cp.weight.value = conv.weight.value.clone();
                cp.bias.as_mut().unwrap().value = conv.bias.as_ref().unwrap().value.clone();
                cp.weight.value[idx] += eps;
                let lp = loss(&cp, &x);
                cp.weight.value[idx] -= 2.0 * eps;
                let lm = loss(&cp, &x);
                let fd = (lp - lm) / (2.0 * eps as f64);
                assert!((fd - wg[idx] as f64).abs() < 1e-2, "dw[{idx}] {fd} vs {}", wg[idx]);
            }
        }
    }
}
