use super::{Layer, Param, Tensor};

struct NormCache {
    x_hat: Vec<f32>,
    inv_std: Vec<f32>,
    shape: [usize; 4],
}

/// Per-channel batch normalization with running statistics.
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f32,
    pub momentum: f32,
    gamma: Param,
    beta: Param,
    running_mean: Param,
    running_var: Param,
    cache: Option<NormCache>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize, eps: f32) -> Self {
        Self {
            channels,
            eps,
            momentum: 0.1,
            gamma: Param::weight(format!("{name}.weight"), vec![channels], vec![1.0; channels]),
            beta: Param::weight(format!("{name}.bias"), vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(format!("{name}.running_mean"), vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(format!("{name}.running_var"), vec![channels], vec![1.0; channels]),
            cache: None,
        }
    }
}

const LANES: usize = 16;

/// `(Σ f(v), Σ g(v))` with f32 lanes folded into f64 per call.
fn sums(xs: &[f32], f: impl Fn(f32) -> f32, g: impl Fn(f32) -> f32) -> (f64, f64) {
    let (mut a, mut b) = ([0.0f32; LANES], [0.0f32; LANES]);
    let chunks = xs.chunks_exact(LANES);
    let (mut ta, mut tb) = (0.0f64, 0.0f64);
    for &v in chunks.remainder() {
        ta += f(v) as f64;
        tb += g(v) as f64;
    }
    for c in chunks {
        for k in 0..LANES {
            a[k] += f(c[k]);
            b[k] += g(c[k]);
        }
    }
    (
        ta + a.iter().map(|&v| v as f64).sum::<f64>(),
        tb + b.iter().map(|&v| v as f64).sum::<f64>(),
    )
}

/// `(Σ dy, Σ dy·x̂)`.
fn sums2<'a>(pairs: impl Iterator<Item = (&'a f32, &'a f32)>) -> (f64, f64) {
    let (mut a, mut b) = ([0.0f32; LANES], [0.0f32; LANES]);
    for (i, (&dy, &xh)) in pairs.enumerate() {
        a[i % LANES] += dy;
        b[i % LANES] += dy * xh;
    }
    (a.iter().map(|&v| v as f64).sum(), b.iter().map(|&v| v as f64).sum())
}

impl Layer for BatchNorm2d {
    fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.channels, "batch norm channels");
        let hw = x.h * x.w;
        let mut out = x.clone();
        for n in 0..x.n {
            let s = out.sample_mut(n);
            for c in 0..x.c {
                let inv = 1.0 / (self.running_var.value[c] + self.eps).sqrt();
                let scale = self.gamma.value[c] * inv;
                let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
                s[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        out
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.channels, "batch norm channels");
        let hw = x.h * x.w;
        let count = (x.n * hw) as f64;
        let mut out = x.clone();
        let mut x_hat = vec![0.0f32; x.len()];
        let mut inv_std = vec![0.0f32; x.c];
        for c in 0..x.c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for n in 0..x.n {
                let (a, b) = sums(&x.sample(n)[c * hw..(c + 1) * hw], |v| v, |v| v * v);
                sum += a;
                sq += b;
            }
            let mean = sum / count;
            let var = (sq / count - mean * mean).max(0.0);
            let inv = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[c] = inv as f32;
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let m = self.momentum;
            self.running_mean.value[c] = (1.0 - m) * self.running_mean.value[c] + m * mean as f32;
            self.running_var.value[c] = (1.0 - m) * self.running_var.value[c] + m * unbiased as f32;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let sl = x.sample_len();
            for n in 0..x.n {
                let base = n * sl + c * hw;
                let (inv, shift) = (inv as f32, (-mean * inv) as f32);
                for ((xh, o), &v) in x_hat[base..base + hw].iter_mut().zip(&mut out.data[base..base + hw]).zip(&x.data[base..base + hw]) {
                    *xh = v * inv + shift;
                    *o = g * *xh + b;
                }
            }
        }
        self.cache = Some(NormCache {
            x_hat,
            inv_std,
            shape: x.shape(),
        });
        out
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let cache = self.cache.take().expect("batch norm backward without forward_train");
        assert_eq!(grad.shape(), cache.shape, "batch norm grad shape");
        let [n, c, h, w] = cache.shape;
        let hw = h * w;
        let sl = c * hw;
        let count = (n * hw) as f64;
        let mut dx = need_input_grad.then(|| Tensor::zeros(n, c, h, w));
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xh = 0.0f64;
            for s in 0..n {
                let base = s * sl + ch * hw;
                let pairs = grad.data[base..base + hw].iter().zip(&cache.x_hat[base..base + hw]);
                let (a, b) = sums2(pairs);
                sum_dy += a;
                sum_dy_xh += b;
            }
            if self.gamma.wants_grad() {
                self.gamma.grad[ch] += sum_dy_xh as f32;
            }
            if self.beta.wants_grad() {
                self.beta.grad[ch] += sum_dy as f32;
            }
            if let Some(dx) = dx.as_mut() {
                let k = (self.gamma.value[ch] * cache.inv_std[ch]) as f64;
                let mean_dy = sum_dy / count;
                let mean_dy_xh = sum_dy_xh / count;
                for s in 0..n {
                    let base = s * sl + ch * hw;
                    let (k, a, b) = (k as f32, (k * mean_dy) as f32, (k * mean_dy_xh) as f32);
                    let src = grad.data[base..base + hw].iter().zip(&cache.x_hat[base..base + hw]);
                    for (d, (&g, &xh)) in dx.data[base..base + hw].iter_mut().zip(src) {
                        *d = k * g - a - b * xh;
                    }
                }
            }
        }
        dx
    }

    fn output_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        (c, h, w)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_gradient_matches_finite_differences() {
        let data: Vec<f32> = (0..2 * 2 * 3 * 3).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.3).collect();
        let x = Tensor::from_vec(2, 2, 3, 3, data);
        let up: Vec<f32> = (0..x.len()).map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.25).collect();
        let upstream = Tensor::from_vec(2, 2, 3, 3, up);
        let mut bn = BatchNorm2d::new("bn", 2, 1e-5);
        bn.gamma.value = vec![1.5, 0.7];
        bn.beta.value = vec![0.2, -0.1];
        bn.forward_train(&x);
        let dx = bn.backward(&upstream, true).unwrap();
        let loss = |x: &Tensor| -> f64 {
            let mut b = BatchNorm2d::new("bn", 2, 1e-5);
            b.gamma.value = vec![1.5, 0.7];
            b.beta.value = vec![0.2, -0.1];
            b.forward_train(x).data.iter().zip(&upstream.data).map(|(a, b)| (*a * *b) as f64).sum()
        };
        let eps = 1e-3;
        for idx in 0..x.len() {
            let mut p = x.clone();
            p.data[idx] += eps;
            let mut m = x.clone();
            m.data[idx] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps as f64);
            assert!((fd - dx.data[idx] as f64).abs() < 5e-3, "{idx}: {fd} vs {}", dx.data[idx]);
        }
    }

    #[test]
    fn eval_uses_running_statistics() {
        let bn = BatchNorm2d::new("bn", 1, 0.0);
        let x = Tensor::from_vec(1, 1, 1, 2, vec![3.0, -2.0]);
        assert_eq!(bn.forward(&x).data, vec![3.0, -2.0]);
    }
}
