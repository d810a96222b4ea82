use super::{Layer, Param, Tensor};

/// Max pooling; padded positions never win.
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<([usize; 4], Vec<u32>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1 && pad < kernel);
        Self {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    fn dims(&self, h: usize, w: usize) -> (usize, usize) {
        assert!(h + 2 * self.pad >= self.kernel && w + 2 * self.pad >= self.kernel, "pool input smaller than kernel");
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn run(&self, x: &Tensor, mut argmax: Option<&mut Vec<u32>>) -> Tensor {
        let (oh, ow) = self.dims(x.h, x.w);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        let mut o = 0;
        for plane in x.data.chunks(x.h * x.w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let idx = iy as usize * x.w + ix as usize;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    out.data[o] = best;
                    if let Some(a) = argmax.as_deref_mut() {
                        a.push(best_idx);
                    }
                    o += 1;
                }
            }
        }
        out
    }
}

impl Layer for MaxPool2d {
    fn forward(&self, x: &Tensor) -> Tensor {
        self.run(x, None)
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut argmax = Vec::new();
        let out = self.run(x, Some(&mut argmax));
        self.cache = Some((x.shape(), argmax));
        out
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let (shape, argmax) = self.cache.take().expect("max pool backward without forward_train");
        if !need_input_grad {
            return None;
        }
        let [n, c, h, w] = shape;
        let mut dx = Tensor::zeros(n, c, h, w);
        let out_plane = grad.h * grad.w;
        for (p, (gplane, dplane)) in grad.data.chunks(out_plane).zip(dx.data.chunks_mut(h * w)).enumerate() {
            for (j, &g) in gplane.iter().enumerate() {
                dplane[argmax[p * out_plane + j] as usize] += g;
            }
        }
        Some(dx)
    }

    fn output_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let (oh, ow) = self.dims(h, w);
        (c, oh, ow)
    }

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Mean over the spatial axes: `(n, c, h, w)` to `n` rows of `c` features.
pub fn global_avg_pool(x: &Tensor) -> Vec<Vec<f32>> {
    let hw = (x.h * x.w) as f64;
    (0..x.n)
        .map(|i| {
            x.sample(i)
                .chunks(x.h * x.w)
                .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw) as f32)
                .collect()
        })
        .collect()
}

/// Gradient of [`global_avg_pool`] given per-feature upstream gradients.
pub fn global_avg_pool_backward(grad: &[Vec<f32>], c: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut dx = Tensor::zeros(grad.len(), c, h, w);
    for (i, g) in grad.iter().enumerate() {
        let s = dx.sample_mut(i);
        for (ch, &gv) in g.iter().enumerate() {
            let v = gv / hw as f32;
            s[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d = v);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 4.0, 3.0, 2.0]);
        let mut p = MaxPool2d::new(2, 2, 0);
        let y = p.forward_train(&x);
        assert_eq!(y.data, vec![4.0]);
        let dx = p.backward(&Tensor::from_vec(1, 1, 1, 1, vec![2.5]), true).unwrap();
        assert_eq!(dx.data, vec![0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn padded_pool_dims() {
        let p = MaxPool2d::new(3, 2, 1);
        assert_eq!(p.output_dims(64, 112, 112), (64, 56, 56));
    }
}
