use rand::Rng;

use super::{BatchNorm2d, Conv2d, Layer, Param, Relu, Sequential, Tensor};

const RELU_GAIN: f32 = std::f32::consts::SQRT_2;

/// `relu(branch(x) + shortcut(x))` where the shortcut is identity or a projection.
struct ResidualCore {
    branch: Sequential,
    shortcut: Option<Sequential>,
    out: Relu,
}

impl ResidualCore {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = self.branch.forward(x);
        match &self.shortcut {
            Some(s) => y.add_assign(&s.forward(x)),
            None => y.add_assign(x),
        }
        self.out.forward(&y)
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut y = self.branch.forward_train(x);
        match &mut self.shortcut {
            Some(s) => y.add_assign(&s.forward_train(x)),
            None => y.add_assign(x),
        }
        self.out.forward_train(&y)
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let g = self.out.backward(grad, true).expect("relu input grad");
        let from_branch = self.branch.backward(&g, need_input_grad);
        let from_short = match &mut self.shortcut {
            Some(s) => s.backward(&g, need_input_grad),
            None => need_input_grad.then(|| g.clone()),
        };
        match (from_branch, from_short) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.branch.params();
        if let Some(s) = &self.shortcut {
            p.extend(s.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.branch.params_mut();
        if let Some(s) = &mut self.shortcut {
            p.extend(s.params_mut());
        }
        p
    }

    fn clear_cache(&mut self) {
        self.branch.clear_cache();
        if let Some(s) = &mut self.shortcut {
            s.clear_cache();
        }
        self.out.clear_cache();
    }
}

fn projection<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Sequential {
    let mut s = Sequential::new();
    s.push(
        format!("{name}.downsample.0"),
        Conv2d::square(&format!("{name}.downsample.0"), in_ch, out_ch, 1, stride, 0, false, 1.0, rng),
    );
    s.push(format!("{name}.downsample.1"), BatchNorm2d::new(&format!("{name}.downsample.1"), out_ch, 1e-5));
    s
}

macro_rules! delegate_layer {
    ($t:ty) => {
        impl Layer for $t {
            fn forward(&self, x: &Tensor) -> Tensor {
                self.core.forward(x)
            }
            fn forward_train(&mut self, x: &Tensor) -> Tensor {
                self.core.forward_train(x)
            }
            fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Option<Tensor> {
                self.core.backward(grad, need_input_grad)
            }
            fn output_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
                self.core.branch.output_dims(c, h, w)
            }
            fn params(&self) -> Vec<&Param> {
                self.core.params()
            }
            fn params_mut(&mut self) -> Vec<&mut Param> {
                self.core.params_mut()
            }
            fn clear_cache(&mut self) {
                self.core.clear_cache()
            }
        }
    };
}

/// ResNet bottleneck (1×1 → 3×3 strided → 1×1 expansion ×4), torchvision naming.
pub struct Bottleneck {
    core: ResidualCore,
}

impl Bottleneck {
    pub fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, width: usize, stride: usize, rng: &mut R) -> Self {
        let out_ch = width * 4;
        let mut b = Sequential::new();
        b.push(format!("{name}.conv1"), Conv2d::square(&format!("{name}.conv1"), in_ch, width, 1, 1, 0, false, RELU_GAIN, rng));
        b.push(format!("{name}.bn1"), BatchNorm2d::new(&format!("{name}.bn1"), width, 1e-5));
        b.push(format!("{name}.relu1"), Relu::new());
        b.push(format!("{name}.conv2"), Conv2d::square(&format!("{name}.conv2"), width, width, 3, stride, 1, false, RELU_GAIN, rng));
        b.push(format!("{name}.bn2"), BatchNorm2d::new(&format!("{name}.bn2"), width, 1e-5));
        b.push(format!("{name}.relu2"), Relu::new());
        b.push(format!("{name}.conv3"), Conv2d::square(&format!("{name}.conv3"), width, out_ch, 1, 1, 0, false, RELU_GAIN, rng));
        b.push(format!("{name}.bn3"), BatchNorm2d::new(&format!("{name}.bn3"), out_ch, 1e-5));
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| projection(name, in_ch, out_ch, stride, rng));
        Self {
            core: ResidualCore {
                branch: b,
                shortcut,
                out: Relu::new(),
            },
        }
    }
}

delegate_layer!(Bottleneck);

/// ResNet basic block (two 3×3 convolutions), torchvision naming.
pub struct BasicBlock {
    core: ResidualCore,
}

impl BasicBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let mut b = Sequential::new();
        b.push(format!("{name}.conv1"), Conv2d::square(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, false, RELU_GAIN, rng));
        b.push(format!("{name}.bn1"), BatchNorm2d::new(&format!("{name}.bn1"), out_ch, 1e-5));
        b.push(format!("{name}.relu1"), Relu::new());
        b.push(format!("{name}.conv2"), Conv2d::square(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false, RELU_GAIN, rng));
        b.push(format!("{name}.bn2"), BatchNorm2d::new(&format!("{name}.bn2"), out_ch, 1e-5));
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| projection(name, in_ch, out_ch, stride, rng));
        Self {
            core: ResidualCore {
                branch: b,
                shortcut,
                out: Relu::new(),
            },
        }
    }
}

delegate_layer!(BasicBlock);

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bottleneck_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut block = Bottleneck::new("layer", 4, 2, 2, &mut rng);
        let x = Tensor::from_vec(2, 4, 5, 5, (0..200).map(|i| ((i * 31 % 17) as f32 - 8.0) * 0.1).collect());
        let y = block.forward_train(&x);
        assert_eq!(y.shape(), [2, 8, 3, 3]);
        let up = Tensor::from_vec(2, 8, 3, 3, (0..144).map(|i| ((i * 7 % 5) as f32 - 2.0) * 0.3).collect());
        let dx = block.backward(&up, true).unwrap();
        // Training-mode loss; batch norm statistics make every element interact.
        let mut probe = |x: &Tensor| -> f64 {
            let y = block.forward_train(x);
            block.clear_cache();
            y.data.iter().zip(&up.data).map(|(a, b)| (*a * *b) as f64).sum()
        };
        let eps = 1e-3;
        let mut bad = 0;
        for idx in (0..x.len()).step_by(7) {
            let mut p = x.clone();
            p.data[idx] += eps;
            let mut m = x.clone();
            m.data[idx] -= eps;
            let fd = (probe(&p) - probe(&m)) / (2.0 * eps as f64);
            if (fd - dx.data[idx] as f64).abs() > 2e-2 * (1.0 + fd.abs()) {
                bad += 1;
            }
        }
        // relu kinks can flip under perturbation for a few coordinates
        assert!(bad <= 2, "{bad} coordinates disagree");
    }
}
