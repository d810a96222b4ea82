use super::{Layer, Param, Tensor};

/// Leaky rectification, `max(x, slope·x)`.
pub struct LeakyRelu {
    pub slope: f32,
    cache: Option<Tensor>,
}

impl LeakyRelu {
    pub fn new(slope: f32) -> Self {
        Self { slope, cache: None }
    }
}

impl Layer for LeakyRelu {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let s = self.slope;
        out.data.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= s
            }
        });
        out
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let out = self.forward(x);
        self.cache = Some(x.clone());
        out
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let x = self.cache.take().expect("leaky relu backward without forward_train");
        if !need_input_grad {
            return None;
        }
        let mut dx = grad.clone();
        for (g, &v) in dx.data.iter_mut().zip(&x.data) {
            if v < 0.0 {
                *g *= self.slope;
            }
        }
        Some(dx)
    }

    fn output_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        (c, h, w)
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

/// Plain rectification.
pub struct Relu(LeakyRelu);

impl Relu {
    pub fn new() -> Self {
        Self(LeakyRelu::new(0.0))
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Relu {
    fn forward(&self, x: &Tensor) -> Tensor {
        self.0.forward(x)
    }
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.0.forward_train(x)
    }
    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        self.0.backward(grad, need_input_grad)
    }
    fn output_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        (c, h, w)
    }
    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
    fn clear_cache(&mut self) {
        self.0.clear_cache()
    }
}
