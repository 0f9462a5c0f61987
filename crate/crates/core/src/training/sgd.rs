use std::collections::HashMap;

use candle_core::{backprop::GradStore, Result, Tensor, Var};

/// SGD with momentum and L2 weight decay, PyTorch update order:
/// `g = grad + wd·w`, `buf = m·buf + g` (`buf = g` on the first step), `w -= lr·buf`.
pub struct Sgd {
    params: Vec<(String, Var)>,
    momentum: f64,
    weight_decay: f64,
    buffers: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(params: Vec<(String, Var)>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            params,
            momentum,
            weight_decay,
            buffers: HashMap::new(),
        }
    }

    /// Parameters without a gradient in `grads` are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, var) in &self.params {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let w = var.as_tensor().detach();
            // Gradients can carry a backprop graph; detaching keeps buffers from chaining steps.
            let mut d = grad.detach();
            if self.weight_decay != 0.0 {
                d = (d + (&w * self.weight_decay)?)?;
            }
            if self.momentum != 0.0 {
                let buf = match self.buffers.get(name) {
                    Some(b) => ((b * self.momentum)? + d)?,
                    None => d,
                };
                self.buffers.insert(name.clone(), buf.clone());
                d = buf;
            }
            var.set(&(w - (d * lr)?)?)?;
        }
        Ok(())
    }

    pub fn buffers(&self) -> &HashMap<String, Tensor> {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: HashMap<String, Tensor>) {
        self.buffers = buffers;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn matches_scalar_recurrence() {
        let var = Var::new(&[1.0f32, -2.0], &Device::Cpu).unwrap();
        let mut opt = Sgd::new(vec![("w".into(), var.clone())], 0.9, 0.1);
        // loss = sum(w²) so grad = 2w
        let (mut w, mut buf) = ([1.0f64, -2.0], [0.0f64; 2]);
        for step in 0..4 {
            let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&grads, 0.05).unwrap();
            for i in 0..2 {
                let g = 2.0 * w[i] + 0.1 * w[i];
                buf[i] = if step == 0 { g } else { 0.9 * buf[i] + g };
                w[i] -= 0.05 * buf[i];
            }
        }
        let got: Vec<f32> = var.as_tensor().to_vec1().unwrap();
        for i in 0..2 {
            assert!((got[i] as f64 - w[i]).abs() < 1e-5, "{got:?} vs {w:?}");
        }
    }
}
