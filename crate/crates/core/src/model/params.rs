//! Named parameters with seeded initialization.
//!
//! candle's CPU generator cannot be seeded, so every parameter is drawn here from a
//! ChaCha stream in construction order.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Module, Result, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, GroupNorm, Linear};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// `U(-b, b)` with `b = sqrt(6 / ((1 + a²) fan_in))`.
    KaimingUniform { a: f64 },
    /// `N(0, 2 / fan_out)`.
    KaimingNormalFanOut,
    Normal(f64),
    Uniform(f64),
    Const(f64),
}

pub(crate) struct ParamStore {
    vars: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            frozen: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// `fan_in` / `fan_out` follow the PyTorch convention for weights of shape `(out, in, k...)`.
    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        let receptive: usize = shape.iter().skip(2).product();
        let fan_in = shape.get(1).copied().unwrap_or(1) * receptive.max(1);
        let fan_out = shape[0] * receptive.max(1);
        let values: Vec<f32> = match init {
            Init::KaimingUniform { a } => {
                let bound = (6.0 / ((1.0 + a * a) * fan_in as f64)).sqrt();
                let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..numel).map(|_| d.sample(&mut self.rng) as f32).collect()
            }
            Init::KaimingNormalFanOut => self.normal(numel, (2.0 / fan_out as f64).sqrt()),
            Init::Normal(std) => self.normal(numel, std),
            Init::Uniform(bound) => {
                let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..numel).map(|_| d.sample(&mut self.rng) as f32).collect()
            }
            Init::Const(c) => vec![c as f32; numel],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?;
        let var = Var::from_tensor(&t)?;
        // Frozen parameters share storage with their Var but are invisible to backprop.
        let out = if trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        };
        assert!(
            self.vars.insert(name.to_string(), var).is_none(),
            "parameter {name} registered twice"
        );
        if !trainable {
            self.frozen.insert(name.to_string());
        }
        Ok(out)
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f32> {
        let d = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| d.sample(&mut self.rng) as f32).collect()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        bias: bool,
    ) -> Result<Conv2d> {
        let w = self.tensor(&format!("{name}.weight"), &[cout, cin, kernel, kernel], init, true)?;
        let b = if bias {
            Some(self.tensor(&format!("{name}.bias"), &[cout], Init::Const(0.0), true)?)
        } else {
            None
        };
        Ok(Conv2d::new(
            w,
            b,
            Conv2dConfig {
                padding,
                stride,
                dilation: 1,
                groups: 1,
                cudnn_fwd_algo: None,
            },
        ))
    }

    pub fn conv_transpose2d(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<ConvTranspose2d> {
        // Weight layout is (in, out, k, k); fan_out therefore comes from dim 0.
        let w = self.tensor(
            &format!("{name}.weight"),
            &[cin, cout, kernel, kernel],
            Init::KaimingNormalFanOut,
            true,
        )?;
        let b = self.tensor(&format!("{name}.bias"), &[cout], Init::Const(0.0), true)?;
        Ok(ConvTranspose2d::new(
            w,
            Some(b),
            ConvTranspose2dConfig {
                padding: 0,
                output_padding: 0,
                stride,
                dilation: 1,
            },
        ))
    }

    /// PyTorch-style default bias `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` when the weight is
    /// Kaiming-uniform, zero otherwise.
    pub fn linear(&mut self, name: &str, cin: usize, cout: usize, init: Init) -> Result<Linear> {
        let w = self.tensor(&format!("{name}.weight"), &[cout, cin], init, true)?;
        let bias_init = match init {
            Init::KaimingUniform { .. } => Init::Uniform(1.0 / (cin as f64).sqrt()),
            _ => Init::Const(0.0),
        };
        let b = self.tensor(&format!("{name}.bias"), &[cout], bias_init, true)?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn group_norm(&mut self, name: &str, channels: usize, groups: usize) -> Result<GroupNorm> {
        let w = self.tensor(&format!("{name}.weight"), &[channels], Init::Const(1.0), true)?;
        let b = self.tensor(&format!("{name}.bias"), &[channels], Init::Const(0.0), true)?;
        GroupNorm::new(w, b, channels, groups, 1e-5)
    }

    pub fn frozen_batch_norm(&mut self, name: &str, channels: usize) -> Result<FrozenBatchNorm> {
        let weight = self.tensor(&format!("{name}.weight"), &[channels], Init::Const(1.0), false)?;
        let bias = self.tensor(&format!("{name}.bias"), &[channels], Init::Const(0.0), false)?;
        let running_mean =
            self.tensor(&format!("{name}.running_mean"), &[channels], Init::Const(0.0), false)?;
        let running_var =
            self.tensor(&format!("{name}.running_var"), &[channels], Init::Const(1.0), false)?;
        Ok(FrozenBatchNorm {
            weight,
            bias,
            running_mean,
            running_var,
        })
    }

    /// Copies `value` into the named parameter after checking its shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> std::result::Result<(), String> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| format!("unknown parameter {name}"))?;
        if var.dims() != value.dims() {
            return Err(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            ));
        }
        let value = value
            .to_dtype(DType::F32)
            .and_then(|v| v.to_device(&self.device))
            .map_err(|e| e.to_string())?;
        var.set(&value).map_err(|e| e.to_string())
    }
}

/// Batch norm with fixed statistics and affine parameters.
#[derive(Debug, Clone)]
pub(crate) struct FrozenBatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

impl Module for FrozenBatchNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let scale = self.weight.mul(&(&self.running_var + 1e-5)?.sqrt()?.recip()?)?;
        let shift = self.bias.sub(&self.running_mean.mul(&scale)?)?;
        let c = scale.dim(0)?;
        x.broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&shift.reshape((1, c, 1, 1))?)
    }
}
