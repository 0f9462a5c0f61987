use candle_core::{Module, Result, Tensor};
use candle_nn::{Conv2d, ConvTranspose2d, GroupNorm, Linear};

use super::backbone::GN_GROUPS;
use super::params::{Init, ParamStore};

/// Shared 3×3 conv followed by sibling 1×1 convs for objectness and box deltas.
pub(crate) struct RpnHead {
    conv: Conv2d,
    cls_logits: Conv2d,
    bbox_pred: Conv2d,
    k: usize,
}

impl RpnHead {
    pub fn new(ps: &mut ParamStore, channels: usize, k: usize) -> Result<Self> {
        let (obj, reg) = (2 * k, 4 * k);
        let init = Init::Normal(0.01);
        Ok(Self {
            conv: ps.conv2d("rpn.head.conv", channels, channels, 3, 1, 1, init, true)?,
            cls_logits: ps.conv2d("rpn.head.cls_logits", channels, obj, 1, 1, 0, init, true)?,
            bbox_pred: ps.conv2d("rpn.head.bbox_pred", channels, reg, 1, 1, 0, init, true)?,
            k,
        })
    }

    /// Per level returns objectness `(B, h·w·k, 2)` and deltas `(B, h·w·k, 4)`, flattened in
    /// `(y, x, anchor)` order.
    pub fn forward(&self, features: &[Tensor]) -> Result<(Tensor, Tensor)> {
        let mut objs = Vec::with_capacity(features.len());
        let mut deltas = Vec::with_capacity(features.len());
        for f in features {
            let t = self.conv.forward(f)?.relu()?;
            objs.push(flatten_per_anchor(&self.cls_logits.forward(&t)?, self.k, 2)?);
            deltas.push(flatten_per_anchor(&self.bbox_pred.forward(&t)?, self.k, 4)?);
        }
        Ok((Tensor::cat(&objs, 1)?, Tensor::cat(&deltas, 1)?))
    }
}

/// `(B, k·d, h, w)` to `(B, h·w·k, d)`.
fn flatten_per_anchor(x: &Tensor, k: usize, d: usize) -> Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    x.reshape((b, k, d, h, w))?
        .permute((0, 3, 4, 1, 2))?
        .reshape((b, h * w * k, d))
}

/// 3×3 conv, optional group norm, ReLU.
struct HeadConv {
    conv: Conv2d,
    norm: Option<GroupNorm>,
}

impl HeadConv {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, norm: bool) -> Result<Self> {
        let conv = ps.conv2d(name, cin, cout, 3, 1, 1, Init::KaimingNormalFanOut, !norm)?;
        let norm = match norm {
            true => Some(ps.group_norm(&format!("{name}.gn"), cout, GN_GROUPS)?),
            false => None,
        };
        Ok(Self { conv, norm })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        match &self.norm {
            Some(n) => n.forward(&y)?.relu(),
            None => y.relu(),
        }
    }
}

/// Box head: either two fully connected layers, or group-normed convs followed by one fully
/// connected layer. Class scores and class-specific box deltas come off the last layer.
pub(crate) struct BoxHead {
    convs: Vec<HeadConv>,
    fcs: Vec<Linear>,
    cls_score: Linear,
    bbox_pred: Linear,
}

impl BoxHead {
    pub fn new(
        ps: &mut ParamStore,
        channels: usize,
        pool: usize,
        dim: usize,
        conv_layers: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let p = "roi_heads.box_head";
        let convs = (0..conv_layers)
            .map(|i| HeadConv::new(ps, &format!("{p}.conv{}", i + 1), channels, channels, true))
            .collect::<Result<Vec<_>>>()?;
        let flat = channels * pool * pool;
        let fcs = if conv_layers == 0 {
            let fc = Init::KaimingUniform { a: 5f64.sqrt() };
            vec![ps.linear(&format!("{p}.fc6"), flat, dim, fc)?, ps.linear(&format!("{p}.fc7"), dim, dim, fc)?]
        } else {
            vec![ps.linear(&format!("{p}.fc6"), flat, dim, Init::KaimingUniform { a: 1.0 })?]
        };
        Ok(Self {
            convs,
            fcs,
            cls_score: ps.linear("roi_heads.box_predictor.cls_score", dim, num_classes, Init::Normal(0.01))?,
            bbox_pred: ps.linear(
                "roi_heads.box_predictor.bbox_pred",
                dim,
                num_classes * 4,
                Init::Normal(0.001),
            )?,
        })
    }

    /// `pooled` is `(R, C, S, S)`; returns logits `(R, classes)` and deltas `(R, classes·4)`.
    pub fn forward(&self, pooled: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut x = pooled.clone();
        for c in &self.convs {
            x = c.forward(&x)?;
        }
        let mut x = x.flatten_from(1)?;
        for fc in &self.fcs {
            x = fc.forward(&x)?.relu()?;
        }
        Ok((self.cls_score.forward(&x)?, self.bbox_pred.forward(&x)?))
    }
}

/// Stacked 3×3 convs, a 2× transposed conv and per-class 1×1 mask logits.
pub(crate) struct MaskHead {
    convs: Vec<HeadConv>,
    deconv: ConvTranspose2d,
    logits: Conv2d,
}

impl MaskHead {
    pub fn new(
        ps: &mut ParamStore,
        in_channels: usize,
        channels: usize,
        layers: usize,
        norm: bool,
        num_classes: usize,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(layers);
        let mut cin = in_channels;
        for i in 0..layers {
            convs.push(HeadConv::new(ps, &format!("roi_heads.mask_head.mask_fcn{}", i + 1), cin, channels, norm)?);
            cin = channels;
        }
        Ok(Self {
            convs,
            deconv: ps.conv_transpose2d("roi_heads.mask_predictor.conv5_mask", cin, channels, 2, 2)?,
            logits: ps.conv2d(
                "roi_heads.mask_predictor.mask_fcn_logits",
                channels,
                num_classes,
                1,
                1,
                0,
                Init::KaimingNormalFanOut,
                true,
            )?,
        })
    }

    /// `(R, C, S, S)` to `(R, classes, 2S, 2S)` logits.
    pub fn forward(&self, pooled: &Tensor) -> Result<Tensor> {
        let mut x = pooled.clone();
        for c in &self.convs {
            x = c.forward(&x)?;
        }
        let x = self.deconv.forward(&x)?.relu()?;
        self.logits.forward(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn rpn_head_shapes() {
        let mut ps = ParamStore::new(0, Device::Cpu);
        let head = RpnHead::new(&mut ps, 8, 3).unwrap();
        assert_eq!(ps.vars()["rpn.head.cls_logits.weight"].dims(), &[6, 8, 1, 1]);
        assert_eq!(ps.vars()["rpn.head.bbox_pred.weight"].dims(), &[12, 8, 1, 1]);
        let f = [
            Tensor::zeros((2, 8, 4, 5), DType::F32, &Device::Cpu).unwrap(),
            Tensor::zeros((2, 8, 2, 3), DType::F32, &Device::Cpu).unwrap(),
        ];
        let (o, d) = head.forward(&f).unwrap();
        assert_eq!(o.dims(), &[2, (20 + 6) * 3, 2]);
        assert_eq!(d.dims(), &[2, (20 + 6) * 3, 4]);
    }

    #[test]
    fn flatten_order_is_y_x_anchor() {
        // channel a*d + j at (y, x) must land at row (y*w + x)*k + a, column j.
        let (k, d, h, w) = (2, 3, 2, 2);
        let vals: Vec<f32> = (0..k * d * h * w).map(|i| i as f32).collect();
        let x = Tensor::from_vec(vals, (1, k * d, h, w), &Device::Cpu).unwrap();
        let y: Vec<Vec<f32>> = flatten_per_anchor(&x, k, d).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        for a in 0..k {
            for j in 0..d {
                for yy in 0..h {
                    for xx in 0..w {
                        let ch = a * d + j;
                        assert_eq!(y[(yy * w + xx) * k + a][j], (ch * h * w + yy * w + xx) as f32);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_head_doubles_resolution() {
        let mut ps = ParamStore::new(0, Device::Cpu);
        let head = MaskHead::new(&mut ps, 8, 8, 2, true, 2).unwrap();
        assert!(ps.vars().contains_key("roi_heads.mask_head.mask_fcn2.gn.weight"));
        assert!(!ps.vars().contains_key("roi_heads.mask_head.mask_fcn2.bias"));
        let x = Tensor::ones((3, 8, 14, 14), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(head.forward(&x).unwrap().dims(), &[3, 2, 28, 28]);
    }

    #[test]
    fn box_head_variants() {
        let x = Tensor::ones((5, 8, 7, 7), DType::F32, &Device::Cpu).unwrap();
        for convs in [0, 2] {
            let mut ps = ParamStore::new(0, Device::Cpu);
            let head = BoxHead::new(&mut ps, 8, 7, 16, convs, 2).unwrap();
            assert_eq!(ps.vars().contains_key("roi_heads.box_head.fc7.weight"), convs == 0);
            assert_eq!(ps.vars().contains_key("roi_heads.box_head.conv2.gn.weight"), convs == 2);
            let (c, d) = head.forward(&x).unwrap();
            assert_eq!((c.dims(), d.dims()), (&[5, 2][..], &[5, 8][..]));
        }
    }
}
