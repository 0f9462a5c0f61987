//! Feature extractors and the feature pyramid on top of them.

use candle_core::{Module, Result, Tensor, D};
use candle_nn::{Conv2d, GroupNorm};

use super::config::Backbone;
use super::params::{FrozenBatchNorm, Init, ParamStore};

pub(crate) const GN_GROUPS: usize = 8;

/// Takes every other row and column starting at 0, zero-padding odd sizes first.
/// Equivalent to a 1×1 max pool with stride 2.
pub(crate) fn subsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let x = if h % 2 == 1 { x.pad_with_zeros(2, 0, 1)? } else { x.clone() };
    let x = if w % 2 == 1 { x.pad_with_zeros(3, 0, 1)? } else { x };
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    x.reshape((b, c, h2, 2, w2, 2))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?
        .reshape((b, c, h2, w2))
}

/// 3×3 max pool, stride 2, padding 1, expressed with differentiable slicing.
/// Expects non-negative input (applied after ReLU), so zero padding is neutral.
fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let padded = x
        .pad_with_zeros(2, 1, 2 * ho + 1 - h)?
        .pad_with_zeros(3, 1, 2 * wo + 1 - w)?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let win = subsample2(&padded.narrow(2, dy, 2 * ho)?.narrow(3, dx, 2 * wo)?)?;
            out = Some(match out {
                None => win,
                Some(acc) => acc.maximum(&win)?,
            });
        }
    }
    Ok(out.expect("nine windows"))
}

struct ConvGn {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvGn {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: ps.conv2d(&format!("{name}.conv"), cin, cout, 3, stride, 1, Init::KaimingNormalFanOut, false)?,
            norm: ps.group_norm(&format!("{name}.gn"), cout, GN_GROUPS)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.norm.forward(&self.conv.forward(x)?)?.relu()
    }
}

/// Five stride-2 stages with group norm; returns stride 4, 8, 16 and 32 features.
struct CompactBody {
    stem: Vec<ConvGn>,
    stages: Vec<Vec<ConvGn>>,
}

impl CompactBody {
    const CHANNELS: [usize; 4] = [64, 96, 128, 128];

    fn new(ps: &mut ParamStore) -> Result<Self> {
        let p = "backbone.body";
        let stem = vec![
            ConvGn::new(ps, &format!("{p}.stem.0"), 3, 32, 2)?,
            ConvGn::new(ps, &format!("{p}.stem.1"), 32, 32, 1)?,
        ];
        let mut stages = Vec::new();
        let mut cin = 32;
        for (i, &cout) in Self::CHANNELS.iter().enumerate() {
            let mut blocks = vec![ConvGn::new(ps, &format!("{p}.stage{}.0", i + 2), cin, cout, 2)?];
            if i == 0 {
                blocks.push(ConvGn::new(ps, &format!("{p}.stage2.1"), cout, cout, 1)?);
            }
            stages.push(blocks);
            cin = cout;
        }
        Ok(Self { stem, stages })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = x.clone();
        for l in &self.stem {
            x = l.forward(&x)?;
        }
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for l in stage {
                x = l.forward(&x)?;
            }
            outs.push(x.clone());
        }
        Ok(outs)
    }
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    conv2: Conv2d,
    bn2: FrozenBatchNorm,
    conv3: Conv2d,
    bn3: FrozenBatchNorm,
    downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

impl Bottleneck {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, width: usize, stride: usize) -> Result<Self> {
        let cout = width * 4;
        let init = Init::KaimingNormalFanOut;
        let downsample = if stride != 1 || cin != cout {
            Some((
                ps.conv2d(&format!("{name}.downsample.0"), cin, cout, 1, stride, 0, init, false)?,
                ps.frozen_batch_norm(&format!("{name}.downsample.1"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: ps.conv2d(&format!("{name}.conv1"), cin, width, 1, 1, 0, init, false)?,
            bn1: ps.frozen_batch_norm(&format!("{name}.bn1"), width)?,
            conv2: ps.conv2d(&format!("{name}.conv2"), width, width, 3, stride, 1, init, false)?,
            bn2: ps.frozen_batch_norm(&format!("{name}.bn2"), width)?,
            conv3: ps.conv2d(&format!("{name}.conv3"), width, cout, 1, 1, 0, init, false)?,
            bn3: ps.frozen_batch_norm(&format!("{name}.bn3"), cout)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        (y + identity)?.relu()
    }
}

/// ResNet-50 with frozen batch norm, parameter names matching torchvision's state dict.
struct Resnet50Body {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    layers: Vec<Vec<Bottleneck>>,
}

impl Resnet50Body {
    const CHANNELS: [usize; 4] = [256, 512, 1024, 2048];

    fn new(ps: &mut ParamStore) -> Result<Self> {
        let p = "backbone.body";
        let conv1 = ps.conv2d(&format!("{p}.conv1"), 3, 64, 7, 2, 3, Init::KaimingNormalFanOut, false)?;
        let bn1 = ps.frozen_batch_norm(&format!("{p}.bn1"), 64)?;
        let mut layers = Vec::new();
        let mut cin = 64;
        for (i, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            let mut layer = Vec::with_capacity(blocks);
            for j in 0..blocks {
                let stride = if j == 0 && i > 0 { 2 } else { 1 };
                layer.push(Bottleneck::new(ps, &format!("{p}.layer{}.{j}", i + 1), cin, width, stride)?);
                cin = width * 4;
            }
            layers.push(layer);
        }
        Ok(Self { conv1, bn1, layers })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let x = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let mut x = max_pool_3x3_s2(&x)?;
        let mut outs = Vec::with_capacity(4);
        for layer in &self.layers {
            for block in layer {
                x = block.forward(&x)?;
            }
            outs.push(x.clone());
        }
        Ok(outs)
    }
}

enum Body {
    Compact(CompactBody),
    Resnet50(Resnet50Body),
}

/// Top-down feature pyramid with lateral 1×1 and output 3×3 convolutions.
struct Fpn {
    inner: Vec<Conv2d>,
    layer: Vec<Conv2d>,
    extra_pool_level: bool,
}

impl Fpn {
    fn new(ps: &mut ParamStore, in_channels: &[usize], out: usize, extra_pool_level: bool) -> Result<Self> {
        let init = Init::KaimingUniform { a: 1.0 };
        let mut inner = Vec::new();
        let mut layer = Vec::new();
        for (i, &c) in in_channels.iter().enumerate() {
            inner.push(ps.conv2d(&format!("backbone.fpn.inner_blocks.{i}"), c, out, 1, 1, 0, init, true)?);
            layer.push(ps.conv2d(&format!("backbone.fpn.layer_blocks.{i}"), out, out, 3, 1, 1, init, true)?);
        }
        Ok(Self {
            inner,
            layer,
            extra_pool_level,
        })
    }

    fn forward(&self, feats: &[Tensor]) -> Result<Vec<Tensor>> {
        let n = feats.len();
        let mut last_inner = self.inner[n - 1].forward(&feats[n - 1])?;
        let mut results = vec![self.layer[n - 1].forward(&last_inner)?];
        for idx in (0..n - 1).rev() {
            let lateral = self.inner[idx].forward(&feats[idx])?;
            let (h, w) = (lateral.dim(D::Minus2)?, lateral.dim(D::Minus1)?);
            let top_down = last_inner.upsample_nearest2d(h, w)?;
            last_inner = (lateral + top_down)?;
            results.insert(0, self.layer[idx].forward(&last_inner)?);
        }
        if self.extra_pool_level {
            let top = subsample2(results.last().expect("non-empty pyramid"))?;
            results.push(top);
        }
        Ok(results)
    }
}

/// Backbone body plus FPN. Output level `i` has stride `4 << i`.
pub(crate) struct BackboneFpn {
    body: Body,
    fpn: Fpn,
}

impl BackboneFpn {
    pub fn new(ps: &mut ParamStore, kind: Backbone, fpn_channels: usize) -> Result<Self> {
        let (body, channels, extra) = match kind {
            Backbone::CompactFpn => (
                Body::Compact(CompactBody::new(ps)?),
                CompactBody::CHANNELS.to_vec(),
                false,
            ),
            Backbone::Resnet50Fpn => (
                Body::Resnet50(Resnet50Body::new(ps)?),
                Resnet50Body::CHANNELS.to_vec(),
                true,
            ),
        };
        let fpn = Fpn::new(ps, &channels, fpn_channels, extra)?;
        Ok(Self { body, fpn })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let feats = match &self.body {
            Body::Compact(b) => b.forward(x)?,
            Body::Resnet50(b) => b.forward(x)?,
        };
        self.fpn.forward(&feats)
    }
}
