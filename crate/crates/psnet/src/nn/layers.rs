//! Building-block layers over the parameter store.

use candle_core::{Tensor, Var};
use candle_nn::ops::sigmoid;

use crate::error::Result;
use crate::nn::param::{Init, ParamStore};

/// 2D convolution with bias.
#[derive(Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Conv2d {
    pub fn new(
        ps: &ParamStore,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = ps.get(
            "weight",
            &[out_c, in_c, kernel, kernel],
            Init::KaimingNormal { fan_in },
        )?;
        let bias = ps.get("bias", &[out_c], Init::Const(0.0))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, self.dilation, 1)?;
        let c = self.bias.dims1()?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// 3x3 same-padding stride-1 convolution.
pub fn conv3x3(ps: &ParamStore, name: &str, in_c: usize, out_c: usize) -> Result<Conv2d> {
    Conv2d::new(&ps.scope(name), in_c, out_c, 3, 1, 1, 1)
}

/// 1x1 convolution.
pub fn conv1x1(ps: &ParamStore, name: &str, in_c: usize, out_c: usize) -> Result<Conv2d> {
    Conv2d::new(&ps.scope(name), in_c, out_c, 1, 1, 0, 1)
}

/// 3x3 stride-2 same-padding convolution (halves the resolution).
pub fn conv3x3_s2(ps: &ParamStore, name: &str, in_c: usize, out_c: usize) -> Result<Conv2d> {
    Conv2d::new(&ps.scope(name), in_c, out_c, 3, 2, 1, 1)
}

/// Affine layer on (B, in) inputs.
#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &ParamStore, in_f: usize, out_f: usize) -> Result<Self> {
        let bound = 1.0 / (in_f as f64).sqrt();
        let weight = ps.get("weight", &[out_f, in_f], Init::UniformSym { bound })?;
        let bias = ps.get("bias", &[out_f], Init::Const(0.0))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Batch normalization over (B, H, W) per channel, with running statistics.
#[derive(Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(ps: &ParamStore, channels: usize) -> Result<Self> {
        let weight = ps.get("weight", &[channels], Init::Const(1.0))?;
        let bias = ps.get("bias", &[channels], Init::Const(0.0))?;
        let running_mean = ps.buffer("running_mean", &[channels], 0.0)?;
        let running_var = ps.buffer("running_var", &[channels], 1.0)?;
        Ok(Self {
            weight,
            bias,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;

            let n = (b * h * w) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let batch_mean = mean.detach().reshape(c)?;
            let batch_var = (var.detach().reshape(c)? * unbias)?;
            let m = self.momentum;
            self.running_mean.set(
                &((self.running_mean.as_tensor() * (1.0 - m))? + (batch_mean * m)?)?,
            )?;
            self.running_var.set(
                &((self.running_var.as_tensor() * (1.0 - m))? + (batch_var * m)?)?,
            )?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let norm = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let y = norm
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?;
        Ok(y)
    }
}

/// conv3x3 -> batch norm -> relu.
#[derive(Clone)]
pub struct ConvNormRelu {
    conv: Conv2d,
    norm: BatchNorm2d,
}

impl ConvNormRelu {
    pub fn new(ps: &ParamStore, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Result<Self> {
        let padding = kernel / 2;
        let conv = Conv2d::new(&ps.scope("conv"), in_c, out_c, kernel, stride, padding, 1)?;
        let norm = BatchNorm2d::new(&ps.scope("norm"), out_c)?;
        Ok(Self { conv, norm })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?, train)?.relu()?)
    }
}

/// Three densely connected 3x3 layers (growth c/4) plus a 1x1 transition
/// back to the input width, so the caller can add the block output to its
/// input.
#[derive(Clone)]
pub struct DenseBlock {
    layers: Vec<(Conv2d, BatchNorm2d)>,
    transition: Conv2d,
}

impl DenseBlock {
    pub fn new(ps: &ParamStore, channels: usize) -> Result<Self> {
        let growth = channels / 4;
        let mut layers = Vec::new();
        for i in 0..3 {
            let scope = ps.scope(&format!("layer{i}"));
            let conv = conv3x3(&scope, "conv", channels + i * growth, growth)?;
            let norm = BatchNorm2d::new(&scope.scope("norm"), growth)?;
            layers.push((conv, norm));
        }
        let transition = conv1x1(ps, "transition", channels + 3 * growth, channels)?;
        Ok(Self { layers, transition })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut acc = x.clone();
        for (conv, norm) in &self.layers {
            let y = norm.forward(&conv.forward(&acc)?, train)?.relu()?;
            acc = Tensor::cat(&[&acc, &y], 1)?;
        }
        self.transition.forward(&acc)
    }
}

/// Squeeze-excitation channel attention with a 1x1 channel compaction in
/// front (reduction ratio 4).
#[derive(Clone)]
pub struct ChannelAttention {
    compact: Conv2d,
    fc1: Linear,
    fc2: Linear,
}

impl ChannelAttention {
    pub fn new(ps: &ParamStore, in_c: usize, out_c: usize) -> Result<Self> {
        let compact = conv1x1(ps, "compact", in_c, out_c)?;
        let fc1 = Linear::new(&ps.scope("fc1"), out_c, out_c / 4)?;
        let fc2 = Linear::new(&ps.scope("fc2"), out_c / 4, out_c)?;
        Ok(Self { compact, fc1, fc2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.compact.forward(x)?;
        let (b, c, _, _) = z.dims4()?;
        let s = global_avg_pool(&z)?;
        let w = sigmoid(&self.fc2.forward(&self.fc1.forward(&s)?.relu()?)?)?;
        Ok(z.broadcast_mul(&w.reshape((b, c, 1, 1))?)?)
    }
}

/// Sigmoid clamped to [1e-7, 1 - 1e-7]: keeps mask values strictly inside
/// (0,1) even where f32 saturation would round to exactly 0 or 1.
pub fn mask_sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(sigmoid(x)?.clamp(1e-7, 1.0 - 1e-7)?)
}

/// Global average pooling: (B, C, H, W) -> (B, C).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    Ok(x.mean_keepdim((2, 3))?.reshape((b, c))?)
}

/// Max over the channel axis: (B, C, H, W) -> (B, 1, H, W).
pub fn channel_max(x: &Tensor) -> Result<Tensor> {
    Ok(x.max_keepdim(1)?)
}

/// Mean over the channel axis: (B, C, H, W) -> (B, 1, H, W).
pub fn channel_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        ParamStore::new(3, DType::F32)
    }

    #[test]
    fn conv_preserves_spatial_size_with_same_padding() {
        let ps = store();
        let conv = conv3x3(&ps, "c", 4, 6).unwrap();
        let x = Tensor::zeros((2, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[2, 6, 8, 8]);
    }

    #[test]
    fn stride2_conv_halves() {
        let ps = store();
        let conv = conv3x3_s2(&ps, "c", 4, 4).unwrap();
        let x = Tensor::zeros((1, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[1, 4, 8, 8]);
    }

    #[test]
    fn batch_norm_standardizes_in_train_mode() {
        let ps = store();
        let bn = BatchNorm2d::new(&ps.scope("bn"), 2).unwrap();
        let data: Vec<f32> = (0..32).map(|i| i as f32).collect();
        let x = Tensor::from_vec(data, (2, 2, 2, 4), &Device::Cpu).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let m = y.mean_keepdim((0, 2, 3)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for v in m {
            assert!(v.abs() < 1e-5, "channel mean {v} not ~0");
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let ps = store();
        let bn = BatchNorm2d::new(&ps.scope("bn"), 1).unwrap();
        let x = Tensor::from_vec(vec![10f32, 12.0, 14.0, 16.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        // Fresh running stats are (0, 1): eval output equals input.
        let y = bn.forward(&x, false).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (a, b) in y.iter().zip([10f32, 12.0, 14.0, 16.0]) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        // A train pass moves the running stats toward the batch stats.
        bn.forward(&x, true).unwrap();
        let y2 = bn.forward(&x, false).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(y, y2);
    }

    #[test]
    fn dense_block_keeps_width() {
        let ps = store();
        let block = DenseBlock::new(&ps.scope("d"), 16).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 16, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(block.forward(&x, true).unwrap().dims(), &[2, 16, 4, 4]);
    }

    #[test]
    fn channel_attention_keeps_shape_and_bounds() {
        let ps = store();
        let ca = ChannelAttention::new(&ps.scope("ca"), 8, 8).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 8, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(ca.forward(&x).unwrap().dims(), &[2, 8, 4, 4]);
    }

    #[test]
    fn channel_pools_of_constant_map_are_constant() {
        let x = Tensor::full(0.7f32, (1, 5, 3, 3), &Device::Cpu).unwrap();
        let mx = channel_max(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let av = channel_mean(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(mx.iter().all(|&v| v == 0.7));
        assert!(av.iter().all(|&v| (v - 0.7).abs() < 1e-7));
    }
}
