//! Cross-modality Refinement and Complement.
//!
//! Per decoder level, the auxiliary stream is gated by an importance mask
//! derived from the reinforced dominant features (complement path), while
//! dynamically generated multi-dilation depthwise filters re-convolve the
//! reinforced features to produce a spatial refinement mask for the raw
//! dominant features (refinement path). Both paths pass through channel
//! attention and feed the running decoder.
//!
//! The baseline ablation block keeps only the importance sensor and a
//! concatenation, matching the paper's `B` configuration.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{
    channel_max, channel_mean, conv1x1, conv3x3, depthwise_dynamic_conv2d, mask_sigmoid,
    upsample2x, ChannelAttention, Conv2d, DenseBlock, ParamStore,
};

/// Output of one decoder level.
#[derive(Debug)]
pub struct CrcLevelOutput {
    /// Importance response map in (0,1) at level resolution; supervised.
    pub importance_mask: Tensor,
    /// Decoder features of this level (C_d channels).
    pub decoder_features: Tensor,
}

/// One per-level cross-modality decoder block.
pub trait CrossModalBlock {
    fn name(&self) -> &'static str;
    /// `f_prev_dec` must be `None` exactly at level 5.
    fn forward(
        &self,
        f_dom: &Tensor,
        f_aux: &Tensor,
        f_dom_r: &Tensor,
        f_prev_dec: Option<&Tensor>,
        train: bool,
    ) -> Result<CrcLevelOutput>;
}

fn check_prev_contract(level: usize, f_prev_dec: Option<&Tensor>) -> Result<()> {
    match (level, f_prev_dec) {
        (5, Some(_)) => Err(Error::Contract(
            "level 5 must not receive previous decoder features".into(),
        )),
        (2..=4, None) => Err(Error::Contract(format!(
            "level {level} requires previous decoder features"
        ))),
        _ => Ok(()),
    }
}

/// Generates one depthwise (k x k) kernel per sample and channel from the
/// complemented auxiliary features: two convolutions, global average
/// pooling, and a reshape.
pub struct FilterGenerator {
    conv1: Conv2d,
    conv2: Conv2d,
    channels: usize,
    kernel: usize,
    pub dilation: usize,
}

impl FilterGenerator {
    pub fn new(ps: &ParamStore, channels: usize, kernel: usize, dilation: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Contract(format!(
                "dynamic kernel size {kernel} cannot keep same-size padding at dilation {dilation}"
            )));
        }
        let conv1 = conv3x3(ps, "conv1", channels, channels)?;
        let conv2 = conv1x1(ps, "conv2", channels, channels * kernel * kernel)?;
        Ok(Self {
            conv1,
            conv2,
            channels,
            kernel,
            dilation,
        })
    }

    /// (B, C, H, W) -> kernels (B, C, k, k).
    pub fn kernels(&self, f_caux: &Tensor) -> Result<Tensor> {
        let (b, _, _, _) = f_caux.dims4()?;
        let h = self.conv1.forward(f_caux)?.relu()?;
        let h = self.conv2.forward(&h)?;
        let pooled = h.mean_keepdim((2, 3))?;
        Ok(pooled.reshape((b, self.channels, self.kernel, self.kernel))?)
    }
}

pub struct CrcBlock {
    level: usize,
    sensor_conv: Conv2d,
    sensor_out: Conv2d,
    dense: DenseBlock,
    caux_conv: Conv2d,
    generators: [FilterGenerator; 3],
    dy_fuse: Conv2d,
    refine_conv: Conv2d,
    ca_caux: ChannelAttention,
    ca_ref: ChannelAttention,
    decode: Conv2d,
}

impl CrcBlock {
    pub fn new(ps: &ParamStore, level: usize, c_d: usize, dyn_kernel: usize) -> Result<Self> {
        let sensor_conv = conv3x3(ps, "sensor.conv", c_d, c_d)?;
        let sensor_out = conv1x1(ps, "sensor.out", c_d, 1)?;
        let dense = DenseBlock::new(&ps.scope("dense"), c_d)?;
        let caux_conv = conv1x1(ps, "caux", c_d, c_d)?;
        let mut gens = Vec::new();
        for dilation in [1usize, 3, 5] {
            gens.push(FilterGenerator::new(
                &ps.scope(&format!("fg{dilation}")),
                c_d,
                dyn_kernel,
                dilation,
            )?);
        }
        let generators: [FilterGenerator; 3] = gens
            .try_into()
            .map_err(|_| Error::Contract("three filter generators".into()))?;
        let dy_fuse = conv3x3(ps, "dy_fuse", 3 * c_d, c_d)?;
        let refine_conv = conv3x3(ps, "refine", 2, 1)?;
        let ca_caux = ChannelAttention::new(&ps.scope("ca_caux"), c_d, c_d)?;
        let ca_ref = ChannelAttention::new(&ps.scope("ca_ref"), c_d, c_d)?;
        let decode = conv3x3(ps, "decode", 2 * c_d, c_d)?;
        Ok(Self {
            level,
            sensor_conv,
            sensor_out,
            dense,
            caux_conv,
            generators,
            dy_fuse,
            refine_conv,
            ca_caux,
            ca_ref,
            decode,
        })
    }

    /// Importance response map from the reinforced dominant features.
    pub fn importance_mask(&self, f_dom_r: &Tensor) -> Result<Tensor> {
        mask_sigmoid(&self.sensor_out.forward(&self.sensor_conv.forward(f_dom_r)?)?)
    }

    /// Gates the auxiliary features and strengthens them with the dense
    /// block; returns (weighted aux, complemented aux).
    pub fn complement_aux(&self, f_aux: &Tensor, mask_s: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let f_waux = f_aux.broadcast_mul(mask_s)?;
        let strengthened = (self.dense.forward(&f_waux, train)? + &f_waux)?;
        let f_caux = self.caux_conv.forward(&strengthened)?;
        Ok((f_waux, f_caux))
    }

    /// Multi-dilation dynamic refinement of the reinforced dominant features.
    pub fn dynamic_refine(&self, f_caux: &Tensor, f_dom_r: &Tensor) -> Result<Tensor> {
        let mut branches = Vec::new();
        for generator in &self.generators {
            let kernels = generator.kernels(f_caux)?;
            branches.push(depthwise_dynamic_conv2d(f_dom_r, &kernels, generator.dilation)?);
        }
        let refs: Vec<&Tensor> = branches.iter().collect();
        self.dy_fuse.forward(&Tensor::cat(&refs, 1)?)
    }

    /// Refinement mask from channel-axis pooling of f_dy, applied to the raw
    /// dominant features; returns (refined features, mask).
    pub fn refine_dominant(&self, f_dy: &Tensor, f_dom: &Tensor) -> Result<(Tensor, Tensor)> {
        let pooled = Tensor::cat(&[channel_max(f_dy)?, channel_mean(f_dy)?], 1)?;
        let mask_r = mask_sigmoid(&self.refine_conv.forward(&pooled)?)?;
        let f_ref = f_dom.broadcast_mul(&mask_r)?;
        Ok((f_ref, mask_r))
    }
}

impl CrossModalBlock for CrcBlock {
    fn name(&self) -> &'static str {
        "crc"
    }

    fn forward(
        &self,
        f_dom: &Tensor,
        f_aux: &Tensor,
        f_dom_r: &Tensor,
        f_prev_dec: Option<&Tensor>,
        train: bool,
    ) -> Result<CrcLevelOutput> {
        check_prev_contract(self.level, f_prev_dec)?;
        let mask_s = self.importance_mask(f_dom_r)?;
        let (_, f_caux) = self.complement_aux(f_aux, &mask_s, train)?;
        let f_dy = self.dynamic_refine(&f_caux, f_dom_r)?;
        let (f_ref, _) = self.refine_dominant(&f_dy, f_dom)?;
        let f_rc = (self.ca_caux.forward(&f_caux)? + self.ca_ref.forward(&f_ref)?)?;
        let skip = match f_prev_dec {
            Some(prev) => upsample2x(prev)?,
            None => f_dom_r.clone(),
        };
        let decoder_features = self.decode.forward(&Tensor::cat(&[&f_rc, &skip], 1)?)?;
        Ok(CrcLevelOutput {
            importance_mask: mask_s,
            decoder_features,
        })
    }
}

/// Baseline block (`B` rows of the ablations): importance-gated auxiliary
/// features concatenated with the dominant features; no dynamic refinement.
pub struct BaselineBlock {
    level: usize,
    sensor_conv: Conv2d,
    sensor_out: Conv2d,
    cat_conv: Conv2d,
    decode: Conv2d,
}

impl BaselineBlock {
    pub fn new(ps: &ParamStore, level: usize, c_d: usize) -> Result<Self> {
        Ok(Self {
            level,
            sensor_conv: conv3x3(ps, "sensor.conv", c_d, c_d)?,
            sensor_out: conv1x1(ps, "sensor.out", c_d, 1)?,
            cat_conv: conv3x3(ps, "cat", 2 * c_d, c_d)?,
            decode: conv3x3(ps, "decode", 2 * c_d, c_d)?,
        })
    }
}

impl CrossModalBlock for BaselineBlock {
    fn name(&self) -> &'static str {
        "baseline"
    }

    fn forward(
        &self,
        _f_dom: &Tensor,
        f_aux: &Tensor,
        f_dom_r: &Tensor,
        f_prev_dec: Option<&Tensor>,
        _train: bool,
    ) -> Result<CrcLevelOutput> {
        check_prev_contract(self.level, f_prev_dec)?;
        let mask_s = mask_sigmoid(&self.sensor_out.forward(&self.sensor_conv.forward(f_dom_r)?)?)?;
        let f_waux = f_aux.broadcast_mul(&mask_s)?;
        let f_rc = self.cat_conv.forward(&Tensor::cat(&[&f_waux, f_dom_r], 1)?)?;
        let skip = match f_prev_dec {
            Some(prev) => upsample2x(prev)?,
            None => f_dom_r.clone(),
        };
        let decoder_features = self.decode.forward(&Tensor::cat(&[&f_rc, &skip], 1)?)?;
        Ok(CrcLevelOutput {
            importance_mask: mask_s,
            decoder_features,
        })
    }
}

pub(crate) fn ctor_crc(
    ps: &ParamStore,
    level: usize,
    c_d: usize,
    dyn_kernel: usize,
) -> Result<Box<dyn CrossModalBlock>> {
    Ok(Box::new(CrcBlock::new(ps, level, c_d, dyn_kernel)?))
}

pub(crate) fn ctor_baseline(
    ps: &ParamStore,
    level: usize,
    c_d: usize,
    _dyn_kernel: usize,
) -> Result<Box<dyn CrossModalBlock>> {
    Ok(Box::new(BaselineBlock::new(ps, level, c_d)?))
}

pub fn build_cross_modal_block(
    name: &str,
    ps: &ParamStore,
    level: usize,
    c_d: usize,
    dyn_kernel: usize,
) -> Result<Box<dyn CrossModalBlock>> {
    crate::registry::cross_modal_blocks().get(name)?(ps, level, c_d, dyn_kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Tensor};

    const C: usize = 16;

    fn block(level: usize) -> CrcBlock {
        let ps = ParamStore::new(23, DType::F32);
        CrcBlock::new(&ps.scope(format!("crc{level}").as_str()), level, C, 3).unwrap()
    }

    fn randn(shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::randn(0f32, 1.0, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn zero_reinforced_features_give_half_mask_with_channel_reduction() {
        let b = block(3);
        let f = Tensor::zeros((2, C, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let m = b.importance_mask(&f).unwrap();
        assert_eq!(m.dims(), &[2, 1, 8, 8]);
        for v in m.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn importance_mask_range_is_open_unit_interval() {
        let b = block(3);
        let m = b.importance_mask(&randn((1, C, 8, 8))).unwrap();
        for v in m.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn zero_mask_annihilates_weighted_aux() {
        let b = block(3);
        let aux = randn((1, C, 8, 8));
        let zero_mask = Tensor::zeros((1, 1, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let (waux, _) = b.complement_aux(&aux, &zero_mask, false).unwrap();
        assert_eq!(waux.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn unit_mask_passes_aux_through_exactly() {
        let b = block(3);
        let aux = randn((1, C, 8, 8));
        let unit = Tensor::ones((1, 1, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let (waux, _) = b.complement_aux(&aux, &unit, false).unwrap();
        assert_eq!(
            waux.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            aux.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn kernels_depend_on_their_own_sample() {
        let b = block(3);
        let a = randn((1, C, 8, 8));
        let bb = randn((1, C, 8, 8));
        let batch = Tensor::cat(&[&a, &bb], 0).unwrap();
        let kernels = b.generators[0].kernels(&batch).unwrap();
        let k0 = kernels.narrow(0, 0, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let k1 = kernels.narrow(0, 1, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(k0, k1, "kernels must differ across samples");

        // And each sample's kernels match the single-sample computation.
        let ka = b.generators[0].kernels(&a).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(k0, ka);
    }

    #[test]
    fn zero_f_dy_gives_half_refine_mask() {
        let b = block(3);
        let f_dy = Tensor::zeros((1, C, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let f_dom = randn((1, C, 8, 8));
        let (f_ref, mask_r) = b.refine_dominant(&f_dy, &f_dom).unwrap();
        for v in mask_r.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert_eq!(v, 0.5);
        }
        let half = (f_dom * 0.5).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(f_ref.flatten_all().unwrap().to_vec1::<f32>().unwrap(), half);
    }

    #[test]
    fn forced_unit_mask_keeps_dominant_features() {
        let f_dom = randn((1, C, 8, 8));
        let unit = Tensor::ones((1, 1, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let f_ref = f_dom.broadcast_mul(&unit).unwrap();
        assert_eq!(
            f_ref.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            f_dom.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn level5_shape_contract() {
        let b = block(5);
        let out = b
            .forward(&randn((1, C, 2, 2)), &randn((1, C, 2, 2)), &randn((1, C, 2, 2)), None, false)
            .unwrap();
        assert_eq!(out.decoder_features.dims(), &[1, C, 2, 2]);
        assert_eq!(out.importance_mask.dims(), &[1, 1, 2, 2]);
    }

    #[test]
    fn level2_upsamples_previous_decoder_features() {
        let b = block(2);
        let prev = randn((1, C, 8, 8));
        let out = b
            .forward(
                &randn((1, C, 16, 16)),
                &randn((1, C, 16, 16)),
                &randn((1, C, 16, 16)),
                Some(&prev),
                false,
            )
            .unwrap();
        assert_eq!(out.decoder_features.dims(), &[1, C, 16, 16]);
    }

    #[test]
    fn prev_decoder_contract_violations_error() {
        let b5 = block(5);
        let x = randn((1, C, 2, 2));
        let err = b5.forward(&x, &x, &x, Some(&x), false).unwrap_err();
        assert!(err.to_string().contains("level 5"), "{err}");

        let b3 = block(3);
        let y = randn((1, C, 8, 8));
        let err = b3.forward(&y, &y, &y, None, false).unwrap_err();
        assert!(err.to_string().contains("level 3"), "{err}");
    }

    #[test]
    fn baseline_block_has_fewer_parameters_than_crc() {
        let ps = ParamStore::new(1, DType::F32);
        BaselineBlock::new(&ps.scope("b"), 3, C).unwrap();
        let baseline = ps.num_params();
        let ps2 = ParamStore::new(1, DType::F32);
        CrcBlock::new(&ps2.scope("c"), 3, C, 3).unwrap();
        let crc = ps2.num_params();
        assert!(crc > baseline, "crc {crc} <= baseline {baseline}");
    }
}
