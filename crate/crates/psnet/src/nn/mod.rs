//! Tensor building blocks: parameter store, layers, resizing, and the
//! per-sample dynamic convolution primitive.

pub mod dynconv;
pub mod layers;
pub mod param;
pub mod resize;

pub use dynconv::depthwise_dynamic_conv2d;
pub use layers::{
    channel_max, channel_mean, conv1x1, conv3x3, conv3x3_s2, global_avg_pool, mask_sigmoid,
    BatchNorm2d, ChannelAttention, Conv2d, ConvNormRelu, DenseBlock, Linear,
};
pub use param::{Init, ParamStore};
pub use resize::{area_resize, bilinear_resize, upsample2x};
