//! Mask and masked-image feature adapters fused into denoiser taps by
//! cross-attention.

mod adapters;
mod attention;
mod features;
mod schedule;

pub use adapters::{
    attach_adapters, AdaptedDenoiser, AdapterCheckpoint, AdapterConfig, AdapterHook, AdapterSet,
    ADAPTER_CHECKPOINT_VERSION,
};
pub use attention::{
    attend_var, attention_weights, block_var, cross_attend, fuse_var, joint_cross_attend,
    project_features, project_var, stream_outputs, AttentionBlockParams, BlockVars, FuseMlp,
    Linear, StreamParams, TapFeatures,
};
pub use features::{
    extract_features, masked_image, resize_bilinear, resnet50_feature_geometry, FeatureBundle,
    FeatureExtractor, ToyExtractor, ToyExtractorConfig,
};
pub use schedule::{default_schedule, InjectionRole, InjectionSchedule, Stream};
