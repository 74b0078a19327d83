//! Small differentiable networks with hand-written backward passes.

pub mod backbone;
pub mod checkpoint;
pub mod layers;
pub mod msfuse;
pub mod roi;
pub mod rpn;
pub mod ssd;
pub mod tensor;

pub use backbone::{Backbone, BackboneConfig, StageConfig, Taps};
pub use checkpoint::Checkpoint;
pub use layers::{Module, Param};
pub use msfuse::MsFuse;
pub use roi::{roi_pool, RoiFeature, RoiHead, RoiPool};
pub use rpn::{propose, ProposalConfig, RpnHead, RpnOutput, ScoredBox};
pub use ssd::{trim_ssd, MultiboxOutput, SsdHeadConfig, SsdNet};
pub use tensor::{Matrix, Volume};
