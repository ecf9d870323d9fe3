//! Networks, encoders, and persistence: everything the learners share for
//! function approximation.

pub mod checkpoint;
pub mod encode;
pub mod math;
pub mod mlp;
pub mod policy;

pub use checkpoint::Checkpoint;
pub use encode::{encode_joint, encode_local, joint_encoding_len, EncodeNorm, LOCAL_ENCODING_LEN};
pub use mlp::{param_count, Activation, Adam, Mlp};
pub use policy::{DirichletPolicy, CONCENTRATION_FLOOR, POLICY_HIDDEN};
