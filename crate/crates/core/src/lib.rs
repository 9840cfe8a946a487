//! Skeletal motion retargeting with semantic supervision.
//!
//! The crate is organised bottom-up:
//!
//! * [`skeleton`], [`rotation`], [`jdm`]: motion data model, 6D rotations,
//!   forward kinematics and joint distance matrices.
//! * [`mesh`], [`sdf`]: skinned geometry, linear blend skinning and the body
//!   signed-distance field used for the interpenetration penalty.
//! * [`net`]: graph-convolutional encoder/decoder and motion discriminator.
//! * [`losses`]: every training objective as a differentiable scalar.
//! * [`render`], [`semantics`], [`vlm`]: soft silhouette rendering, the mock
//!   embedder and the vision-language service client.
//! * [`train`], [`metrics`]: two-stage training, inference and evaluation.
//! * [`io`], [`synth`]: file formats and synthetic characters/motions.
//!
//! Everything differentiable runs on the small reverse-mode tape in
//! [`autodiff`].

pub mod autodiff;
pub mod error;
pub mod io;
pub mod jdm;
pub mod losses;
pub mod math;
pub mod net;
pub mod optim;
pub mod mesh;
pub mod metrics;
pub mod parallel;
pub mod render;
pub mod rotation;
pub mod scene;
pub mod sdf;
pub mod semantics;
pub mod skeleton;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vlm;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use parallel::Exec;
pub use skeleton::{JointPositions, Motion, Skeleton};
pub use tensor::Tensor;
