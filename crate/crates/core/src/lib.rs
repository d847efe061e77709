//! Grouped query/key/value attention.
//!
//! One attention layer type covers multi-head, multi-query, grouped-query,
//! multi-key-value, grouped-key-value and the full grouped
//! query-key-value family through an explicit head pairing schedule. The
//! crate also carries the numeric core those layers run on (dense tensors,
//! per-op adjoints, a recording tape), a micro vision transformer with
//! exact parameter accounting, a deterministic AdamW trainer, and a
//! comparison/benchmark report generator.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod scheme;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod vit;

pub use attention::{attention_flops, attention_param_count, grouped_attention_forward, AttentionWeights, FlopReport};
pub use error::{Error, Result, TensorError};
pub use scheme::{make_scheme, GroupingScheme, ScaleMode, SchemeKind, SchemeSpec, Violation};
pub use tape::{GradPair, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
pub use vit::{count_params, init_weights, vit_forward, ParamReport, Preset, ViTConfig, ViTWeights};
