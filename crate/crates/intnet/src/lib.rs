//! Post-training quantization toolkit and integer-only inference engine for
//! small convolutional networks.
//!
//! The crate converts float networks (convolutions with optional batch norm,
//! bounded ReLUs, residual additions, channel concatenations) into models
//! that execute with 8-bit weights, narrow activations, and i32 accumulators
//! only — no floating point in the inference path. Scale bookkeeping is done
//! in exact rational arithmetic so the integer parameters written into a
//! model are reproducible bit for bit.
//!
//! Module map:
//!
//! * [`tensor`] — dense tensors and the binary blob format.
//! * [`ratio`] — exact rational scale arithmetic.
//! * [`ir`] — the network graph and its validation.
//! * [`model_io`] — the text-plus-blobs model file format.
//! * [`float_engine`] — f32 reference execution.
//! * [`calibrate`] — activation bound estimation.
//! * [`quant`] — quantization operations and scale synchronization.
//! * [`convert`] — the float-to-integer conversion pipeline.
//! * [`int_engine`] — integer-only execution.

pub mod calibrate;
pub mod convert;
pub mod error;
pub mod float_engine;
pub mod int_engine;
pub mod ir;
pub mod model_io;
pub mod quant;
pub mod ratio;
pub mod tensor;

pub use error::{Error, Result};
