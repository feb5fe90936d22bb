//! Verifiable privacy-preserving convolution offloading.
//!
//! A resource-constrained client lowers a convolution layer to a matrix
//! product, hides its input under precomputed additive masks, ships the
//! blinded matrix to an untrusted server, checks the returned product with a
//! secret random-vector identity, and subtracts the mask images to obtain
//! the true result. A wrong product slips past the check with probability at
//! most `1/|Z|` over the check vector's sample set `Z`; an honest product
//! always passes.
//!
//! The crate is organized along the protocol:
//!
//! * [`tensor`] — dense matrices, the im2col lowering and its inverse, and a
//!   plain six-loop convolution used as the reference;
//! * [`keymask`] — security parameters, the mask pool, per-input keys,
//!   blinding and recovery;
//! * [`verify`] — the verification tag and the product check;
//! * [`server`] — the server's compute step plus pluggable misbehavior;
//! * [`wire`] / [`net`] — the binary framing and the TCP client/server;
//! * [`bench`] — timing sweeps, operation-count accounting, and the
//!   detection-rate experiment;
//! * [`cost`] — scalar-operation counters behind all of the above.
//!
//! The `examples/` directory walks through each capability; the `convoy`
//! binary exposes the benchmarks and a standalone server.

pub mod bench;
pub mod cli;
pub mod cost;
pub mod keymask;
pub mod net;
pub mod server;
pub mod tensor;
pub mod verify;
pub mod wire;

pub use cost::{tally, OpCounts};
pub use keymask::{
    blind, keygen, precompute_masks, recover, sample_z, BlindedInput, KeyError, MaskSet,
    ParamError, SecretKey, SecurityParams,
};
pub use net::{
    client_infer, serve, spawn_server, Client, ModelCache, ServerConfig, ServerHandle,
    SessionError, SessionStats,
};
pub use server::{adversary_compute, compute, ServerBehavior};
pub use tensor::{
    direct_conv, flatten_kernels, flatten_output, im2col, reshape_output, unflatten_kernels,
    ArithMode, ConvShape, InputTensor, KernelSet, Matrix, OutputTensor, Scalar, TensorError,
};
pub use verify::{make_verification_tag, TolerancePolicy, VerificationTag};
