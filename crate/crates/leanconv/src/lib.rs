//! Structured "lean" convolution operators: a fully-coupled 1x1 part plus a
//! grouped spatial stencil, with exact cost accounting, several execution
//! paths, reverse-mode gradients, and a small residual network built on top.

pub mod data;
pub mod kernels;
pub mod network;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod verify;
