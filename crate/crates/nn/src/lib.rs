//! Minimal dense-tensor engine behind the echoqa quality streams.
//!
//! * [`Tensor`] is a row-major array over `f32` or `f64`.
//! * [`ops`] holds the forward kernels (convolution via im2col with a direct
//!   reference, max pooling, batch norm, activations, dense, LSTM step).
//! * [`Tape`] records a forward pass and produces exact gradients.
//! * [`optim`] has ADAM and the step-decay schedule.
//! * [`checkpoint`] reads and writes parameter files.
//!
//! ```
//! use echoqa_nn::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::new([1, 2], vec![0.5, -1.0]).unwrap());
//! let mut tape = Tape::new();
//! let x = tape.input(Tensor::new([1, 2], vec![2.0, 3.0]).unwrap());
//! let wv = tape.param(&store, w);
//! let y = tape.matmul_t(x, wv).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, 3.0]);
//! ```

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod lstm;
pub mod ops;
pub mod optim;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use error::{NnError, Result};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{lit, Real, Tensor};
