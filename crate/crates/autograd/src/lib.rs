//! Dense array arithmetic with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s during a
//! forward pass. Calling [`Graph::backward`] on a scalar node walks the
//! record in reverse and returns the gradient of that scalar with respect
//! to every parameter of the borrowed [`ParamStore`] that took part in the
//! computation. Parameters that were never touched get no entry, which
//! callers treat as a zero gradient.
//!
//! ```
//! use diet_autograd::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! let x = store.insert("x", Tensor::scalar(3.0));
//! let mut g = Graph::new(&store);
//! let xv = g.param(x);
//! let y = g.mul(xv, xv).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod error;
mod gemm;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;
mod tensor;

pub use error::{Error, Result};
pub use gemm::matmul_into;
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tensor::{logsumexp, softmax_in_place, Tensor};
