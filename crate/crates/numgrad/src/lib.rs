//! Small dense-tensor autodiff for feedforward networks.
//!
//! Everything is `f64`. Build a [`Graph`] per evaluation: register parameters
//! with [`Graph::param`], inputs with [`Graph::constant`], compose operations,
//! then call [`Graph::backward`] on a scalar loss.
//!
//! ```
//! use numgrad::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(Tensor::scalar(3.0));
//! let y = g.mul(w, w).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(w).unwrap().item(), Some(6.0));
//! ```

mod adam;
mod error;
mod graph;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{NumError, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
