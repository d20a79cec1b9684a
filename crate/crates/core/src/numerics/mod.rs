//! Dense kernels, initialisation, a reverse-mode tape, Adam, and a
//! finite-difference gradient checker. All arithmetic is `f64`.

mod adam;
mod gradcheck;
mod init;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::finite_diff_check;
pub use init::{xavier_bound, xavier_init, xavier_init_with};
pub use tape::{sigmoid, GradTape, Gradients, Var};
pub use tensor::{softmax_in_place, Tensor};
