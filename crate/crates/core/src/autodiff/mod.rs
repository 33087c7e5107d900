mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, numeric_gradient};
pub use tape::{Tape, Var};
