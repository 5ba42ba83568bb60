//! Numeric core: scalar abstraction, seeded RNG, the autodiff tape, named
//! parameter storage, and transformer layers built on top of them.

pub mod layers;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;

pub mod gradcheck;

pub use params::{GraphCtx, ParamStore, Tensor};
pub use rng::SeedRng;
pub use scalar::Scalar;
pub use tape::{Grads, Id, NumError, Tape};
