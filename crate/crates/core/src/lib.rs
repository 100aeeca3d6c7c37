pub mod code_memory;
pub mod error;
pub mod linalg;
pub mod rng;
pub mod tensor;
pub mod autodiff;
pub mod layer;
pub mod oracles;
pub mod cross;
pub mod selftest;
