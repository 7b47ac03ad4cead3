pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod models;
pub mod optim;
pub mod pgm;
pub mod pipeline;
pub mod tape;
pub mod tensor;
