pub mod assign;
pub mod baselines;
pub mod cae;
pub mod env;
pub mod geom;
pub mod harness;
pub mod mgm;
pub mod model;
pub mod policy;
pub mod selftest;
pub mod tensor;
pub mod train;
