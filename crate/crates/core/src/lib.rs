pub mod domain;
pub mod evaluator;
pub mod fem;
pub mod gallery;
pub mod nn;
pub mod solver;
pub mod tensor;
pub mod trace;
