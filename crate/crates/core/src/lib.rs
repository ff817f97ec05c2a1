//! ECOC ensemble classifiers and targeted white-box attacks against them.

pub mod codes;
pub mod model;
pub mod tensor;
pub mod data;
pub mod training;
pub mod attacks;
pub mod evaluation;
pub mod selftest;
pub mod cli;
