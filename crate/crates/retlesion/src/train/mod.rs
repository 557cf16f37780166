pub mod augment;
pub mod runner;
pub mod schedule;
pub mod sgd;
