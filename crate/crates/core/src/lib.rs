//! Stance detection benchmark toolkit.
//!
//! Loads SemEval-2016 Task 6A and MPCHI-style corpora, runs the shared
//! preprocessing pipeline, trains classical (linear SVM) and neural
//! (LSTM, CNN, TAN, TAN-) stance classifiers, aggregates neural runs with
//! two-level majority voting and scores everything with the official
//! macro-F1 over the Favor and Against classes.

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod external;
pub mod features;
pub mod label;
pub mod neural;
pub mod preprocess;
pub mod resources;
pub mod svm;
pub mod tune;
pub mod vote;

pub use error::{Error, Result};
pub use label::StanceLabel;
