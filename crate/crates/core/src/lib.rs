//! Gated recurrent cell laboratory: peephole LSTM, the cell-last GRU,
//! lazy-update LSTM and residual stacks, with BPTT, toy sequence tasks and
//! probes of the cell memory (activation histograms, temporal traces,
//! noise-insertion decay).

pub mod autodiff;
pub mod cells;
pub mod error;
pub mod experiment;
pub mod instrumentation;
pub mod numeric;
pub mod persistence;
pub mod probes;
pub mod reference;
pub mod training;

pub use error::{Error, Result};
