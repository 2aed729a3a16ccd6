use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which challenge a model is trained for. Fixes the head width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Valence/arousal regression.
    Va,
    /// Eight-way expression classification.
    Expr,
    /// Twelve binary action-unit decisions.
    Au,
}

pub const EXPR_CLASSES: usize = 8;
pub const AU_UNITS: usize = 12;

impl Task {
    pub const ALL: [Task; 3] = [Task::Va, Task::Expr, Task::Au];

    pub fn out_dim(self) -> usize {
        match self {
            Task::Va => 2,
            Task::Expr => EXPR_CLASSES,
            Task::Au => AU_UNITS,
        }
    }

    /// Number of label values stored per frame.
    pub fn label_width(self) -> usize {
        match self {
            Task::Va => 2,
            Task::Expr => 1,
            Task::Au => AU_UNITS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Va => "va",
            Task::Expr => "expr",
            Task::Au => "au",
        }
    }

    /// Key of the metric used to pick the best checkpoint.
    pub fn selection_metric(self) -> &'static str {
        match self {
            Task::Va => "ccc_mean",
            Task::Expr | Task::Au => "f1_macro",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "va" => Ok(Task::Va),
            "expr" => Ok(Task::Expr),
            "au" => Ok(Task::Au),
            _ => Err(Error::Config(format!("unknown task {s:?}, expected va, expr or au"))),
        }
    }
}
