use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Stance of a post toward its target.
///
/// The declaration order (Favor, Against, None) is the fixed class order
/// used for model columns, confusion matrices and argmax tie-breaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StanceLabel {
    Favor,
    Against,
    None,
}

impl StanceLabel {
    pub const ALL: [StanceLabel; 3] = [StanceLabel::Favor, StanceLabel::Against, StanceLabel::None];

    pub fn index(self) -> usize {
        match self {
            StanceLabel::Favor => 0,
            StanceLabel::Against => 1,
            StanceLabel::None => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StanceLabel::Favor => "FAVOR",
            StanceLabel::Against => "AGAINST",
            StanceLabel::None => "NONE",
        }
    }
}

impl fmt::Display for StanceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StanceLabel {
    type Err = Error;

    /// Trims and case-folds before matching, so `"AGAINST "` and `"favor"` parse.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "favor" => Ok(StanceLabel::Favor),
            "against" => Ok(StanceLabel::Against),
            "none" => Ok(StanceLabel::None),
            other => Err(Error::Validation(format!("unknown stance label {other:?}"))),
        }
    }
}
