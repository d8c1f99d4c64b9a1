//! Task, question-type and e2e token-group tags shared across modules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::LmadError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Perception,
    Prediction,
    Planning,
    Behavior,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Perception, Task::Prediction, Task::Planning, Task::Behavior];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Perception => "perception",
            Task::Prediction => "prediction",
            Task::Planning => "planning",
            Task::Behavior => "behavior",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QType {
    MultipleChoice,
    YesNo,
    Open,
}

impl QType {
    pub const ALL: [QType; 3] = [QType::MultipleChoice, QType::YesNo, QType::Open];

    pub fn as_str(self) -> &'static str {
        match self {
            QType::MultipleChoice => "multiple_choice",
            QType::YesNo => "yes_no",
            QType::Open => "open",
        }
    }

    pub fn is_closed(self) -> bool {
        !matches!(self, QType::Open)
    }
}

/// Token groups of the end-to-end block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Det,
    Mot,
    Ego,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Det, Group::Mot, Group::Ego];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Det => "det",
            Group::Mot => "mot",
            Group::Ego => "ego",
        }
    }
}

macro_rules! impl_text {
    ($ty:ty, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = LmadError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| LmadError::Routing(format!("unknown {} tag {s:?}", $what)))
            }
        }
    };
}

impl_text!(Task, "task");
impl_text!(QType, "question type");
impl_text!(Group, "group");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_parse_and_reject_unknown() {
        for t in Task::ALL {
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
        }
        assert_eq!("yes_no".parse::<QType>().unwrap(), QType::YesNo);
        assert!(matches!("steering".parse::<Task>(), Err(LmadError::Routing(_))));
    }
}
