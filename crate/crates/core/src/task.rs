//! The three binary prediction endpoints.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of prediction heads.
pub const TASK_COUNT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Glycaemic control, HbA1c >= 7%.
    Hba1c,
    /// Kidney abnormality.
    Kidney,
    /// Two or more abnormal organ-system indicators.
    Multi,
}

impl Task {
    pub const ALL: [Task; TASK_COUNT] = [Task::Hba1c, Task::Kidney, Task::Multi];

    pub fn index(self) -> usize {
        match self {
            Task::Hba1c => 0,
            Task::Kidney => 1,
            Task::Multi => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Task> {
        Task::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Hba1c => "hba1c",
            Task::Kidney => "kidney",
            Task::Multi => "multi",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

/// Per-task binary labels; `None` marks a missing label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskLabels(pub [Option<bool>; TASK_COUNT]);

impl TaskLabels {
    pub fn new(hba1c: Option<bool>, kidney: Option<bool>, multi: Option<bool>) -> Self {
        TaskLabels([hba1c, kidney, multi])
    }

    pub fn get(&self, task: Task) -> Option<bool> {
        self.0[task.index()]
    }

    pub fn set(&mut self, task: Task, value: Option<bool>) {
        self.0[task.index()] = value;
    }

    pub fn all_missing(&self) -> bool {
        self.0.iter().all(Option::is_none)
    }
}
