//! Job records for long-running work started through the service.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Reconstruct,
    Stylize,
    Render,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

/// `queued → running → done | failed`; anything else is rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    pub preview: Option<String>,
    pub error: Option<String>,
}

impl JobRecord {
    pub fn new(id: impl Into<String>, kind: JobKind) -> Self {
        Self {
            id: id.into(),
            kind,
            state: JobState::Queued,
            progress: 0.0,
            preview: None,
            error: None,
        }
    }

    fn transition(&mut self, from: &[JobState], to: JobState) -> Result<()> {
        if !from.contains(&self.state) {
            return Err(Error::State(format!("job {} cannot go from {:?} to {to:?}", self.id, self.state)));
        }
        self.state = to;
        Ok(())
    }

    pub fn start(&mut self) -> Result<()> {
        self.transition(&[JobState::Queued], JobState::Running)
    }

    /// Progress only moves forward and stays in `[0, 1]`.
    pub fn set_progress(&mut self, fraction: f64) -> Result<()> {
        if self.state != JobState::Running {
            return Err(Error::State(format!("job {} is not running", self.id)));
        }
        self.progress = self.progress.max(fraction.clamp(0.0, 1.0));
        Ok(())
    }

    pub fn finish(&mut self) -> Result<()> {
        self.transition(&[JobState::Running], JobState::Done)?;
        self.progress = 1.0;
        Ok(())
    }

    /// A queued job may fail before it starts.
    pub fn fail(&mut self, error: impl Into<String>) -> Result<()> {
        self.transition(&[JobState::Queued, JobState::Running], JobState::Failed)?;
        self.error = Some(error.into());
        Ok(())
    }
}
