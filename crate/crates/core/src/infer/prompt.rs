//! Mentor request payloads: a compact text record of the observation summary
//! and driving metadata.
//!
//! ```text
//! task=action;speed=3.5;cmd=turn-left;rule=active;state=0.58,0.2,...
//! ```
//!
//! Floats use the shortest round-trip representation, so parsing recovers
//! the exact values.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Command, Observation, STATE_DIM};
use crate::shaping::{discretize_speed, Context};

/// Upper bound on payload length in bytes.
pub const MAX_PAYLOAD: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("payload is not utf-8")]
    Utf8,
    #[error("missing field `{0}`")]
    Missing(&'static str),
    #[error("bad value for `{field}`: {value}")]
    BadValue { field: &'static str, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MentorTask {
    /// Suggest an action.
    Action,
    /// Score the 30 action anchors of the current context.
    Score,
    Both,
}

impl MentorTask {
    pub fn name(self) -> &'static str {
        match self {
            Self::Action => "action",
            Self::Score => "score",
            Self::Both => "both",
        }
    }

    pub fn wants_action(self) -> bool {
        matches!(self, Self::Action | Self::Both)
    }

    pub fn wants_scores(self) -> bool {
        matches!(self, Self::Score | Self::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleState {
    Clear,
    Active,
}

/// Driving metadata accompanying an observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptMeta {
    /// Ego speed in m/s.
    pub speed: f64,
    pub command: Command,
    pub rule: RuleState,
}

impl PromptMeta {
    pub fn context(&self) -> Context {
        let bin = discretize_speed(self.speed.max(0.0)).expect("non-negative speed");
        Context::new(self.command, bin)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPrompt {
    pub task: MentorTask,
    pub meta: PromptMeta,
    pub state: [f64; STATE_DIM],
}

pub fn build_prompt(obs: &Observation, meta: &PromptMeta, task: MentorTask) -> Vec<u8> {
    let mut s = String::with_capacity(256);
    let rule = match meta.rule {
        RuleState::Clear => "clear",
        RuleState::Active => "active",
    };
    write!(s, "task={};speed={};cmd={};rule={};state=", task.name(), meta.speed, meta.command.name(), rule).unwrap();
    for (i, v) in obs.state_vec.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").unwrap();
    }
    s.into_bytes()
}

fn field<'a>(fields: &[(&'a str, &'a str)], name: &'static str) -> Result<&'a str, PromptError> {
    fields.iter().find(|(k, _)| *k == name).map(|(_, v)| *v).ok_or(PromptError::Missing(name))
}

fn bad(field: &'static str, value: &str) -> PromptError {
    PromptError::BadValue { field, value: value.to_string() }
}

pub fn parse_prompt(payload: &[u8]) -> Result<ParsedPrompt, PromptError> {
    let text = std::str::from_utf8(payload).map_err(|_| PromptError::Utf8)?;
    let fields: Vec<(&str, &str)> = text.split(';').filter_map(|kv| kv.split_once('=')).collect();
    let task = match field(&fields, "task")? {
        "action" => MentorTask::Action,
        "score" => MentorTask::Score,
        "both" => MentorTask::Both,
        other => return Err(bad("task", other)),
    };
    let speed_s = field(&fields, "speed")?;
    let speed: f64 = speed_s.parse().map_err(|_| bad("speed", speed_s))?;
    if !(speed >= 0.0) {
        return Err(bad("speed", speed_s));
    }
    let cmd_s = field(&fields, "cmd")?;
    let command: Command = cmd_s.parse().map_err(|_| bad("cmd", cmd_s))?;
    let rule = match field(&fields, "rule")? {
        "clear" => RuleState::Clear,
        "active" => RuleState::Active,
        other => return Err(bad("rule", other)),
    };
    let state_s = field(&fields, "state")?;
    let mut state = [0.0; STATE_DIM];
    let mut n = 0;
    for part in state_s.split(',') {
        if n >= STATE_DIM {
            return Err(bad("state", state_s));
        }
        state[n] = part.parse().map_err(|_| bad("state", state_s))?;
        n += 1;
    }
    if n != STATE_DIM {
        return Err(bad("state", state_s));
    }
    Ok(ParsedPrompt { task, meta: PromptMeta { speed, command, rule }, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Grid;

    fn obs() -> Observation {
        let mut v = [0.0; STATE_DIM];
        for (i, x) in v.iter_mut().enumerate() {
            *x = (i as f64 * 0.37).sin() / 3.0;
        }
        Observation { grid: Grid::empty(), state_vec: v }
    }

    #[test]
    fn roundtrip_and_determinism() {
        let meta = PromptMeta { speed: 2.25, command: Command::TurnLeft, rule: RuleState::Active };
        let a = build_prompt(&obs(), &meta, MentorTask::Both);
        assert_eq!(a, build_prompt(&obs(), &meta, MentorTask::Both));
        assert!(std::str::from_utf8(&a).unwrap().contains("cmd=turn-left"));
        let p = parse_prompt(&a).unwrap();
        assert_eq!(p.state, obs().state_vec);
        assert_eq!(p.meta, meta);
        assert_eq!(p.task, MentorTask::Both);
    }

    #[test]
    fn rejects_malformed() {
        assert_eq!(parse_prompt(b"task=action"), Err(PromptError::Missing("speed")));
        assert!(parse_prompt(b"task=fly;speed=1;cmd=turn-left;rule=clear;state=0").is_err());
        assert!(parse_prompt(&[0xff, 0xfe]).is_err());
    }
}
