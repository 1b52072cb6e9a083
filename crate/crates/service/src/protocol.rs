//! JSON wire messages exchanged over `/session`. See docs/PROTOCOL.md.

use qlkplan::belief::LatentProb;
use qlkplan::config::{CarGeometry, GridConfig};
use qlkplan::game::{HumanActionId, RobotAction, RobotActionId};
use qlkplan::planner::Diagnostics;
use qlkplan::sim::{Driver, Outcome, StateRecord};
use qlkplan::LatentState;
use serde::{Deserialize, Serialize};

/// Wire schema version. Clients pass it as `/session?version=N`.
pub const WIRE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Lobby,
    Running,
    Finished,
}

/// Server to client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Config(ConfigMsg),
    Snapshot(Snapshot),
    Error(ErrorMsg),
}

/// Client to server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMsg {
    /// Requested human acceleration in m/s². Snapped to the nearest action.
    Input { accel: f64 },
    Control(Control),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Control {
    Start,
    Reset,
    SelectPlanner { planner: Driver },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lanes {
    pub count: usize,
    /// Lateral centre of the robot's starting lane (m).
    pub lower: f64,
    /// Lateral centre of the human's lane, the merge target (m).
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    pub robot: Vec<RobotAction>,
    /// Human accelerations in m/s², indexed by human action id.
    pub human: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigMsg {
    pub version: u32,
    pub session: u64,
    pub config_hash: String,
    pub lanes: Lanes,
    pub grid: GridConfig,
    pub car: CarGeometry,
    pub dt: f64,
    pub tick_ms: u64,
    pub planner_budget_ms: u64,
    pub action_set: ActionSet,
    pub latent_space: Vec<LatentState>,
    pub planner: Driver,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub episode: u64,
    pub t: usize,
    pub phase: Phase,
    pub planner: Driver,
    pub state: StateRecord,
    pub belief: Vec<LatentProb>,
    pub last_robot_action: Option<RobotActionId>,
    pub last_human_action: Option<HumanActionId>,
    /// The snapped acceleration actually applied to the human car.
    pub last_human_accel: Option<f64>,
    pub diagnostics: Option<Diagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    VersionMismatch,
    Busy,
    Malformed,
    InvalidControl,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMsg {
    pub code: ErrorCode,
    pub message: String,
}

impl ServerMsg {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMsg::Error(ErrorMsg { code, message: message.into() })
    }

    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("server message serializes")
    }
}

impl ClientMsg {
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("client message serializes")
    }
}

/// Result of decoding one client frame.
#[derive(Debug, PartialEq)]
pub enum Decoded {
    Msg(ClientMsg),
    /// A well-formed message with an unrecognized `type`.
    Unknown(String),
    Malformed(String),
}

const CLIENT_TYPES: &[&str] = &["input", "control"];

pub fn decode_client(text: &str) -> Decoded {
    let value: serde_json::Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return Decoded::Malformed(format!("invalid JSON: {e}")),
    };
    let Some(ty) = value.get("type").and_then(|t| t.as_str()).map(str::to_owned) else {
        return Decoded::Malformed("message must be an object with a string `type`".into());
    };
    if !CLIENT_TYPES.contains(&ty.as_str()) {
        return Decoded::Unknown(ty);
    }
    match serde_json::from_value::<ClientMsg>(value) {
        Ok(m) => Decoded::Msg(m),
        Err(e) => Decoded::Malformed(format!("bad `{ty}` message: {e}")),
    }
}
