//! Wire format: one JSON object per line in each direction, `"v":1` in
//! every message. A successful fetch reply is followed by the archive as an
//! 8-byte big-endian length and the raw bytes.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::artifact::FileEntry;
use crate::power::{DomainKind, EnergyDomain};

pub const PROTOCOL_VERSION: u32 = 1;

/// Upper bound on an accepted archive, to reject corrupt length prefixes.
pub const MAX_PAYLOAD_BYTES: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Health,
    StartMonitoring,
    StopMonitoring,
    FetchResults,
}

/// What to collect during one session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitoringConfig {
    pub domains: Vec<DomainKind>,
    pub interval_ms: u64,
    #[serde(default)]
    pub containers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub v: u32,
    pub cmd: CommandKind,
    #[serde(default)]
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<MonitoringConfig>,
}

impl Command {
    pub fn new(cmd: CommandKind, run_id: &str) -> Self {
        Command { v: PROTOCOL_VERSION, cmd, run_id: run_id.to_string(), config: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Busy,
    NotFound,
    NotReady,
    ProbeUnavailable,
    IncompatibleVersion,
    BadRequest,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Busy => "busy",
            ErrorCode::NotFound => "not_found",
            ErrorCode::NotReady => "not_ready",
            ErrorCode::ProbeUnavailable => "probe_unavailable",
            ErrorCode::IncompatibleVersion => "incompatible_version",
            ErrorCode::BadRequest => "bad_request",
            ErrorCode::Internal => "internal",
        }
    }
}

/// Session facts the orchestrator keeps in run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub run_id: String,
    pub token: String,
    /// Agent wall clock at session t=0, Unix milliseconds.
    pub anchor_wall_ms: u64,
    pub backend: String,
    pub num_cpus: u32,
    pub domains: Vec<EnergyDomain>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub degraded: bool,
    #[serde(default)]
    pub degraded_reasons: Vec<String>,
    /// Session time of the final collector reading.
    #[serde(default)]
    pub stopped_at_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub v: u32,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<ErrorCode>,
    #[serde(default)]
    pub detail: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub manifest: Vec<FileEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<SessionInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_bytes: Option<u64>,
}

impl Reply {
    pub fn ok(detail: impl Into<String>) -> Self {
        Reply {
            v: PROTOCOL_VERSION,
            status: Status::Ok,
            code: None,
            detail: detail.into(),
            manifest: Vec::new(),
            session: None,
            payload_bytes: None,
        }
    }

    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        Reply { status: Status::Error, code: Some(code), ..Reply::ok(detail) }
    }
}

/// Decodes one command line; the error reply is ready to send back.
pub fn parse_command(line: &str) -> Result<Command, Reply> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Reply::error(ErrorCode::BadRequest, format!("not JSON: {e}")))?;
    match value.get("v").and_then(|v| v.as_u64()) {
        Some(v) if v == PROTOCOL_VERSION as u64 => {}
        other => {
            return Err(Reply::error(
                ErrorCode::IncompatibleVersion,
                format!("protocol version {other:?} unsupported, expected {PROTOCOL_VERSION}"),
            ))
        }
    }
    let cmd: Command =
        serde_json::from_value(value).map_err(|e| Reply::error(ErrorCode::BadRequest, e.to_string()))?;
    if cmd.cmd != CommandKind::Health && cmd.run_id.is_empty() {
        return Err(Reply::error(ErrorCode::BadRequest, "run_id is required"));
    }
    Ok(cmd)
}

pub fn write_message<W: Write, T: Serialize>(out: &mut W, msg: &T) -> std::io::Result<()> {
    let mut line = serde_json::to_vec(msg).map_err(std::io::Error::other)?;
    line.push(b'\n');
    out.write_all(&line)
}

pub fn write_payload<W: Write>(out: &mut W, payload: &[u8]) -> std::io::Result<()> {
    out.write_all(&(payload.len() as u64).to_be_bytes())?;
    out.write_all(payload)
}

pub fn read_payload<R: BufRead>(input: &mut R) -> std::io::Result<Vec<u8>> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_be_bytes(len);
    if len > MAX_PAYLOAD_BYTES {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("payload of {len} bytes too large")));
    }
    let mut buf = vec![0u8; len as usize];
    input.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_is_mandatory() {
        let e = parse_command(r#"{"cmd":"health"}"#).unwrap_err();
        assert_eq!(e.code, Some(ErrorCode::IncompatibleVersion));
        let e = parse_command(r#"{"v":2,"cmd":"health"}"#).unwrap_err();
        assert_eq!(e.code, Some(ErrorCode::IncompatibleVersion));
        assert_eq!(parse_command(r#"{"v":1,"cmd":"health"}"#).unwrap().cmd, CommandKind::Health);
    }

    #[test]
    fn run_id_required_except_health() {
        let e = parse_command(r#"{"v":1,"cmd":"stop_monitoring"}"#).unwrap_err();
        assert_eq!(e.code, Some(ErrorCode::BadRequest));
        assert!(parse_command(r#"{"v":1,"cmd":"launch"}"#).is_err());
    }

    #[test]
    fn command_wire_shape() {
        let mut c = Command::new(CommandKind::StartMonitoring, "r1");
        c.config = Some(MonitoringConfig { domains: vec![DomainKind::CpuPackage], interval_ms: 1000, containers: vec![] });
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(
            text,
            r#"{"v":1,"cmd":"start_monitoring","run_id":"r1","config":{"domains":["cpu_package"],"interval_ms":1000,"containers":[]}}"#
        );
        let r = serde_json::to_string(&Reply::error(ErrorCode::Busy, "x")).unwrap();
        assert_eq!(r, r#"{"v":1,"status":"error","code":"busy","detail":"x"}"#);
    }
}
