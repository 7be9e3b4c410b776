use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

use super::protocol::{
    read_payload, write_message, Command, CommandKind, ErrorCode, MonitoringConfig, Reply, SessionInfo, Status,
    PROTOCOL_VERSION,
};
use crate::artifact::{unpack_tar, verify_files, FileEntry};

#[derive(Debug, Error)]
pub enum AgentError {
    /// The agent could not be reached or dropped the connection.
    #[error("agent unreachable: {0}")]
    Lost(String),
    #[error("agent protocol violation: {0}")]
    Protocol(String),
    #[error("agent refused ({}): {detail}", code.as_str())]
    Remote { code: ErrorCode, detail: String },
}

/// What a successful stop returns.
#[derive(Debug, Clone, PartialEq)]
pub struct StopResult {
    pub session: SessionInfo,
    pub manifest: Vec<FileEntry>,
}

/// Orchestrator-side handle; every command uses its own connection.
#[derive(Debug, Clone)]
pub struct AgentClient {
    addr: String,
    timeout: Duration,
}

impl AgentClient {
    pub fn new(addr: impl Into<String>) -> Self {
        AgentClient { addr: addr.into(), timeout: Duration::from_secs(60) }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    /// Sends one command and reads the reply plus any payload.
    pub fn call(&self, cmd: &Command) -> Result<(Reply, Option<Vec<u8>>), AgentError> {
        let lost = |e: std::io::Error| AgentError::Lost(format!("{}: {e}", self.addr));
        let addr = self
            .addr
            .to_socket_addrs()
            .map_err(lost)?
            .next()
            .ok_or_else(|| AgentError::Lost(format!("{}: no address", self.addr)))?;
        let stream = TcpStream::connect_timeout(&addr, self.timeout).map_err(lost)?;
        stream.set_read_timeout(Some(self.timeout)).map_err(lost)?;
        let mut writer = BufWriter::new(stream.try_clone().map_err(lost)?);
        write_message(&mut writer, cmd).map_err(lost)?;
        writer.flush().map_err(lost)?;
        let mut reader = BufReader::new(stream);
        let mut line = String::new();
        if reader.read_line(&mut line).map_err(lost)? == 0 {
            return Err(AgentError::Lost(format!("{}: connection closed", self.addr)));
        }
        let reply: Reply = serde_json::from_str(line.trim_end()).map_err(|e| AgentError::Protocol(e.to_string()))?;
        if reply.v != PROTOCOL_VERSION {
            return Err(AgentError::Remote {
                code: ErrorCode::IncompatibleVersion,
                detail: format!("agent speaks version {}", reply.v),
            });
        }
        let payload = match reply.payload_bytes {
            Some(n) if reply.status == Status::Ok => {
                let p = read_payload(&mut reader).map_err(lost)?;
                if p.len() as u64 != n {
                    return Err(AgentError::Protocol(format!("announced {n} bytes, got {}", p.len())));
                }
                Some(p)
            }
            _ => None,
        };
        Ok((reply, payload))
    }

    fn expect_ok(&self, cmd: &Command) -> Result<(Reply, Option<Vec<u8>>), AgentError> {
        let (reply, payload) = self.call(cmd)?;
        match reply.status {
            Status::Ok => Ok((reply, payload)),
            Status::Error => Err(AgentError::Remote {
                code: reply.code.unwrap_or(ErrorCode::Internal),
                detail: reply.detail,
            }),
        }
    }

    pub fn health(&self) -> Result<String, AgentError> {
        Ok(self.expect_ok(&Command::new(CommandKind::Health, ""))?.0.detail)
    }

    pub fn start(&self, run_id: &str, config: &MonitoringConfig) -> Result<SessionInfo, AgentError> {
        let mut cmd = Command::new(CommandKind::StartMonitoring, run_id);
        cmd.config = Some(config.clone());
        let (reply, _) = self.expect_ok(&cmd)?;
        reply.session.ok_or_else(|| AgentError::Protocol("start reply without session".into()))
    }

    pub fn stop(&self, run_id: &str) -> Result<StopResult, AgentError> {
        let (reply, _) = self.expect_ok(&Command::new(CommandKind::StopMonitoring, run_id))?;
        let session = reply.session.ok_or_else(|| AgentError::Protocol("stop reply without session".into()))?;
        Ok(StopResult { session, manifest: reply.manifest })
    }

    /// Fetches the archive and checks it against `manifest`, returning the
    /// unpacked files and the raw archive.
    pub fn fetch(
        &self,
        run_id: &str,
        manifest: &[FileEntry],
    ) -> Result<(Vec<(String, Vec<u8>)>, Vec<u8>), AgentError> {
        let (_, payload) = self.expect_ok(&Command::new(CommandKind::FetchResults, run_id))?;
        let archive = payload.ok_or_else(|| AgentError::Protocol("fetch reply without payload".into()))?;
        let files = unpack_tar(&archive).map_err(|e| AgentError::Protocol(format!("bad archive: {e}")))?;
        verify_files(&files, manifest).map_err(AgentError::Protocol)?;
        Ok((files, archive))
    }
}
