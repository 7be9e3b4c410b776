use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::protocol::{parse_command, write_message, write_payload};
use super::Agent;

/// TCP front end of an [`Agent`]; one thread per connection.
pub struct AgentServer {
    addr: SocketAddr,
    agent: Arc<Agent>,
    closing: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for AgentServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentServer").field("addr", &self.addr).finish()
    }
}

impl AgentServer {
    pub fn spawn(agent: Arc<Agent>, bind: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let closing = Arc::new(AtomicBool::new(false));
        let acceptor = {
            let (agent, closing) = (agent.clone(), closing.clone());
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if closing.load(Ordering::Acquire) {
                        break;
                    }
                    match stream {
                        Ok(s) => {
                            let agent = agent.clone();
                            std::thread::spawn(move || {
                                if let Err(e) = serve_connection(&agent, s) {
                                    log::debug!("agent connection closed: {e}");
                                }
                            });
                        }
                        Err(e) => log::warn!("agent accept failed: {e}"),
                    }
                }
            })
        };
        log::info!("agent listening on {addr}");
        Ok(AgentServer { addr, agent, closing, acceptor: Some(acceptor) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn agent(&self) -> &Arc<Agent> {
        &self.agent
    }

    /// Blocks until the listener stops.
    pub fn wait(mut self) {
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
    }

    /// Stops accepting connections and aborts any active session.
    pub fn shutdown(mut self) {
        self.close();
    }

    fn close(&mut self) {
        let Some(acceptor) = self.acceptor.take() else { return };
        self.closing.store(true, Ordering::Release);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        let _ = acceptor.join();
        self.agent.abort();
    }
}

impl Drop for AgentServer {
    fn drop(&mut self) {
        self.close();
    }
}

fn serve_connection(agent: &Agent, stream: TcpStream) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        if line.trim().is_empty() {
            continue;
        }
        let (reply, payload) = match parse_command(line.trim_end()) {
            Ok(cmd) => agent.handle(&cmd),
            Err(reply) => (reply, None),
        };
        write_message(&mut writer, &reply)?;
        if let Some(p) = payload {
            write_payload(&mut writer, &p)?;
        }
        writer.flush()?;
    }
}
