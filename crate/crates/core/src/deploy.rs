//! Bringing a SUT up and down: an in-process deployer for the bundled mock
//! service and a single-host container runtime deployer.

use std::collections::BTreeMap;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loadgen::probe_target;
use crate::mocksut::{MockSut, SutProfile, BASE_MEMORY_BYTES};
use crate::sim::SimRegistry;

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("image `{image}` unavailable: {msg}")]
    Image { image: String, msg: String },
    #[error("SUT not healthy after {timeout_ms} ms: {msg}")]
    HealthTimeout { timeout_ms: u64, msg: String },
    #[error("container runtime: {0}")]
    Runtime(String),
    #[error("invalid SUT reference: {0}")]
    Spec(String),
}

/// What to deploy for one commit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SutRef {
    pub commit_id: String,
    pub image_refs: Vec<String>,
    /// Service settings for the deployer (ports, environment).
    #[serde(default)]
    pub deploy_spec: BTreeMap<String, String>,
}

impl SutRef {
    pub fn new(commit_id: impl Into<String>, images: Vec<String>) -> Result<Self, DeployError> {
        let sut = SutRef { commit_id: commit_id.into(), image_refs: images, deploy_spec: BTreeMap::new() };
        sut.validate()?;
        Ok(sut)
    }

    pub fn validate(&self) -> Result<(), DeployError> {
        if self.commit_id.trim().is_empty() || self.commit_id.contains(['/', '\\']) {
            return Err(DeployError::Spec(format!("bad commit id `{}`", self.commit_id)));
        }
        if self.image_refs.is_empty() {
            return Err(DeployError::Spec("at least one image is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeployedContainer {
    pub container_id: String,
    /// Service name, used by container selectors.
    pub service: String,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deployment {
    /// Where the load generator sends traffic.
    pub base_url: String,
    pub containers: Vec<DeployedContainer>,
}

pub trait Deployer {
    /// Tears down any previous deployment, starts the SUT and waits until it
    /// answers its health probe.
    fn deploy(&mut self, sut: &SutRef) -> Result<Deployment, DeployError>;
    fn teardown(&mut self) -> Result<(), DeployError>;
    /// Ids of containers currently running for this deployer.
    fn running(&self) -> Vec<String>;
}

/// Service name of an image reference: the last path segment without tag.
pub fn service_name(image: &str) -> String {
    let last = image.rsplit('/').next().unwrap_or(image);
    last.split([':', '@']).next().unwrap_or(last).to_string()
}

fn wait_healthy(base_url: &str, path: &str, timeout: Duration) -> Result<(), DeployError> {
    let start = Instant::now();
    loop {
        match probe_target(base_url, path) {
            Ok(()) => return Ok(()),
            Err(e) if start.elapsed() >= timeout => {
                return Err(DeployError::HealthTimeout { timeout_ms: timeout.as_millis() as u64, msg: e.to_string() })
            }
            Err(_) => std::thread::sleep(Duration::from_millis(100)),
        }
    }
}

/// Runs `mock-sut:<profile>` images as in-process services registered with
/// a simulation registry, so simulated monitors see their work.
pub struct MockDeployer {
    registry: Arc<SimRegistry>,
    bind_host: String,
    active: Vec<(MockSut, String)>,
}

impl std::fmt::Debug for MockDeployer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockDeployer").field("running", &self.running()).finish()
    }
}

pub const MOCK_IMAGE: &str = "mock-sut";

impl MockDeployer {
    pub fn new(registry: Arc<SimRegistry>) -> Self {
        MockDeployer { registry, bind_host: "127.0.0.1".into(), active: Vec::new() }
    }

    fn profile_of(image: &str) -> Result<SutProfile, DeployError> {
        let bad = |msg: String| DeployError::Image { image: image.to_string(), msg };
        let (name, tag) = image.split_once(':').ok_or_else(|| bad("expected mock-sut:<profile>".into()))?;
        if service_name(name) != MOCK_IMAGE {
            return Err(bad(format!("only {MOCK_IMAGE} images can be deployed in simulation")));
        }
        SutProfile::by_name(tag).map_err(|e| bad(e.to_string()))
    }
}

impl Deployer for MockDeployer {
    fn deploy(&mut self, sut: &SutRef) -> Result<Deployment, DeployError> {
        sut.validate()?;
        let profiles = sut.image_refs.iter().map(|i| Self::profile_of(i)).collect::<Result<Vec<_>, _>>()?;
        self.teardown()?;
        let mut containers = Vec::new();
        for (image, profile) in sut.image_refs.iter().zip(profiles) {
            let container = self.registry.create(BASE_MEMORY_BYTES);
            let served = match MockSut::serve(profile, &format!("{}:0", self.bind_host), Some(container.clone())) {
                Ok(s) => s,
                Err(e) => {
                    self.registry.remove(&container.id);
                    self.teardown()?;
                    return Err(DeployError::Runtime(e.to_string()));
                }
            };
            containers.push(DeployedContainer {
                container_id: container.id.clone(),
                service: service_name(image),
                image: image.clone(),
            });
            self.active.push((served, container.id.clone()));
        }
        let base_url = self.active[0].0.base_url();
        if let Err(e) = wait_healthy(&base_url, "/health", Duration::from_secs(5)) {
            self.teardown()?;
            return Err(e);
        }
        log::info!("deployed {} mock container(s) for {}", containers.len(), sut.commit_id);
        Ok(Deployment { base_url, containers })
    }

    fn teardown(&mut self) -> Result<(), DeployError> {
        for (sut, id) in self.active.drain(..) {
            sut.shutdown();
            self.registry.remove(&id);
        }
        Ok(())
    }

    fn running(&self) -> Vec<String> {
        self.active.iter().map(|(_, id)| id.clone()).collect()
    }
}

/// Runs images with a Docker-compatible CLI on the local host. The first
/// image receives traffic on `host_port`; settings from the deploy spec:
/// `port` (container port, default 8080), `host_port` (default 8080),
/// `health_path` (default /health), `runtime` (default docker) and any
/// `env.NAME` entries.
#[derive(Debug)]
pub struct DockerDeployer {
    health_timeout: Duration,
    active: Vec<String>,
    runtime: String,
}

impl DockerDeployer {
    pub fn new(health_timeout: Duration) -> Self {
        DockerDeployer { health_timeout, active: Vec::new(), runtime: "docker".into() }
    }

    fn cli(&self, args: &[String]) -> Result<String, DeployError> {
        let out = Command::new(&self.runtime)
            .args(args)
            .output()
            .map_err(|e| DeployError::Runtime(format!("cannot run {}: {e}", self.runtime)))?;
        if !out.status.success() {
            return Err(DeployError::Runtime(String::from_utf8_lossy(&out.stderr).trim().to_string()));
        }
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
    }
}

impl Deployer for DockerDeployer {
    fn deploy(&mut self, sut: &SutRef) -> Result<Deployment, DeployError> {
        sut.validate()?;
        let spec = &sut.deploy_spec;
        self.runtime = spec.get("runtime").cloned().unwrap_or_else(|| "docker".into());
        self.teardown()?;
        let get = |k: &str, d: &str| spec.get(k).cloned().unwrap_or_else(|| d.to_string());
        let host_port = get("host_port", "8080");
        let port = get("port", "8080");
        for (i, image) in sut.image_refs.iter().enumerate() {
            let name = format!("joulegate-{}-{}-{i}", sut.commit_id.chars().take(12).collect::<String>(), service_name(image));
            let mut args = vec!["run".to_string(), "-d".into(), "--name".into(), name];
            if i == 0 {
                args.extend(["-p".into(), format!("{host_port}:{port}")]);
            }
            for (k, v) in spec.iter().filter_map(|(k, v)| k.strip_prefix("env.").map(|k| (k, v))) {
                args.extend(["-e".into(), format!("{k}={v}")]);
            }
            args.push(image.clone());
            match self.cli(&args) {
                Ok(id) => self.active.push(id),
                Err(e) => {
                    self.teardown()?;
                    return Err(DeployError::Image { image: image.clone(), msg: e.to_string() });
                }
            }
        }
        let base_url = format!("http://127.0.0.1:{host_port}");
        if let Err(e) = wait_healthy(&base_url, &get("health_path", "/health"), self.health_timeout) {
            self.teardown()?;
            return Err(e);
        }
        let containers = self
            .active
            .iter()
            .zip(&sut.image_refs)
            .map(|(id, image)| DeployedContainer { container_id: id.clone(), service: service_name(image), image: image.clone() })
            .collect();
        Ok(Deployment { base_url, containers })
    }

    fn teardown(&mut self) -> Result<(), DeployError> {
        if self.active.is_empty() {
            return Ok(());
        }
        let mut args = vec!["rm".to_string(), "-f".into()];
        args.append(&mut self.active);
        self.cli(&args).map(|_| ())
    }

    fn running(&self) -> Vec<String> {
        self.active.clone()
    }
}
