//! System configurations: named presets and the TOML config file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use super::script::{kv_client, Command, Op, Script, ServerMode};
use crate::event::{Phase, SyscallKind};
use crate::fault::{parse_fault_spec, FaultAction, FaultError, FaultRule, FaultTarget, TruncateRule};
use crate::stream::Endpoint;

pub const SERVER_ADDR: &str = "127.0.0.1:6379";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config faults: {0}")]
    Faults(#[from] FaultError),
    #[error("{0}")]
    Io(String),
}

/// How an experiment picks per-iteration seeds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedPolicy {
    /// Every iteration uses the base seed.
    Fixed,
    /// Iteration `i` uses `base + i`.
    #[default]
    Sequential,
    /// Seeds drawn from a generator seeded with the base seed.
    Random,
}

impl FromStr for SeedPolicy {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(SeedPolicy::Fixed),
            "sequential" => Ok(SeedPolicy::Sequential),
            "random" => Ok(SeedPolicy::Random),
            _ => Err(ConfigError::Invalid(format!("unknown seed policy `{s}`"))),
        }
    }
}

impl fmt::Display for SeedPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeedPolicy::Fixed => "fixed",
            SeedPolicy::Sequential => "sequential",
            SeedPolicy::Random => "random",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub name: String,
    /// Process `i` runs `processes[i]`.
    pub processes: Vec<Script>,
    /// Scheduler steps a one-millisecond pause lasts.
    pub steps_per_ms: u64,
    /// Executions stop (as partial) after this many events.
    pub max_events: usize,
    /// Rules that are part of the scenario itself (2cl-wt's truncation).
    pub faults: Vec<FaultRule>,
    pub seed_policy: SeedPolicy,
    pub base_seed: u64,
}

impl SimConfig {
    pub fn new(name: impl Into<String>, processes: Vec<Script>) -> Self {
        SimConfig {
            name: name.into(),
            processes,
            steps_per_ms: 1,
            max_events: 100_000,
            faults: Vec::new(),
            seed_policy: SeedPolicy::Sequential,
            base_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.processes.is_empty() {
            return Err(ConfigError::Invalid("no processes".into()));
        }
        if self.max_events == 0 {
            return Err(ConfigError::Invalid("max_events must be positive".into()));
        }
        let listens: Vec<Endpoint> = self.processes.iter().filter_map(Script::listen_address).collect();
        for (i, a) in listens.iter().enumerate() {
            if listens[..i].contains(a) {
                return Err(ConfigError::Invalid(format!("two processes listen on {a}")));
            }
        }
        for (i, s) in self.processes.iter().enumerate() {
            if let Some(dest) = s.connect_address() {
                if !listens.contains(&dest) {
                    return Err(ConfigError::Invalid(format!("process {i} connects to {dest}, which nobody serves")));
                }
            }
        }
        Ok(())
    }
}

pub const PRESETS: &[&str] = &["fig1", "independent", "1srv-2msg", "echo", "1cl", "2cl", "2cl-mc", "4cl", "2cl-wt"];

fn server_addr() -> Endpoint {
    SERVER_ADDR.parse().unwrap()
}

/// A single-threaded key/value server and `num_clients` clients. With one
/// command a client does a GET; with more it alternates SET and GET on a
/// shared key.
pub fn redis_like_config(num_clients: u32, commands_per_client: u32) -> SimConfig {
    assert!(num_clients >= 1, "at least one client");
    let addr = server_addr();
    let mut processes = vec![Script::PollServer { listen: addr, clients: num_clients, mode: ServerMode::Kv }];
    for c in 0..num_clients {
        let commands: Vec<Command> = if commands_per_client == 1 {
            vec![Command::Get("k".into())]
        } else {
            (0..commands_per_client)
                .map(|j| match j % 2 {
                    0 => Command::Set("k".into(), format!("c{c}v{j}")),
                    _ => Command::Get("k".into()),
                })
                .collect()
        };
        processes.push(kv_client(addr, &commands));
    }
    SimConfig::new(format!("kv-{num_clients}x{commands_per_client}"), processes)
}

/// Truncates each write of every process with probability one half, to a
/// random fraction of at most one half.
pub fn write_truncation_rules(processes: u32) -> Vec<FaultRule> {
    (0..processes)
        .map(|process| FaultRule {
            target: FaultTarget::Predicate {
                process,
                syscall: SyscallKind::Write,
                phase: Phase::Entry,
                occurrence: None,
                peer: None,
            },
            action: FaultAction::MutateWriteCount(TruncateRule::Random { max_fraction: 0.5, probability: 0.5 }),
            window: None,
            line: 0,
        })
        .collect()
}

pub fn preset(name: &str) -> Result<SimConfig, ConfigError> {
    let addr = server_addr();
    let mut config = match name {
        "fig1" => SimConfig::new(
            name,
            vec![
                Script::Ops(vec![Op::Socket, Op::Bind(addr), Op::Listen, Op::Accept]),
                Script::Ops(vec![Op::Socket, Op::Connect(addr)]),
            ],
        ),
        "independent" => SimConfig::new(name, vec![Script::Ops(vec![Op::Socket]), Script::Ops(vec![Op::Socket])]),
        "1srv-2msg" => {
            let client = Script::Ops(vec![Op::Socket, Op::Connect(addr), Op::Send(b"ping".to_vec())]);
            SimConfig::new(
                name,
                vec![Script::PollServer { listen: addr, clients: 2, mode: ServerMode::Sink { reads: 1 } }, client.clone(), client],
            )
        }
        "echo" => SimConfig::new(
            name,
            vec![
                Script::Ops(vec![
                    Op::Socket,
                    Op::Bind(addr),
                    Op::Listen,
                    Op::Accept,
                    Op::Recv { max: 64 },
                    Op::SendReceived,
                    Op::Close,
                ]),
                Script::Ops(vec![Op::Socket, Op::Connect(addr), Op::Send(b"hello".to_vec()), Op::Recv { max: 64 }, Op::Close]),
            ],
        ),
        "1cl" => redis_like_config(1, 1),
        "2cl" => redis_like_config(2, 1),
        "2cl-mc" => redis_like_config(2, 4),
        "4cl" => redis_like_config(4, 1),
        "2cl-wt" => {
            let mut c = redis_like_config(2, 1);
            c.faults = write_truncation_rules(3);
            c
        }
        _ => return Err(ConfigError::UnknownPreset(name.to_string())),
    };
    config.name = name.to_string();
    Ok(config)
}

// ---------------------------------------------------------------------------
// Config file

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    #[serde(default)]
    steps_per_ms: Option<u64>,
    #[serde(default)]
    max_events: Option<usize>,
    #[serde(default)]
    scheduler: Option<RawScheduler>,
    /// Fault file applied to every execution, relative to the config file.
    #[serde(default)]
    faults: Option<String>,
    process: Vec<RawProcess>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScheduler {
    #[serde(default)]
    policy: SeedPolicy,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
enum RawProcess {
    KvServer { listen: String, clients: u32 },
    SinkServer { listen: String, clients: u32, reads: u32 },
    KvClient { server: String, commands: Vec<String> },
    Ops { ops: Vec<String> },
}

fn endpoint(s: &str) -> Result<Endpoint, ConfigError> {
    s.parse().map_err(|_| ConfigError::Invalid(format!("bad IPv4 endpoint `{s}`")))
}

/// Parses one straight-line op, e.g. `connect 127.0.0.1:6379` or `send hi`.
pub fn parse_op(text: &str) -> Result<Op, ConfigError> {
    let (word, rest) = text.split_once(' ').unwrap_or((text, ""));
    let bad = || ConfigError::Invalid(format!("bad op `{text}`"));
    let op = match word {
        "socket" => Op::Socket,
        "bind" => Op::Bind(endpoint(rest)?),
        "listen" => Op::Listen,
        "accept" => Op::Accept,
        "connect" => Op::Connect(endpoint(rest)?),
        "send" if !rest.is_empty() => Op::Send(rest.as_bytes().to_vec()),
        "recv" => Op::Recv { max: rest.parse().map_err(|_| bad())? },
        "recv-frame" => Op::RecvFrame,
        "send-received" => Op::SendReceived,
        "close" => Op::Close,
        "compute" => Op::Compute,
        _ => return Err(bad()),
    };
    if rest.is_empty() || matches!(op, Op::Bind(_) | Op::Connect(_) | Op::Send(_) | Op::Recv { .. }) {
        Ok(op)
    } else {
        Err(bad())
    }
}

pub fn parse_config(text: &str, base_dir: Option<&Path>) -> Result<SimConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.message().to_string()))?;
    let mut processes = Vec::new();
    for p in raw.process {
        processes.push(match p {
            RawProcess::KvServer { listen, clients } => {
                Script::PollServer { listen: endpoint(&listen)?, clients, mode: ServerMode::Kv }
            }
            RawProcess::SinkServer { listen, clients, reads } => {
                Script::PollServer { listen: endpoint(&listen)?, clients, mode: ServerMode::Sink { reads } }
            }
            RawProcess::KvClient { server, commands } => {
                let commands = commands
                    .iter()
                    .map(|c| {
                        Command::parse(c.as_bytes()).ok_or_else(|| ConfigError::Invalid(format!("bad command `{c}`")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                kv_client(endpoint(&server)?, &commands)
            }
            RawProcess::Ops { ops } => Script::Ops(ops.iter().map(|o| parse_op(o)).collect::<Result<_, _>>()?),
        });
    }
    let mut config = SimConfig::new(raw.name, processes);
    if let Some(s) = raw.steps_per_ms {
        config.steps_per_ms = s;
    }
    if let Some(m) = raw.max_events {
        config.max_events = m;
    }
    if let Some(s) = raw.scheduler {
        config.seed_policy = s.policy;
        config.base_seed = s.seed;
    }
    if let Some(f) = raw.faults {
        let path = base_dir.map_or_else(|| Path::new(&f).to_path_buf(), |d| d.join(&f));
        let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        config.faults = parse_fault_spec(&text, None)?;
    }
    config.validate()?;
    Ok(config)
}

/// A preset name, or the path of a config file.
pub fn load_config(spec: &str) -> Result<SimConfig, ConfigError> {
    if PRESETS.contains(&spec) {
        return preset(spec);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(ConfigError::UnknownPreset(spec.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{spec}: {e}")))?;
    parse_config(&text, path.parent())
}
