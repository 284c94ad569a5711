//! The `anycensus` command line.
//!
//! One binary covers the whole toolkit: the live orchestrator and
//! worker daemons, one-shot measurements (simulated or against a live
//! orchestrator), offline classification and latency-disk analysis,
//! the daily census pipeline, per-address sweeps, and the simulator.
//!
//! Environment variables take precedence over their flags, so a
//! service manager can pin credentials without editing unit files:
//! `ANYCENSUS_TOKEN` over `--token`, `ANYCENSUS_CONTROL_SOCKET` over
//! `--control-socket`, `ANYCENSUS_OPERATOR_CONTACT` over
//! `--operator-contact`, and `ANYCENSUS_OPTOUT_URL` over
//! `--opt-out-url`.
//!
//! Exit codes: 0 on success, 2 for configuration mistakes (bad flags
//! or unreadable/invalid input files), 3 for runtime failures.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::domain::{
    IpVersion, MeasurementSpec, Prefix, ProbeReply, Protocol, RttCollector, SourceMode,
    TargetAddress, VantagePoint, WorkerId, DEFAULT_TCP_DST_PORT,
};
use crate::files;
use crate::gcd::{infer, CityTable, GcdInference};
use crate::netsim::WorldConfig;
use crate::pipeline::{run_daily_census, run_sweep, CensusConfig, MeasurementOutcome, ProbePlan, SimPlane};
use crate::runtime::{
    control_measure, ControlResponse, OrchestratorService, RuntimeError, ServiceConfig,
    WorkerAgentConfig,
};
use crate::worker::raw::RawNet;

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for configuration errors (bad flags, bad config files).
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for runtime failures.
pub const EXIT_RUNTIME: i32 = 3;

pub const ENV_TOKEN: &str = "ANYCENSUS_TOKEN";
pub const ENV_CONTROL_SOCKET: &str = "ANYCENSUS_CONTROL_SOCKET";
pub const ENV_OPERATOR_CONTACT: &str = "ANYCENSUS_OPERATOR_CONTACT";
pub const ENV_OPTOUT_URL: &str = "ANYCENSUS_OPTOUT_URL";

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn config_err(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<crate::pipeline::PipelineError> for CliError {
    fn from(e: crate::pipeline::PipelineError) -> CliError {
        // Bad inputs are the operator's to fix; a failed run is not.
        match e {
            crate::pipeline::PipelineError::Run(_) => runtime_err(e),
            _ => config_err(e),
        }
    }
}

/// Env-over-flag resolution: a set, nonempty variable wins.
fn env_over(var: &str, flag: Option<String>) -> Option<String> {
    match std::env::var(var) {
        Ok(v) if !v.is_empty() => Some(v),
        _ => flag,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    /// ICMP echo request.
    #[value(alias = "ICMP")]
    Icmp,
    /// TCP SYN to the measurement's destination port.
    #[value(alias = "TCP")]
    Tcp,
    /// DNS A query with probe identity encoded in the query name.
    #[value(name = "dns-a", alias = "DNS_A")]
    DnsA,
    /// DNS CHAOS TXT hostname.bind query (site fingerprints).
    #[value(name = "dns-chaos", alias = "DNS_CHAOS")]
    DnsChaos,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Protocol {
        match p {
            ProtocolArg::Icmp => Protocol::Icmp,
            ProtocolArg::Tcp => Protocol::Tcp,
            ProtocolArg::DnsA => Protocol::DnsA,
            ProtocolArg::DnsChaos => Protocol::DnsChaos,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Probe from the shared anycast source; replies land wherever the
    /// target's routes send them.
    Anycast,
    /// Probe from each worker's own address; replies return to the
    /// sender, which is what yields usable round-trip times.
    Unicast,
}

impl From<ModeArg> for SourceMode {
    fn from(m: ModeArg) -> SourceMode {
        match m {
            ModeArg::Anycast => SourceMode::Anycast,
            ModeArg::Unicast => SourceMode::Unicast,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransportArg {
    /// Kernel raw sockets; needs CAP_NET_RAW.
    Raw,
    /// The deterministic in-process simulator.
    Sim,
}

#[derive(Parser, Debug)]
#[command(
    name = "anycensus",
    version,
    about = "Distributed anycast census: measure, classify, confirm, publish",
    long_about = "Distributed anycast census toolkit.\n\n\
        A census day: probe a hitlist from anycast sources (`measure`), mark \
        prefixes whose replies surfaced at two or more vantage points \
        (`classify`), confirm candidates by checking that per-site latency \
        disks cannot be explained by one location (`analyze-gcd`), and publish \
        the merged records (`census run`). The simulator (`simulate`) runs the \
        same stack against a seeded model internet, byte-identically on every \
        rerun.\n\n\
        Environment overrides (these win over their flags): ANYCENSUS_TOKEN, \
        ANYCENSUS_CONTROL_SOCKET, ANYCENSUS_OPERATOR_CONTACT, \
        ANYCENSUS_OPTOUT_URL.\n\n\
        Exit codes: 0 success, 2 configuration error, 3 runtime failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the coordinator: accept worker sessions, serve the control socket.
    Orchestrator(OrchestratorArgs),
    /// Run a vantage-point agent that probes on the orchestrator's schedule.
    Worker(WorkerArgs),
    /// Run one measurement and write its replies.
    Measure(MeasureArgs),
    /// Fold one measurement's replies into per-prefix anycast verdicts.
    Classify(ClassifyArgs),
    /// Latency-disk analysis: can one site explain each prefix's RTTs?
    AnalyzeGcd(AnalyzeGcdArgs),
    /// The daily census pipeline.
    Census(CensusArgs),
    /// Per-address latency sweep; flags prefixes that are only partly anycast.
    Sweep(SweepArgs),
    /// Run a simulated measurement and dump traces plus ground truth.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
struct OrchestratorArgs {
    /// TCP address worker sessions connect to.
    #[arg(long, default_value = "0.0.0.0:7624")]
    listen: String,

    /// Shared secret workers must present. ANYCENSUS_TOKEN overrides.
    #[arg(long)]
    token: Option<String>,

    /// Unix socket path for local control commands (one JSON request
    /// per line). ANYCENSUS_CONTROL_SOCKET overrides.
    #[arg(long, default_value = "anycensus-control.sock")]
    control_socket: PathBuf,

    /// How long to wait for stragglers after the last scheduled probe,
    /// in milliseconds.
    #[arg(long, default_value_t = 10_000)]
    drain_ms: u64,

    /// Abuse-desk contact published with the probing (for example an
    /// email address); live coordination refuses to start without one.
    /// ANYCENSUS_OPERATOR_CONTACT overrides.
    #[arg(long)]
    operator_contact: Option<String>,

    /// URL where probed networks can request exclusion; live
    /// coordination refuses to start without one. ANYCENSUS_OPTOUT_URL
    /// overrides.
    #[arg(long)]
    opt_out_url: Option<String>,
}

#[derive(Args, Debug)]
struct WorkerArgs {
    /// Orchestrator address (host:port).
    #[arg(long)]
    orchestrator: String,

    /// This worker's id; must be unique in the deployment and listed
    /// in the orchestrator's measurement rosters.
    #[arg(long)]
    worker_id: u16,

    /// Shared secret presented at session start. ANYCENSUS_TOKEN
    /// overrides.
    #[arg(long)]
    token: Option<String>,

    /// Probe transport. `raw` needs raw-socket privilege and refuses
    /// to start without it. `sim` is refused here: simulated probing
    /// runs in-process (see `measure --transport sim`, `census run`,
    /// `simulate`), so there is no live endpoint for a sim worker.
    #[arg(long, value_enum, default_value_t = TransportArg::Raw)]
    transport: TransportArg,

    /// Socket path a sim worker would dial. Accepted for symmetry but
    /// unusable: see `--transport`.
    #[arg(long)]
    sim_socket: Option<PathBuf>,

    /// Human-readable site name for logs and rosters.
    #[arg(long)]
    name: Option<String>,

    /// Site latitude, degrees north.
    #[arg(long, default_value_t = 0.0)]
    lat: f64,

    /// Site longitude, degrees east.
    #[arg(long, default_value_t = 0.0)]
    lon: f64,

    /// Source address for unicast-mode probes (this site's own).
    #[arg(long)]
    unicast_address: Option<IpAddr>,

    /// Source address for anycast-mode probes (the shared announced
    /// address).
    #[arg(long)]
    anycast_address: Option<IpAddr>,

    /// Abuse-desk contact; live probing refuses to start without one.
    /// ANYCENSUS_OPERATOR_CONTACT overrides.
    #[arg(long)]
    operator_contact: Option<String>,

    /// Opt-out URL; live probing refuses to start without one.
    /// ANYCENSUS_OPTOUT_URL overrides.
    #[arg(long)]
    opt_out_url: Option<String>,
}

#[derive(Args, Debug)]
struct MeasureArgs {
    /// Probe protocol.
    #[arg(long, value_enum)]
    protocol: ProtocolArg,

    /// 4 or 6.
    #[arg(long)]
    ip_version: u8,

    /// Aggregate probing rate in packets per second; at least 1.
    #[arg(long)]
    rate: u32,

    /// Per-worker start stagger in milliseconds. 0 fires all workers
    /// simultaneously; larger values separate their reply trains.
    #[arg(long, default_value_t = 1000)]
    offset_ms: u32,

    /// Source mode for every probe of the run.
    #[arg(long, value_enum)]
    mode: ModeArg,

    /// Hitlist file: one address per line, or `prefix,address`.
    #[arg(long)]
    hitlist: PathBuf,

    /// Where replies go, one JSON object per line.
    #[arg(long)]
    out: PathBuf,

    /// `sim` runs in-process against `--world`; `raw` submits the run
    /// to a live orchestrator over `--control-socket`.
    #[arg(long, value_enum, default_value_t = TransportArg::Sim)]
    transport: TransportArg,

    /// Simulated world description (sim transport).
    #[arg(long)]
    world: Option<PathBuf>,

    /// Control socket of a running orchestrator (raw transport).
    /// ANYCENSUS_CONTROL_SOCKET overrides.
    #[arg(long)]
    control_socket: Option<PathBuf>,

    /// Domain suffix for DNS A probes; required for dns-a.
    #[arg(long)]
    dns_domain: Option<String>,

    /// Destination port for TCP probes.
    #[arg(long, default_value_t = DEFAULT_TCP_DST_PORT)]
    tcp_dst_port: u16,

    /// Measurement id stamped into probes and replies (raw transport;
    /// the simulator numbers its own runs).
    #[arg(long, default_value_t = 1)]
    measurement_id: u32,

    /// Worker ids to task (raw transport), comma separated.
    #[arg(long, value_delimiter = ',')]
    workers: Vec<u16>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    /// Replies from one measurement, as written by `measure`.
    #[arg(long = "in")]
    input: PathBuf,

    /// Where per-prefix classifications go, one JSON object per line.
    #[arg(long)]
    out: PathBuf,

    /// Optional hitlist defining the prefix universe; prefixes nothing
    /// answered for are then still emitted as UNRESPONSIVE.
    #[arg(long)]
    hitlist: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeGcdArgs {
    /// Replies from a unicast-mode measurement (same-worker echoes
    /// carry the round-trip times).
    #[arg(long = "in")]
    input: PathBuf,

    /// City table: name, latitude, longitude, population;
    /// tab-separated.
    #[arg(long)]
    cities: PathBuf,

    /// Worker roster (TOML) mapping ids to coordinates; replies are
    /// placed on the globe through it.
    #[arg(long)]
    vps: PathBuf,

    /// Where per-prefix inferences go, one JSON object per line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CensusArgs {
    #[command(subcommand)]
    command: CensusCommand,
}

#[derive(Subcommand, Debug)]
enum CensusCommand {
    /// Run one census day end to end and write its artifacts.
    Run {
        /// Census config (TOML). Relative paths resolve against the
        /// config file's directory.
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Census config (TOML); the sweep shares its world, hitlists and
    /// feedback store.
    #[arg(long)]
    config: PathBuf,

    /// Probe every hitlist address instead of only those inside
    /// today's candidate prefixes.
    #[arg(long)]
    full: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// World description (TOML): seed, fabric noise, vantage points,
    /// targets.
    #[arg(long)]
    world: PathBuf,

    /// Override the world file's RNG seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Directory for replies.jsonl, ground-truth.jsonl, log.jsonl and
    /// summary.json.
    #[arg(long)]
    out_dir: PathBuf,

    /// Probe protocol for the scenario measurement.
    #[arg(long, value_enum, default_value_t = ProtocolArg::Icmp)]
    protocol: ProtocolArg,

    /// 4 or 6.
    #[arg(long, default_value_t = 4)]
    ip_version: u8,

    /// Source mode for the scenario measurement.
    #[arg(long, value_enum, default_value_t = ModeArg::Anycast)]
    mode: ModeArg,

    /// Aggregate probing rate in packets per second.
    #[arg(long, default_value_t = 1000)]
    rate: u32,

    /// Per-worker start stagger in milliseconds.
    #[arg(long, default_value_t = 1000)]
    offset_ms: u32,

    /// Domain suffix for DNS A probes.
    #[arg(long)]
    dns_domain: Option<String>,
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Clap prints help/version to stdout (exit 0) and usage
            // errors to stderr (exit 2).
            let _ = e.print();
            return if e.exit_code() == 0 { EXIT_OK } else { EXIT_CONFIG };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Orchestrator(args) => cmd_orchestrator(args),
        Command::Worker(args) => cmd_worker(args),
        Command::Measure(args) => cmd_measure(args),
        Command::Classify(args) => cmd_classify(args),
        Command::AnalyzeGcd(args) => cmd_analyze_gcd(args),
        Command::Census(args) => match args.command {
            CensusCommand::Run { config } => cmd_census_run(&config),
        },
        Command::Sweep(args) => cmd_sweep(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

fn parse_ip_version(v: u8) -> Result<IpVersion, CliError> {
    match v {
        4 => Ok(IpVersion::V4),
        6 => Ok(IpVersion::V6),
        other => Err(CliError::Config(format!("--ip-version must be 4 or 6, got {other}"))),
    }
}

fn check_rate(rate: u32) -> Result<(), CliError> {
    if rate == 0 {
        return Err(CliError::Config("--rate must be at least 1 packet per second".into()));
    }
    Ok(())
}

fn require_operator_identity(
    contact: Option<String>,
    opt_out: Option<String>,
) -> Result<(String, String), CliError> {
    let contact = env_over(ENV_OPERATOR_CONTACT, contact).ok_or_else(|| {
        CliError::Config(
            "live probing requires --operator-contact (or ANYCENSUS_OPERATOR_CONTACT): \
             a reachable abuse contact must accompany the packets this tool sends"
                .into(),
        )
    })?;
    let opt_out = env_over(ENV_OPTOUT_URL, opt_out).ok_or_else(|| {
        CliError::Config(
            "live probing requires --opt-out-url (or ANYCENSUS_OPTOUT_URL): \
             probed networks must have a way to request exclusion"
                .into(),
        )
    })?;
    Ok((contact, opt_out))
}

fn require_token(token: Option<String>) -> Result<String, CliError> {
    env_over(ENV_TOKEN, token)
        .ok_or_else(|| CliError::Config("--token is required (or set ANYCENSUS_TOKEN)".into()))
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string(value).expect("report serializes"));
}

fn cmd_orchestrator(args: OrchestratorArgs) -> Result<(), CliError> {
    let token = require_token(args.token)?;
    let (contact, opt_out) = require_operator_identity(args.operator_contact, args.opt_out_url)?;
    let control_socket = env_over(
        ENV_CONTROL_SOCKET,
        Some(args.control_socket.display().to_string()),
    )
    .expect("flag has a default");

    let mut config = ServiceConfig::new(&args.listen, &control_socket, &token);
    config.drain_window_us = Some(args.drain_ms.saturating_mul(1_000));
    config.log_lifecycle = true;
    let service = OrchestratorService::start(config).map_err(|e| match e {
        RuntimeError::Config(m) => CliError::Config(m),
        other => runtime_err(other),
    })?;
    print_json(&json!({
        "event": "orchestrator_started",
        "listen": service.local_addr().to_string(),
        "control_socket": control_socket,
        "operator_contact": contact,
        "opt_out_url": opt_out,
    }));
    // Runs until the process is stopped; sessions and control clients
    // are handled on their own threads.
    loop {
        std::thread::sleep(Duration::from_secs(3600));
    }
}

fn cmd_worker(args: WorkerArgs) -> Result<(), CliError> {
    if args.transport == TransportArg::Sim {
        return Err(CliError::Config(
            "--transport sim has no live endpoint: simulated probing runs in-process \
             (see `measure --transport sim`, `census run`, `simulate`); a worker daemon \
             only serves live raw probing"
                .into(),
        ));
    }
    if args.worker_id == 0 {
        return Err(CliError::Config("--worker-id 0 is reserved for unknown origins".into()));
    }
    let token = require_token(args.token)?;
    let (contact, opt_out) = require_operator_identity(args.operator_contact, args.opt_out_url)?;
    let unicast = args.unicast_address.ok_or_else(|| {
        CliError::Config("--unicast-address is required: unicast-mode probes are sent from it".into())
    })?;
    let anycast = args.anycast_address.ok_or_else(|| {
        CliError::Config(
            "--anycast-address is required: anycast-mode probes are sent from it".into(),
        )
    })?;

    // Fail at startup, not on the first probe of a run.
    RawNet::probe_privilege().map_err(runtime_err)?;

    let vp = VantagePoint {
        worker_id: WorkerId(args.worker_id),
        name: args.name.unwrap_or_else(|| format!("worker-{}", args.worker_id)),
        lat: args.lat,
        lon: args.lon,
        unicast_address: unicast,
        anycast_address: anycast,
    };
    print_json(&json!({
        "event": "worker_started",
        "worker_id": vp.worker_id.0,
        "name": vp.name,
        "orchestrator": args.orchestrator,
        "operator_contact": contact,
        "opt_out_url": opt_out,
    }));
    let config = WorkerAgentConfig::new(args.orchestrator, vp, token);
    let run_forever = AtomicBool::new(false);
    crate::runtime::run_worker(&config, RawNet::new(), &run_forever).map_err(runtime_err)
}

/// Hitlist entries of one IP version, as probe targets.
fn load_targets(path: &Path, version: IpVersion) -> Result<Vec<TargetAddress>, CliError> {
    let entries = files::read_hitlist(path).map_err(config_err)?;
    let targets: Vec<TargetAddress> = files::hitlist_addresses(&entries)
        .into_iter()
        .filter(|t| IpVersion::of(t.address()) == version)
        .collect();
    if targets.is_empty() {
        return Err(CliError::Config(format!(
            "{} has no IPv{version} addresses",
            path.display()
        )));
    }
    Ok(targets)
}

fn cmd_measure(args: MeasureArgs) -> Result<(), CliError> {
    check_rate(args.rate)?;
    let version = parse_ip_version(args.ip_version)?;
    let protocol = Protocol::from(args.protocol);
    if protocol == Protocol::DnsA && args.dns_domain.is_none() {
        return Err(CliError::Config(
            "--dns-domain is required for dns-a probes: identity rides in the query name".into(),
        ));
    }
    let targets = load_targets(&args.hitlist, version)?;

    match args.transport {
        TransportArg::Sim => {
            let world_path = args.world.ok_or_else(|| {
                CliError::Config("--world is required with the sim transport".into())
            })?;
            let world = crate::netsim::load_world(&world_path).map_err(config_err)?;
            let mut plane = SimPlane::new(world);
            let plan = ProbePlan {
                protocol,
                ip_version: version,
                source_mode: args.mode.into(),
                rate_pps: args.rate,
                worker_offset_ms: args.offset_ms,
                dns_probe_domain: args.dns_domain,
                targets,
            };
            let MeasurementOutcome { summary, replies, .. } = plane.measure(&plan)?;
            files::write_replies(&args.out, &replies).map_err(runtime_err)?;
            print_json(&summary);
            Ok(())
        }
        TransportArg::Raw => {
            let socket = env_over(
                ENV_CONTROL_SOCKET,
                args.control_socket.map(|p| p.display().to_string()),
            )
            .ok_or_else(|| {
                CliError::Config(
                    "--control-socket is required with the raw transport (or set \
                     ANYCENSUS_CONTROL_SOCKET): the run goes through a live orchestrator"
                        .into(),
                )
            })?;
            if args.workers.is_empty() {
                return Err(CliError::Config(
                    "--workers is required with the raw transport: list the worker ids to task"
                        .into(),
                ));
            }
            let spec = MeasurementSpec {
                measurement_id: args.measurement_id,
                protocol,
                ip_version: version,
                source_mode: args.mode.into(),
                rate_pps: args.rate,
                worker_offset_ms: args.offset_ms,
                workers: args.workers.iter().copied().map(WorkerId).collect(),
                dns_probe_domain: args.dns_domain,
                tcp_dst_port: args.tcp_dst_port,
            };
            let mut replies: Vec<ProbeReply> = Vec::new();
            let summary = control_measure(Path::new(&socket), spec, targets, |event| {
                if let ControlResponse::Result { reply } = event {
                    replies.push(reply.clone());
                }
            })
            .map_err(|e| match e {
                RuntimeError::Remote(m) => CliError::Runtime(format!("orchestrator: {m}")),
                other => runtime_err(other),
            })?;
            files::write_replies(&args.out, &replies).map_err(runtime_err)?;
            print_json(&summary);
            Ok(())
        }
    }
}

fn cmd_classify(args: ClassifyArgs) -> Result<(), CliError> {
    let replies = files::read_replies(&args.input).map_err(config_err)?;
    let first = replies.first().ok_or_else(|| {
        CliError::Config(format!("{} holds no replies; nothing to classify", args.input.display()))
    })?;
    // One measurement per file: spread across vantage points only
    // means anycast when every reply answers the same probe wave.
    for reply in &replies {
        if reply.measurement_id != first.measurement_id || reply.protocol != first.protocol {
            return Err(CliError::Config(format!(
                "{} mixes measurements ({} {} vs {} {}); classify one at a time",
                args.input.display(),
                first.measurement_id,
                first.protocol,
                reply.measurement_id,
                reply.protocol,
            )));
        }
    }
    let spec = MeasurementSpec {
        measurement_id: first.measurement_id,
        protocol: first.protocol,
        ip_version: IpVersion::of(first.target.address()),
        source_mode: SourceMode::Anycast,
        rate_pps: 1,
        worker_offset_ms: 0,
        workers: Vec::new(),
        dns_probe_domain: None,
        tcp_dst_port: DEFAULT_TCP_DST_PORT,
    };
    let prefixes: Vec<Prefix> = match &args.hitlist {
        Some(path) => {
            let entries = files::read_hitlist(path).map_err(config_err)?;
            files::hitlist_prefixes(&entries)
        }
        None => {
            let set: BTreeSet<Prefix> = replies.iter().map(|r| r.target.prefix()).collect();
            set.into_iter().collect()
        }
    };
    let classifications = crate::classifier::classify(&prefixes, replies.iter(), &spec);
    let mut out = File::create(&args.out).map_err(runtime_err)?;
    crate::classifier::write_classifications(&mut out, &classifications).map_err(runtime_err)?;
    let candidates = classifications
        .values()
        .filter(|c| c.verdict == crate::classifier::Verdict::Candidate)
        .count();
    print_json(&json!({
        "replies": replies.len(),
        "prefixes": classifications.len(),
        "candidates": candidates,
    }));
    Ok(())
}

#[derive(Serialize)]
struct GcdRow {
    prefix: Prefix,
    #[serde(flatten)]
    inference: GcdInference,
}

fn cmd_analyze_gcd(args: AnalyzeGcdArgs) -> Result<(), CliError> {
    let replies = files::read_replies(&args.input).map_err(config_err)?;
    let roster = files::read_roster(&args.vps).map_err(config_err)?;
    let cities = CityTable::load(&args.cities).map_err(config_err)?;

    let mut collector = RttCollector::new(&roster);
    for reply in &replies {
        collector.ingest(reply);
    }
    let mut by_prefix: BTreeMap<Prefix, Vec<crate::domain::RttSample>> = BTreeMap::new();
    for sample in &collector.samples {
        by_prefix.entry(sample.target.prefix()).or_default().push(sample.clone());
    }

    let mut out = File::create(&args.out).map_err(runtime_err)?;
    let mut anycast = 0usize;
    for (prefix, samples) in &by_prefix {
        let inference = infer(samples, &cities);
        if inference.verdict == crate::gcd::GcdVerdict::Anycast {
            anycast += 1;
        }
        let row = GcdRow { prefix: *prefix, inference };
        writeln!(out, "{}", serde_json::to_string(&row).expect("row serializes"))
            .map_err(runtime_err)?;
    }
    print_json(&json!({
        "replies": replies.len(),
        "rtt_samples": collector.samples.len(),
        "cross_site_discarded": collector.cross_site,
        "clock_anomalies": collector.clock_anomalies,
        "unknown_worker": collector.unknown_worker,
        "prefixes": by_prefix.len(),
        "anycast": anycast,
    }));
    Ok(())
}

fn cmd_census_run(config_path: &Path) -> Result<(), CliError> {
    let config = CensusConfig::load(config_path)?;
    let outcome = run_daily_census(&config)?;
    print_json(&json!({
        "census": outcome.census_path,
        "stats": outcome.stats_path,
        "log": outcome.log_path,
        "published": outcome.published().len(),
        "gcd_confirmed": outcome.stats.gcd_confirmed,
        "candidates": outcome.stats.candidates,
        "latency_targets": outcome.gcd_targets,
        "hitlist_prefixes": outcome.hitlist_prefixes,
        "alerts": outcome.alerts,
    }));
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let config = CensusConfig::load(&args.config)?;
    let outcome = run_sweep(&config, args.full)?;
    print_json(&json!({
        "verdicts": outcome.verdicts_path,
        "partial_flags": outcome.flags_path,
        "addresses_with_verdicts": outcome.per_address.len(),
        "partial_prefixes": outcome.partial.len(),
        "confirmed_prefixes": outcome.confirmed.len(),
    }));
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    check_rate(args.rate)?;
    let version = parse_ip_version(args.ip_version)?;
    let mut config = WorldConfig::load(&args.world).map_err(config_err)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let world = config.build().map_err(config_err)?;
    let ground_truth = world.ground_truth();
    let hitlist: Vec<TargetAddress> = world
        .default_hitlist()
        .into_iter()
        .filter(|a| IpVersion::of(*a) == version)
        .map(TargetAddress::of_address)
        .collect();
    if hitlist.is_empty() {
        return Err(CliError::Config(format!(
            "{} declares no IPv{version} targets",
            args.world.display()
        )));
    }

    let mut plane = SimPlane::new(world);
    let plan = ProbePlan {
        protocol: args.protocol.into(),
        ip_version: version,
        source_mode: args.mode.into(),
        rate_pps: args.rate,
        worker_offset_ms: args.offset_ms,
        dns_probe_domain: args.dns_domain,
        targets: hitlist,
    };
    let MeasurementOutcome { summary, replies, .. } = plane.measure(&plan)?;

    std::fs::create_dir_all(&args.out_dir).map_err(runtime_err)?;
    let replies_path = args.out_dir.join("replies.jsonl");
    let truth_path = args.out_dir.join("ground-truth.jsonl");
    let log_path = args.out_dir.join("log.jsonl");
    let summary_path = args.out_dir.join("summary.json");
    files::write_replies(&replies_path, &replies).map_err(runtime_err)?;
    files::write_json_lines(&truth_path, &ground_truth).map_err(runtime_err)?;
    files::write_json_lines(&log_path, plane.harness().logs()).map_err(runtime_err)?;
    let pretty = serde_json::to_string_pretty(&summary).expect("summary serializes");
    files::write_file(&summary_path, &format!("{pretty}\n")).map_err(runtime_err)?;

    print_json(&json!({
        "out_dir": args.out_dir,
        "replies": replies.len(),
        "targets": summary.targets_total,
        "ground_truth_records": ground_truth.len(),
        "results_forwarded": summary.results_forwarded,
    }));
    Ok(())
}
