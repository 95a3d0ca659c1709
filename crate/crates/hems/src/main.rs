use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use hems::cloud::{CloudConfig, CloudService};
use hems::config::{self, ConfigError};
use hems::device::{DeviceAuth, DeviceLink};
use hems::gateway::{Endpoints, Gateway, GatewayConfig};
use hems::runner::{run_scenario, Ports, RunError, RunOptions, Speed};
use hems_core::adapter::{encode_event, encode_telemetry};
use hems_core::scenario::Fleet;

#[derive(Parser)]
#[command(name = "hems", version, about = "Home energy management: simulator, edge gateway and cloud")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run or check household scenarios end to end.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Simulate devices against a running gateway.
    Sim(SimArgs),
    /// Run the edge gateway.
    Gateway {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the cloud service.
    Cloud {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run cloud, gateway and simulator together on one scenario.
    All {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "realtime")]
        speed: SpeedArg,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Play a scenario at full speed and print the run report.
    Run {
        file: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Parse and validate a scenario file.
    Check { file: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// Overrides the scenario's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Keep stores and buffers here (default: a temporary directory).
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Ports as cloud,mqtt,coap,http; 0 picks a free port.
    #[arg(long, value_parser = parse_ports, default_value = "0,0,0,0")]
    ports: Ports,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "127.0.0.1:1883")]
    mqtt: String,
    #[arg(long, default_value = "127.0.0.1:5683")]
    coap: String,
    #[arg(long, default_value = "127.0.0.1:8081")]
    http: String,
    #[arg(long)]
    mqtt_user: Option<String>,
    #[arg(long)]
    mqtt_password: Option<String>,
    #[arg(long)]
    device_token: Option<String>,
    #[arg(long, value_enum, default_value = "realtime")]
    speed: SpeedArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpeedArg {
    Realtime,
    Max,
}

impl From<SpeedArg> for Speed {
    fn from(s: SpeedArg) -> Self {
        match s {
            SpeedArg::Realtime => Speed::Realtime,
            SpeedArg::Max => Speed::Max,
        }
    }
}

fn parse_ports(s: &str) -> Result<Ports, String> {
    let p: Vec<u16> = s
        .split(',')
        .map(|x| x.trim().parse::<u16>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<_, _>>()?;
    match p.as_slice() {
        [cloud, mqtt, coap, http] => Ok(Ports {
            cloud: *cloud,
            mqtt: *mqtt,
            coap: *coap,
            http: *http,
        }),
        _ => Err("expected four comma-separated ports: cloud,mqtt,coap,http".into()),
    }
}

/// Failures split by exit code: 2 for bad input or unusable ports, 1 otherwise.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            Failure::Usage(format!("port already in use: {e}"))
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Io(io) => io.into(),
            RunError::Scenario(s) => Failure::Usage(s),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Scenario(ScenarioCmd::Check { file }) => {
            let s = config::load(&file)?;
            println!("{}: ok ({} devices, {} ticks)", file.display(), s.devices.len(), s.tick_count());
            Ok(())
        }
        Command::Scenario(ScenarioCmd::Run { file, run }) => play(&file, run, Speed::Max),
        Command::All { scenario, speed, run } => play(&scenario, run, speed.into()),
        Command::Cloud { config } => {
            let config: CloudConfig = config::read(&config)?;
            let service = CloudService::start(config)?;
            println!("cloud listening on {}", service.base_url());
            loop {
                std::thread::sleep(Duration::from_secs(3600));
            }
        }
        Command::Gateway { config } => {
            let config: GatewayConfig = config::read(&config)?;
            let mut gateway = Gateway::start(config)?;
            let e = gateway.endpoints();
            println!("gateway listening: mqtt {} coap {} http {}", e.mqtt, e.coap, e.http);
            loop {
                let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as i64);
                gateway.step(now, &BTreeSet::new(), Duration::ZERO)?;
                std::thread::sleep(Duration::from_secs(1));
            }
        }
        Command::Sim(args) => simulate(args),
    }
}

fn play(file: &Path, args: RunArgs, speed: Speed) -> Result<(), Failure> {
    let scenario = config::load(file)?;
    let temp;
    let work_dir = match args.work_dir {
        Some(d) => d,
        None => {
            temp = tempfile::tempdir()?;
            temp.path().to_path_buf()
        }
    };
    let mut opts = RunOptions::new(work_dir);
    opts.seed = args.seed;
    opts.ports = args.ports;
    opts.speed = speed;
    let out = run_scenario(&scenario, &opts)?;
    let json = out.report.to_json();
    match args.report {
        Some(path) => std::fs::write(&path, json)?,
        None => print!("{json}"),
    }
    let failed: Vec<&str> = out
        .report
        .invariants
        .iter()
        .filter(|i| !i.passed)
        .map(|i| i.name.as_str())
        .collect();
    if !failed.is_empty() {
        eprintln!("invariants failed: {}", failed.join(", "));
    }
    Ok(())
}

fn resolve(addr: &str) -> Result<std::net::SocketAddr, Failure> {
    use std::net::ToSocketAddrs;
    addr.to_socket_addrs()
        .map_err(|e| Failure::Usage(format!("{addr}: {e}")))?
        .next()
        .ok_or_else(|| Failure::Usage(format!("{addr}: no address")))
}

/// Plays a scenario's devices against an external gateway. Commands are
/// picked up once per tick.
fn simulate(args: SimArgs) -> Result<(), Failure> {
    let scenario = config::load(&args.scenario)?;
    let endpoints = Endpoints {
        mqtt: resolve(&args.mqtt)?,
        coap: resolve(&args.coap)?,
        http: resolve(&args.http)?,
    };
    let auth = DeviceAuth {
        mqtt: args.mqtt_user.zip(args.mqtt_password),
        http_token: args.device_token,
    };
    let home = &scenario.home_id;
    let mut links = std::collections::BTreeMap::new();
    for d in &scenario.devices {
        let link = DeviceLink::connect(d.protocol, home, &d.device_id, &endpoints, &auth)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", d.device_id)))?;
        links.insert(d.device_id.clone(), link);
    }
    let mut fleet = Fleet::new(&scenario);
    let tick = Duration::from_secs(u64::from(scenario.tick_seconds));
    let link_err = |e: hems::device::LinkError| Failure::Runtime(e.to_string());
    for _ in 0..scenario.tick_count() {
        let started = Instant::now();
        let out = fleet.tick();
        for e in &out.events {
            if let Some(link) = links.get(&hems_core::DeviceId::new(e.source.clone())) {
                link.send(&encode_event(e, home, link.protocol)).map_err(link_err)?;
            }
        }
        for m in &out.measurements {
            let link = &links[&m.device_id];
            link.send(&encode_telemetry(m, home, link.protocol)).map_err(link_err)?;
        }
        for link in links.values() {
            for cmd in link.receive(0, Duration::ZERO).map_err(link_err)? {
                if let Err(e) = fleet.command(&cmd) {
                    log::warn!("command {} rejected: {}", cmd.command_id, e.payload_str("reason").unwrap_or(""));
                }
            }
        }
        if matches!(args.speed, SpeedArg::Realtime) {
            std::thread::sleep(tick.saturating_sub(started.elapsed()));
        }
    }
    Ok(())
}
