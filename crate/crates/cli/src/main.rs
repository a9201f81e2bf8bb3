use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use eids_core::announce::Psk;
use eids_core::bench;
use eids_core::logger::{self, Logger};
use eids_core::packet::parse_frame;
use eids_core::pcap::{self, PcapRecord};
use eids_core::replay;
use eids_core::sim::{self, parse_duration, SimConfig, Topology};
use eids_core::stats::{self, FlowFilter, InterarrivalSampler, Summary};
use eids_core::{Engine, EngineConfig, Verdict};

const PSK_ENV: &str = "EIDS_PSK";

/// Exit status for bad input or configuration.
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "eids", version, about = "Timing-based intrusion detection for polling industrial networks")]
struct Cli {
    /// key = value file with engine and simulation settings; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the testbed and write a capture.
    Simulate {
        #[command(flatten)]
        sim: SimArgs,
        /// Only frames sent or received by this device.
        #[arg(long)]
        node: Option<String>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Learn a model from benign traffic.
    Learn {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Check traffic against a model. Exits 1 if anything was detected.
    Detect {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long, conflicts_with = "learn_first", required_unless_present = "learn_first")]
        model: Option<PathBuf>,
        /// Learn on the first part of the input, detect on the rest.
        #[arg(long, value_parser = duration_arg)]
        learn_first: Option<Duration>,
    },
    /// Collect status broadcasts and print the node table.
    Logger {
        #[arg(long)]
        port: Option<u16>,
        /// Silence after which a node counts as down.
        #[arg(long, value_parser = duration_arg)]
        timeout: Option<Duration>,
        /// Key file; otherwise the EIDS_PSK environment variable.
        #[arg(long)]
        psk_file: Option<PathBuf>,
        /// Stop after this long instead of running forever.
        #[arg(long, value_parser = duration_arg)]
        run_for: Option<Duration>,
    },
    /// Run every attack scenario through a simulated fleet.
    Bench {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Per-flow interarrival times as CSV.
    Stats {
        #[command(flatten)]
        input: InputArgs,
        /// tcp[:port], udp[:port], arp, arp-req, other or all, optionally /rx or /tx.
        #[arg(long, default_value = "all")]
        flow: FlowFilter,
        /// CSV destination; standard output by default.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct SimArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = duration_arg)]
    duration: Option<Duration>,
    /// e.g. "dos target=S1 start=660s rate=1000"; repeatable.
    #[arg(long = "scenario", value_parser = scenario_arg)]
    scenarios: Vec<sim::AttackScenario>,
    /// Key for simulated status broadcasts.
    #[arg(long)]
    psk_file: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Capture file. Omit together with --simulate to use simulated traffic.
    #[arg(required_unless_present = "simulate")]
    pcap: Option<PathBuf>,
    #[arg(long, conflicts_with = "pcap")]
    simulate: bool,
    #[command(flatten)]
    sim: SimArgs,
    /// Monitored device of the testbed topology.
    #[arg(long)]
    node: Option<String>,
    /// Address of the monitored node, for captures from other networks.
    #[arg(long)]
    local_ip: Option<Ipv4Addr>,
}

#[derive(Args, Clone, Default)]
struct EngineArgs {
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    delta_arp: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = duration_arg)]
    learning_duration: Option<Duration>,
    /// Drop offending packets instead of only reporting them.
    #[arg(long)]
    ips: bool,
}

fn duration_arg(s: &str) -> Result<Duration, String> {
    parse_duration(s).ok_or_else(|| format!("bad duration {s:?}, expected e.g. 250ms, 10s, 5m"))
}

fn scenario_arg(s: &str) -> Result<sim::AttackScenario, String> {
    sim::parse_scenario(s)
}

#[derive(Debug)]
struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

fn fail<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(msg.into()))
}

/// Settings from `--config`: engine keys here, everything else goes to the
/// simulator.
#[derive(Default)]
struct FileConfig {
    engine: EngineArgs,
    port: Option<u16>,
    timeout: Option<Duration>,
    sim_text: String,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let mut cfg = FileConfig::default();
    let Some(path) = path else { return Ok(cfg) };
    let text = fs::read_to_string(path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let Some((key, value)) = line.split_once('=') else {
            cfg.sim_text.push_str(raw);
            cfg.sim_text.push('\n');
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        let bad = || Failure(format!("{}:{}: bad value for {key}", path.display(), n + 1));
        let e = &mut cfg.engine;
        match key {
            "delta" => e.delta = Some(value.parse().map_err(|_| bad())?),
            "delta_arp" => e.delta_arp = Some(value.parse().map_err(|_| bad())?),
            "window" => e.window = Some(value.parse().map_err(|_| bad())?),
            "alpha" => e.alpha = Some(value.parse().map_err(|_| bad())?),
            "learning_duration" => e.learning_duration = Some(parse_duration(value).ok_or_else(bad)?),
            "ips" => e.ips = value.parse().map_err(|_| bad())?,
            "port" => cfg.port = Some(value.parse().map_err(|_| bad())?),
            "timeout" => cfg.timeout = Some(parse_duration(value).ok_or_else(bad)?),
            _ => {
                cfg.sim_text.push_str(raw);
                cfg.sim_text.push('\n');
                continue;
            }
        }
        // Keep line numbers of simulator errors aligned with the file.
        cfg.sim_text.push('\n');
    }
    Ok(cfg)
}

fn engine_config(file: &EngineArgs, flags: &EngineArgs, local_ip: Ipv4Addr, node_id: u16) -> Result<EngineConfig, Failure> {
    let d = EngineConfig::default();
    let cfg = EngineConfig {
        learning_duration: flags.learning_duration.or(file.learning_duration).unwrap_or(d.learning_duration),
        delta_default: flags.delta.or(file.delta).unwrap_or(d.delta_default),
        delta_arp: flags.delta_arp.or(file.delta_arp).unwrap_or(d.delta_arp),
        window_w: flags.window.or(file.window).unwrap_or(d.window_w),
        alpha: flags.alpha.or(file.alpha).unwrap_or(d.alpha),
        ips_mode: flags.ips || file.ips,
        local_ip,
        node_id,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_psk(file: Option<&Path>) -> Result<Option<Psk>, Failure> {
    let bytes = match file {
        Some(p) => {
            let mut b = fs::read(p).map_err(|e| Failure(format!("{}: {e}", p.display())))?;
            while b.last().is_some_and(|c| c.is_ascii_whitespace()) {
                b.pop();
            }
            b
        }
        None => match std::env::var_os(PSK_ENV) {
            Some(v) => v.into_encoded_bytes(),
            None => return Ok(None),
        },
    };
    Psk::new(bytes).map(Some).map_err(|_| Failure("pre-shared key is empty".into()))
}

fn sim_config(file: &FileConfig, args: &SimArgs) -> Result<SimConfig, Failure> {
    let mut cfg = if file.sim_text.trim().is_empty() {
        SimConfig::default()
    } else {
        sim::parse_config(&file.sim_text)?
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(d) = args.duration {
        cfg.duration = d;
    }
    cfg.scenarios.extend(args.scenarios.iter().cloned());
    if let Some(psk) = read_psk(args.psk_file.as_deref())? {
        cfg.profile.psk = psk;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Input {
    records: Vec<PcapRecord>,
    local_ip: Ipv4Addr,
    node_id: u16,
}

fn resolve_node(topo: &Topology, name: &str) -> Result<(Ipv4Addr, u16, usize), Failure> {
    let Some(dev) = topo.by_name(name) else {
        return fail(format!("unknown node {name:?}"));
    };
    let d = topo.device(dev);
    Ok((d.ip, d.node_id.unwrap_or(0), dev))
}

fn load_input(file: &FileConfig, args: &InputArgs) -> Result<Input, Failure> {
    if args.simulate {
        let cfg = sim_config(file, &args.sim)?;
        let trace = sim::run(&cfg)?;
        let name = args.node.as_deref().unwrap_or("S1");
        let (ip, node_id, dev) = resolve_node(trace.topology(), name)?;
        let records = trace
            .view(dev)
            .map(|(timestamp, _, bytes)| PcapRecord {
                timestamp,
                orig_len: bytes.len() as u32,
                data: bytes.to_vec(),
            })
            .collect();
        return Ok(Input {
            records,
            local_ip: args.local_ip.unwrap_or(ip),
            node_id,
        });
    }
    let path = args.pcap.as_ref().expect("clap enforces an input");
    let bytes = fs::read(path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
    let records = pcap::read_all(&bytes).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
    let (local_ip, node_id) = match (args.local_ip, args.node.as_deref()) {
        (Some(ip), _) => (ip, 0),
        (None, Some(name)) => {
            let (ip, id, _) = resolve_node(&Topology::testbed(), name)?;
            (ip, id)
        }
        (None, None) => return fail("a capture needs --local-ip or --node"),
    };
    Ok(Input {
        records,
        local_ip,
        node_id,
    })
}

fn cmd_simulate(file: &FileConfig, args: &SimArgs, node: Option<&str>, out: &Path) -> Result<ExitCode, Failure> {
    let cfg = sim_config(file, args)?;
    let trace = sim::run(&cfg)?;
    let dev = match node {
        Some(name) => Some(resolve_node(trace.topology(), name)?.2),
        None => None,
    };
    let w = BufWriter::new(File::create(out).map_err(|e| Failure(format!("{}: {e}", out.display())))?);
    trace.write_pcap(w, dev)?.flush()?;
    eprintln!(
        "simulated {} s, {} frames, {} devices, seed {}",
        cfg.duration.as_secs(),
        trace.len(),
        trace.topology().len(),
        cfg.seed
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_learn(file: &FileConfig, input: &InputArgs, flags: &EngineArgs, out: &Path) -> Result<ExitCode, Failure> {
    let inp = load_input(file, input)?;
    if inp.records.is_empty() {
        return fail("input holds no frames");
    }
    let cfg = engine_config(&file.engine, flags, inp.local_ip, inp.node_id)?;
    let mut engine = Engine::new(cfg)?;
    replay::learn_all(&mut engine, &inp.records);
    let model = engine.to_model();
    fs::write(out, model.render()).map_err(|e| Failure(format!("{}: {e}", out.display())))?;
    let span = inp
        .records
        .last()
        .unwrap()
        .timestamp
        .saturating_since(inp.records[0].timestamp);
    eprintln!(
        "learned {} flows, {} timing baselines, {} ARP bindings from {} frames over {} s",
        model.flows.len(),
        model.timings.len(),
        model.bindings.len(),
        inp.records.len(),
        span.as_secs()
    );
    match replay::longest_arp_gap(&inp.records, inp.local_ip) {
        Some(gap) => eprintln!(
            "longest ARP request gap {} s; suggested learning duration {} s",
            gap.as_secs(),
            (gap * 2).as_secs()
        ),
        None => eprintln!("too few ARP requests for this node to suggest a learning duration"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_detect(
    file: &FileConfig,
    input: &InputArgs,
    flags: &EngineArgs,
    model: Option<&Path>,
    learn_first: Option<Duration>,
) -> Result<ExitCode, Failure> {
    let inp = load_input(file, input)?;
    let mut cfg = engine_config(&file.engine, flags, inp.local_ip, inp.node_id)?;
    if let Some(d) = learn_first {
        cfg.learning_duration = d;
    }
    let mut engine = Engine::new(cfg)?;
    if let Some(path) = model {
        let bytes = fs::read(path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
        engine
            .import_model(&bytes)
            .map_err(|e| Failure(format!("{}: {e}", path.display())))?;
    }
    let mut out = BufWriter::new(io::stdout().lock());
    let (mut events, mut dropped, mut closed) = (0usize, 0usize, false);
    let local_ip = inp.local_ip;
    let node_id = inp.node_id;
    for rec in &inp.records {
        while let Some(d) = engine.next_deadline().filter(|&d| d <= rec.timestamp) {
            let evs = engine.tick(d);
            let stuck = evs.is_empty() && engine.next_deadline() == Some(d);
            emit(&mut out, &evs, node_id, &mut closed)?;
            events += evs.len();
            if stuck {
                break;
            }
        }
        let dir = replay::frame_direction(&rec.data, rec.timestamp, local_ip);
        let (verdict, evs) = engine.ingest(dir, &rec.data, rec.timestamp);
        emit(&mut out, &evs, node_id, &mut closed)?;
        events += evs.len();
        dropped += usize::from(verdict == Verdict::Drop);
    }
    if !closed {
        out.flush().or_else(ignore_broken_pipe)?;
    }
    eprintln!("{} frames, {} events, {} dropped", inp.records.len(), events, dropped);
    Ok(if events == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn ignore_broken_pipe(e: io::Error) -> io::Result<()> {
    if e.kind() == io::ErrorKind::BrokenPipe {
        Ok(())
    } else {
        Err(e)
    }
}

/// Write event lines until the reader goes away; the exit code still
/// reflects every event.
fn emit(out: &mut impl Write, events: &[eids_core::IntrusionEvent], node_id: u16, closed: &mut bool) -> io::Result<()> {
    for e in events {
        if *closed {
            return Ok(());
        }
        if let Err(err) = writeln!(out, "{}", e.log_line(node_id)) {
            ignore_broken_pipe(err)?;
            *closed = true;
        }
    }
    Ok(())
}

fn cmd_logger(
    file: &FileConfig,
    port: Option<u16>,
    timeout: Option<Duration>,
    psk_file: Option<&Path>,
    run_for: Option<Duration>,
) -> Result<ExitCode, Failure> {
    let Some(psk) = read_psk(psk_file)? else {
        return fail(format!("no key: set {PSK_ENV} or pass --psk-file"));
    };
    let port = port.or(file.port).unwrap_or(eids_core::announce::DEFAULT_PORT);
    let mut logger = Logger::new(psk).with_timeout(timeout.or(file.timeout).unwrap_or(logger::DEFAULT_TIMEOUT));
    let started = Instant::now();
    eprintln!("listening on udp port {port}");
    logger::serve(
        &mut logger,
        port,
        || run_for.is_none_or(|d| started.elapsed() < d),
        |view, _| {
            println!("{view}");
        },
    )?;
    let r = logger.rejected();
    eprintln!("rejected {} datagrams ({} bad hmac, {} replayed)", r.total(), r.bad_hmac, r.replayed);
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(file: &FileConfig, seed: u64, flags: &EngineArgs) -> Result<ExitCode, Failure> {
    let template = engine_config(&file.engine, flags, Ipv4Addr::UNSPECIFIED, 0)?;
    let started = Instant::now();
    let results = bench::run_matrix(seed, &template)?;
    let mut all = true;
    for r in &results {
        println!("{r}");
        all &= r.passed();
    }
    eprintln!("{} scenarios in {:.1} s", results.len(), started.elapsed().as_secs_f64());
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_stats(file: &FileConfig, input: &InputArgs, filter: FlowFilter, out: Option<&Path>) -> Result<ExitCode, Failure> {
    let inp = load_input(file, input)?;
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    writeln!(sink, "{}", stats::CSV_HEADER)?;
    let mut sampler = InterarrivalSampler::new(inp.local_ip, filter);
    let mut summary = Summary::default();
    for rec in &inp.records {
        let dir = replay::frame_direction(&rec.data, rec.timestamp, inp.local_ip);
        let Ok(meta) = parse_frame(&rec.data, rec.timestamp, dir) else { continue };
        if let Some(s) = sampler.push(&meta) {
            stats::write_csv_row(&mut sink, &s)?;
            summary.add(s.interarrival_us);
        }
    }
    sink.flush()?;
    match summary.mean_us() {
        Some(mean) => eprintln!(
            "{} samples, mean {:.3} ms, min {:.3} ms, max {:.3} ms",
            summary.count,
            mean / 1e3,
            summary.min_us as f64 / 1e3,
            summary.max_us as f64 / 1e3
        ),
        None => eprintln!("no matching samples"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(cli.config.as_deref()).and_then(|file| match &cli.command {
        Command::Simulate { sim, node, out } => cmd_simulate(&file, sim, node.as_deref(), out),
        Command::Learn { input, engine, out } => cmd_learn(&file, input, engine, out),
        Command::Detect {
            input,
            engine,
            model,
            learn_first,
        } => cmd_detect(&file, input, engine, model.as_deref(), *learn_first),
        Command::Logger {
            port,
            timeout,
            psk_file,
            run_for,
        } => cmd_logger(&file, *port, *timeout, psk_file.as_deref(), *run_for),
        Command::Bench { seed, engine } => cmd_bench(&file, *seed, engine),
        Command::Stats { input, flow, out } => cmd_stats(&file, input, *flow, out.as_deref()),
    });
    match result {
        Ok(code) => code,
        Err(Failure(msg)) => {
            eprintln!("eids: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
