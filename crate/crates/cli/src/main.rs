use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use xpnn::asm::{format_hex, ProgramImage};
use xpnn::bench::{opef_ladder, parse_layer, run_bench, BenchConfig, BenchError};
use xpnn::cluster::{Cluster, ClusterConfig, ConfigError};
use xpnn::core_sim::CODE_BASE;
use xpnn::kernels::{KernelError, Variant};
use xpnn::{assemble, disassemble, AsmError, Program, SimError};

#[derive(Parser)]
#[command(name = "xpnn", version, about = "Assemble, simulate and benchmark XpulpNN programs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble a source file into a hex image.
    Asm {
        input: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Disassemble a hex image into source that reassembles to it.
    Disasm {
        input: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run a program (source or hex) on the cluster and print a cycle report.
    Run(RunArgs),
    /// Run the kernel benchmark matrix.
    Bench(BenchArgs),
    /// Print static and dynamic inner-loop OPEF for every kernel.
    Opef {
        #[arg(long, default_value_t = 8)]
        precision: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    program: PathBuf,
    /// Cluster TOML (cores, banks, tcdm_bytes, base_address).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cores: Option<usize>,
    #[arg(long)]
    banks: Option<usize>,
    #[arg(long, default_value_t = 100_000_000)]
    max_cycles: u64,
    /// Write a per-instruction trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the final TCDM contents as a hex image here.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark TOML; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cores: Option<usize>,
    #[arg(long)]
    banks: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    precision: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    variant: Vec<Variant>,
    /// HxWxC,KxFxFxC; repeat for several layers.
    #[arg(long)]
    layer: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => io::stdout().write_all(text.as_bytes()).context("writing stdout"),
    }
}

/// Hex images are recognised by extension; anything else is assembled.
fn load_image(path: &Path) -> Result<ProgramImage> {
    let text = read(path)?;
    let hex = path.extension().is_some_and(|e| e == "hex");
    let img = if hex { ProgramImage::from_hex(&text)? } else { assemble(&text)? };
    Ok(img)
}

/// Trace lines from every core go to one file in step order.
struct SharedSink(Arc<Mutex<io::BufWriter<fs::File>>>);

impl Write for SharedSink {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.lock().expect("trace lock").write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.lock().expect("trace lock").flush()
    }
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ClusterConfig::from_toml(&read(p)?)?,
        None => ClusterConfig::default(),
    };
    if let Some(n) = a.cores {
        cfg.n_cores = n;
    }
    if let Some(b) = a.banks {
        cfg.n_banks = b;
    }
    cfg.validate()?;
    let img = load_image(&a.program)?;
    let program = Arc::new(Program::from_image(&img));
    let mut cl = Cluster::new(cfg, program)?;
    let data: Vec<_> = img.sections.iter().filter(|s| s.base < CODE_BASE).cloned().collect();
    cl.tcdm_mut().load_sections(&data).map_err(|f| anyhow!(ConfigError::Invalid(format!("data section: {f}"))))?;
    let sink = match &a.trace {
        Some(p) => {
            let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            let shared = Arc::new(Mutex::new(io::BufWriter::new(f)));
            for i in 0..cfg.n_cores {
                cl.core_mut(i).set_trace(Box::new(SharedSink(shared.clone())));
            }
            Some(shared)
        }
        None => None,
    };
    let result = cl.run(a.max_cycles);
    if let Some(s) = sink {
        s.lock().expect("trace lock").flush().context("flushing trace")?;
    }
    let report = result?;
    if let Some(p) = &a.dump {
        fs::write(p, format_hex(&[cl.tcdm().dump()], None)).with_context(|| format!("writing {}", p.display()))?;
    }
    let regs: Vec<_> = cl.cores().iter().map(|c| c.regs().to_vec()).collect();
    let doc = json!({ "config": cfg, "report": report, "registers": regs });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_or_print(a.out.as_deref(), &text)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => BenchConfig::from_toml(&read(p)?)?,
        None => BenchConfig::default(),
    };
    if let Some(n) = a.cores {
        cfg.cores = n;
    }
    if let Some(b) = a.banks {
        cfg.banks = b;
    }
    if !a.precision.is_empty() {
        cfg.precisions = a.precision;
    }
    if !a.variant.is_empty() {
        cfg.variants = a.variant;
    }
    if !a.layer.is_empty() {
        for l in &a.layer {
            parse_layer(l).map_err(BenchError::Config)?;
        }
        cfg.layers = a.layer;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    log::info!("bench config {}", cfg.hash());
    let report = run_bench(&cfg)?;
    if let Some(p) = &a.out {
        fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_opef(precision: u32, out: Option<PathBuf>) -> Result<()> {
    if !matches!(precision, 2 | 4 | 8) {
        return Err(BenchError::Config(format!("precision must be 8, 4 or 2, got {precision}")).into());
    }
    let rows = opef_ladder(precision)?;
    if let Some(p) = &out {
        let mut text = serde_json::to_string_pretty(&rows)?;
        text.push('\n');
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{:<14} {:>4} {:>8} {:>8}", "kernel", "bits", "static", "dynamic");
    for r in &rows {
        println!("{:<14} {:>4} {:>8.4} {:>8.4}", r.kernel, r.bits, r.static_opef, r.dynamic_opef);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Asm { input, out } => {
            let img = assemble(&read(&input)?)?;
            write_or_print(out.as_deref(), &img.to_hex())
        }
        Cmd::Disasm { input, out } => {
            let img = ProgramImage::from_hex(&read(&input)?)?;
            write_or_print(out.as_deref(), &disassemble(&img)?)
        }
        Cmd::Run(a) => cmd_run(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Opef { precision, out } => cmd_opef(precision, out),
    }
}

/// 1: verification failure, 2: simulator trap, 3: configuration or input error.
fn exit_code(e: &anyhow::Error) -> u8 {
    let sim = |s: &SimError| if matches!(s, SimError::Protocol(_)) { 3 } else { 2 };
    for cause in e.chain() {
        if let Some(b) = cause.downcast_ref::<BenchError>() {
            return match b {
                BenchError::Verification { .. } => 1,
                BenchError::Kernel { source: KernelError::Sim(s), .. } => sim(s),
                _ => 3,
            };
        }
        if let Some(s) = cause.downcast_ref::<SimError>() {
            return sim(s);
        }
        if cause.downcast_ref::<AsmError>().is_some() || cause.downcast_ref::<ConfigError>().is_some() {
            return 3;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("XPNN_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
