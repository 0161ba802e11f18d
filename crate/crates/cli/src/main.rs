use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use icnq::alloc::{allocate_with_model, AllocConfig};
use icnq::artifact::{load_integer_graph, save_integer_graph};
use icnq::exec::{quantize_input, run_integer_trace, Activation, ExecOptions, IntegerTensor};
use icnq::icn::convert_graph;
use icnq::manifest::{load_graph, save_graph, ParamStorage};
use icnq::memory::{memory_report, reference_threshold_calibration, MemoryModel};
use icnq::mobilenet::{label, mobilenet_v1, WeightInit};
use icnq::verify::{verify, VerifyConfig};
use icnq::{BitPlan, Error, MemoryBudget, NetworkGraph, QuantMode, SCHEMA_VERSION};

mod units;

use units::{mib, parse_bytes};

const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "icnq", version, about = "Integer-only CNN quantization toolchain")]
struct Cli {
    /// Print progress details to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Choose per-tensor bit widths under memory budgets.
    Allocate(AllocateArgs),
    /// Convert a float model into an integer-only graph.
    Convert(ConvertArgs),
    /// Run an integer-only graph on one input.
    Run(RunArgs),
    /// Print the memory footprint of a model under a plan.
    Report(ReportArgs),
    /// Compare integer execution against the fake-quantized reference.
    Verify(VerifyArgs),
    /// Write a MobilenetV1 architecture manifest.
    GenMobilenet(GenArgs),
}

#[derive(Args)]
struct ModeArg {
    /// pl-fb, pl-icn, pc-icn or pc-thresholds.
    #[arg(long, default_value = "pc-icn")]
    mode: QuantMode,
}

#[derive(Args)]
struct PlanArgs {
    /// Bit plan JSON written by `allocate`.
    #[arg(long, conflicts_with = "bits")]
    plan: Option<PathBuf>,
    /// Uniform bit width for every tensor (the input stays at 8).
    #[arg(long, value_parser = parse_width)]
    bits: Option<u8>,
}

#[derive(Args)]
struct AllocateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Read-only budget, e.g. 2M.
    #[arg(long, value_parser = parse_bytes)]
    m_ro: u64,
    /// Read-write budget, e.g. 512k.
    #[arg(long, value_parser = parse_bytes)]
    m_rw: u64,
    #[command(flatten)]
    mode: ModeArg,
    #[arg(long, default_value_t = 4, value_parser = parse_width)]
    q_a_min: u8,
    #[arg(long, default_value_t = 2, value_parser = parse_width)]
    q_w_min: u8,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Also cut an activation whose footprint equals the other tensor's.
    #[arg(long)]
    cut_on_equal_footprint: bool,
    /// Bytes per threshold in the thresholds mode.
    #[arg(long)]
    threshold_bytes: Option<u64>,
    /// Where to write the plan.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    mode: ModeArg,
    /// Output directory for the integer graph.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Directory written by `convert`.
    #[arg(long)]
    integer: PathBuf,
    /// Raw input file: one byte per code, or little-endian f32 values.
    #[arg(long, conflicts_with = "random_seed")]
    input: Option<PathBuf>,
    #[arg(long, default_value = "f32", value_parser = ["f32", "codes"])]
    input_format: String,
    /// Use a seeded uniform random input instead of a file.
    #[arg(long)]
    random_seed: Option<u64>,
    /// Number of classes listed for a classifier output.
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Write every boundary as a blob into this directory.
    #[arg(long)]
    dump_activations: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    mode: ModeArg,
    #[arg(long)]
    threshold_bytes: Option<u64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    mode: ModeArg,
    /// Verify this converted graph instead of converting afresh.
    #[arg(long)]
    integer: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    inputs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    tolerance: u32,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 224)]
    resolution: usize,
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    /// Fill weights from this seed (zeros otherwise).
    #[arg(long)]
    random_seed: Option<u64>,
    /// Keep parameters inline instead of in a sidecar blob.
    #[arg(long)]
    inline: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_width(s: &str) -> std::result::Result<u8, String> {
    match s.parse::<u8>() {
        Ok(q @ (2 | 4 | 8)) => Ok(q),
        _ => Err(format!("'{s}' is not a bit width (2, 4 or 8)")),
    }
}

/// On-disk bit plan.
#[derive(Serialize, Deserialize)]
struct PlanFile {
    schema_version: u32,
    #[serde(flatten)]
    plan: BitPlan,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn load_model(path: &Path) -> Result<NetworkGraph> {
    load_graph(path).with_context(|| format!("loading model {}", path.display()))
}

fn resolve_plan(args: &PlanArgs, graph: &NetworkGraph) -> Result<BitPlan> {
    let plan = match (&args.plan, args.bits) {
        (Some(path), _) => {
            let file: PlanFile = read_json(path)?;
            if file.schema_version != SCHEMA_VERSION {
                bail!("{}: unsupported schema_version {}", path.display(), file.schema_version);
            }
            file.plan
        }
        (None, Some(bits)) => BitPlan::uniform(graph.layers.len(), bits),
        (None, None) => BitPlan::uniform(graph.layers.len(), 8),
    };
    plan.validate(graph)?;
    Ok(plan)
}

fn memory_model(threshold_bytes: Option<u64>) -> MemoryModel {
    threshold_bytes.map_or_else(MemoryModel::default, |t| MemoryModel { threshold_bytes: t })
}

fn bit_table(graph: &NetworkGraph, plan: &BitPlan, model: &MemoryModel, mode: QuantMode) -> String {
    let footprints = model.layer_footprints(graph, plan, mode);
    let bar = |q: u8| "#".repeat(q as usize);
    let mut out = format!(
        "{:>3}  {:<18} {:>13}  {:<9} {:<9} {:<9} {:>10} {:>8} {:>10}\n",
        "#", "layer", "output", "Q_w", "Q_x", "Q_y", "weights", "aux", "act"
    );
    let shapes = graph.infer_shapes().unwrap_or_default();
    for (l, f) in graph.layers.iter().zip(&footprints) {
        let (qx, qy) = plan.act_bits(l.index);
        let qw = if l.kind.has_weights() {
            format!("{} {}", plan.q_w[l.index], bar(plan.q_w[l.index]))
        } else {
            "-".into()
        };
        out += &format!(
            "{:>3}  {:<18} {:>13}  {:<9} {:<9} {:<9} {:>10} {:>8} {:>10}\n",
            l.index,
            l.kind.name(),
            shapes.get(l.index).map(|s| s.output.to_string()).unwrap_or_default(),
            qw,
            format!("{qx} {}", bar(qx)),
            format!("{qy} {}", bar(qy)),
            f.weight_bytes,
            f.aux_bytes,
            f.rw_bytes()
        );
    }
    let ro: u64 = footprints.iter().map(|f| f.ro_bytes()).sum();
    let rw = footprints.iter().map(|f| f.rw_bytes()).max().unwrap_or(0);
    out += &format!(
        "read-only {} bytes ({:.3} MiB), peak read-write {} bytes ({:.1} KiB)\n",
        ro,
        mib(ro),
        rw,
        rw as f64 / 1024.0
    );
    out
}

#[derive(Serialize)]
struct AllocationReport<'a> {
    schema_version: u32,
    model: String,
    budget: MemoryBudget,
    mode: QuantMode,
    config: AllocConfig,
    plan: &'a BitPlan,
    ro_bytes: u64,
    rw_peak_bytes: u64,
}

fn cmd_allocate(args: AllocateArgs, verbose: u8) -> Result<ExitCode> {
    let graph = load_model(&args.model)?;
    let budget = MemoryBudget::new(args.m_ro, args.m_rw);
    let config = AllocConfig {
        q_a_min: args.q_a_min,
        q_w_min: args.q_w_min,
        delta: args.delta,
        cut_on_equal_footprint: args.cut_on_equal_footprint,
    };
    let model = memory_model(args.threshold_bytes);
    let mode = args.mode.mode;
    let plan = allocate_with_model(&graph, &budget, mode, &config, &model)?;
    if let Some(out) = &args.out {
        write_json(
            out,
            &PlanFile {
                schema_version: SCHEMA_VERSION,
                plan: plan.clone(),
            },
        )?;
        if verbose > 0 {
            eprintln!("wrote {}", out.display());
        }
    }
    if args.json {
        let report = memory_report(&graph, &plan, mode, &model);
        print_json(&AllocationReport {
            schema_version: SCHEMA_VERSION,
            model: args.model.display().to_string(),
            budget,
            mode,
            config,
            plan: &plan,
            ro_bytes: report.ro_bytes,
            rw_peak_bytes: report.rw_peak_bytes,
        })?;
    } else {
        emit(&bit_table(&graph, &plan, &model, mode))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_convert(args: ConvertArgs, verbose: u8) -> Result<ExitCode> {
    let graph = load_model(&args.model)?;
    let plan = resolve_plan(&args.plan, &graph)?;
    let integer = convert_graph(&graph, &plan, args.mode.mode)?;
    save_integer_graph(&integer, &args.out)?;
    if verbose > 0 {
        eprintln!(
            "converted {} layers ({}) into {}",
            integer.layers.len(),
            integer.mode,
            args.out.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn read_input(args: &RunArgs, shape_elements: usize, range: (f64, f64)) -> Result<Input> {
    if let Some(seed) = args.random_seed {
        return Ok(Input::Real(uniform_input(seed, shape_elements, range)));
    }
    let Some(path) = &args.input else {
        bail!("either --input or --random-seed is required");
    };
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if args.input_format == "codes" {
        return Ok(Input::Codes(bytes));
    }
    if bytes.len() % 4 != 0 {
        bail!("{}: length {} is not a multiple of 4", path.display(), bytes.len());
    }
    Ok(Input::Real(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    ))
}

enum Input {
    Codes(Vec<u8>),
    Real(Vec<f32>),
}

fn uniform_input(seed: u64, n: usize, range: (f64, f64)) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (range.0 as f32, range.1 as f32);
    (0..n)
        .map(|_| if hi > lo { rng.gen_range(lo..=hi) } else { lo })
        .collect()
}

#[derive(Serialize)]
struct TopEntry {
    class: usize,
    value: f64,
    accumulator: i64,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RunOutput {
    Logits { argmax: usize, top_k: Vec<TopEntry> },
    Codes { shape: [usize; 3], bits: u8, codes: Vec<u8> },
}

#[derive(Serialize)]
struct RunReport {
    schema_version: u32,
    mode: QuantMode,
    output: RunOutput,
}

#[derive(Serialize)]
struct DumpEntry {
    boundary: usize,
    file: String,
    shape: [usize; 3],
    /// Code width, or "logits_i64" for classifier accumulators.
    encoding: String,
}

fn dump_activations(dir: &Path, input: &IntegerTensor, trace: &[Activation]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut index = Vec::new();
    let mut write = |boundary: usize, shape: icnq::TensorShape, encoding: String, bytes: Vec<u8>| -> Result<()> {
        let file = format!("boundary_{boundary:03}.bin");
        let path = dir.join(&file);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        index.push(DumpEntry {
            boundary,
            file,
            shape: [shape.h, shape.w, shape.c],
            encoding,
        });
        Ok(())
    };
    write(0, input.shape, format!("u{}", input.bits), input.to_codes())?;
    for (i, act) in trace.iter().enumerate() {
        match act {
            Activation::Codes(t) => write(i + 1, t.shape, format!("u{}", t.bits), t.to_codes())?,
            Activation::Logits(l) => {
                let bytes = l.acc.iter().flat_map(|a| a.to_le_bytes()).collect();
                let shape = icnq::TensorShape::new(1, 1, l.acc.len());
                write(i + 1, shape, "logits_i64".into(), bytes)?
            }
        }
    }
    write_json(
        &dir.join("index.json"),
        &serde_json::json!({ "schema_version": SCHEMA_VERSION, "boundaries": index }),
    )
}

fn cmd_run(args: RunArgs, verbose: u8) -> Result<ExitCode> {
    let graph = load_integer_graph(&args.integer)?;
    let range = graph.input_spec.range[0];
    let x = match read_input(&args, graph.input_shape.elements(), range)? {
        Input::Codes(c) => IntegerTensor::from_codes(graph.input_shape, graph.input_spec.bits, &c)?,
        Input::Real(v) => {
            if v.len() != graph.input_shape.elements() {
                bail!("input has {} values, graph expects {}", v.len(), graph.input_shape);
            }
            quantize_input(&graph, &v)?
        }
    };
    let trace = run_integer_trace(&graph, &x, ExecOptions::default())?;
    if let Some(dir) = &args.dump_activations {
        dump_activations(dir, &x, &trace)?;
        if verbose > 0 {
            eprintln!("dumped {} boundaries into {}", trace.len() + 1, dir.display());
        }
    }
    let output = match trace.last().expect("graph has layers") {
        Activation::Logits(l) => {
            let values = l.values();
            let mut order: Vec<usize> = (0..values.len()).collect();
            order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
            RunOutput::Logits {
                argmax: l.argmax(),
                top_k: order
                    .into_iter()
                    .take(args.top_k)
                    .map(|c| TopEntry {
                        class: c,
                        value: values[c],
                        accumulator: l.acc[c],
                    })
                    .collect(),
            }
        }
        Activation::Codes(t) => RunOutput::Codes {
            shape: [t.shape.h, t.shape.w, t.shape.c],
            bits: t.bits,
            codes: t.to_codes(),
        },
    };
    print_json(&RunReport {
        schema_version: SCHEMA_VERSION,
        mode: graph.mode,
        output,
    })?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    let graph = load_model(&args.model)?;
    let plan = resolve_plan(&args.plan, &graph)?;
    let model = memory_model(args.threshold_bytes);
    let mode = args.mode.mode;
    let report = memory_report(&graph, &plan, mode, &model);
    if args.json {
        let calibration = (mode == QuantMode::PcThresholds).then(reference_threshold_calibration);
        print_json(&serde_json::json!({
            "report": report,
            "threshold_calibration": calibration,
        }))?;
    } else {
        let mut text = bit_table(&graph, &plan, &model, mode);
        text += &format!(
            "full precision {} bytes ({:.3} MiB)\n",
            report.full_precision_bytes,
            mib(report.full_precision_bytes)
        );
        if mode == QuantMode::PcThresholds {
            let c = reference_threshold_calibration();
            text += &format!(
                "threshold width {} bytes (calibrated: {} bytes, {:+.2}% vs reference)\n",
                model.threshold_bytes,
                c.threshold_bytes,
                100.0 * c.delta
            );
        }
        emit(&text)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs, verbose: u8) -> Result<ExitCode> {
    let graph = load_model(&args.model)?;
    let plan = resolve_plan(&args.plan, &graph)?;
    let integer = match &args.integer {
        Some(dir) => load_integer_graph(dir)?,
        None => convert_graph(&graph, &plan, args.mode.mode)?,
    };
    let config = VerifyConfig {
        inputs: args.inputs,
        seed: args.seed,
        tolerance_codes: args.tolerance,
        ..VerifyConfig::default()
    };
    let report = verify(&graph, &plan, &integer, &config, ExecOptions::default())?;
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => print_json(&report)?,
    }
    if verbose > 0 || !report.passed {
        eprintln!(
            "max deviation {} (tolerance {}), argmax agreement {}/{}",
            report.max_deviation, report.tolerance_codes, report.argmax_agreed, report.argmax_checked
        );
    }
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        eprintln!("verification failed");
        ExitCode::from(EXIT_VERIFY)
    })
}

fn cmd_gen(args: GenArgs, verbose: u8) -> Result<ExitCode> {
    let init = args.random_seed.map_or(WeightInit::Zeros, WeightInit::Random);
    let graph = mobilenet_v1(args.resolution, args.width, init);
    graph.validate()?;
    let storage = if args.inline {
        ParamStorage::Inline
    } else {
        ParamStorage::Sidecar
    };
    save_graph(&graph, &args.out, storage)?;
    if verbose > 0 {
        eprintln!("wrote MobilenetV1 {} to {}", label(args.resolution, args.width), args.out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let v = cli.verbose;
    let result = match cli.command {
        Command::Allocate(a) => cmd_allocate(a, v),
        Command::Convert(a) => cmd_convert(a, v),
        Command::Run(a) => cmd_run(a, v),
        Command::Report(a) => cmd_report(a),
        Command::Verify(a) => cmd_verify(a, v),
        Command::GenMobilenet(a) => cmd_gen(a, v),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Infeasible(report)) => {
                    if let Ok(text) = serde_json::to_string(report) {
                        eprintln!("{text}");
                    }
                    ExitCode::from(EXIT_INFEASIBLE)
                }
                _ => ExitCode::from(EXIT_CONFIG),
            }
        }
    }
}
