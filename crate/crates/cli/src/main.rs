use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use drone_ear::calibration::{calibrate, CalibrationConfig};
use drone_ear::classifier::SignatureLibrary;
use drone_ear::doa::{DEFAULT_NOISE_LAMBDA, DEFAULT_SCAN_STEP_DEG};
use drone_ear::formats::{load_library, load_stream, save_library, write_wav, GeometryFile, RawAdcWriter};
use drone_ear::pipeline::{
    add_to_library, classify_seconds, emit_plot_data, run_pipeline, segment_pulses, threshold_sweep,
    train_with_threshold, training_frames, PipelineConfig,
};
use drone_ear::simulator::{logamp_adc_stream, SceneConfig};
use drone_ear::{ArrayGeometry, DecimatedStream, SPEED_OF_SOUND};

const DEFAULT_GATE: f64 = 1.0;
const DEFAULT_FULL_SCALE: f64 = 4.0;

#[derive(Parser)]
#[command(name = "drone-ear", version, about = "Acoustic UAV detection, calibration and direction finding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene description to a raw capture and/or WAV file.
    Simulate(SimulateArgs),
    /// Estimate microphone positions and gains from a pulse recording.
    Calibrate(CalibrateArgs),
    /// Train a signature from a recording and store it in a library.
    Train(TrainArgs),
    /// Print per-second classification decisions for a recording.
    Classify(ClassifyArgs),
    /// Detect, classify and locate; writes JSON lines.
    Run(RunArgs),
    /// Fraction of windows gated on for a range of thresholds.
    ThresholdSweep(SweepArgs),
    /// Averaged PSD of each channel as CSV.
    Plot(PlotArgs),
    /// Inspect or edit a signature library.
    #[command(subcommand)]
    Library(LibraryCommand),
}

#[derive(Args)]
struct InputArgs {
    /// Raw capture (`DEAR` header) or `.wav` recording.
    #[arg(short, long)]
    input: PathBuf,
    /// Acoustic amplitude of a full-scale sample.
    #[arg(long, default_value_t = DEFAULT_FULL_SCALE)]
    full_scale: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene description (key = value lines).
    #[arg(short, long)]
    config: PathBuf,
    /// Raw converter capture output.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// WAV output of the decimated stream.
    #[arg(long)]
    wav: Option<PathBuf>,
    #[arg(long, default_value_t = 24)]
    wav_bits: u16,
    /// Ground-truth JSON output.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Geometry JSON output.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = SPEED_OF_SOUND)]
    speed_of_sound: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Label stored with the signature.
    #[arg(short, long)]
    name: String,
    /// Library file; created when missing.
    #[arg(short, long)]
    library: PathBuf,
    #[arg(short, long)]
    geometry: Option<PathBuf>,
    /// Train only on gated-on frames.
    #[arg(long)]
    gate_threshold: Option<f64>,
    /// Raise the library threshold to the 99th percentile of this signature's
    /// training distances.
    #[arg(long)]
    calibrate_threshold: bool,
}

#[derive(Args)]
struct ClassifyArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(short, long)]
    library: PathBuf,
    #[arg(short, long)]
    geometry: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_GATE)]
    gate_threshold: f64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(short, long)]
    geometry: PathBuf,
    #[arg(short, long)]
    library: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GATE)]
    gate_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_SCAN_STEP_DEG)]
    scan_step_deg: f64,
    #[arg(long, default_value_t = DEFAULT_NOISE_LAMBDA)]
    noise_lambda: f64,
    /// Also run the delay-and-sum beamformer.
    #[arg(long)]
    beamformer: bool,
    /// JSON-lines output (DOA estimates and detection events); stdout if absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Run summary as JSON; stderr if absent.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(short, long)]
    geometry: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    min: f64,
    #[arg(long, default_value_t = 1e4)]
    max: f64,
    /// Log-spaced thresholds between min and max.
    #[arg(long, default_value_t = 33)]
    steps: usize,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    input: InputArgs,
    /// CSV output; stdout if absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum LibraryCommand {
    /// List stored signatures.
    List {
        #[arg(short, long)]
        library: PathBuf,
    },
    /// Copy a signature from another library file.
    Add {
        #[arg(short, long)]
        library: PathBuf,
        /// Library holding the signature to copy.
        #[arg(long)]
        from: PathBuf,
        /// Slot in `from`.
        #[arg(long)]
        id: u8,
    },
    /// Delete the signature in a slot.
    Remove {
        #[arg(short, long)]
        library: PathBuf,
        #[arg(long)]
        id: u8,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Train(a) => train(a),
        Command::Classify(a) => classify_cmd(a),
        Command::Run(a) => run(a),
        Command::ThresholdSweep(a) => sweep(a),
        Command::Plot(a) => plot(a),
        Command::Library(c) => library(c),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_input(args: &InputArgs) -> Result<DecimatedStream> {
    load_stream(&args.input, args.full_scale).with_context(|| format!("reading {}", args.input.display()))
}

fn load_geometry(path: Option<&Path>, channels: usize) -> Result<ArrayGeometry> {
    match path {
        Some(p) => {
            let g = GeometryFile::load(p)
                .with_context(|| format!("loading geometry {}", p.display()))?
                .geometry()?;
            if g.len() != channels {
                bail!("geometry has {} microphones but the recording has {channels} channels", g.len());
            }
            Ok(g)
        }
        None => {
            // Gains only; positions are unused by the callers that allow this.
            let positions = (0..channels).map(|i| [i as f64, 0.0, 0.0]).collect();
            Ok(ArrayGeometry::with_unit_gains(positions)?)
        }
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let cfg = SceneConfig::parse(&text)?;
    if a.raw.is_none() && a.wav.is_none() && a.truth.is_none() {
        bail!("nothing to write: pass --raw, --wav and/or --truth");
    }
    let analog = cfg.render_analog()?;
    let settings = cfg.adc_settings();
    let adc_seed = cfg.seed ^ 0xadc;
    if let Some(path) = &a.raw {
        let file = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        let mut writer = RawAdcWriter::new(file, analog.len(), settings.adc_rate)?;
        let report = logamp_adc_stream(&analog, &settings, adc_seed, |codes| writer.write_codes(codes))?;
        writer.finish()?;
        info!("wrote {} codes to {}", report.samples, path.display());
    }
    if let Some(path) = &a.wav {
        let stream = drone_ear::simulator::adc_to_decimated(&analog, &settings, adc_seed)?;
        let file = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        write_wav(file, &stream.channels, stream.sample_rate as u32, a.wav_bits, cfg.full_scale)?;
    }
    if let Some(path) = &a.truth {
        let json = serde_json::to_string_pretty(&cfg.ground_truth())?;
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<()> {
    let stream = load_input(&a.input)?;
    let set = segment_pulses(&stream)?;
    info!("found {} pulses", set.pulses.len());
    let report = calibrate(
        &set,
        &CalibrationConfig {
            speed_of_sound: a.speed_of_sound,
            max_lag: None,
        },
    )?;
    for (idx, why) in &report.rejected_pulses {
        eprintln!("pulse {idx} rejected: {why}");
    }
    GeometryFile::new(&report.geometry, a.speed_of_sound).save(&a.out)?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let stream = load_input(&a.input)?;
    let geometry = load_geometry(a.geometry.as_deref(), stream.channel_count())?;
    let frames = training_frames(&stream, geometry.gains(), a.gate_threshold)?;
    let (sig, p99) = train_with_threshold(&frames, &a.name)?;
    let mut lib = if a.library.exists() {
        load_library(&a.library).with_context(|| format!("loading {}", a.library.display()))?
    } else {
        SignatureLibrary::new(0.0)
    };
    let id = if a.calibrate_threshold {
        add_to_library(&mut lib, sig, p99)?
    } else {
        lib.add(sig)?
    };
    save_library(&lib, &a.library)?;
    let line = serde_json::json!({
        "id": id,
        "name": a.name,
        "frames": frames.len(),
        "p99_distance": p99,
        "threshold": lib.distance_threshold,
    });
    println!("{line}");
    Ok(())
}

fn classify_cmd(a: ClassifyArgs) -> Result<()> {
    let stream = load_input(&a.input)?;
    let geometry = load_geometry(a.geometry.as_deref(), stream.channel_count())?;
    let lib = load_library(&a.library).with_context(|| format!("loading {}", a.library.display()))?;
    let mut out = output(None)?;
    for d in classify_seconds(&stream, geometry.gains(), a.gate_threshold, &lib)? {
        let name = lib.get(d.id).map_or("", |s| s.name.as_str());
        let line = serde_json::json!({
            "second": d.second,
            "uav_id": d.id,
            "uav_name": name,
            "distance": d.distance,
            "below_threshold": d.distance < lib.distance_threshold,
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
#[serde(untagged)]
enum Line<'a> {
    Doa(&'a drone_ear::doa::DoaEstimate),
    Event(&'a drone_ear::pipeline::DetectionEvent),
}

fn run(a: RunArgs) -> Result<()> {
    // Fail fast on configuration before touching the recording.
    let geometry_file = GeometryFile::load(&a.geometry).with_context(|| format!("loading geometry {}", a.geometry.display()))?;
    let lib = load_library(&a.library).with_context(|| format!("loading library {}", a.library.display()))?;
    if lib.is_empty() {
        bail!("library {} has no signatures", a.library.display());
    }
    let geometry = geometry_file.geometry()?;
    let mut out = output(a.out.as_deref())?;
    let stream = match load_input(&a.input) {
        Ok(s) => s,
        Err(e) => {
            writeln!(out, "{}", serde_json::json!({"error": format!("{e:#}")}))?;
            out.flush()?;
            return Err(e);
        }
    };
    if stream.channel_count() != geometry.len() {
        bail!(
            "geometry has {} microphones but the recording has {} channels",
            geometry.len(),
            stream.channel_count()
        );
    }
    let mut cfg = PipelineConfig::new(geometry, a.gate_threshold);
    cfg.scan_step_deg = a.scan_step_deg;
    cfg.noise_lambda = a.noise_lambda;
    cfg.speed_of_sound = geometry_file.speed_of_sound;
    cfg.beamformer = a.beamformer;
    let result = run_pipeline(&stream, Some(&lib), &cfg)?;

    // DOA lines and events merged in time order; an event follows the DOA
    // estimates that precede it.
    let mut lines: Vec<(f64, u8, Line)> = result.doa.iter().map(|d| (d.t, 0, Line::Doa(d))).collect();
    lines.extend(result.events.iter().map(|e| (e.t, 1, Line::Event(e))));
    lines.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    for (_, _, line) in &lines {
        writeln!(out, "{}", serde_json::to_string(line)?)?;
    }
    out.flush()?;
    let summary = serde_json::to_string(&result.summary)?;
    match &a.summary {
        Some(p) => std::fs::write(p, summary + "\n")?,
        None => eprintln!("{summary}"),
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    if !(a.min > 0.0 && a.max > a.min && a.steps >= 2) {
        bail!("need 0 < min < max and at least two steps");
    }
    let stream = load_input(&a.input)?;
    let geometry = load_geometry(a.geometry.as_deref(), stream.channel_count())?;
    let ratio = (a.max / a.min).ln() / (a.steps - 1) as f64;
    let thresholds: Vec<f64> = (0..a.steps).map(|i| a.min * (ratio * i as f64).exp()).collect();
    let mut out = output(None)?;
    writeln!(out, "threshold,gated_on_ratio")?;
    for (t, r) in threshold_sweep(&stream, geometry.gains(), &thresholds) {
        writeln!(out, "{t:e},{r}")?;
    }
    out.flush()?;
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let stream = load_input(&a.input)?;
    let mut out = output(a.out.as_deref())?;
    out.write_all(emit_plot_data(&stream)?.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn library(cmd: LibraryCommand) -> Result<()> {
    match cmd {
        LibraryCommand::List { library } => {
            let lib = load_library(&library).with_context(|| format!("loading {}", library.display()))?;
            let mut out = output(None)?;
            writeln!(out, "threshold {}", lib.distance_threshold)?;
            for s in lib.slots() {
                writeln!(out, "{:>2}  {}", s.id, s.name)?;
            }
            out.flush()?;
        }
        LibraryCommand::Add { library, from, id } => {
            let source = load_library(&from).with_context(|| format!("loading {}", from.display()))?;
            let sig = source
                .get(id)
                .cloned()
                .with_context(|| format!("{} has no slot {id}", from.display()))?;
            let mut lib = if library.exists() {
                load_library(&library)?
            } else {
                SignatureLibrary::new(source.distance_threshold)
            };
            let new_id = add_to_library(&mut lib, sig, source.distance_threshold)?;
            save_library(&lib, &library)?;
            println!("{new_id}");
        }
        LibraryCommand::Remove { library, id } => {
            let mut lib = load_library(&library).with_context(|| format!("loading {}", library.display()))?;
            let sig = lib.remove(id)?;
            save_library(&lib, &library)?;
            println!("removed {} from slot {id}", sig.name);
        }
    }
    Ok(())
}
