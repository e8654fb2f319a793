//! The `gchoreo` command line.

pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use gchoreo::body::{default_skeleton_hash, MotionSequence, Skeleton};
use gchoreo::config::RunConfig;
use gchoreo::features::{extract_features, read_wav, synth_scenario, write_wav, Pattern, SynthSpec};
use gchoreo::generator::{generate, train, GeneratorConfig, ModelParams, TrainSample};
use gchoreo::global_fit::fit_global;
use gchoreo::gradcheck::{run_suite, Suite};
use gchoreo::io::{
    load_scenario, read_features, read_motion, scenario_file, sha256_file, write_atomic, write_features, write_motion,
    FileRef, LoadedScenario,
};
use gchoreo::local_fit::{fit_local, initialize_motion};
use gchoreo::metrics::evaluate;
use gchoreo::{Error, Result};
use rayon::prelude::*;

use manifest::{Manifest, Record, Versions, MANIFEST_SCHEMA_VERSION};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// File names written into `--out` directories.
pub mod names {
    pub const SCENARIO: &str = "scenario.json";
    pub const SCENE_MOTION: &str = "scene.gmc";
    pub const SCENE_FEATURES: &str = "scene.gmf";
    pub const SCENE_AUDIO: &str = "scene.wav";
    pub const POSITIONS: &str = "positions.json";
    pub const LOCAL_MOTION: &str = "local.gmc";
    pub const LOCAL_TRACE: &str = "local_trace.csv";
    pub const GLOBAL_MOTION: &str = "global.gmc";
    pub const GLOBAL_LAST_VALID: &str = "global_last_valid.gmc";
    pub const GLOBAL_TRACE: &str = "global_trace.csv";
    pub const PLANE: &str = "plane.json";
    pub const MODEL: &str = "model.gmm";
    pub const TRAIN_TRACE: &str = "train_trace.csv";
    pub const GENERATED: &str = "generated.gmc";
    pub const METRICS: &str = "metrics.json";
    pub const GRADCHECK: &str = "gradcheck.json";
    pub const FEATURES: &str = "features.gmf";
}

#[derive(Parser, Debug)]
#[command(name = "gchoreo", version, about = "Multi-dancer motion fitting and group dance generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic scenario with ground truth, audio and features.
    Synth {
        #[arg(long)]
        pattern: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gaussian keypoint noise in pixels.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit every dancer of a scenario independently.
    FitLocal {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine local fits jointly with the ground plane, penetration and depth order.
    FitGlobal {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        local: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator on `<name>.gmc` + `<name>.gmf` pairs.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate group motion for music features and initial positions.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// JSON array of `[x, y, z]` root positions.
        #[arg(long)]
        positions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute metrics of generated motion against a reference.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Music features; enables the beat-alignment score.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "gradcheck")]
        out: PathBuf,
    },
    /// Music features from a 16-bit PCM WAV file.
    Features {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the command recorded in a manifest and compare its outputs.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::FitLocal { .. } => "fit-local",
            Command::FitGlobal { .. } => "fit-global",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Features { .. } => "features",
            Command::Replay { .. } => "replay",
        }
    }

    fn config_path(&self) -> Option<&Path> {
        match self {
            Command::FitLocal { config, .. }
            | Command::FitGlobal { config, .. }
            | Command::Train { config, .. }
            | Command::Eval { config, .. }
            | Command::Gradcheck { config, .. } => config.as_deref(),
            _ => None,
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    let missing_input = matches!(e, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound);
    if e.is_validation() || missing_input {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `args` (without the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(std::iter::once(OsString::from("gchoreo")).chain(argv.iter().cloned())) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Ctx {
    config: RunConfig,
    config_json: Option<serde_json::Value>,
    record: Record,
    seed: u64,
}

fn execute(cmd: Command, argv: Vec<String>) -> Result<i32> {
    if let Command::Replay { manifest } = &cmd {
        return replay(manifest);
    }
    let start = Instant::now();
    let mut ctx = Ctx {
        config: RunConfig::default(),
        config_json: None,
        record: Record::default(),
        seed: 0,
    };
    if let Some(path) = cmd.config_path() {
        ctx.config = RunConfig::load(path)?;
        ctx.record.input("config", path)?;
    }
    ctx.seed = ctx.config.seed;
    let threads = ctx.config.effective_threads()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {threads} worker threads: {e}")))?;
    let name = cmd.name();
    let (out, code) = pool.install(|| dispatch(cmd, &mut ctx))?;
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        command: name.into(),
        argv,
        cwd: std::env::current_dir()
            .map(|p| p.display().to_string())
            .unwrap_or_default(),
        inputs: ctx.record.inputs,
        outputs: ctx.record.outputs,
        seed: ctx.seed,
        threads: pool.current_num_threads(),
        config: ctx.config_json,
        versions: Versions::default(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let path = manifest.write(&out)?;
    eprintln!("manifest: {}", path.display());
    Ok(code)
}

fn dispatch(cmd: Command, ctx: &mut Ctx) -> Result<(PathBuf, i32)> {
    let out = match &cmd {
        Command::Synth { out, .. }
        | Command::FitLocal { out, .. }
        | Command::FitGlobal { out, .. }
        | Command::Train { out, .. }
        | Command::Generate { out, .. }
        | Command::Eval { out, .. }
        | Command::Gradcheck { out, .. }
        | Command::Features { out, .. } => out.clone(),
        Command::Replay { .. } => unreachable!("handled before dispatch"),
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut code = EXIT_OK;
    match cmd {
        Command::Synth {
            pattern,
            n,
            t,
            seed,
            noise,
            ..
        } => synth(ctx, &pattern, n, t, seed, noise, &out)?,
        Command::FitLocal { scenario, .. } => cmd_fit_local(ctx, &scenario, &out)?,
        Command::FitGlobal { scenario, local, .. } => cmd_fit_global(ctx, &scenario, &local, &out)?,
        Command::Train { data_dir, .. } => cmd_train(ctx, &data_dir, &out)?,
        Command::Generate {
            model,
            features,
            positions,
            ..
        } => cmd_generate(ctx, &model, &features, &positions, &out)?,
        Command::Eval {
            generated,
            reference,
            features,
            ..
        } => cmd_eval(ctx, &generated, &reference, features.as_deref(), &out)?,
        Command::Gradcheck { suite, .. } => code = cmd_gradcheck(ctx, &suite, &out)?,
        Command::Features { audio, .. } => cmd_features(ctx, &audio, &out)?,
        Command::Replay { .. } => unreachable!("handled before dispatch"),
    }
    Ok((out, code))
}

fn json_bytes<T: serde::Serialize>(v: &T, what: &str) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(|source| Error::Json {
        context: what.into(),
        source,
    })?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn config_value(cfg: &RunConfig) -> Option<serde_json::Value> {
    serde_json::to_value(cfg).ok()
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv: {e}")))?;
    write_atomic(path, &bytes)
}

fn synth(ctx: &mut Ctx, pattern: &str, n: usize, t: usize, seed: u64, noise: f64, out: &Path) -> Result<()> {
    let pattern: Pattern = pattern.parse()?;
    let skeleton = Skeleton::default();
    let sc = synth_scenario(
        &SynthSpec {
            pattern,
            dancers: n,
            frames: t,
            noise_px: noise,
            seed,
        },
        &skeleton,
    )?;
    ctx.seed = seed;
    let motion = out.join(names::SCENE_MOTION);
    write_motion(&sc.motions, &motion)?;
    let features = out.join(names::SCENE_FEATURES);
    write_features(&sc.features, &features)?;
    let audio = out.join(names::SCENE_AUDIO);
    write_wav(&audio, &sc.audio, sc.sample_rate)?;
    let file = scenario_file(
        &sc.camera,
        &default_skeleton_hash(),
        &sc.tracks,
        &sc.contacts,
        &sc.annotation,
        Some(FileRef {
            path: names::SCENE_MOTION.into(),
            sha256: sha256_file(&motion)?,
        }),
        Some(FileRef {
            path: names::SCENE_FEATURES.into(),
            sha256: sha256_file(&features)?,
        }),
    );
    let scenario = out.join(names::SCENARIO);
    write_atomic(&scenario, format!("{}\n", file.to_json()?).as_bytes())?;
    let taus: Vec<[f64; 3]> = sc.motions.iter().map(|m| m.poses[0].tau).collect();
    let positions = out.join(names::POSITIONS);
    write_atomic(&positions, &json_bytes(&taus, "positions")?)?;
    for (role, p) in [
        ("scenario", &scenario),
        ("ground_truth", &motion),
        ("features", &features),
        ("audio", &audio),
        ("positions", &positions),
    ] {
        ctx.record.output(role, p)?;
    }
    eprintln!("wrote {} dancers x {} frames of `{pattern}` to {}", n, t, out.display());
    Ok(())
}

fn load_recorded_scenario(ctx: &mut Ctx, path: &Path) -> Result<LoadedScenario> {
    let sc = load_scenario(path)?;
    ctx.record.input("scenario", path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for (role, r) in [("ground_truth", &sc.file.ground_truth), ("features", &sc.file.features)] {
        if let Some(r) = r {
            ctx.record.input(role, &base.join(&r.path))?;
        }
    }
    Ok(sc)
}

fn cmd_fit_local(ctx: &mut Ctx, scenario: &Path, out: &Path) -> Result<()> {
    let sc = load_recorded_scenario(ctx, scenario)?;
    ctx.config_json = config_value(&ctx.config);
    let cfg = &ctx.config.local_fit;
    let fps = sc.file.fps;
    let results = sc
        .tracks
        .par_iter()
        .zip(&sc.contacts)
        .enumerate()
        .map(|(p, (track, contacts))| {
            let init = initialize_motion(track, &sc.file.camera, &sc.skeleton, fps)?;
            fit_local(track, contacts, &sc.file.camera, &init, cfg, &sc.skeleton).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::InvalidArgument(format!("dancer {p}: {m}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let motions: Vec<MotionSequence> = results.iter().map(|r| r.motion.clone()).collect();
    let motion = out.join(names::LOCAL_MOTION);
    write_motion(&motions, &motion)?;
    let trace = out.join(names::LOCAL_TRACE);
    write_csv(
        &trace,
        &["dancer", "iteration", "E_J", "E_theta", "E_beta", "E_S", "E_F", "total"],
        results.iter().enumerate().flat_map(|(p, r)| {
            r.trace.iter().map(move |row| {
                vec![
                    p.to_string(),
                    row.iteration.to_string(),
                    row.e_j.to_string(),
                    row.e_theta.to_string(),
                    row.e_beta.to_string(),
                    row.e_s.to_string(),
                    row.e_f.to_string(),
                    row.total.to_string(),
                ]
            })
        }),
    )?;
    ctx.record.output("local_motion", &motion)?;
    ctx.record.output("trace", &trace)?;
    for (p, r) in results.iter().enumerate() {
        let last = r.trace.last().map_or(f64::NAN, |row| row.total);
        eprintln!("dancer {p}: {} iterations, final energy {last:.6e}", r.trace.len());
    }
    Ok(())
}

fn cmd_fit_global(ctx: &mut Ctx, scenario: &Path, local: &Path, out: &Path) -> Result<()> {
    let sc = load_recorded_scenario(ctx, scenario)?;
    let local_motion = read_motion(local)?;
    ctx.record.input("local_motion", local)?;
    ctx.config_json = config_value(&ctx.config);
    let result = fit_global(
        &local_motion,
        &sc.tracks,
        &sc.contacts,
        &sc.file.camera,
        &sc.annotation,
        &ctx.config.global_fit,
        &sc.skeleton,
    );
    let r = match result {
        Ok(r) => r,
        Err(Error::OptimizationFailed {
            iteration,
            reason,
            last_valid,
        }) => {
            let path = out.join(names::GLOBAL_LAST_VALID);
            write_motion(&last_valid, &path)?;
            eprintln!("last finite iterate written to {}", path.display());
            return Err(Error::OptimizationFailed {
                iteration,
                reason,
                last_valid,
            });
        }
        Err(e) => return Err(e),
    };
    let motion = out.join(names::GLOBAL_MOTION);
    write_motion(&r.motions, &motion)?;
    let trace = out.join(names::GLOBAL_TRACE);
    write_csv(
        &trace,
        &["iteration", "E_J", "E_pen", "E_reg", "E_dep", "E_gc", "total"],
        r.trace.iter().map(|row| {
            vec![
                row.iteration.to_string(),
                row.e_j.to_string(),
                row.e_pen.to_string(),
                row.e_reg.to_string(),
                row.e_dep.to_string(),
                row.e_gc.to_string(),
                row.total.to_string(),
            ]
        }),
    )?;
    let plane = out.join(names::PLANE);
    write_atomic(&plane, &json_bytes(&r.plane, "plane")?)?;
    ctx.record.output("global_motion", &motion)?;
    ctx.record.output("trace", &trace)?;
    ctx.record.output("plane", &plane)?;
    eprintln!(
        "{} iterations, final energy {:.6e}",
        r.trace.len(),
        r.trace.last().map_or(f64::NAN, |row| row.total)
    );
    Ok(())
}

/// `<stem>.gmc` files with a matching `<stem>.gmf`, sorted by stem.
fn training_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut pairs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "gmc") {
            let feat = path.with_extension("gmf");
            if feat.exists() {
                pairs.push((path, feat));
            }
        }
    }
    pairs.sort();
    if pairs.is_empty() {
        return Err(Error::invalid(format!(
            "{} holds no <name>.gmc + <name>.gmf training pairs",
            dir.display()
        )));
    }
    Ok(pairs)
}

fn cmd_train(ctx: &mut Ctx, data_dir: &Path, out: &Path) -> Result<()> {
    let mut samples = Vec::new();
    for (motion, feat) in training_pairs(data_dir)? {
        let group = read_motion(&motion)?;
        let features = read_features(&feat)?;
        ctx.record.input("motion", &motion)?;
        ctx.record.input("features", &feat)?;
        samples.push(TrainSample { features, group });
    }
    let d_in = samples[0].features.dim();
    if ctx.config.generator.is_none() {
        ctx.config.generator = Some(GeneratorConfig::test_profile(d_in));
    }
    ctx.config_json = config_value(&ctx.config);
    ctx.seed = ctx.config.train.seed;
    let gcfg = ctx.config.generator.clone().expect("set above");
    let outcome = train(&samples, &ctx.config.train, &gcfg)?;
    let model = out.join(names::MODEL);
    outcome.params.save(&model)?;
    let trace = out.join(names::TRAIN_TRACE);
    write_csv(
        &trace,
        &["step", "loss", "teacher_forcing"],
        outcome
            .trace
            .iter()
            .map(|r| vec![r.step.to_string(), r.loss.to_string(), r.teacher_forcing.to_string()]),
    )?;
    ctx.record.output("model", &model)?;
    ctx.record.output("trace", &trace)?;
    if let (Some(first), Some(last)) = (outcome.trace.first(), outcome.trace.last()) {
        eprintln!(
            "{} steps, loss {:.6e} -> {:.6e}, {} parameters",
            outcome.trace.len(),
            first.loss,
            last.loss,
            outcome.params.num_trainable()
        );
    }
    Ok(())
}

fn read_positions(path: &Path) -> Result<Vec<[f64; 3]>> {
    let bytes = gchoreo::io::read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

fn cmd_generate(ctx: &mut Ctx, model: &Path, features: &Path, positions: &Path, out: &Path) -> Result<()> {
    let params = ModelParams::load(model)?;
    let feats = read_features(features)?;
    let taus = read_positions(positions)?;
    for (role, p) in [("model", model), ("features", features), ("positions", positions)] {
        ctx.record.input(role, p)?;
    }
    let motions = generate(&feats, &taus, &params)?;
    let path = out.join(names::GENERATED);
    write_motion(&motions, &path)?;
    ctx.record.output("generated", &path)?;
    eprintln!("generated {} dancers x {} frames", motions.len(), feats.frames());
    Ok(())
}

fn cmd_eval(ctx: &mut Ctx, generated: &Path, reference: &Path, features: Option<&Path>, out: &Path) -> Result<()> {
    let gen = read_motion(generated)?;
    let reference_motion = read_motion(reference)?;
    ctx.record.input("generated", generated)?;
    ctx.record.input("reference", reference)?;
    let feats = match features {
        Some(p) => {
            ctx.record.input("features", p)?;
            Some(read_features(p)?)
        }
        None => None,
    };
    ctx.config_json = config_value(&ctx.config);
    let report = evaluate(
        &gen,
        Some(&reference_motion),
        feats.as_ref(),
        &ctx.config.metrics,
        &Skeleton::default(),
    )?;
    let path = out.join(names::METRICS);
    write_atomic(&path, &json_bytes(&report, "metrics")?)?;
    ctx.record.output("metrics", &path)?;
    for (name, v) in [
        ("tif", &report.tif),
        ("gendiv", &report.gendiv),
        ("mmc", &report.mmc),
        ("fid_kinetic", &report.fid_kinetic),
    ] {
        match v {
            Some(v) => eprintln!("{name:12} {:.6}", v.value),
            None => eprintln!("{name:12} n/a"),
        }
    }
    Ok(())
}

fn cmd_gradcheck(ctx: &mut Ctx, suite: &str, out: &Path) -> Result<i32> {
    let suite: Suite = suite.parse()?;
    ctx.config_json = config_value(&ctx.config);
    let start = Instant::now();
    let results = run_suite(suite, ctx.seed)?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        println!(
            "{:10} {:13} max_rel_error {:.3e} (< {:.0e}) {}",
            r.module,
            r.term,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAILED" }
        );
    }
    println!("{} checks in {:.2} s", results.len(), start.elapsed().as_secs_f64());
    let path = out.join(names::GRADCHECK);
    write_atomic(&path, &json_bytes(&results, "gradcheck")?)?;
    ctx.record.output("report", &path)?;
    Ok(if ok { EXIT_OK } else { EXIT_RUNTIME })
}

fn cmd_features(ctx: &mut Ctx, audio: &Path, out: &Path) -> Result<()> {
    let (samples, sr) = read_wav(audio)?;
    ctx.record.input("audio", audio)?;
    let f = extract_features(&samples, sr)?;
    let path = out.join(names::FEATURES);
    write_features(&f, &path)?;
    ctx.record.output("features", &path)?;
    eprintln!("{} frames x {} columns at {} FPS", f.frames(), f.dim(), f.fps);
    Ok(())
}

/// Checks the recorded inputs, re-runs the recorded arguments from the
/// recorded directory and compares every output hash.
fn replay(path: &Path) -> Result<i32> {
    let m = Manifest::load(path)?;
    if m.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::invalid(format!(
            "manifest schema {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
            m.schema_version
        )));
    }
    if m.command == "replay" {
        return Err(Error::invalid("cannot replay a replay"));
    }
    let here = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    let cwd = PathBuf::from(&m.cwd);
    std::env::set_current_dir(&cwd).map_err(|e| Error::io(&cwd, e))?;
    let outcome = (|| {
        for input in &m.inputs {
            let actual = sha256_file(Path::new(&input.path))?;
            if actual != input.sha256 {
                return Err(Error::invalid(format!(
                    "input {} ({}) changed since the recorded run",
                    input.path, input.role
                )));
            }
        }
        let code = run(m.argv.clone());
        if code != EXIT_OK {
            return Ok(code);
        }
        let mut same = true;
        for o in &m.outputs {
            let actual = sha256_file(Path::new(&o.path))?;
            let ok = actual == o.sha256;
            same &= ok;
            println!("{} {} {}", if ok { "identical" } else { "DIFFERS" }, o.role, o.path);
        }
        Ok(if same { EXIT_OK } else { EXIT_RUNTIME })
    })();
    std::env::set_current_dir(&here).map_err(|e| Error::io(&here, e))?;
    outcome
}
