use std::cell::Cell;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ccgrasp::evalbench::{attach_latency, bench_latency, emit_latency, emit_report, evaluate, Model, SamplerSpec};
use ccgrasp::flow::{sample_consistency, solve_pf_ode, ConsistencyFn, StandardNormalField};
use ccgrasp::geometry::{decode_pose, is_success, PoseVec};
use ccgrasp::network::ConsistencyNet;
use ccgrasp::schedule::standard_normal;
use ccgrasp::synthdata::{build_dataset_threaded, write_atomic, Dataset, DatasetConfig};
use ccgrasp::trainer::{fit_with, load_checkpoint, FitOptions, GraspTrainingSet, TrainConfig, TrainState, LAST_CHECKPOINT};
use ccgrasp::Error;

#[derive(Parser, Debug)]
#[command(name = "ccgrasp", version, about = "Language-conditioned grasp detection with conditional consistency models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene/prompt/grasp dataset.
    GenData(GenDataArgs),
    /// Train the score and consistency networks.
    Train(TrainArgs),
    /// Sample a grasp for one dataset entry.
    Sample(SampleArgs),
    /// Dump a PF-ODE trajectory as CSV.
    InspectTrajectory(InspectArgs),
    /// Success rates on the seen and unseen splits.
    Eval(EvalArgs),
    /// Sampler latency benchmark.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset config as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Trainer config (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from `last.json` in the output directory.
    #[arg(long)]
    resume: bool,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Halt at this absolute step, as an interrupted run would.
    #[arg(long)]
    stop_at: Option<u64>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: usize,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `sample.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum FieldKind {
    /// The trained score network.
    Score,
    /// Analytic N(0, I) field, whose flow is stationary.
    Stationary,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long, required_if_eq("field", "score"))]
    checkpoint: Option<PathBuf>,
    #[arg(long, required_if_eq("field", "score"))]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 2000)]
    grid: usize,
    #[arg(long, value_enum, default_value_t = FieldKind::Score)]
    field: FieldKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Consistency sampler step counts.
    #[arg(long, value_delimiter = ',', default_value = "1,3,10")]
    steps_list: Vec<usize>,
    /// Extra samplers: `ddpm:K`, `oracle`, `zero`.
    #[arg(long, value_delimiter = ',')]
    baselines: Vec<String>,
    /// Also time each sampler and fill the latency columns.
    #[arg(long)]
    latency: bool,
    #[arg(long, default_value_t = 30)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,3,10")]
    steps_list: Vec<usize>,
    /// Ancestral baseline step count; 0 disables it.
    #[arg(long, default_value_t = 1000)]
    ddpm_steps: usize,
    #[arg(long, default_value_t = 30)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Domain { .. } => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::InspectTrajectory(a) => inspect(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn print_block(title: &str, body: &str) {
    println!("[{title}]");
    print!("{body}");
    if !body.ends_with('\n') {
        println!();
    }
}

fn gen_data(a: GenDataArgs) -> CliResult {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let config = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure {
                code: 1,
                message: format!("{}: {e}", p.display()),
            })?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => DatasetConfig::default(),
    };
    config.validate()?;
    let json = serde_json::to_string_pretty(&config).map_err(|e| usage(e.to_string()))?;
    print_block("resolved config", &format!("n = {}\nseed = {}\nconfig = {json}\n", a.n, a.seed));
    let m = build_dataset_threaded(a.n, &config, a.seed, &a.out, a.threads)?;
    println!(
        "wrote {} samples ({} seen, {} unseen) to {}",
        m.counts.total,
        m.counts.seen,
        m.counts.unseen,
        a.out.display()
    );
    println!("sha256 {}", m.sha256);
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("override `{o}` is not key=value")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> CliResult {
    let cfg = resolve_train_config(&a)?;
    print_block("resolved config", &cfg.to_text());
    println!("config_hash = {}", cfg.hash());
    let data = Dataset::load(&a.data)?;
    let set = GraspTrainingSet::new(&data, cfg.eval_samples, cfg.eval_steps)?;
    let resume = if a.resume {
        let path = a.out.join(LAST_CHECKPOINT);
        let ck = load_checkpoint(&path)?;
        let st = TrainState::from_checkpoint(&ck, false)?;
        println!("resuming from step {} ({})", st.step, path.display());
        Some(st)
    } else {
        None
    };
    let summary = fit_with(
        &cfg,
        &set,
        &a.out,
        FitOptions {
            resume,
            stop_at: a.stop_at,
        },
    )?;
    println!("steps run {} of {}", summary.steps_run, summary.total_steps);
    if let Some(l) = summary.last_losses {
        println!(
            "final losses: score {:.6} consistency {:.6} detection {:.6} total {:.6}",
            l.score, l.consistency, l.detection, l.total
        );
    }
    if let Some(b) = summary.state.best_eval {
        println!("best validation success rate {b:.4}");
    }
    println!("last checkpoint {}", summary.last_checkpoint.display());
    println!("best checkpoint {}", summary.best_checkpoint.display());
    println!("log {}", summary.log.display());
    Ok(())
}

/// Counts sampler calls into the network.
struct Counting<'a> {
    net: &'a ConsistencyNet,
    calls: Cell<usize>,
}

impl ConsistencyFn for Counting<'_> {
    fn evaluate(&self, x: &PoseVec, t: f64, y: &[f64]) -> ccgrasp::Result<PoseVec> {
        self.calls.set(self.calls.get() + 1);
        self.net.evaluate(x, t, y)
    }
}

fn pick<'a>(data: &'a Dataset, index: usize) -> std::result::Result<&'a ccgrasp::synthdata::Sample, Failure> {
    data.samples.get(index).ok_or_else(|| {
        usage(format!(
            "--index {index} out of range for a dataset of {} samples",
            data.samples.len()
        ))
    })
}

fn sample(a: SampleArgs) -> CliResult {
    if a.steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    let model = Model::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let s = pick(&data, a.index)?;
    print_block(
        "resolved config",
        &format!(
            "checkpoint = {}\nconfig_hash = {}\ndata = {}\nindex = {}\nsteps = {}\nseed = {}\n",
            a.checkpoint.display(),
            model.config_hash,
            a.data.display(),
            a.index,
            a.steps,
            a.seed
        ),
    );
    if s.condition.len() != model.cond_dim() {
        return Err(usage(format!(
            "dataset condition width {} does not match the model ({})",
            s.condition.len(),
            model.cond_dim()
        )));
    }
    let counter = Counting {
        net: &model.consistency,
        calls: Cell::new(0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let out = sample_consistency(&counter, &s.condition, a.steps, &model.schedule, &mut rng)?;
    let pose = decode_pose(&out.pose, s.scene.extent);
    let ok = is_success(&pose, &s.gt_grasps)?;
    let latency: f64 = out.step_times.iter().map(|d| d.as_secs_f64()).sum();
    println!("prompt: {}", s.prompt.text);
    println!(
        "grasp: cx {:.4} cy {:.4} w {:.4} h {:.4} theta {:.6}",
        pose.cx(),
        pose.cy(),
        pose.w(),
        pose.h(),
        pose.theta()
    );
    println!("network calls: {}", counter.calls.get());
    println!("success: {ok}");
    println!("latency_s: {latency:.6}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io {
            path: dir.clone(),
            source: e,
        }))?;
        let record = serde_json::json!({
            "index": a.index,
            "steps": a.steps,
            "seed": a.seed,
            "config_hash": model.config_hash,
            "prompt": s.prompt.text,
            "pose": pose,
            "normalized": out.pose.0,
            "network_calls": counter.calls.get(),
            "success": ok,
        });
        let mut text = serde_json::to_string_pretty(&record).map_err(|e| usage(e.to_string()))?;
        text.push('\n');
        let path = dir.join("sample.json");
        write_atomic(&path, text.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn trajectory_csv(times: &[f64], states: &[PoseVec]) -> String {
    let mut out = String::from("step,t,v0,v1,v2,v3,v4\n");
    for (k, (t, x)) in times.iter().zip(states).enumerate() {
        let _ = write!(out, "{k},{t}");
        for v in x.0 {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn inspect(a: InspectArgs) -> CliResult {
    if a.grid < 2 {
        return Err(usage("--grid must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let x_t = standard_normal(&mut rng);
    let (traj, hash) = match a.field {
        FieldKind::Stationary => {
            let s = ccgrasp::schedule::NoiseSchedule::default();
            let grid = s.uniform_grid(a.grid)?;
            (solve_pf_ode(&StandardNormalField, &x_t, &grid, &[], &s)?, None)
        }
        FieldKind::Score => {
            let (ck, data) = match (&a.checkpoint, &a.data) {
                (Some(c), Some(d)) => (c, d),
                _ => return Err(usage("--checkpoint and --data are required for the score field")),
            };
            let model = Model::load(ck)?;
            let data = Dataset::load(data)?;
            let s = pick(&data, a.index)?;
            let grid = model.schedule.uniform_grid(a.grid)?;
            (
                solve_pf_ode(&model.score, &x_t, &grid, &s.condition, &model.schedule)?,
                Some(model.config_hash),
            )
        }
    };
    let mut block = format!(
        "field = {:?}\ngrid = {}\nindex = {}\nseed = {}\n",
        a.field, a.grid, a.index, a.seed
    );
    if let Some(h) = &hash {
        let _ = writeln!(block, "config_hash = {h}");
    }
    print_block("resolved config", &block);
    fs::create_dir_all(&a.out).map_err(|e| Failure::from(Error::Io {
        path: a.out.clone(),
        source: e,
    }))?;
    let path = a.out.join("trajectory.csv");
    write_atomic(&path, trajectory_csv(&traj.times, &traj.states).as_bytes())?;
    let last = traj.states.last().copied().unwrap_or(PoseVec::ZERO);
    println!("rows {}", traj.times.len());
    println!("terminal state {:?}", last.0);
    println!("wrote {}", path.display());
    Ok(())
}

fn parse_specs(steps: &[usize], extra: &[String]) -> std::result::Result<Vec<SamplerSpec>, Failure> {
    let mut specs = Vec::new();
    for &p in steps {
        if p == 0 {
            return Err(usage("step counts must be at least 1"));
        }
        specs.push(SamplerSpec::Consistency(p));
    }
    for e in extra {
        specs.push(e.parse::<SamplerSpec>()?);
    }
    specs.sort();
    specs.dedup();
    if specs.is_empty() {
        return Err(usage("no samplers requested"));
    }
    Ok(specs)
}

fn eval(a: EvalArgs) -> CliResult {
    let specs = parse_specs(&a.steps_list, &a.baselines)?;
    let model = Model::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let names: Vec<String> = specs.iter().map(ToString::to_string).collect();
    print_block(
        "resolved config",
        &format!(
            "checkpoint = {}\nconfig_hash = {}\ndata = {}\nsamplers = {}\nlatency = {}\ntrials = {}\nseed = {}\nthreads = {}\n",
            a.checkpoint.display(),
            model.config_hash,
            a.data.display(),
            names.join(","),
            a.latency,
            a.trials,
            a.seed,
            a.threads
        ),
    );
    let mut reports = Vec::with_capacity(specs.len());
    for &spec in &specs {
        let r = evaluate(&model, &data.samples, spec, a.seed, a.threads, false)?;
        println!(
            "{spec}: seen {}/{} unseen {}/{} H {:.4}",
            r.seen.successes, r.seen.n, r.unseen.successes, r.unseen.n, r.harmonic
        );
        reports.push(r);
    }
    if a.latency {
        let rows = bench_latency(&model, &specs, &data.samples, a.trials, a.seed)?;
        attach_latency(&mut reports, &rows);
    }
    let (csv, txt) = emit_report(&reports, &a.out)?;
    print!("{}", fs::read_to_string(&txt).unwrap_or_default());
    println!("wrote {} and {}", csv.display(), txt.display());
    Ok(())
}

fn bench(a: BenchArgs) -> CliResult {
    let extra: Vec<String> = if a.ddpm_steps > 0 {
        vec![format!("ddpm:{}", a.ddpm_steps)]
    } else {
        Vec::new()
    };
    let specs = parse_specs(&a.steps_list, &extra)?;
    let model = Model::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let names: Vec<String> = specs.iter().map(ToString::to_string).collect();
    print_block(
        "resolved config",
        &format!(
            "checkpoint = {}\nconfig_hash = {}\ndata = {}\nsamplers = {}\ntrials = {}\nseed = {}\n",
            a.checkpoint.display(),
            model.config_hash,
            a.data.display(),
            names.join(","),
            a.trials,
            a.seed
        ),
    );
    let rows = bench_latency(&model, &specs, &data.samples, a.trials, a.seed)?;
    let (csv, txt) = emit_latency(&rows, a.seed, &model.config_hash, &a.out)?;
    print!("{}", fs::read_to_string(&txt).unwrap_or_default());
    println!("wrote {} and {}", csv.display(), txt.display());
    Ok(())
}
