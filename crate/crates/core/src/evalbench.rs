//! Success-rate evaluation on seen/unseen splits, latency benchmarking, and
//! Table-I-shaped reports.

use std::fmt::{self, Write as _};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{consistency_calls, sample_consistency, sample_ddpm_baseline};
use crate::geometry::{decode_pose, encode_pose, harmonic_mean, is_success, PoseVec};
use crate::network::{ConsistencyNet, ScoreNet};
use crate::schedule::NoiseSchedule;
use crate::synthdata::{write_atomic, Sample, SplitTag};
use crate::trainer::{load_checkpoint, TrainState};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const LATENCY_CSV: &str = "latency.csv";
pub const LATENCY_TXT: &str = "latency.txt";
pub const LATENCY_NOTE: &str = "latency covers the sampler call only; condition encoding and I/O are excluded";

/// Warmup trials discarded by [`bench_latency`].
pub const WARMUP_TRIALS: usize = 5;
pub const MIN_TRIALS: usize = 30;

/// Which sampler to run per evaluation sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SamplerSpec {
    /// Multistep consistency sampling with `P` inference times.
    Consistency(usize),
    /// Ancestral sampling with the score network.
    Ddpm(usize),
    /// Returns the first ground-truth grasp.
    Oracle,
    /// Returns the zero pose vector.
    Zero,
}

impl SamplerSpec {
    pub fn id(&self) -> &'static str {
        match self {
            Self::Consistency(_) => "llgd",
            Self::Ddpm(_) => "ddpm",
            Self::Oracle => "oracle",
            Self::Zero => "zero",
        }
    }

    pub fn steps(&self) -> usize {
        match *self {
            Self::Consistency(p) | Self::Ddpm(p) => p,
            Self::Oracle | Self::Zero => 0,
        }
    }

    /// Network evaluations per sample.
    pub fn network_calls(&self) -> usize {
        match *self {
            Self::Consistency(p) => consistency_calls(p),
            Self::Ddpm(p) => p,
            Self::Oracle | Self::Zero => 0,
        }
    }
}

impl fmt::Display for SamplerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Consistency(_) | Self::Ddpm(_) => write!(f, "{}:{}", self.id(), self.steps()),
            _ => f.write_str(self.id()),
        }
    }
}

impl FromStr for SamplerSpec {
    type Err = Error;

    /// `llgd:P`, `ddpm:K`, `oracle` or `zero`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, steps) = match s.split_once(':') {
            Some((k, n)) => {
                let n: usize = n
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad step count in sampler `{s}`")))?;
                if n == 0 {
                    return Err(Error::invalid(format!("sampler `{s}` needs at least one step")));
                }
                (k, Some(n))
            }
            None => (s, None),
        };
        match (kind, steps) {
            ("llgd", Some(n)) => Ok(Self::Consistency(n)),
            ("ddpm", Some(n)) => Ok(Self::Ddpm(n)),
            ("oracle", None) => Ok(Self::Oracle),
            ("zero", None) => Ok(Self::Zero),
            _ => Err(Error::invalid(format!("unknown sampler `{s}`"))),
        }
    }
}

/// The networks needed for sampling, read from a checkpoint.
#[derive(Debug, Clone)]
pub struct Model {
    pub consistency: ConsistencyNet,
    pub score: ScoreNet,
    pub schedule: NoiseSchedule,
    pub config_hash: String,
    pub seed: u64,
}

impl Model {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            consistency: state.consistency.clone(),
            score: state.score.clone(),
            schedule: state.schedule,
            config_hash: state.config.hash(),
            seed: state.config.seed,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        Ok(Self::from_state(&TrainState::from_checkpoint(&ck, false)?))
    }

    pub fn cond_dim(&self) -> usize {
        self.consistency.inner().cond_dim()
    }

    /// One draw from `spec` in normalized pose space.
    pub fn sample(&self, spec: SamplerSpec, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<PoseVec> {
        let y = &sample.condition;
        if matches!(spec, SamplerSpec::Consistency(_) | SamplerSpec::Ddpm(_)) && y.len() != self.cond_dim() {
            return Err(Error::invalid(format!(
                "sample condition has width {}, model expects {}",
                y.len(),
                self.cond_dim()
            )));
        }
        match spec {
            SamplerSpec::Consistency(p) => Ok(sample_consistency(&self.consistency, y, p, &self.schedule, rng)?.pose),
            SamplerSpec::Ddpm(k) => sample_ddpm_baseline(&self.score, y, k, &self.schedule, rng),
            SamplerSpec::Oracle => {
                let g = sample
                    .gt_grasps
                    .first()
                    .ok_or_else(|| Error::invalid("sample has no ground truth"))?;
                encode_pose(g, sample.scene.extent)
            }
            SamplerSpec::Zero => Ok(PoseVec::ZERO),
        }
    }
}

/// Successes out of `n` on one split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitResult {
    pub n: usize,
    pub successes: usize,
}

impl SplitResult {
    pub fn rate(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.successes as f64 / self.n as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_s: f64,
    pub p95_s: f64,
    pub trials: usize,
}

impl LatencyStats {
    pub fn from_durations(d: &[Duration]) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::invalid("no latency measurements"));
        }
        let mut s: Vec<f64> = d.iter().map(Duration::as_secs_f64).collect();
        s.sort_by(f64::total_cmp);
        Ok(Self {
            median_s: quantile(&s, 0.5),
            p95_s: quantile(&s, 0.95),
            trials: s.len(),
        })
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sampler_id: String,
    pub steps: usize,
    pub seen: SplitResult,
    pub unseen: SplitResult,
    pub harmonic: f64,
    pub latency: Option<LatencyStats>,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn seen_rate(&self) -> f64 {
        self.seen.rate()
    }

    pub fn unseen_rate(&self) -> f64 {
        self.unseen.rate()
    }
}

/// Per-sample stream, so any sharding gives the same outcomes. All step
/// counts of one sampler family share draws, which pairs the comparison.
fn eval_rng(seed: u64, spec: SamplerSpec, index: usize) -> ChaCha8Rng {
    let salt: u64 = match spec {
        SamplerSpec::Consistency(_) => 0,
        SamplerSpec::Ddpm(_) => 1,
        SamplerSpec::Oracle => 2,
        SamplerSpec::Zero => 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index as u64);
    rng
}

/// Outcome of one sample: success flag and sampler time.
fn run_one(model: &Model, spec: SamplerSpec, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<(bool, Duration)> {
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(|| model.sample(spec, sample, rng)));
    let elapsed = start.elapsed();
    match out {
        Ok(Ok(v)) => {
            let pred = decode_pose(&v, sample.scene.extent);
            Ok((is_success(&pred, &sample.gt_grasps)?, elapsed))
        }
        Ok(Err(e)) => Err(e),
        Err(_) => Ok((false, elapsed)),
    }
}

fn eval_split(
    model: &Model,
    samples: &[&Sample],
    spec: SamplerSpec,
    seed: u64,
    threads: usize,
) -> Result<(SplitResult, Vec<Duration>)> {
    let threads = threads.max(1).min(samples.len().max(1));
    let chunk = samples.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<(bool, Duration)>>> = if threads == 1 {
        vec![samples
            .iter()
            .enumerate()
            .map(|(i, s)| run_one(model, spec, s, &mut eval_rng(seed, spec, i)))
            .collect()]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .enumerate()
                .map(|(c, part)| {
                    scope.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(j, s)| {
                                let i = c * chunk + j;
                                run_one(model, spec, s, &mut eval_rng(seed, spec, i))
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::State("evaluation worker panicked".into()))))
                .collect()
        })
    };
    let mut successes = 0;
    let mut times = Vec::with_capacity(samples.len());
    for r in results {
        for (ok, d) in r? {
            successes += usize::from(ok);
            times.push(d);
        }
    }
    Ok((
        SplitResult {
            n: samples.len(),
            successes,
        },
        times,
    ))
}

/// Runs `spec` once per sample on both splits. With `measure_latency` the
/// report carries timing of the sampler calls; otherwise it is fully
/// deterministic.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    spec: SamplerSpec,
    seed: u64,
    threads: usize,
    measure_latency: bool,
) -> Result<EvalReport> {
    let seen: Vec<&Sample> = samples.iter().filter(|s| s.split_tag == SplitTag::Seen).collect();
    let unseen: Vec<&Sample> = samples.iter().filter(|s| s.split_tag == SplitTag::Unseen).collect();
    if seen.is_empty() && unseen.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let (seen_r, mut t1) = eval_split(model, &seen, spec, seed, threads)?;
    let (unseen_r, t2) = eval_split(model, &unseen, spec, seed ^ 0x5eed, threads)?;
    t1.extend(t2);
    let latency = if measure_latency {
        Some(LatencyStats::from_durations(&t1)?)
    } else {
        None
    };
    Ok(EvalReport {
        sampler_id: spec.id().to_string(),
        steps: spec.steps(),
        seen: seen_r,
        unseen: unseen_r,
        harmonic: harmonic_mean(seen_r.rate(), unseen_r.rate()),
        latency,
        seed,
        config_hash: model.config_hash.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub sampler_id: String,
    pub steps: usize,
    pub network_calls: usize,
    pub stats: LatencyStats,
}

/// Single-threaded timing of each spec over `trials` calls after
/// [`WARMUP_TRIALS`] discarded ones, cycling through `samples`.
pub fn bench_latency(
    model: &Model,
    specs: &[SamplerSpec],
    samples: &[Sample],
    trials: usize,
    seed: u64,
) -> Result<Vec<LatencyRow>> {
    if trials < MIN_TRIALS {
        return Err(Error::invalid(format!("latency needs at least {MIN_TRIALS} trials, got {trials}")));
    }
    if samples.is_empty() {
        return Err(Error::invalid("latency benchmark needs at least one sample"));
    }
    let mut rows = Vec::with_capacity(specs.len());
    for &spec in specs {
        let mut times = Vec::with_capacity(trials);
        for k in 0..trials + WARMUP_TRIALS {
            let s = &samples[k % samples.len()];
            let mut rng = eval_rng(seed, spec, k);
            let start = Instant::now();
            let out = model.sample(spec, s, &mut rng)?;
            let d = start.elapsed();
            std::hint::black_box(out);
            if k >= WARMUP_TRIALS {
                times.push(d);
            }
        }
        rows.push(LatencyRow {
            sampler_id: spec.id().to_string(),
            steps: spec.steps(),
            network_calls: spec.network_calls(),
            stats: LatencyStats::from_durations(&times)?,
        });
    }
    Ok(rows)
}

/// Attaches benchmark timings to matching accuracy reports.
pub fn attach_latency(reports: &mut [EvalReport], rows: &[LatencyRow]) {
    for r in reports.iter_mut() {
        if let Some(l) = rows.iter().find(|l| l.sampler_id == r.sampler_id && l.steps == r.steps) {
            r.latency = Some(l.stats);
        }
    }
}

/// One CSV line of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sampler_id: String,
    pub steps: usize,
    pub split: String,
    pub n: usize,
    pub successes: usize,
    pub rate: f64,
    pub harmonic: f64,
    pub latency_median_s: Option<f64>,
    pub latency_p95_s: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

pub fn report_rows(reports: &[EvalReport]) -> Vec<ReportRow> {
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| (&a.sampler_id, a.steps).cmp(&(&b.sampler_id, b.steps)));
    let mut rows = Vec::with_capacity(2 * sorted.len());
    for r in sorted {
        for (split, res) in [(SplitTag::Seen, r.seen), (SplitTag::Unseen, r.unseen)] {
            rows.push(ReportRow {
                sampler_id: r.sampler_id.clone(),
                steps: r.steps,
                split: split.name().to_string(),
                n: res.n,
                successes: res.successes,
                rate: res.rate(),
                harmonic: r.harmonic,
                latency_median_s: r.latency.map(|l| l.median_s),
                latency_p95_s: r.latency.map(|l| l.p95_s),
                seed: r.seed,
                config_hash: r.config_hash.clone(),
            });
        }
    }
    rows
}

pub fn report_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in report_rows(reports) {
        w.serialize(&row).map_err(|e| Error::State(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::State(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::State(format!("csv: {e}")))
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::invalid(format!("report csv: {e}"))))
        .collect()
}

fn fmt_latency(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |s| format!("{s:.6}"))
}

/// Fixed-width table, one line per sampler: Seen, Unseen, H, Latency.
pub fn report_table(reports: &[EvalReport]) -> String {
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| (&a.sampler_id, a.steps).cmp(&(&b.sampler_id, b.steps)));
    let mut out = String::new();
    let _ = writeln!(out, "# {LATENCY_NOTE}");
    let _ = writeln!(
        out,
        "{:<10} {:>6} {:>8} {:>8} {:>8} {:>12} {:>12} {:>12}",
        "sampler", "steps", "seen", "unseen", "H", "latency_s", "p95_s", "n_seen/unseen"
    );
    for r in sorted {
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>12} {:>12} {:>12}",
            r.sampler_id,
            r.steps,
            r.seen_rate(),
            r.unseen_rate(),
            r.harmonic,
            fmt_latency(r.latency.map(|l| l.median_s)),
            fmt_latency(r.latency.map(|l| l.p95_s)),
            format!("{}/{}", r.seen.n, r.unseen.n),
        );
    }
    if let Some(r) = reports.first() {
        let _ = writeln!(out, "# seed {} config {}", r.seed, r.config_hash);
    }
    out
}

/// Writes `report.csv` and `report.txt` into `dir`.
pub fn emit_report(reports: &[EvalReport], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to emit"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(REPORT_CSV);
    let txt_path = dir.join(REPORT_TXT);
    write_atomic(&csv_path, report_csv(reports)?.as_bytes())?;
    write_atomic(&txt_path, report_table(reports).as_bytes())?;
    Ok((csv_path, txt_path))
}

#[derive(Debug, Serialize)]
struct LatencyCsvRow<'a> {
    sampler_id: &'a str,
    steps: usize,
    network_calls: usize,
    trials: usize,
    latency_median_s: f64,
    latency_p95_s: f64,
    seed: u64,
    config_hash: &'a str,
}

/// Writes `latency.csv` and `latency.txt` into `dir`.
pub fn emit_latency(rows: &[LatencyRow], seed: u64, config_hash: &str, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if rows.is_empty() {
        return Err(Error::invalid("no latency rows to emit"));
    }
    let mut sorted: Vec<&LatencyRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (&a.sampler_id, a.steps).cmp(&(&b.sampler_id, b.steps)));
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &sorted {
        w.serialize(LatencyCsvRow {
            sampler_id: &r.sampler_id,
            steps: r.steps,
            network_calls: r.network_calls,
            trials: r.stats.trials,
            latency_median_s: r.stats.median_s,
            latency_p95_s: r.stats.p95_s,
            seed,
            config_hash,
        })
        .map_err(|e| Error::State(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::State(format!("csv: {e}")))?;
    let mut table = String::new();
    let _ = writeln!(table, "# {LATENCY_NOTE}");
    let _ = writeln!(
        table,
        "{:<10} {:>6} {:>6} {:>7} {:>12} {:>12}",
        "sampler", "steps", "calls", "trials", "median_s", "p95_s"
    );
    for r in &sorted {
        let _ = writeln!(
            table,
            "{:<10} {:>6} {:>6} {:>7} {:>12.6} {:>12.6}",
            r.sampler_id, r.steps, r.network_calls, r.stats.trials, r.stats.median_s, r.stats.p95_s
        );
    }
    let _ = writeln!(table, "# seed {seed} config {config_hash}");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(LATENCY_CSV);
    let txt_path = dir.join(LATENCY_TXT);
    write_atomic(&csv_path, &bytes)?;
    write_atomic(&txt_path, table.as_bytes())?;
    Ok((csv_path, txt_path))
}
