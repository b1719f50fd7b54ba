use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::corpus::RawInput;
use crate::decode_eval::{decode, TemporalGraph};
use crate::exec::{self, Execution};
use crate::model::{Model, ModelError};
use crate::preprocess::{raw_windows, RawWindow};
use crate::tensor::Scalar;

/// Machine the numbers were taken on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hardware {
    pub cpu_model: String,
    pub logical_cores: usize,
}

impl Hardware {
    pub fn detect() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| std::env::consts::ARCH.to_string());
        let logical_cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        Hardware {
            cpu_model,
            logical_cores,
        }
    }
}

/// Wall time of each stage in one pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimes {
    pub preprocess: f64,
    pub forward: f64,
    pub decode: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.preprocess + self.forward + self.decode
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    #[serde(flatten)]
    pub stages: StageTimes,
    pub sentences_per_second: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Stat {
    /// Mean, sample standard deviation and median.
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Stat { mean, std, median }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub hardware: Hardware,
    pub execution: Execution,
    pub workers: usize,
    pub documents: usize,
    pub sentences: usize,
    pub windows: usize,
    pub skipped_windows: usize,
    pub repetitions: usize,
    pub samples: Vec<Sample>,
    pub sentences_per_second: Stat,
    /// Seconds per pass.
    pub preprocess: Stat,
    pub forward: Stat,
    pub decode: Stat,
    pub total: Stat,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "hardware: {} ({} logical cores)",
            self.hardware.cpu_model, self.hardware.logical_cores
        );
        let _ = writeln!(
            out,
            "execution: {:?}, {} worker(s); {} documents, {} sentences, {} windows ({} skipped)",
            self.execution,
            self.workers,
            self.documents,
            self.sentences,
            self.windows,
            self.skipped_windows
        );
        for (k, s) in self.samples.iter().enumerate() {
            let _ = writeln!(
                out,
                "rep {:>2}: {:>10.1} sent/s  preprocess {:.4}s  forward {:.4}s  decode {:.4}s",
                k + 1,
                s.sentences_per_second,
                s.stages.preprocess,
                s.stages.forward,
                s.stages.decode
            );
        }
        let t = &self.sentences_per_second;
        let _ = writeln!(out, "sentences/second: mean {:.1}, std {:.1}", t.mean, t.std);
        for (name, s) in [
            ("preprocess", &self.preprocess),
            ("forward", &self.forward),
            ("decode", &self.decode),
            ("total", &self.total),
        ] {
            let _ = writeln!(
                out,
                "{name:<10} mean {:.5}s  std {:.5}s  median {:.5}s",
                s.mean, s.std, s.median
            );
        }
        out
    }
}

fn seconds(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// One end-to-end inference pass: windowing, scoring and decoding. Nothing
/// else happens inside; the caller does all reporting.
pub fn timed_pass<F: Scalar>(
    model: &Model<F>,
    inputs: &[RawInput],
    max_len: usize,
    execution: Execution,
) -> Result<(StageTimes, Vec<TemporalGraph>), ModelError> {
    let t0 = Instant::now();
    let windows: Vec<RawWindow> = execution
        .map(inputs, |d| raw_windows(d, max_len).0)
        .into_iter()
        .flatten()
        .collect();
    let t1 = Instant::now();
    let scores = execution.try_map(&windows, |w| model.score(&w.tokens))?;
    let t2 = Instant::now();
    let graphs = execution.map(&scores, decode);
    let t3 = Instant::now();
    Ok((
        StageTimes {
            preprocess: seconds(t1 - t0),
            forward: seconds(t2 - t1),
            decode: seconds(t3 - t2),
        },
        graphs,
    ))
}

/// Runs `warmup` untimed passes, then `repetitions` timed ones.
pub fn run_bench<F: Scalar>(
    model: &Model<F>,
    inputs: &[RawInput],
    max_len: usize,
    execution: Execution,
    workers: Option<usize>,
    warmup: usize,
    repetitions: usize,
) -> Result<BenchReport, PipelineError> {
    let sentences: usize = inputs.iter().map(|d| d.sentences.len()).sum();
    let (windows, skipped_windows) = inputs.iter().fold((0, 0), |(w, s), d| {
        let (ws, sk) = raw_windows(d, max_len);
        (w + ws.len(), s + sk.len())
    });
    let (samples, used) = exec::with_workers(workers, || {
        let used = match execution {
            Execution::Parallel => exec::current_workers(),
            Execution::Sequential => 1,
        };
        for _ in 0..warmup {
            black_box(timed_pass(model, inputs, max_len, execution)?);
        }
        let mut samples = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let (stages, graphs) = timed_pass(model, inputs, max_len, execution)?;
            black_box(graphs);
            let total = stages.total();
            samples.push(Sample {
                stages,
                sentences_per_second: if total > 0.0 { sentences as f64 / total } else { 0.0 },
            });
        }
        Ok::<_, ModelError>((samples, used))
    })?;
    let stat = |f: &dyn Fn(&Sample) -> f64| Stat::of(&samples.iter().map(f).collect::<Vec<_>>());
    Ok(BenchReport {
        hardware: Hardware::detect(),
        execution,
        workers: used,
        documents: inputs.len(),
        sentences,
        windows,
        skipped_windows,
        repetitions,
        sentences_per_second: stat(&|s| s.sentences_per_second),
        preprocess: stat(&|s| s.stages.preprocess),
        forward: stat(&|s| s.stages.forward),
        decode: stat(&|s| s.stages.decode),
        total: stat(&|s| s.stages.total()),
        samples,
    })
}
