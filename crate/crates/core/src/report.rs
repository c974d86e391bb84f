//! Metrics, summaries and plots written to the output directory.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::{Aggregate, EpisodeMetrics, StepRecord};

pub const METRIC_COLUMNS: [&str; 3] = ["Total Timestep", "Total Reward", "Average Reward"];

fn format_err(path: &Path, e: impl ToString) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| format_err(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpisodeMetrics>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Appends per-episode records to `metrics.jsonl` (and per-step records to
/// `steps.jsonl`). On resume, lines beyond the checkpointed episode count
/// are dropped first.
pub struct MetricsWriter {
    path: PathBuf,
    episodes: BufWriter<fs::File>,
    steps: Option<(PathBuf, BufWriter<fs::File>)>,
}

fn keep_lines(path: &Path, keep: usize, pred: impl Fn(&str) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text
        .lines()
        .filter(|l| pred(l))
        .take(keep)
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn open_append(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

impl MetricsWriter {
    pub fn open(dir: &Path, keep_episodes: usize, steps: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        keep_lines(&path, keep_episodes, |_| true)?;
        let steps = if steps {
            let p = dir.join("steps.jsonl");
            // Step records carry their episode index; keep earlier episodes only.
            let text = if p.exists() {
                fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?
            } else {
                String::new()
            };
            let kept: String = text
                .lines()
                .filter(|l| {
                    serde_json::from_str::<StepRecord>(l)
                        .map(|r| r.episode < keep_episodes)
                        .unwrap_or(false)
                })
                .map(|l| format!("{l}\n"))
                .collect();
            fs::write(&p, kept).map_err(|e| Error::io(&p, e))?;
            let w = open_append(&p)?;
            Some((p, w))
        } else {
            None
        };
        Ok(Self {
            episodes: open_append(&path)?,
            path,
            steps,
        })
    }

    pub fn append(&mut self, metrics: &EpisodeMetrics, steps: &[StepRecord]) -> Result<()> {
        serde_json::to_writer(&mut self.episodes, metrics).map_err(|e| format_err(&self.path, e))?;
        self.episodes.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        self.episodes.flush().map_err(|e| Error::io(&self.path, e))?;
        if let Some((p, w)) = &mut self.steps {
            for s in steps {
                serde_json::to_writer(&mut *w, s).map_err(|e| format_err(p, e))?;
                w.write_all(b"\n").map_err(|e| Error::io(&*p, e))?;
            }
            w.flush().map_err(|e| Error::io(&*p, e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.episodes.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Rows `mean`, `min`, `max`; one column per headline metric.
pub fn write_summary_csv(path: &Path, agg: &Aggregate) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e))?;
    let mut header = vec!["statistic"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header).map_err(|e| format_err(path, e))?;
    let rows = [
        ("mean", agg.total_timestep.mean, agg.total_reward.mean, agg.average_reward.mean),
        ("min", agg.total_timestep.min, agg.total_reward.min, agg.average_reward.min),
        ("max", agg.total_timestep.max, agg.total_reward.max, agg.average_reward.max),
    ];
    for (name, a, b, c) in rows {
        w.write_record([name.to_string(), a.to_string(), b.to_string(), c.to_string()])
            .map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per headline metric (means), one column per variant.
pub fn write_compare_csv(path: &Path, columns: &[(String, Aggregate)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e))?;
    let mut header = vec!["metric".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.clone()));
    w.write_record(&header).map_err(|e| format_err(path, e))?;
    let getters: [fn(&Aggregate) -> f64; 3] = [
        |a| a.total_timestep.mean,
        |a| a.total_reward.mean,
        |a| a.average_reward.mean,
    ];
    for (name, get) in METRIC_COLUMNS.iter().zip(getters) {
        let mut row = vec![name.to_string()];
        row.extend(columns.iter().map(|(_, a)| get(a).to_string()));
        w.write_record(&row).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Polyline of per-episode total reward.
pub fn write_reward_svg(path: &Path, rewards: &[f64]) -> Result<()> {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let lo = rewards.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
    let n = rewards.len().max(2) - 1;
    let points: Vec<String> = rewards
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let x = pad + (w - 2.0 * pad) * i as f64 / n as f64;
            let y = h - pad - (h - 2.0 * pad) * (r - lo) / (hi - lo);
            format!("{x:.1},{y:.1}")
        })
        .collect();
    let zero = h - pad - (h - 2.0 * pad) * (0.0 - lo) / (hi - lo);
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n",
            "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            "<line x1=\"{pad}\" y1=\"{zero:.1}\" x2=\"{x2}\" y2=\"{zero:.1}\" stroke=\"#bbb\"/>\n",
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{pts}\"/>\n",
            "<text x=\"{pad}\" y=\"20\" font-family=\"sans-serif\" font-size=\"12\">total reward per episode ({lo:.2} .. {hi:.2})</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        pad = pad,
        zero = zero,
        x2 = w - pad,
        pts = points.join(" "),
        lo = lo,
        hi = hi,
    );
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}
