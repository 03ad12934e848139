//! Interval metrics and their CSV form.
//!
//! Floats are written with Rust's shortest round-trip formatting; a missing
//! value is an empty field.

use std::io::{self, Write};

pub const METRICS_HEADER: &str =
    "step,episode,mean_return,td_loss,penalty,dq_ratio,igm_rate,epsilon,degenerate_samples,wallclock_s";
pub const GREEDY_HEADER: &str = "step,episode,greedy_return";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    /// Episodes completed so far.
    pub episode: u64,
    /// Mean return of episodes finished during the interval.
    pub mean_return: Option<f64>,
    /// Mean per-transition squared TD error over the interval's updates.
    pub td_loss: Option<f64>,
    pub penalty: Option<f64>,
    /// Mean diversity/quality ratio over executed joint actions.
    pub dq_ratio: Option<f64>,
    pub igm_rate: Option<f64>,
    pub epsilon: f64,
    pub degenerate_samples: u64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyRow {
    pub step: u64,
    pub episode: u64,
    pub greedy_return: f64,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episode,
            opt(self.mean_return),
            opt(self.td_loss),
            opt(self.penalty),
            opt(self.dq_ratio),
            opt(self.igm_rate),
            self.epsilon,
            self.degenerate_samples,
            self.wallclock_s
        )
    }
}

impl GreedyRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{}", self.step, self.episode, self.greedy_return)
    }
}

fn field<T: std::str::FromStr>(line: usize, name: &str, s: &str) -> io::Result<T> {
    s.parse().map_err(|_| {
        io::Error::new(
            io::ErrorKind::InvalidData,
            format!("line {line}: bad {name} value {s:?}"),
        )
    })
}

fn opt_field(line: usize, name: &str, s: &str) -> io::Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        field(line, name, s).map(Some)
    }
}

fn split_checked<'a>(text: &'a str, header: &str) -> io::Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "unexpected CSV header"));
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != width {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("line {}: expected {width} fields", i + 2),
                ));
            }
            Ok((i + 2, cols))
        })
        .collect()
}

pub fn read_metrics_csv(text: &str) -> io::Result<Vec<MetricsRow>> {
    split_checked(text, METRICS_HEADER)?
        .into_iter()
        .map(|(n, c)| {
            Ok(MetricsRow {
                step: field(n, "step", c[0])?,
                episode: field(n, "episode", c[1])?,
                mean_return: opt_field(n, "mean_return", c[2])?,
                td_loss: opt_field(n, "td_loss", c[3])?,
                penalty: opt_field(n, "penalty", c[4])?,
                dq_ratio: opt_field(n, "dq_ratio", c[5])?,
                igm_rate: opt_field(n, "igm_rate", c[6])?,
                epsilon: field(n, "epsilon", c[7])?,
                degenerate_samples: field(n, "degenerate_samples", c[8])?,
                wallclock_s: field(n, "wallclock_s", c[9])?,
            })
        })
        .collect()
}

pub fn read_greedy_csv(text: &str) -> io::Result<Vec<GreedyRow>> {
    split_checked(text, GREEDY_HEADER)?
        .into_iter()
        .map(|(n, c)| {
            Ok(GreedyRow {
                step: field(n, "step", c[0])?,
                episode: field(n, "episode", c[1])?,
                greedy_return: field(n, "greedy_return", c[2])?,
            })
        })
        .collect()
}

/// Receives rows as training produces them.
pub trait MetricsSink {
    fn metrics(&mut self, row: &MetricsRow) -> io::Result<()>;
    fn greedy(&mut self, row: &GreedyRow) -> io::Result<()>;
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl MetricsSink for NullSink {
    fn metrics(&mut self, _: &MetricsRow) -> io::Result<()> {
        Ok(())
    }

    fn greedy(&mut self, _: &GreedyRow) -> io::Result<()> {
        Ok(())
    }
}

/// Writes the metrics and greedy-evaluation CSVs, headers first.
pub struct CsvSink<M: Write, G: Write> {
    metrics: M,
    greedy: G,
}

impl<M: Write, G: Write> CsvSink<M, G> {
    pub fn new(mut metrics: M, mut greedy: G) -> io::Result<Self> {
        writeln!(metrics, "{METRICS_HEADER}")?;
        writeln!(greedy, "{GREEDY_HEADER}")?;
        Ok(Self { metrics, greedy })
    }

    pub fn finish(mut self) -> io::Result<(M, G)> {
        self.metrics.flush()?;
        self.greedy.flush()?;
        Ok((self.metrics, self.greedy))
    }
}

impl<M: Write, G: Write> MetricsSink for CsvSink<M, G> {
    fn metrics(&mut self, row: &MetricsRow) -> io::Result<()> {
        writeln!(self.metrics, "{}", row.csv_line())
    }

    fn greedy(&mut self, row: &GreedyRow) -> io::Result<()> {
        writeln!(self.greedy, "{}", row.csv_line())
    }
}
