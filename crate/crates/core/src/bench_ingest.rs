//! Aggregation of measured kernel timings: device-to-device speedups,
//! generation summaries and strategy-vs-baseline comparisons.
//!
//! Every cell (device, benchmark, variant, input) is reduced to the median
//! of its repeats before any ratio is taken.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const RESULTS_CSV_HEADER: &str = "device,benchmark,variant,input,time_s";
pub const BASELINE: &str = "baseline";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRecord {
    pub device: String,
    pub benchmark: String,
    pub variant: String,
    pub input_label: String,
    /// seconds, one per repeat
    pub times: Vec<f64>,
}

impl BenchmarkRecord {
    pub fn key(&self) -> String {
        format!(
            "(device={}, benchmark={}, variant={}, input={})",
            self.device, self.benchmark, self.variant, self.input_label
        )
    }

    pub fn median(&self) -> f64 {
        median(&self.times)
    }
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of an empty sample");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<BenchmarkRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_results(file, &path.display().to_string())
}

/// Parses the results CSV. Repeats of one key are consecutive rows; a key
/// that shows up again after a different key is rejected as a duplicate.
pub fn parse_results<R: Read>(reader: R, context: &str) -> Result<Vec<BenchmarkRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(RESULTS_CSV_HEADER.split(',')) {
        return Err(Error::Parse {
            context: context.to_string(),
            line: 1,
            message: format!("expected header `{RESULTS_CSV_HEADER}`"),
        });
    }
    let mut out: Vec<BenchmarkRecord> = Vec::new();
    let mut seen: BTreeMap<[String; 4], usize> = BTreeMap::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let parse_err = |message: String| Error::Parse {
            context: context.to_string(),
            line,
            message,
        };
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        if rec.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, got {}", rec.len())));
        }
        for (i, name) in ["device", "benchmark", "variant"].iter().enumerate() {
            if rec[i].is_empty() {
                return Err(parse_err(format!("empty {name}")));
            }
        }
        let time: f64 = rec[4]
            .parse()
            .map_err(|e| parse_err(format!("time_s `{}`: {e}", &rec[4])))?;
        if !(time.is_finite() && time > 0.0) {
            return Err(parse_err(format!("time_s must be positive, got {time}")));
        }
        let key = [rec[0].to_string(), rec[1].to_string(), rec[2].to_string(), rec[3].to_string()];
        match seen.get(&key) {
            Some(&i) if i + 1 == out.len() => out[i].times.push(time),
            Some(&i) => {
                return Err(Error::DuplicateKey(format!("{} at line {line}", out[i].key())));
            }
            None => {
                seen.insert(key.clone(), out.len());
                let [device, benchmark, variant, input_label] = key;
                out.push(BenchmarkRecord {
                    device,
                    benchmark,
                    variant,
                    input_label,
                    times: vec![time],
                });
            }
        }
    }
    Ok(out)
}

/// Pooled repeats of `variant` per benchmark on one device.
fn device_cells<'a>(records: &'a [BenchmarkRecord], device: &str, variant: &str) -> BTreeMap<&'a str, Vec<f64>> {
    let mut cells: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.device == device && r.variant == variant) {
        cells.entry(&r.benchmark).or_default().extend_from_slice(&r.times);
    }
    cells
}

/// `median(from) / median(to)` per benchmark both devices ran, using the
/// baseline variant.
pub fn device_speedup(records: &[BenchmarkRecord], from: &str, to: &str) -> Result<BTreeMap<String, f64>> {
    device_speedup_for(records, from, to, BASELINE)
}

pub fn device_speedup_for(
    records: &[BenchmarkRecord],
    from: &str,
    to: &str,
    variant: &str,
) -> Result<BTreeMap<String, f64>> {
    for device in [from, to] {
        if !records.iter().any(|r| r.device == device) {
            return Err(Error::Missing {
                what: "device",
                key: device.to_string(),
            });
        }
    }
    let a = device_cells(records, from, variant);
    let b = device_cells(records, to, variant);
    let ratios: BTreeMap<String, f64> = a
        .iter()
        .filter_map(|(bench, ta)| b.get(bench).map(|tb| (bench.to_string(), median(ta) / median(tb))))
        .collect();
    if ratios.is_empty() {
        return Err(Error::Missing {
            what: "common benchmark",
            key: format!("{from} -> {to} (variant {variant})"),
        });
    }
    Ok(ratios)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Averaging {
    /// Arithmetic mean and sample standard deviation of the ratios.
    #[default]
    Arithmetic,
    /// `exp` of the mean and sample standard deviation of `ln(ratio)`; the
    /// spread is a multiplicative factor.
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSummary {
    pub from_device: String,
    pub to_device: String,
    pub per_benchmark: BTreeMap<String, f64>,
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupSummary {
    pub averaging: Averaging,
    pub pairs: Vec<PairSummary>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Speedup statistics for each adjacent pair of `ordering`.
pub fn generation_summary(
    records: &[BenchmarkRecord],
    ordering: &[String],
    averaging: Averaging,
) -> Result<SpeedupSummary> {
    if ordering.len() < 2 {
        return Err(Error::invalid("ordering", "at least two devices are required"));
    }
    let pairs = ordering
        .windows(2)
        .map(|w| {
            let per_benchmark = device_speedup(records, &w[0], &w[1])?;
            let ratios: Vec<f64> = per_benchmark.values().copied().collect();
            let (mean, stddev) = match averaging {
                Averaging::Arithmetic => mean_sd(&ratios),
                Averaging::Geometric => {
                    let logs: Vec<f64> = ratios.iter().map(|r| r.ln()).collect();
                    let (m, s) = mean_sd(&logs);
                    (m.exp(), s.exp())
                }
            };
            Ok(PairSummary {
                from_device: w[0].clone(),
                to_device: w[1].clone(),
                per_benchmark,
                mean,
                stddev,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpeedupSummary { averaging, pairs })
}

/// For each input label, `median(baseline) / median(variant)` for every
/// non-baseline variant of `benchmark` on `device`.
pub fn strategy_comparison(
    records: &[BenchmarkRecord],
    device: &str,
    benchmark: &str,
) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
    let cells: Vec<&BenchmarkRecord> = records
        .iter()
        .filter(|r| r.device == device && r.benchmark == benchmark)
        .collect();
    if cells.is_empty() {
        return Err(Error::Missing {
            what: "benchmark",
            key: format!("(device={device}, benchmark={benchmark})"),
        });
    }
    let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for r in cells.iter().filter(|r| r.variant != BASELINE) {
        let base = cells
            .iter()
            .find(|b| b.variant == BASELINE && b.input_label == r.input_label)
            .ok_or_else(|| Error::Missing {
                what: "baseline",
                key: format!(
                    "(device={device}, benchmark={benchmark}, variant={BASELINE}, input={})",
                    r.input_label
                ),
            })?;
        out.entry(r.input_label.clone())
            .or_default()
            .insert(r.variant.clone(), base.median() / r.median());
    }
    Ok(out)
}
