//! GPU specification database and the machine-balance metrics derived from it.
//!
//! Spec files carry vendor units verbatim (GB/s, TFLOP/s, mm²); every ratio is
//! computed in GB/s and GFLOP/s after conversion.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN_TABLE: &str = include_str!("../data/table1.csv");

/// Header every spec CSV must carry, in this order.
pub const SPEC_CSV_HEADER: [&str; 11] = [
    "name",
    "year",
    "arch",
    "grade",
    "mem_bw_gbs",
    "fp32_tflops",
    "fp64_tflops",
    "sms",
    "tdp_w",
    "die_mm2",
    "mem_gb",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Grade {
    Tesla,
    Consumer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" => Ok(Precision::Fp32),
            "fp64" => Ok(Precision::Fp64),
            other => Err(Error::invalid("precision", format!("`{other}` (expected fp32|fp64)"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Fp32 => "fp32",
            Precision::Fp64 => "fp64",
        })
    }
}

/// One device row. Numeric fields are in the units of the spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuSpec {
    pub name: String,
    /// Release quarter, e.g. `2020 Q3`.
    pub year: String,
    #[serde(rename = "arch")]
    pub architecture: String,
    pub grade: Grade,
    /// GB/s
    #[serde(rename = "mem_bw_gbs")]
    pub mem_bw: f64,
    /// TFLOP/s
    #[serde(rename = "fp32_tflops")]
    pub peak_fp32: f64,
    /// TFLOP/s
    #[serde(rename = "fp64_tflops")]
    pub peak_fp64: f64,
    #[serde(rename = "sms")]
    pub sm_count: u32,
    #[serde(rename = "tdp_w")]
    pub tdp: f64,
    /// mm²
    #[serde(rename = "die_mm2")]
    pub die_area: f64,
    /// GB
    #[serde(rename = "mem_gb")]
    pub mem_capacity: f64,
}

impl GpuSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mem_bw_gbs", self.mem_bw),
            ("fp32_tflops", self.peak_fp32),
            ("fp64_tflops", self.peak_fp64),
            ("sms", f64::from(self.sm_count)),
            ("tdp_w", self.tdp),
            ("die_mm2", self.die_area),
            ("mem_gb", self.mem_capacity),
        ];
        for (field, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::invalid(
                    "gpu spec",
                    format!("{}: {field} must be strictly positive, got {value}", self.name),
                ));
            }
        }
        if self.peak_fp64 > self.peak_fp32 {
            return Err(Error::invalid(
                "gpu spec",
                format!("{}: fp64 peak exceeds fp32 peak", self.name),
            ));
        }
        Ok(())
    }

    /// Peak throughput in GFLOP/s.
    pub fn peak_gflops(&self, precision: Precision) -> f64 {
        let tflops = match precision {
            Precision::Fp32 => self.peak_fp32,
            Precision::Fp64 => self.peak_fp64,
        };
        tflops * 1e3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedMetrics {
    pub bf_fp32: f64,
    pub bf_fp64: f64,
    pub density_fp32: f64,
    pub density_fp64: f64,
}

impl DerivedMetrics {
    pub fn of(spec: &GpuSpec) -> Self {
        DerivedMetrics {
            bf_fp32: byte_per_flop(spec, Precision::Fp32),
            bf_fp64: byte_per_flop(spec, Precision::Fp64),
            density_fp32: compute_density(spec, Precision::Fp32),
            density_fp64: compute_density(spec, Precision::Fp64),
        }
    }
}

/// Machine balance: bytes of memory bandwidth available per FLOP.
pub fn byte_per_flop(spec: &GpuSpec, precision: Precision) -> f64 {
    spec.mem_bw / spec.peak_gflops(precision)
}

/// Peak GFLOP/s per mm² of die.
pub fn compute_density(spec: &GpuSpec, precision: Precision) -> f64 {
    spec.peak_gflops(precision) / spec.die_area
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpectedSpeedup {
    pub flop_ratio: f64,
    pub bw_ratio: f64,
    /// Lower bound on the upgrade gain, whichever resource binds.
    pub t_speedup: f64,
}

/// Minimum speedup one can expect moving from `old` to `new`, regardless of
/// whether the application is compute- or bandwidth-bound.
pub fn expected_speedup(old: &GpuSpec, new: &GpuSpec, precision: Precision) -> ExpectedSpeedup {
    let flop_ratio = new.peak_gflops(precision) / old.peak_gflops(precision);
    let bw_ratio = new.mem_bw / old.mem_bw;
    ExpectedSpeedup {
        flop_ratio,
        bw_ratio,
        t_speedup: flop_ratio.min(bw_ratio),
    }
}

/// An immutable set of validated device specs.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecDatabase {
    specs: Vec<GpuSpec>,
}

impl SpecDatabase {
    /// The eight evaluated devices, embedded at build time.
    pub fn builtin() -> Self {
        Self::from_reader(BUILTIN_TABLE.as_bytes(), "builtin")
            .expect("embedded spec table is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, &path.display().to_string())
    }

    pub fn from_reader<R: Read>(reader: R, context: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.iter().ne(SPEC_CSV_HEADER.iter().copied()) {
            return Err(Error::Parse {
                context: context.to_string(),
                line: 1,
                message: format!("expected header `{}`", SPEC_CSV_HEADER.join(",")),
            });
        }
        let mut specs: Vec<GpuSpec> = Vec::new();
        for (idx, row) in rdr.deserialize::<GpuSpec>().enumerate() {
            let line = idx + 2;
            let spec = row.map_err(|e| Error::Parse {
                context: context.to_string(),
                line,
                message: e.to_string(),
            })?;
            spec.validate().map_err(|e| Error::Parse {
                context: context.to_string(),
                line,
                message: e.to_string(),
            })?;
            if specs.iter().any(|s| s.name == spec.name) {
                return Err(Error::DuplicateKey(format!("device `{}` (line {line})", spec.name)));
            }
            specs.push(spec);
        }
        Ok(SpecDatabase { specs })
    }

    pub fn get(&self, name: &str) -> Option<&GpuSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&GpuSpec> {
        self.get(name).ok_or_else(|| Error::Missing {
            what: "device",
            key: name.to_string(),
        })
    }

    /// Rows in file order.
    pub fn specs(&self) -> &[GpuSpec] {
        &self.specs
    }

    /// Rows ordered by release quarter, then name.
    pub fn sorted(&self) -> Vec<&GpuSpec> {
        let mut out: Vec<&GpuSpec> = self.specs.iter().collect();
        out.sort_by(|a, b| a.year.cmp(&b.year).then_with(|| a.name.cmp(&b.name)));
        out
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}
