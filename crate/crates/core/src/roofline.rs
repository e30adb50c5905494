//! Two-ceiling roofline: attainable = min(peak, bandwidth × AI).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roofline {
    /// GFLOP/s
    pub peak: f64,
    /// GB/s
    pub bandwidth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bound {
    MemoryBound,
    ComputeBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflinePoint {
    /// FLOP per byte
    pub ai: f64,
    /// GFLOP/s
    pub achieved: f64,
    pub label: String,
}

impl Roofline {
    pub fn new(peak: f64, bandwidth: f64) -> Result<Self> {
        if !(peak.is_finite() && peak > 0.0 && bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::invalid(
                "roofline",
                format!("peak and bandwidth must be positive (peak={peak}, bandwidth={bandwidth})"),
            ));
        }
        Ok(Roofline { peak, bandwidth })
    }

    pub fn attainable(&self, ai: f64) -> f64 {
        self.peak.min(self.bandwidth * ai)
    }

    pub fn ridge_point(&self) -> f64 {
        self.peak / self.bandwidth
    }

    /// Ties at the ridge count as compute-bound.
    pub fn classify(&self, ai: f64) -> Bound {
        if ai < self.ridge_point() {
            Bound::MemoryBound
        } else {
            Bound::ComputeBound
        }
    }

    /// Log-spaced samples of the roof between `lo` and `hi` (inclusive), with
    /// the ridge point inserted so the knee is drawn exactly.
    pub fn samples(&self, lo: f64, hi: f64, per_decade: usize) -> Vec<(f64, f64)> {
        let decades = (hi / lo).log10();
        let n = (decades * per_decade as f64).ceil().max(1.0) as usize;
        let mut ais: Vec<f64> = (0..=n)
            .map(|i| lo * 10f64.powf(decades * i as f64 / n as f64))
            .collect();
        let ridge = self.ridge_point();
        if ridge > lo && ridge < hi {
            ais.push(ridge);
        }
        ais.sort_by(f64::total_cmp);
        ais.dedup();
        ais.into_iter().map(|ai| (ai, self.attainable(ai))).collect()
    }
}

impl RooflinePoint {
    pub fn new(ai: f64, achieved: f64, label: impl Into<String>) -> Result<Self> {
        if !(ai >= 0.0 && achieved >= 0.0) {
            return Err(Error::invalid(
                "roofline point",
                format!("ai and achieved must be non-negative (ai={ai}, achieved={achieved})"),
            ));
        }
        Ok(RooflinePoint {
            ai,
            achieved,
            label: label.into(),
        })
    }
}
