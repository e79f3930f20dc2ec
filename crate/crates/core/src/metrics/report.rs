use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::features::{ExtractorKind, FeatureExtractor};
use crate::metrics::identification::{correlation_distance, two_way_identification};
use crate::metrics::image::{pixcorr, ssim};

pub const COLUMNS: [&str; 8] = [
    "PixCorr",
    "SSIM",
    "TwoWay(shallow-2)",
    "TwoWay(shallow-5)",
    "TwoWay(deep-A)",
    "TwoWay(deep-B)",
    "Dist(dist-A)",
    "Dist(dist-B)",
];

pub const TWO_WAY_KINDS: [ExtractorKind; 4] = [
    ExtractorKind::Shallow2,
    ExtractorKind::Shallow5,
    ExtractorKind::DeepA,
    ExtractorKind::DeepB,
];
pub const DISTANCE_KINDS: [ExtractorKind; 2] = [ExtractorKind::DistA, ExtractorKind::DistB];

/// One row of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub pixcorr: f64,
    pub ssim: f64,
    /// Percentages for shallow-2, shallow-5, deep-A, deep-B.
    pub two_way: [f64; 4],
    /// Correlation distances for dist-A, dist-B.
    pub distance: [f64; 2],
}

impl MetricRow {
    pub fn values(&self) -> [f64; 8] {
        [
            self.pixcorr,
            self.ssim,
            self.two_way[0],
            self.two_way[1],
            self.two_way[2],
            self.two_way[3],
            self.distance[0],
            self.distance[1],
        ]
    }

    pub fn mean(rows: &[MetricRow]) -> Result<MetricRow> {
        if rows.is_empty() {
            return Err(Error::Data("no rows to average".into()));
        }
        let n = rows.len() as f64;
        let mut acc = [0.0; 8];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v / n;
            }
        }
        Ok(MetricRow {
            pixcorr: acc[0],
            ssim: acc[1],
            two_way: [acc[2], acc[3], acc[4], acc[5]],
            distance: [acc[6], acc[7]],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject: usize,
    #[serde(flatten)]
    pub row: MetricRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `SynMind` for the full model, `SynMind*` for the semantic-only one.
    pub label: String,
    #[serde(flatten)]
    pub mean: MetricRow,
    pub per_subject: Vec<SubjectRow>,
    pub samples: usize,
    pub config_hash: String,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("model,subject,{}\n", COLUMNS.join(","));
        let fmt = |vals: [f64; 8]| vals.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",");
        for s in &self.per_subject {
            out.push_str(&format!("{},{},{}\n", self.label, s.subject, fmt(s.row.values())));
        }
        out.push_str(&format!("{},mean,{}\n", self.label, fmt(self.mean.values())));
        out
    }
}

/// Precomputed extractor bank for one image size.
#[derive(Debug, Clone)]
pub struct ExtractorBank {
    pub side: usize,
    two_way: Vec<FeatureExtractor>,
    distance: Vec<FeatureExtractor>,
}

impl ExtractorBank {
    pub fn new(side: usize) -> Result<Self> {
        Ok(Self {
            side,
            two_way: TWO_WAY_KINDS
                .iter()
                .map(|&k| FeatureExtractor::new(k, side))
                .collect::<Result<_>>()?,
            distance: DISTANCE_KINDS
                .iter()
                .map(|&k| FeatureExtractor::new(k, side))
                .collect::<Result<_>>()?,
        })
    }

    pub fn get(&self, kind: ExtractorKind) -> &FeatureExtractor {
        self.two_way
            .iter()
            .chain(&self.distance)
            .find(|e| e.kind == kind)
            .expect("bank holds every kind")
    }

    /// All eight metrics of reconstructions against aligned ground truth.
    pub fn score(&self, recon: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<MetricRow> {
        if recon.len() != truth.len() || recon.len() < 2 {
            return Err(Error::Data(format!(
                "need at least 2 aligned images, got {} reconstructions and {} originals",
                recon.len(),
                truth.len()
            )));
        }
        let n = recon.len() as f64;
        let mut pc = 0.0;
        let mut ss = 0.0;
        for (r, t) in recon.iter().zip(truth) {
            pc += pixcorr(r, t)?;
            ss += ssim(r, t, self.side)?;
        }
        let (pc, ss) = (pc / n, ss / n);
        let mut two_way = [0.0; 4];
        for (slot, e) in two_way.iter_mut().zip(&self.two_way) {
            *slot = two_way_identification(&e.extract_all(recon)?, &e.extract_all(truth)?)?;
        }
        let mut distance = [0.0; 2];
        for (slot, e) in distance.iter_mut().zip(&self.distance) {
            *slot = correlation_distance(&e.extract_all(recon)?, &e.extract_all(truth)?)?;
        }
        Ok(MetricRow {
            pixcorr: pc,
            ssim: ss,
            two_way,
            distance,
        })
    }
}
