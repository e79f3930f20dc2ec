use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mimevis::Granularity;
use crate::nncore::{Real, Tensor};

/// Cosmetic group names; voxels are assigned round-robin.
pub const ROI_GROUPS: [&str; 6] = ["V1", "V2", "V3", "V4", "PPA", "TPOJ"];

pub fn roi_group(voxel: usize) -> &'static str {
    ROI_GROUPS[voxel % ROI_GROUPS.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiImportanceMap {
    pub subject: usize,
    pub granularity: Granularity,
    /// One entry per voxel, non-negative, summing to one.
    pub weights: Vec<f64>,
    pub group_totals: BTreeMap<String, f64>,
    /// Shannon entropy (nats) of `weights`; reported, never gated on.
    pub entropy: f64,
}

/// Mean absolute first-layer weight per voxel, normalised to sum to one.
/// `weight` is `voxels x outputs`.
pub fn voxel_importance<T: Real>(weight: &Tensor<T>) -> Result<Vec<f64>> {
    if weight.shape().len() != 2 || weight.rows() == 0 || weight.cols() == 0 {
        return Err(Error::dim("roi_importance", weight.shape(), &[0, 0]));
    }
    let outs = weight.cols() as f64;
    let raw: Vec<f64> = (0..weight.rows())
        .map(|v| weight.row(v).iter().map(|w| w.f64().abs()).sum::<f64>() / outs)
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Data("first-layer weights are all zero or non-finite".into()));
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

pub fn roi_importance<T: Real>(weight: &Tensor<T>, subject: usize, granularity: Granularity) -> Result<RoiImportanceMap> {
    let weights = voxel_importance(weight)?;
    let mut group_totals = BTreeMap::new();
    for (v, &w) in weights.iter().enumerate() {
        *group_totals.entry(roi_group(v).to_string()).or_insert(0.0) += w;
    }
    let entropy = -weights.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum::<f64>();
    Ok(RoiImportanceMap {
        subject,
        granularity,
        weights,
        group_totals,
        entropy,
    })
}

impl RoiImportanceMap {
    /// `voxel,group,weight` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("voxel,group,weight\n");
        for (v, w) in self.weights.iter().enumerate() {
            out.push_str(&format!("{v},{},{w:.17e}\n", roi_group(v)));
        }
        out
    }
}
