//! Model introspection: attention-probability export and a two-component
//! PCA of the feature-value embedding table.

use super::{Result, ToolkitError};
use crate::belief::{AttnRecord, BeliefNet, NetMode};
use crate::env::{HiddenFeatures, Trajectory};
use crate::tensor::{svd_top2, Tape};

/// All attention-probability matrices recorded during one evaluation-mode
/// forward pass (teacher-forced on `truth`).
pub fn attention_maps(
    net: &BeliefNet,
    traj: &Trajectory,
    truth: &HiddenFeatures,
) -> Result<Vec<AttnRecord>> {
    let mut tape = Tape::new();
    let artifacts = net.forward(&mut tape, traj, truth, NetMode::Eval, None, None)?;
    Ok(artifacts.attention)
}

/// One embedding-table row projected onto the top two principal components.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PcaPoint {
    /// Schema name of the feature this vocabulary row belongs to.
    pub feature: String,
    /// Value index within that feature's range.
    pub value_index: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone)]
pub struct PcaReport {
    pub points: Vec<PcaPoint>,
    /// Leading two singular values of the centered table.
    pub sigma: [f64; 2],
    /// Per feature, variance of its projected points (both components),
    /// sorted descending: features the embedding spreads out the most.
    pub feature_variance: Vec<(String, f64)>,
}

/// Projects the feature-value embedding table onto its top two principal
/// components (rows centered, directions from the leading singular
/// vectors).
pub fn embedding_pca(net: &BeliefNet) -> Result<PcaReport> {
    let cfg = &net.config;
    let idx = net
        .params
        .index_of("embed_feat")
        .ok_or_else(|| ToolkitError::Contract("missing embedding table".into()))?;
    let table = net.params.get(idx);
    let (rows, cols) = (table.shape[0], table.shape[1]);
    if rows < 2 || cols < 2 {
        return Err(ToolkitError::Contract(
            "embedding table too small for a 2-component PCA".into(),
        ));
    }

    let mut centered = table.clone();
    for c in 0..cols {
        let mean: f64 = (0..rows).map(|r| table.data[r * cols + c]).sum::<f64>() / rows as f64;
        for r in 0..rows {
            centered.data[r * cols + c] -= mean;
        }
    }
    let svd = svd_top2(&centered);

    let mut points = Vec::with_capacity(rows);
    let mut row = 0usize;
    for (k, &card) in cfg.cardinalities.iter().enumerate() {
        for v in 0..card {
            let mut x = 0.0;
            let mut y = 0.0;
            for c in 0..cols {
                x += centered.data[row * cols + c] * svd.right.data[c * 2];
                y += centered.data[row * cols + c] * svd.right.data[c * 2 + 1];
            }
            points.push(PcaPoint {
                feature: cfg.feature_names[k].clone(),
                value_index: v,
                x,
                y,
            });
            row += 1;
        }
    }
    if row != rows {
        return Err(ToolkitError::Contract(format!(
            "embedding table has {rows} rows but the schema declares {row} values"
        )));
    }

    let mut feature_variance = Vec::new();
    for name in &cfg.feature_names {
        let mine: Vec<&PcaPoint> = points.iter().filter(|p| &p.feature == name).collect();
        let n = mine.len() as f64;
        let (mx, my) = mine
            .iter()
            .fold((0.0, 0.0), |acc, p| (acc.0 + p.x / n, acc.1 + p.y / n));
        let var = mine
            .iter()
            .map(|p| (p.x - mx) * (p.x - mx) + (p.y - my) * (p.y - my))
            .sum::<f64>()
            / n;
        feature_variance.push((name.clone(), var));
    }
    feature_variance.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    Ok(PcaReport {
        points,
        sigma: svd.sigma,
        feature_variance,
    })
}
