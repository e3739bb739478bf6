//! Deterministic reporting: score histograms, CSV exports with fixed
//! schemas and full-precision floats, and run manifests that hash every
//! produced artifact so reruns can be compared byte for byte.

use super::introspect::PcaReport;
use super::metrics::CePoint;
use super::{Result, ToolkitError};
use crate::belief::{AttnKind, AttnRecord};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// Integer-bin score densities over 0..=max_score (sums to 1).
pub fn score_histogram(scores: &[f64], max_score: usize) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(ToolkitError::Contract("no scores to histogram".into()));
    }
    let mut bins = vec![0.0; max_score + 1];
    for &s in scores {
        let b = s.round();
        if b < 0.0 || b > max_score as f64 || (s - b).abs() > 1e-9 {
            return Err(ToolkitError::Contract(format!(
                "score {s} is not an integer in 0..={max_score}"
            )));
        }
        bins[b as usize] += 1.0;
    }
    let n = scores.len() as f64;
    for b in bins.iter_mut() {
        *b /= n;
    }
    Ok(bins)
}

/// Full-precision decimal rendering (17 significant digits round-trips
/// every f64).
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_ce_curve_csv(w: &mut impl Write, rows: &[CePoint]) -> Result<()> {
    writeln!(w, "timestep,mean,sem,n_games")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.timestep,
            fmt_float(r.mean),
            fmt_float(r.sem),
            r.n_games
        )?;
    }
    Ok(())
}

/// One cross-play pairing in an evaluation table.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct XpRow {
    pub method: String,
    pub partner: String,
    pub mean: f64,
    pub sem: f64,
    pub games: usize,
}

pub fn write_xp_csv(w: &mut impl Write, rows: &[XpRow]) -> Result<()> {
    writeln!(w, "method,partner,mean,sem,games")?;
    for r in rows {
        if r.method.contains(',') || r.partner.contains(',') {
            return Err(ToolkitError::Contract("labels must not contain commas".into()));
        }
        writeln!(
            w,
            "{},{},{},{},{}",
            r.method,
            r.partner,
            fmt_float(r.mean),
            fmt_float(r.sem),
            r.games
        )?;
    }
    Ok(())
}

pub fn write_pca_csv(w: &mut impl Write, report: &PcaReport) -> Result<()> {
    writeln!(w, "feature_type,value_index,x,y")?;
    for p in &report.points {
        if p.feature.contains(',') {
            return Err(ToolkitError::Contract("feature names must not contain commas".into()));
        }
        writeln!(
            w,
            "{},{},{},{}",
            p.feature,
            p.value_index,
            fmt_float(p.x),
            fmt_float(p.y)
        )?;
    }
    Ok(())
}

fn kind_name(kind: AttnKind) -> &'static str {
    match kind {
        AttnKind::EncoderSelf => "encoder_self",
        AttnKind::DecoderSelf => "decoder_self",
        AttnKind::Cross => "cross",
    }
}

pub fn write_attention_csv(w: &mut impl Write, records: &[AttnRecord]) -> Result<()> {
    writeln!(w, "kind,layer,head,row,col,weight")?;
    for rec in records {
        let (rows, cols) = (rec.probs.shape[0], rec.probs.shape[1]);
        for r in 0..rows {
            for c in 0..cols {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    kind_name(rec.kind),
                    rec.layer,
                    rec.head,
                    r,
                    c,
                    fmt_float(rec.probs.data[r * cols + c])
                )?;
            }
        }
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

/// A self-describing record of one toolkit run: what configuration and
/// seeds produced which artifacts. Contains no timestamps, so identical
/// runs produce identical manifests.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub outputs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(command: &str, config_digest: &str, seeds: Vec<u64>) -> Self {
        Manifest {
            tool: "gbc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_digest: config_digest.into(),
            seeds,
            outputs: Vec::new(),
        }
    }

    /// Hashes an artifact already written to disk and records it under its
    /// file name.
    pub fn add_file(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let name = path
            .file_name()
            .ok_or_else(|| ToolkitError::Contract("artifact path has no file name".into()))?
            .to_string_lossy()
            .into_owned();
        self.outputs.push(ManifestEntry {
            path: name,
            sha256: sha256_hex(&bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}
