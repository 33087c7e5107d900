//! Ablation harness: the base model plus the five module combinations, each
//! trained from scratch under the same budget.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Precision, TrainConfig};
use crate::data::codec::write_file;
use crate::error::Result;
use crate::tensor::Scalar;
use crate::train::{fit, EpochRecord, TrainData, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub enable_ca: bool,
    pub enable_ae: bool,
    pub enable_center: bool,
}

/// `(name, flags)` in report order.
pub const CONFIGURATIONS: [(&str, Flags); 6] = [
    ("base", flags(false, false, false)),
    ("ca", flags(true, false, false)),
    ("ae", flags(false, true, false)),
    ("ca+center", flags(true, false, true)),
    ("ae+center", flags(false, true, true)),
    ("ca+ae+center", flags(true, true, true)),
];

const fn flags(enable_ca: bool, enable_ae: bool, enable_center: bool) -> Flags {
    Flags {
        enable_ca,
        enable_ae,
        enable_center,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: Flags,
    pub lambda: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub epochs: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Full model at other center-loss weights, when requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lambda_sweep: Vec<AblationRow>,
}

/// Trains one configuration from scratch and returns the final state and
/// the epoch records.
pub fn train_config<T: Scalar>(cfg: &TrainConfig, data: &TrainData) -> Result<(TrainState<T>, Vec<EpochRecord>)> {
    let mut state = TrainState::<T>::new(cfg.clone(), data.class_names.clone())?;
    let records = fit(&mut state, data, None, |_| {})?;
    Ok((state, records))
}

fn final_accuracy(cfg: &TrainConfig, data: &TrainData) -> Result<f64> {
    let records = match cfg.precision {
        Precision::F32 => train_config::<f32>(cfg, data)?.1,
        Precision::F64 => train_config::<f64>(cfg, data)?.1,
    };
    Ok(records.last().map_or(0.0, |r| r.acc_test))
}

fn run_row(name: &str, cfg: &TrainConfig, data: &TrainData) -> Result<AblationRow> {
    let start = Instant::now();
    let accuracy = final_accuracy(cfg, data)?;
    Ok(AblationRow {
        name: name.to_string(),
        flags: flags(cfg.enable_ca, cfg.enable_ae, cfg.enable_center),
        lambda: cfg.effective_lambda(),
        seed: cfg.seed,
        accuracy,
        epochs: cfg.epochs,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every configuration for every seed. `on_row` sees each row as soon
/// as it finishes.
pub fn run_ablation(
    base: &TrainConfig,
    seeds: &[u64],
    lambdas: &[f64],
    data_for: impl Fn(&TrainConfig) -> Result<TrainData>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut lambda_sweep = Vec::new();
    for &seed in seeds {
        let seeded = TrainConfig { seed, ..base.clone() };
        let data = data_for(&seeded)?;
        for (name, f) in CONFIGURATIONS {
            let cfg = seeded.with_flags(f.enable_ca, f.enable_ae, f.enable_center);
            let row = run_row(name, &cfg, &data)?;
            on_row(&row);
            rows.push(row);
        }
        for &lambda in lambdas {
            let cfg = TrainConfig { lambda, ..seeded.with_flags(true, true, true) };
            let row = run_row(&format!("ca+ae+center@{lambda}"), &cfg, &data)?;
            on_row(&row);
            lambda_sweep.push(row);
        }
    }
    Ok(AblationReport { rows, lambda_sweep })
}

fn mark(on: bool) -> &'static str {
    if on {
        "yes"
    } else {
        "-"
    }
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Fixed-width table: configuration, CA-Module, AE-Module, center loss,
    /// seed, accuracy.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<22} {:<10} {:<10} {:<12} {:>6} {:>9}\n",
            "configuration", "CA-Module", "AE-Module", "center loss", "seed", "accuracy"
        );
        for r in self.rows.iter().chain(&self.lambda_sweep) {
            let center = if r.flags.enable_center {
                format!("yes ({})", r.lambda)
            } else {
                "-".to_string()
            };
            out.push_str(&format!(
                "{:<22} {:<10} {:<10} {:<12} {:>6} {:>9.4}\n",
                r.name,
                mark(r.flags.enable_ca),
                mark(r.flags.enable_ae),
                center,
                r.seed,
                r.accuracy
            ));
        }
        out
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("report.json"), self.to_json()?.as_bytes())?;
        write_file(&dir.join("report.txt"), self.to_text().as_bytes())
    }
}
