//! Decision and rejection regions of the analytic two-rings classifier on
//! a regular grid.

use std::fmt::Write as _;
use std::path::Path;

use deepbayes_tensor::{argmax, RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{sample_two_rings, Dataset};
use crate::detection::{calibrate, CalibrationMode, DetectorCalibration, DetectorKind};
use crate::error::{Error, Result};
use crate::lvm::{Classifier, TwoRingsClassifier, TwoRingsSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub spec: TwoRingsSpec,
    pub n_per_class: usize,
    pub fpr: f64,
    /// Points per axis.
    pub resolution: usize,
    /// Half-width of the square grid around the origin.
    pub extent: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            spec: TwoRingsSpec::default(),
            n_per_class: 1000,
            fpr: 0.1,
            resolution: 121,
            extent: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub x: [f64; 2],
    pub predicted: usize,
    /// Acceptance by marginal, logit, KL and TV detection, in that order.
    pub accepted: [bool; 4],
}

#[derive(Debug, Clone)]
pub struct DemoOutcome {
    pub model: TwoRingsClassifier,
    pub train: Dataset,
    pub calibration: DetectorCalibration,
    pub grid: Vec<GridPoint>,
}

pub fn two_rings_demo(cfg: &DemoConfig, seed: u64) -> Result<DemoOutcome> {
    if cfg.resolution < 2 || !(cfg.extent > 0.0) {
        return Err(Error::Config("grid needs at least 2 points per axis and a positive extent".into()));
    }
    let model = TwoRingsClassifier::new(cfg.spec.clone())?;
    let mut rng = RngStream::new(seed, 0);
    let train = sample_two_rings(&cfg.spec, cfg.n_per_class, &mut rng)?;
    let calibration = calibrate(
        &model,
        &train,
        CalibrationMode::TargetFpr { rate: cfg.fpr },
        1,
        &mut rng,
    )?;
    let r = cfg.resolution;
    let step = 2.0 * cfg.extent / (r - 1) as f64;
    let mut pts = Vec::with_capacity(2 * r * r);
    for i in 0..r {
        for j in 0..r {
            pts.push(-cfg.extent + j as f64 * step);
            pts.push(-cfg.extent + i as f64 * step);
        }
    }
    let x = Tensor::new(vec![r * r, 2], pts)?;
    let logits = model.logits(&x, 1, &mut rng)?;
    let grid = (0..r * r)
        .map(|n| {
            let row = logits.row(n);
            let mut accepted = [false; 4];
            for (slot, kind) in accepted.iter_mut().zip(DetectorKind::ALL) {
                *slot = calibration.decide(kind, row)?.accepted;
            }
            Ok(GridPoint {
                x: [x.row(n)[0], x.row(n)[1]],
                predicted: argmax(row),
                accepted,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DemoOutcome {
        model,
        train,
        calibration,
        grid,
    })
}

pub const GRID_HEADER: &str = "x1,x2,predicted,accepted_marginal,accepted_logit,accepted_kl,accepted_tv";

pub fn grid_csv(grid: &[GridPoint]) -> String {
    let mut out = String::from(GRID_HEADER);
    out.push('\n');
    for p in grid {
        let _ = write!(out, "{},{},{}", p.x[0], p.x[1], p.predicted);
        for a in p.accepted {
            let _ = write!(out, ",{}", u8::from(a));
        }
        out.push('\n');
    }
    out
}

/// Writes `grid.csv`, `train.csv` and `calibration.json` into `out`.
pub fn write_demo(out: &Path, demo: &DemoOutcome) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let grid = out.join("grid.csv");
    std::fs::write(&grid, grid_csv(&demo.grid)).map_err(|e| Error::io(&grid, e))?;
    demo.train.write_csv(&out.join("train.csv"))?;
    let calib = out.join("calibration.json");
    let text = serde_json::to_string_pretty(&demo.calibration)?;
    std::fs::write(&calib, text).map_err(|e| Error::io(&calib, e))
}
