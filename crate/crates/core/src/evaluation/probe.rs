//! Linear probes from matched slot latents to object properties.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datasets::{ObjectSpec, ShapeKind};
use crate::{Error, Result};

/// One matched slot: its latent and the object it was assigned to.
#[derive(Clone, Debug)]
pub struct ProbeSample {
    pub latent: Vec<f64>,
    pub object: ObjectSpec,
    pub color_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    Shape,
    ColorId,
    ColorRgb,
    Position,
    Size,
}

impl Property {
    pub const ALL: [Property; 5] = [
        Property::Shape,
        Property::ColorId,
        Property::ColorRgb,
        Property::Position,
        Property::Size,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Property::Shape => "shape",
            Property::ColorId => "color_id",
            Property::ColorRgb => "color_rgb",
            Property::Position => "position",
            Property::Size => "size",
        }
    }

    pub fn is_categorical(self) -> bool {
        matches!(self, Property::Shape | Property::ColorId)
    }

    fn class(self, s: &ProbeSample) -> usize {
        match self {
            Property::Shape => s.object.shape.id() as usize,
            _ => s.color_id,
        }
    }

    fn values(self, s: &ProbeSample) -> Vec<f64> {
        let o = &s.object;
        match self {
            Property::ColorRgb => o.color.iter().map(|&c| c as f64).collect(),
            Property::Position => o.position.iter().map(|&c| c as f64).collect(),
            Property::Size => vec![o.size as f64],
            Property::Shape | Property::ColorId => unreachable!("categorical property"),
        }
    }
}

/// Least-squares readout for one property; the last weight row is the bias.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub property: Property,
    pub classes: usize,
    pub weights: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct ProbeModel {
    pub probes: Vec<LinearProbe>,
}

/// Held-out score: accuracy for categorical properties, mean R² over
/// output dimensions otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyScore {
    pub property: Property,
    pub metric: String,
    pub value: f64,
}

fn design(samples: &[ProbeSample]) -> Result<DMatrix<f64>> {
    let d = samples
        .first()
        .map(|s| s.latent.len())
        .ok_or_else(|| Error::Precondition("probe needs at least one sample".into()))?;
    if samples.iter().any(|s| s.latent.len() != d) {
        return Err(Error::Shape("probe latents differ in width".into()));
    }
    Ok(DMatrix::from_fn(samples.len(), d + 1, |i, j| {
        if j < d {
            samples[i].latent[j]
        } else {
            1.0
        }
    }))
}

fn targets(property: Property, classes: usize, samples: &[ProbeSample]) -> DMatrix<f64> {
    if property.is_categorical() {
        DMatrix::from_fn(samples.len(), classes, |i, j| {
            (property.class(&samples[i]) == j) as u8 as f64
        })
    } else {
        let rows: Vec<Vec<f64>> = samples.iter().map(|s| property.values(s)).collect();
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }
}

/// Fits one unregularized least-squares probe per property.
pub fn probe_fit(samples: &[ProbeSample]) -> Result<ProbeModel> {
    let x = design(samples)?;
    let svd = x.clone().svd(true, true);
    let n_shapes = ShapeKind::ALL.len();
    let n_colors = samples.iter().map(|s| s.color_id + 1).max().unwrap_or(1);
    let mut probes = Vec::new();
    for property in Property::ALL {
        let classes = match property {
            Property::Shape => n_shapes,
            Property::ColorId => n_colors,
            _ => 0,
        };
        let y = targets(property, classes, samples);
        let weights = svd
            .solve(&y, 1e-10)
            .map_err(|e| Error::Precondition(format!("least squares failed: {e}")))?;
        probes.push(LinearProbe {
            property,
            classes,
            weights,
        });
    }
    Ok(ProbeModel { probes })
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Coefficient of determination averaged over columns.
pub fn r_squared(truth: &DMatrix<f64>, pred: &DMatrix<f64>) -> f64 {
    let cols = truth.ncols();
    let mut total = 0.0;
    for j in 0..cols {
        let t = truth.column(j);
        let mean = t.mean();
        let ss_tot: f64 = t.iter().map(|v| (v - mean).powi(2)).sum();
        let ss_res: f64 = t.iter().zip(pred.column(j).iter()).map(|(a, b)| (a - b).powi(2)).sum();
        total += if ss_tot == 0.0 {
            if ss_res == 0.0 { 1.0 } else { 0.0 }
        } else {
            1.0 - ss_res / ss_tot
        };
    }
    total / cols as f64
}

pub fn probe_eval(model: &ProbeModel, samples: &[ProbeSample]) -> Result<Vec<PropertyScore>> {
    let x = design(samples)?;
    let mut scores = Vec::new();
    for probe in &model.probes {
        if x.ncols() != probe.weights.nrows() {
            return Err(Error::Shape("probe latents differ in width from the fitted probe".into()));
        }
        let pred = &x * &probe.weights;
        let (metric, value) = if probe.property.is_categorical() {
            let hits = samples
                .iter()
                .enumerate()
                .filter(|(i, s)| argmax(pred.row(*i).iter().copied()) == probe.property.class(s))
                .count();
            ("accuracy", hits as f64 / samples.len() as f64)
        } else {
            ("r2", r_squared(&targets(probe.property, 0, samples), &pred))
        };
        scores.push(PropertyScore {
            property: probe.property,
            metric: metric.into(),
            value,
        });
    }
    Ok(scores)
}
