//! Softmax regression on flattened feature maps.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::cfa::{sparse_code, SolverConfig};
use crate::cs::{reconstruct_prelearned, MeasurementSet};
use crate::error::{Error, Result};
use crate::tensor::{ConvDictionary, ImageTensor};

pub const MODEL_MAGIC: &[u8; 5] = b"SMAX1";

/// Images per sparse-coding batch during feature extraction. Fixed so that
/// results do not depend on dataset size.
pub const EXTRACT_BATCH: usize = 250;

#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxModel {
    /// `C x N_s`, acting on standardized features.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    /// Per-dimension training mean and standard deviation.
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct LabeledFeatures {
    /// One row per example.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("features contain non-finite values".into()));
        }
        Ok(LabeledFeatures { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub step: f64,
    pub l2: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 500,
            step: 0.5,
            l2: 1e-4,
        }
    }
}

/// Where features come from.
#[derive(Clone, Copy, Debug)]
pub enum FeatureSource<'a> {
    Images(&'a [ImageTensor]),
    Measurements(&'a MeasurementSet),
}

impl FeatureSource<'_> {
    fn len(&self) -> usize {
        match self {
            FeatureSource::Images(x) => x.len(),
            FeatureSource::Measurements(m) => m.len(),
        }
    }
}

/// Sparse codes with a frozen dictionary, flattened atom-major then
/// row-major, one row per input.
pub fn extract_features(source: FeatureSource<'_>, dict: &ConvDictionary, config: &SolverConfig) -> Result<Array2<f64>> {
    let n = source.len();
    if n == 0 {
        return Err(Error::param("no inputs to extract features from"));
    }
    let mut out: Option<Array2<f64>> = None;
    for start in (0..n).step_by(EXTRACT_BATCH) {
        let end = (start + EXTRACT_BATCH).min(n);
        let features = match source {
            FeatureSource::Images(x) => sparse_code(&x[start..end], dict, config)?.state.s,
            FeatureSource::Measurements(m) => {
                let part = MeasurementSet::new(m.y()[start..end].to_vec(), m.operator().clone(), m.image_shape())?;
                reconstruct_prelearned(&part, dict, config)?.features
            }
        };
        for (i, s) in features.iter().enumerate() {
            let flat = s.flatten();
            let o = out.get_or_insert_with(|| Array2::zeros((n, flat.len())));
            o.row_mut(start + i).assign(&ArrayView1::from(&flat));
        }
    }
    Ok(out.expect("at least one batch"))
}

fn softmax_in_place(mut logits: ndarray::ArrayViewMut1<'_, f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    logits.mapv_inplace(|v| (v - max).exp());
    let sum = logits.sum();
    logits.mapv_inplace(|v| v / sum);
}

impl SoftmaxModel {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        SoftmaxModel {
            weights: Array2::zeros((classes, dim)),
            bias: Array1::zeros(classes),
            mean: Array1::zeros(dim),
            std: Array1::ones(dim),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Weights and bias acting on raw features.
    fn raw_affine(&self) -> (Array2<f64>, Array1<f64>) {
        let w = &self.weights / &self.std;
        let b = &self.bias - &w.dot(&self.mean);
        (w, b)
    }

    /// Class probabilities for each row of `x`.
    pub fn predict_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "model expects {} features, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        let (w, b) = self.raw_affine();
        let mut logits = x.dot(&w.t()) + &b;
        for row in logits.rows_mut() {
            softmax_in_place(row);
        }
        Ok(logits)
    }

    pub fn classify(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let p = self.predict_batch(x)?;
        Ok(p.rows().into_iter().map(argmax).collect())
    }

    pub fn accuracy(&self, data: &LabeledFeatures) -> Result<f64> {
        let pred = self.classify(data.features.view())?;
        let hits = pred.iter().zip(&data.labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / data.len().max(1) as f64)
    }

    /// `SMAX1`, C u32, N_s u32, mean, std, weights row-major, bias.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_u32::<LittleEndian>(self.classes() as u32)?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        for v in self.mean.iter().chain(&self.std).chain(&self.weights).chain(&self.bias) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let trunc = |offset: u64| {
            move |_e: std::io::Error| Error::Parse {
                offset,
                message: "truncated softmax model".into(),
            }
        };
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(trunc(0))?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: format!("expected model magic \"SMAX1\", found {:?}", String::from_utf8_lossy(&magic)),
            });
        }
        let c = r.read_u32::<LittleEndian>().map_err(trunc(5))? as usize;
        let d = r.read_u32::<LittleEndian>().map_err(trunc(9))? as usize;
        if c < 2 || d == 0 || c.saturating_mul(d) > 1 << 28 {
            return Err(Error::Parse {
                offset: 5,
                message: format!("implausible model size C={c} N_s={d}"),
            });
        }
        let mut offset = 13u64;
        let mut read = |n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| {
                    let v = r.read_f64::<LittleEndian>().map_err(trunc(offset));
                    offset += 8;
                    v
                })
                .collect()
        };
        let mean = Array1::from(read(d)?);
        let std = Array1::from(read(d)?);
        let weights = Array2::from_shape_vec((c, d), read(c * d)?).unwrap();
        let bias = Array1::from(read(c)?);
        Ok(SoftmaxModel {
            weights,
            bias,
            mean,
            std,
        })
    }
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Probabilities for one feature vector.
pub fn softmax_predict(model: &SoftmaxModel, s: &[f64]) -> Result<Vec<f64>> {
    let x = ArrayView2::from_shape((1, s.len()), s).unwrap();
    Ok(model.predict_batch(x)?.row(0).to_vec())
}

/// Mean cross-entropy plus `l2/2 ||W||^2`, and its gradient with respect to
/// the weights and bias.
pub fn loss_and_gradient(model: &SoftmaxModel, data: &LabeledFeatures, l2: f64) -> Result<(f64, Array2<f64>, Array1<f64>)> {
    let n = data.len();
    if n == 0 {
        return Err(Error::param("no training examples"));
    }
    let mut p = model.predict_batch(data.features.view())?;
    let mut loss = 0.0;
    for (mut row, &y) in p.rows_mut().into_iter().zip(&data.labels) {
        if y >= model.classes() {
            return Err(Error::param(format!("label {y} outside {} classes", model.classes())));
        }
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
    }
    let scale = 1.0 / n as f64;
    loss = loss * scale + 0.5 * l2 * model.weights.iter().map(|w| w * w).sum::<f64>();
    // d/dW of standardized logits: (P - Y)^T (X - mean) / std
    let col_sums = p.sum_axis(Axis(0));
    let mut gw = p.t().dot(&data.features);
    for (mut row, cs) in gw.rows_mut().into_iter().zip(&col_sums) {
        row.scaled_add(-cs, &model.mean);
        row /= &model.std;
    }
    gw *= scale;
    gw.scaled_add(l2, &model.weights);
    Ok((loss, gw, col_sums * scale))
}

/// Full-batch gradient descent from zero weights; a step that would raise
/// the loss is halved and retried. Returns the model and the loss before
/// the first and after each accepted epoch.
pub fn softmax_train(data: &LabeledFeatures, settings: &TrainSettings) -> Result<(SoftmaxModel, Vec<f64>)> {
    if !(settings.step >= 0.0 && settings.l2 >= 0.0) {
        return Err(Error::param("step and l2 must be non-negative"));
    }
    let classes = data.labels.iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; classes];
    for &y in &data.labels {
        present[y] = true;
    }
    if classes < 2 || present.iter().any(|p| !p) {
        return Err(Error::param(format!(
            "training data must cover at least two classes with no gaps, labels span {classes}"
        )));
    }
    let dim = data.dim();
    let n = data.len() as f64;
    let mean = data.features.sum_axis(Axis(0)) / n;
    let mut var = Array1::<f64>::zeros(dim);
    for row in data.features.rows() {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.mapv(|v| {
        let s = (v / n).sqrt();
        if s > 1e-12 {
            s
        } else {
            1.0
        }
    });
    let mut model = SoftmaxModel {
        weights: Array2::zeros((classes, dim)),
        bias: Array1::zeros(classes),
        mean,
        std,
    };

    let mut step = settings.step;
    let (mut loss, mut gw, mut gb) = loss_and_gradient(&model, data, settings.l2)?;
    let mut losses = vec![loss];
    'epochs: for _ in 0..settings.epochs {
        loop {
            let mut cand = model.clone();
            cand.weights.scaled_add(-step, &gw);
            cand.bias.scaled_add(-step, &gb);
            let (cl, cgw, cgb) = loss_and_gradient(&cand, data, settings.l2)?;
            if cl <= loss {
                model = cand;
                (loss, gw, gb) = (cl, cgw, cgb);
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                break 'epochs;
            }
        }
        losses.push(loss);
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("softmax training produced a non-finite loss".into()));
    }
    Ok((model, losses))
}

/// `label,f0,f1,...` with no header.
pub fn read_features_csv(path: &Path) -> Result<LabeledFeatures> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut dim = None;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Parse {
            offset: line as u64,
            message: format!("{}: line {}: {what}", path.display(), line + 1),
        };
        let mut fields = rec.iter();
        let label: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| bad("bad label"))?;
        let row = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("bad feature value"))?;
        if *dim.get_or_insert(row.len()) != row.len() {
            return Err(bad("row length differs from the first row"));
        }
        labels.push(label);
        values.extend(row);
    }
    let d = dim.ok_or_else(|| Error::param(format!("{} has no rows", path.display())))?;
    LabeledFeatures::new(Array2::from_shape_vec((labels.len(), d), values).unwrap(), labels)
}

pub fn write_features_csv(path: &Path, data: &LabeledFeatures) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for (row, y) in data.features.rows().into_iter().zip(&data.labels) {
        let mut rec = vec![y.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationRow {
    /// `None` for uncompressed features.
    pub csr: Option<f64>,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// `csr,accuracy,n_train,n_test,seed`
pub fn write_classification_csv(path: &Path, rows: &[ClassificationRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.csr.map_or_else(|| "none".to_string(), |c| c.to_string()),
                r.accuracy.to_string(),
                r.n_train.to_string(),
                r.n_test.to_string(),
                r.seed.to_string(),
            ]
        })
        .collect();
    crate::dataio::write_csv(path, &["csr", "accuracy", "n_train", "n_test", "seed"], &rows)
}
