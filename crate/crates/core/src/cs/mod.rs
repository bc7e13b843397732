//! Image recovery from compressive measurements `y = A x` with a
//! convolutional dictionary, either fixed in advance or learned in situ from
//! the measurements themselves.

mod io;

pub use io::{read_measurements, write_measurements, write_metrics_csv, MetricsRow, MEASUREMENT_MAGIC};

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView3};
use rayon::prelude::*;

use crate::cfa::{run_admm, AdmmState, FeatureSolve, SolverConfig, TraceRow};
use crate::cfa::DataTerm;
use crate::cg::{conjugate_gradient, conjugate_gradient_batch};
use crate::error::{Error, Result};
use crate::rng;
use crate::sensing::{SensingKind, SensingOperator};
use crate::tensor::{ConvDictionary, ConvPolicy, FeatureSet, ImageTensor, Map};

/// Measurements of `N` images through one operator. Image geometry is kept
/// alongside since it cannot be recovered from `y`.
#[derive(Clone, Debug)]
pub struct MeasurementSet {
    y: Vec<Vec<f64>>,
    operator: Arc<SensingOperator>,
    height: usize,
    width: usize,
    channels: usize,
}

impl MeasurementSet {
    pub fn new(
        y: Vec<Vec<f64>>,
        operator: Arc<SensingOperator>,
        shape: (usize, usize, usize),
    ) -> Result<Self> {
        let (height, width, channels) = shape;
        if height * width * channels != operator.cols() {
            return Err(Error::shape(format!(
                "{height}x{width}x{channels} images do not match an operator with {} columns",
                operator.cols()
            )));
        }
        for (n, v) in y.iter().enumerate() {
            if v.len() != operator.rows() {
                return Err(Error::shape(format!(
                    "measurement {n} has length {}, operator has {} rows",
                    v.len(),
                    operator.rows()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("measurement {n} is not finite")));
            }
        }
        Ok(MeasurementSet {
            y,
            operator,
            height,
            width,
            channels,
        })
    }

    /// Measures every image with `operator`.
    pub fn measure(images: &[ImageTensor], operator: Arc<SensingOperator>) -> Result<Self> {
        let shape = images
            .first()
            .map(ImageTensor::shape)
            .ok_or_else(|| Error::param("need at least one image"))?;
        let y = images
            .iter()
            .map(|x| {
                if x.shape() != shape {
                    return Err(Error::shape("images differ in shape"));
                }
                operator.apply(&x.to_vector())
            })
            .collect::<Result<Vec<_>>>()?;
        MeasurementSet::new(y, operator, shape)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y(&self) -> &[Vec<f64>] {
        &self.y
    }

    pub fn operator(&self) -> &Arc<SensingOperator> {
        &self.operator
    }

    /// `(H, W, C)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    /// Always `synthesize(dictionary, features[n])`.
    pub images: Vec<ImageTensor>,
    pub features: Vec<FeatureSet>,
    pub dictionary: ConvDictionary,
    /// `recon_err` holds the relative measurement error.
    pub trace: Vec<TraceRow>,
    /// Per-image `||y - A x_hat|| / ||y||`.
    pub rel_meas_err: Vec<f64>,
}

impl ReconstructionResult {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

/// Parameter bundle for a known dataset geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub height: usize,
    pub width: usize,
    pub atoms: usize,
    pub kernel: (usize, usize),
    pub sensing: SensingKind,
}

pub const PRESETS: [Preset; 2] = [
    Preset {
        name: "mnist",
        height: 28,
        width: 28,
        atoms: 16,
        kernel: (7, 7),
        sensing: SensingKind::Gaussian,
    },
    Preset {
        name: "generic-64",
        height: 64,
        width: 64,
        atoms: 16,
        kernel: (13, 13),
        sensing: SensingKind::Hadamard,
    },
];

pub fn preset(name: &str) -> Option<Preset> {
    PRESETS.iter().copied().find(|p| p.name == name)
}

/// `sum_k D_k * S_k`
pub fn synthesize(dict: &ConvDictionary, features: &FeatureSet) -> Result<ImageTensor> {
    ConvPolicy::default().synthesize(dict, features)
}

fn vec_to_image(v: Vec<f64>, shape: (usize, usize, usize)) -> ImageTensor {
    ImageTensor::from_vector(&v, shape.0, shape.1, shape.2).expect("operator width matches image")
}

/// Solves `(T^T A^T A T + eta I) s = T^T A^T y_k + eta (z - u)` for one atom,
/// where `y_excluding_k` is `y` minus the measured contribution of every other
/// atom.
#[allow(clippy::too_many_arguments)]
pub fn feature_cg_solve_cs(
    atom: ArrayView3<'_, f64>,
    operator: &SensingOperator,
    image_shape: (usize, usize, usize),
    y_excluding_k: &[f64],
    z: &Map,
    u: &Map,
    eta: f64,
    warm_start: Option<&Map>,
    config: &SolverConfig,
) -> Result<FeatureSolve> {
    if !(eta > 0.0) {
        return Err(Error::param(format!("eta must be positive, got {eta}")));
    }
    let (c, h, w) = atom.dim();
    if c != image_shape.2 || image_shape.0 * image_shape.1 * image_shape.2 != operator.cols() {
        return Err(Error::shape("atom, image shape and operator disagree"));
    }
    let fshape = (image_shape.0 + h - 1, image_shape.1 + w - 1);
    if z.dim() != fshape || u.dim() != fshape {
        return Err(Error::shape(format!(
            "feature maps must be {}x{}",
            fshape.0, fshape.1
        )));
    }
    let policy = config.conv;
    let back = vec_to_image(operator.apply_adj(y_excluding_k)?, image_shape);
    let mut rhs = policy.atom_adjoint(atom, &back)?;
    rhs.zip_mut_with(&(z - u), |r, d| *r += eta * d);

    let mut failure = None;
    let op = |v: &[f64]| -> Vec<f64> {
        let s = Map::from_shape_vec(fshape, v.to_vec()).unwrap();
        let result = policy
            .synthesize_atom(atom, &s)
            .and_then(|ts| operator.apply_normal(&ts.to_vector()))
            .and_then(|n| policy.atom_adjoint(atom, &vec_to_image(n, image_shape)));
        match result {
            Ok(mut out) => {
                out.zip_mut_with(&s, |o, si| *o += eta * si);
                out.into_raw_vec_and_offset().0
            }
            Err(e) => {
                failure = Some(e);
                v.to_vec()
            }
        }
    };
    let warm = warm_start.map(|w| w.as_standard_layout().into_owned());
    let outcome = conjugate_gradient(
        op,
        rhs.as_slice().unwrap(),
        warm.as_ref().map(|w| w.as_slice().unwrap()),
        config.cg(),
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(FeatureSolve {
        map: Map::from_shape_vec(fshape, outcome.x).unwrap(),
        converged: outcome.converged,
        iterations: outcome.iterations,
        rel_residual: outcome.rel_residual,
    })
}

struct Measured<'a>(&'a MeasurementSet);

/// Stacks equal-length vectors as the columns of a block.
fn columns(cols: Vec<Vec<f64>>, rows: usize) -> Array2<f64> {
    let n = cols.len();
    Array2::from_shape_vec((n, rows), cols.concat())
        .expect("columns share a length")
        .reversed_axes()
}

impl Measured<'_> {
    fn measurement_block(&self) -> Array2<f64> {
        columns(self.0.y.clone(), self.0.operator.rows())
    }

    /// Measurement-domain images of one atom for every image, as columns.
    fn atom_block(&self, atom: ArrayView3<'_, f64>, maps: &[&Map], policy: &ConvPolicy) -> Result<Array2<f64>> {
        let cols = maps
            .par_iter()
            .map(|m| policy.synthesize_atom(atom, m).map(|x| x.to_vector()))
            .collect::<Result<Vec<_>>>()?;
        Ok(columns(cols, self.0.operator.cols()))
    }

    fn measured_residual(&self, n: usize, dict: &ConvDictionary, s: &FeatureSet, policy: &ConvPolicy) -> Result<Vec<f64>> {
        let xhat = policy.synthesize(dict, s)?;
        let ax = self.0.operator.apply(&xhat.to_vector())?;
        Ok(self.0.y[n].iter().zip(ax).map(|(y, a)| y - a).collect())
    }
}

impl DataTerm for Measured<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn update_features(
        &self,
        n: usize,
        dict: &ConvDictionary,
        s: &mut FeatureSet,
        z: &FeatureSet,
        u: &FeatureSet,
        eta: f64,
        cfg: &SolverConfig,
    ) -> Result<usize> {
        let policy = &cfg.conv;
        let op = &self.0.operator;
        let shape = self.0.image_shape();
        let mut resid = self.measured_residual(n, dict, s, policy)?;
        let mut warnings = 0;
        for k in 0..dict.len() {
            let atom = dict.atom(k);
            let old = op.apply(&policy.synthesize_atom(atom, s.map(k))?.to_vector())?;
            let y_minus_k: Vec<f64> = resid.iter().zip(&old).map(|(r, o)| r + o).collect();
            let sol = feature_cg_solve_cs(atom, op, shape, &y_minus_k, z.map(k), u.map(k), eta, Some(s.map(k)), cfg)?;
            if !sol.converged {
                warnings += 1;
            }
            let new = op.apply(&policy.synthesize_atom(atom, &sol.map)?.to_vector())?;
            for ((r, ym), nv) in resid.iter_mut().zip(&y_minus_k).zip(&new) {
                *r = ym - nv;
            }
            *s.map_mut(k) = sol.map;
        }
        Ok(warnings)
    }

    /// Same sequence of per-atom CG solves as [`DataTerm::update_features`],
    /// with the sensing products taken over all images at once.
    fn update_all(
        &self,
        dict: &ConvDictionary,
        s: &mut [FeatureSet],
        z: &[FeatureSet],
        u: &[FeatureSet],
        eta: f64,
        cfg: &SolverConfig,
    ) -> Result<usize> {
        let policy = &cfg.conv;
        let op = &self.0.operator;
        let shape = self.0.image_shape();
        let fshape = s.first().map(FeatureSet::map_shape).unwrap_or((0, 0));
        let synth = s
            .par_iter()
            .map(|f| policy.synthesize(dict, f).map(|x| x.to_vector()))
            .collect::<Result<Vec<_>>>()?;
        let mut resid = self.measurement_block() - op.apply_batch(columns(synth, op.cols()).view())?;
        let mut warnings = 0;
        for k in 0..dict.len() {
            let atom = dict.atom(k);
            let old: Vec<&Map> = s.iter().map(|f| f.map(k)).collect();
            let y_minus_k = resid + op.apply_batch(self.atom_block(atom, &old, policy)?.view())?;
            let back = op.apply_adj_batch(y_minus_k.view())?;
            let rhs = (0..s.len())
                .into_par_iter()
                .map(|n| {
                    let img = vec_to_image(back.column(n).to_vec(), shape);
                    let mut r = policy.atom_adjoint(atom, &img)?;
                    r.zip_mut_with(&(z[n].map(k) - u[n].map(k)), |r, d| *r += eta * d);
                    Ok(r.as_standard_layout().into_owned().into_raw_vec_and_offset().0)
                })
                .collect::<Result<Vec<_>>>()?;
            let warm: Vec<Vec<f64>> = s
                .iter()
                .map(|f| f.map(k).as_standard_layout().iter().copied().collect())
                .collect();
            let mut failure = None;
            let normal = |_: &[usize], vs: &[&[f64]]| -> Vec<Vec<f64>> {
                let result = (|| -> Result<Vec<Vec<f64>>> {
                    let maps: Vec<Map> = vs
                        .iter()
                        .map(|v| Map::from_shape_vec(fshape, v.to_vec()).unwrap())
                        .collect();
                    let refs: Vec<&Map> = maps.iter().collect();
                    let block = op.apply_normal_batch(self.atom_block(atom, &refs, policy)?.view())?;
                    maps.par_iter()
                        .enumerate()
                        .map(|(j, m)| {
                            let img = vec_to_image(block.column(j).to_vec(), shape);
                            let mut out = policy.atom_adjoint(atom, &img)?;
                            out.zip_mut_with(m, |o, si| *o += eta * si);
                            Ok(out.into_raw_vec_and_offset().0)
                        })
                        .collect()
                })();
                result.unwrap_or_else(|e| {
                    failure = Some(e);
                    vs.iter().map(|v| v.to_vec()).collect()
                })
            };
            let b_refs: Vec<&[f64]> = rhs.iter().map(Vec::as_slice).collect();
            let w_refs: Vec<&[f64]> = warm.iter().map(Vec::as_slice).collect();
            let outcomes = conjugate_gradient_batch(normal, &b_refs, Some(&w_refs), cfg.cg());
            if let Some(e) = failure {
                return Err(e);
            }
            for (f, o) in s.iter_mut().zip(outcomes) {
                if !o.converged {
                    warnings += 1;
                }
                *f.map_mut(k) = Map::from_shape_vec(fshape, o.x).unwrap();
            }
            let new: Vec<&Map> = s.iter().map(|f| f.map(k)).collect();
            resid = y_minus_k - op.apply_batch(self.atom_block(atom, &new, policy)?.view())?;
        }
        Ok(warnings)
    }

    fn gradient(&self, n: usize, dict: &ConvDictionary, s: &FeatureSet, cfg: &SolverConfig) -> Result<Vec<Array3<f64>>> {
        let r = self.measured_residual(n, dict, s, &cfg.conv)?;
        let back = vec_to_image(self.0.operator.apply_adj(&r)?, self.0.image_shape());
        s.maps().iter().map(|m| cfg.conv.atom_gradient(m, &back)).collect()
    }

    fn misfit(&self, n: usize, dict: &ConvDictionary, s: &FeatureSet, cfg: &SolverConfig) -> Result<(f64, f64)> {
        let r = self.measured_residual(n, dict, s, &cfg.conv)?;
        let y = &self.0.y[n];
        Ok((r.iter().map(|v| v * v).sum(), y.iter().map(|v| v * v).sum()))
    }

    fn normal(&self, dict: &ConvDictionary, s: &FeatureSet, cfg: &SolverConfig) -> Result<FeatureSet> {
        let x = cfg.conv.synthesize(dict, s)?;
        let back = self.0.operator.apply_normal(&x.to_vector())?;
        crate::cfa::adjoint_all(dict, &vec_to_image(back, self.0.image_shape()), cfg)
    }
}

/// One gradient step on every atom from the same snapshot:
/// `d_k += beta * sum_n F_{k,n}^T A^T (y_n - A sum_j F_{j,n} d_j)`.
pub fn dict_gradient_step_cs(
    dict: &ConvDictionary,
    measurements: &MeasurementSet,
    features: &[FeatureSet],
    beta: f64,
    policy: &ConvPolicy,
) -> Result<ConvDictionary> {
    if features.len() != measurements.len() {
        return Err(Error::shape(format!(
            "{} measurement vectors but {} feature sets",
            measurements.len(),
            features.len()
        )));
    }
    if beta == 0.0 {
        return Ok(dict.clone());
    }
    let cfg = SolverConfig {
        conv: *policy,
        ..SolverConfig::default()
    };
    let term = Measured(measurements);
    let per_image = (0..measurements.len())
        .into_par_iter()
        .map(|n| term.gradient(n, dict, &features[n], &cfg))
        .collect::<Result<Vec<_>>>()?;
    let grads = crate::cfa::sum_gradients(dict, per_image);
    crate::cfa::apply_dictionary_step(dict, grads, beta)
}

fn check_geometry(measurements: &MeasurementSet, dict: &ConvDictionary) -> Result<()> {
    if measurements.is_empty() {
        return Err(Error::param("no measurements"));
    }
    let (h, w, c) = measurements.image_shape();
    let (kh, kw) = dict.kernel_shape();
    if dict.channels() != c {
        return Err(Error::shape(format!(
            "dictionary has {} channels, measured images have {c}",
            dict.channels()
        )));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::shape("empty kernel"));
    }
    // projected dictionaries may be wider than the image; the feature maps
    // simply grow to match
    let _ = (h, w);
    Ok(())
}

fn finish(
    measurements: &MeasurementSet,
    dictionary: ConvDictionary,
    state: AdmmState,
    trace: Vec<TraceRow>,
    cfg: &SolverConfig,
) -> Result<ReconstructionResult> {
    let term = Measured(measurements);
    let images = state
        .s
        .iter()
        .map(|s| cfg.conv.synthesize(&dictionary, s))
        .collect::<Result<Vec<_>>>()?;
    let rel_meas_err = (0..measurements.len())
        .map(|n| {
            let (r, y) = term.misfit(n, &dictionary, &state.s[n], cfg)?;
            Ok(if y > 0.0 { (r / y).sqrt() } else { 0.0 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReconstructionResult {
        images,
        features: state.s,
        dictionary,
        trace,
        rel_meas_err,
    })
}

/// Recovers images with a fixed dictionary, starting from zero features.
pub fn reconstruct_prelearned(
    measurements: &MeasurementSet,
    dict: &ConvDictionary,
    config: &SolverConfig,
) -> Result<ReconstructionResult> {
    check_geometry(measurements, dict)?;
    let (h, w, _) = measurements.image_shape();
    let state = AdmmState::zeros(measurements.len(), dict.len(), dict.feature_shape(h, w));
    let (d, state, trace) = run_admm(&Measured(measurements), dict.clone(), state, false, config)?;
    finish(measurements, d, state, trace, config)
}

/// Per-image back-projection `T^T A^T y`, scaled so its largest magnitude is one.
fn backprojection(measurements: &MeasurementSet, dict: &ConvDictionary, policy: &ConvPolicy) -> Result<Vec<FeatureSet>> {
    let shape = measurements.image_shape();
    measurements
        .y
        .par_iter()
        .map(|y| {
            let back = vec_to_image(measurements.operator.apply_adj(y)?, shape);
            let maps = (0..dict.len())
                .map(|k| policy.atom_adjoint(dict.atom(k), &back))
                .collect::<Result<Vec<_>>>()?;
            let peak = maps.iter().flat_map(|m| m.iter()).fold(0.0f64, |a, v| a.max(v.abs()));
            let maps = if peak > 0.0 {
                maps.into_iter().map(|m| m / peak).collect()
            } else {
                maps
            };
            FeatureSet::from_maps(maps)
        })
        .collect()
}

/// Recovers images while learning a `count`-atom dictionary from the
/// measurements alone.
pub fn reconstruct_insitu(
    measurements: &MeasurementSet,
    count: usize,
    kernel: (usize, usize),
    config: &SolverConfig,
) -> Result<ReconstructionResult> {
    let (h, w, c) = measurements.image_shape();
    if kernel.0 == 0 || kernel.1 == 0 || kernel.0 > h || kernel.1 > w {
        return Err(Error::shape(format!(
            "{}x{} kernel does not fit {h}x{w} images",
            kernel.0, kernel.1
        )));
    }
    let mut init = rng::stream(config.seed, "cfa/init");
    let dict = ConvDictionary::random(count, kernel, c, 1, &mut init)?;
    reconstruct_insitu_from(measurements, dict, config)
}

/// [`reconstruct_insitu`] from a given initial dictionary.
pub fn reconstruct_insitu_from(
    measurements: &MeasurementSet,
    dict: ConvDictionary,
    config: &SolverConfig,
) -> Result<ReconstructionResult> {
    check_geometry(measurements, &dict)?;
    let (h, w, _) = measurements.image_shape();
    let mut state = AdmmState::zeros(measurements.len(), dict.len(), dict.feature_shape(h, w));
    if !config.zero_init {
        state.s = backprojection(measurements, &dict, &config.conv)?;
    }
    let (d, state, trace) = run_admm(&Measured(measurements), dict, state, true, config)?;
    finish(measurements, d, state, trace, config)
}
