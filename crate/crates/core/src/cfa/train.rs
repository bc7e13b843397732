use ndarray::Array3;
use rayon::prelude::*;

use super::{
    apply_dictionary_step, dual_update_in_place, feature_cg_solve, residual, shrink_features,
    sum_gradients, SolverConfig,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ConvDictionary, FeatureSet, ImageTensor};

/// ADMM iterates for every image: features `S`, auxiliary `Z`, dual `U`.
#[derive(Clone, Debug)]
pub struct AdmmState {
    pub s: Vec<FeatureSet>,
    pub z: Vec<FeatureSet>,
    pub u: Vec<FeatureSet>,
    pub eta: f64,
    pub iter: usize,
}

impl AdmmState {
    pub fn zeros(images: usize, atoms: usize, map_shape: (usize, usize)) -> Self {
        let mk = || vec![FeatureSet::zeros(atoms, map_shape.0, map_shape.1); images];
        AdmmState {
            s: mk(),
            z: mk(),
            u: mk(),
            eta: 0.0,
            iter: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    /// One-based outer iteration.
    pub iter: usize,
    /// Augmented Lagrangian: fidelity + <U, S-Z> + eta/2 ||S-Z||^2.
    pub objective: f64,
    /// `||x - x_hat|| / ||x||` (or the measurement-domain analogue).
    pub recon_err: f64,
    /// `||S - Z||` over all images.
    pub primal_residual: f64,
    pub eta: f64,
    /// `1/2 sum ||x - x_hat||^2` (or measurement-domain analogue).
    pub fidelity: f64,
    /// Feature solves in this iteration that hit the CG iteration cap.
    pub cg_warnings: usize,
}

#[derive(Clone, Debug)]
pub struct CfaModel {
    pub dictionary: ConvDictionary,
    pub state: AdmmState,
    pub trace: Vec<TraceRow>,
}

impl CfaModel {
    pub fn features(&self) -> &[FeatureSet] {
        &self.state.s
    }

    pub fn cg_warnings(&self) -> usize {
        self.trace.iter().map(|r| r.cg_warnings).sum()
    }
}

/// The data-fit half of the ADMM problem; everything else is shared between
/// the plain and compressive variants.
pub(crate) trait DataTerm: Sync {
    fn len(&self) -> usize;

    /// Sequential per-atom feature solves for image `n` against `z - u`
    /// (`u` already divided by eta); returns the number of solves that did
    /// not converge.
    fn update_features(
        &self,
        n: usize,
        dict: &ConvDictionary,
        s: &mut FeatureSet,
        z: &FeatureSet,
        u: &FeatureSet,
        eta: f64,
        cfg: &SolverConfig,
    ) -> Result<usize>;

    /// [`DataTerm::update_features`] for every image.
    fn update_all(
        &self,
        dict: &ConvDictionary,
        s: &mut [FeatureSet],
        z: &[FeatureSet],
        u: &[FeatureSet],
        eta: f64,
        cfg: &SolverConfig,
    ) -> Result<usize> {
        let warnings = s
            .par_iter_mut()
            .enumerate()
            .map(|(n, s)| self.update_features(n, dict, s, &z[n], &u[n], eta, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(warnings.into_iter().sum())
    }

    /// Per-atom gradient of the negative fidelity for image `n`.
    fn gradient(&self, n: usize, dict: &ConvDictionary, s: &FeatureSet, cfg: &SolverConfig)
        -> Result<Vec<Array3<f64>>>;

    /// `(||data - model||^2, ||data||^2)` for image `n`.
    fn misfit(&self, n: usize, dict: &ConvDictionary, s: &FeatureSet, cfg: &SolverConfig) -> Result<(f64, f64)>;

    /// Gram operator of the data term applied to a feature set.
    fn normal(&self, dict: &ConvDictionary, s: &FeatureSet, cfg: &SolverConfig) -> Result<FeatureSet>;
}

/// Largest eigenvalue of the data-term Gram operator, by power iteration.
pub(crate) fn curvature<T: DataTerm>(
    term: &T,
    dict: &ConvDictionary,
    map_shape: (usize, usize),
    cfg: &SolverConfig,
) -> Result<f64> {
    let mut rng = rng::stream(cfg.seed, "cfa/curvature");
    let mut v = FeatureSet::zeros(dict.len(), map_shape.0, map_shape.1);
    for k in 0..dict.len() {
        v.map_mut(k).mapv_inplace(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
    }
    let mut lambda = 0.0;
    for _ in 0..30 {
        let norm = v.norm_sq().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        for k in 0..v.len() {
            v.map_mut(k).mapv_inplace(|x| x / norm);
        }
        let w = term.normal(dict, &v, cfg)?;
        let next = w.norm_sq().sqrt();
        let done = (next - lambda).abs() <= 1e-4 * next;
        lambda = next;
        v = w;
        if done {
            break;
        }
    }
    Ok(lambda)
}

pub(crate) struct Images<'a>(pub &'a [ImageTensor]);

impl DataTerm for Images<'_> {
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
        let x = &self.0[n];
        let mut recon = policy.synthesize(dict, s)?;
        let mut warnings = 0;
        for k in 0..dict.len() {
            let atom = dict.atom(k);
            let old = policy.synthesize_atom(atom, s.map(k))?;
            let mut x_minus_k = x.sub(&recon);
            x_minus_k.axpy(1.0, &old);
            let sol = feature_cg_solve(atom, &x_minus_k, z.map(k), u.map(k), eta, Some(s.map(k)), cfg)?;
            if !sol.converged {
                warnings += 1;
            }
            let new = policy.synthesize_atom(atom, &sol.map)?;
            recon.axpy(-1.0, &old);
            recon.axpy(1.0, &new);
            *s.map_mut(k) = sol.map;
        }
        Ok(warnings)
    }

    fn gradient(&self, n: usize, dict: &ConvDictionary, s: &FeatureSet, cfg: &SolverConfig) -> Result<Vec<Array3<f64>>> {
        let r = residual(dict, &self.0[n], s, &cfg.conv)?;
        s.maps().iter().map(|m| cfg.conv.atom_gradient(m, &r)).collect()
    }

    fn misfit(&self, n: usize, dict: &ConvDictionary, s: &FeatureSet, cfg: &SolverConfig) -> Result<(f64, f64)> {
        let r = residual(dict, &self.0[n], s, &cfg.conv)?;
        Ok((r.norm_sq(), self.0[n].norm_sq()))
    }

    fn normal(&self, dict: &ConvDictionary, s: &FeatureSet, cfg: &SolverConfig) -> Result<FeatureSet> {
        let x = cfg.conv.synthesize(dict, s)?;
        adjoint_all(dict, &x, cfg)
    }
}

/// `T^T x` for every atom.
pub(crate) fn adjoint_all(dict: &ConvDictionary, x: &ImageTensor, cfg: &SolverConfig) -> Result<FeatureSet> {
    let maps = (0..dict.len())
        .map(|k| cfg.conv.atom_adjoint(dict.atom(k), x))
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::from_maps(maps)
}

/// `(||S-Z||^2, <U, S-Z>)` summed over images.
fn feature_sums(state: &AdmmState) -> (f64, f64) {
    let mut primal = 0.0;
    let mut cross = 0.0;
    for ((s, z), u) in state.s.iter().zip(&state.z).zip(&state.u) {
        for k in 0..s.len() {
            for ((sv, zv), uv) in s.map(k).iter().zip(z.map(k).iter()).zip(u.map(k).iter()) {
                let d = sv - zv;
                primal += d * d;
                cross += uv * d;
            }
        }
    }
    (primal, cross)
}

/// Nesterov extrapolation of `Z` and `U` with a restart whenever the
/// combined residual fails to decrease.
struct Momentum {
    alpha: f64,
    residual: f64,
    z_hat: Vec<FeatureSet>,
    u_hat: Vec<FeatureSet>,
}

impl Momentum {
    fn new(state: &AdmmState) -> Self {
        Momentum {
            alpha: 1.0,
            residual: f64::INFINITY,
            z_hat: state.z.clone(),
            u_hat: state.u.clone(),
        }
    }

    fn advance(&mut self, state: &AdmmState, z_prev: Vec<FeatureSet>, u_prev: Vec<FeatureSet>, eta: f64) {
        let c = dist_sq(&state.u, &self.u_hat) / eta + eta * dist_sq(&state.z, &self.z_hat);
        if c < 0.999 * self.residual {
            let next = 0.5 * (1.0 + (1.0 + 4.0 * self.alpha * self.alpha).sqrt());
            let w = (self.alpha - 1.0) / next;
            self.z_hat = extrapolate(&state.z, &z_prev, w);
            self.u_hat = extrapolate(&state.u, &u_prev, w);
            self.alpha = next;
            self.residual = c;
        } else {
            self.alpha = 1.0;
            self.z_hat = state.z.clone();
            self.u_hat = state.u.clone();
            self.residual /= 0.999;
        }
    }
}

fn dist_sq(a: &[FeatureSet], b: &[FeatureSet]) -> f64 {
    let parts: Vec<f64> = a
        .par_iter()
        .zip(b)
        .map(|(x, y)| {
            x.maps()
                .iter()
                .zip(y.maps())
                .map(|(p, q)| p.iter().zip(q.iter()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>())
                .sum::<f64>()
        })
        .collect();
    // summed in image order so the result does not depend on the thread count
    parts.iter().sum()
}

/// `cur + w (cur - prev)` per image.
fn extrapolate(cur: &[FeatureSet], prev: &[FeatureSet], w: f64) -> Vec<FeatureSet> {
    cur.par_iter()
        .zip(prev)
        .map(|(c, p)| {
            let maps = c
                .maps()
                .iter()
                .zip(p.maps())
                .map(|(cm, pm)| cm + &((cm - pm) * w))
                .collect();
            FeatureSet::from_maps(maps).expect("shapes match")
        })
        .collect()
}

/// Runs the cyclic D, S, Z, U updates until `max_outer` or the relative
/// error drops below `rel_tol`.
pub(crate) fn run_admm<T: DataTerm>(
    term: &T,
    mut dict: ConvDictionary,
    mut state: AdmmState,
    learn_dictionary: bool,
    cfg: &SolverConfig,
) -> Result<(ConvDictionary, AdmmState, Vec<TraceRow>)> {
    cfg.validate()?;
    let n_images = term.len();
    let mut trace: Vec<TraceRow> = Vec::with_capacity(cfg.max_outer);
    let mut baseline: Option<f64> = None;

    let map_shape = state
        .s
        .first()
        .map(FeatureSet::map_shape)
        .ok_or_else(|| Error::param("need at least one image"))?;
    let mut scale = 1.0;
    let mut momentum = cfg.accelerate.then(|| Momentum::new(&state));
    for t in 0..cfg.max_outer {
        if cfg.eta_relative && (t == 0 || (learn_dictionary && cfg.beta > 0.0)) {
            let l = curvature(term, &dict, map_shape, cfg)?;
            if l > 0.0 && l.is_finite() {
                scale = l;
            }
        }
        let eta = cfg.eta_at(t) * scale;

        if learn_dictionary && cfg.beta > 0.0 {
            let per_image = (0..n_images)
                .into_par_iter()
                .map(|n| term.gradient(n, &dict, &state.s[n], cfg))
                .collect::<Result<Vec<_>>>()?;
            let grads = sum_gradients(&dict, per_image);
            dict = apply_dictionary_step(&dict, grads, cfg.beta)?;
            if cfg.normalize_atoms {
                dict.normalize_atoms();
            }
        }

        let extrapolated = momentum.as_ref().map(|m| (m.z_hat.clone(), m.u_hat.clone()));
        let previous = extrapolated.map(|(z_hat, u_hat)| {
            (
                std::mem::replace(&mut state.z, z_hat),
                std::mem::replace(&mut state.u, u_hat),
            )
        });

        // U is kept unscaled; the feature solve takes the scaled dual U/eta.
        let u_scaled: Vec<FeatureSet> = state.u.par_iter().map(|u| u.scaled(1.0 / eta)).collect();
        let warnings = term.update_all(&dict, &mut state.s, &state.z, &u_scaled, eta, cfg)?;
        state
            .s
            .par_iter()
            .zip(state.z.par_iter_mut())
            .zip(state.u.par_iter_mut())
            .try_for_each(|((s, z), u)| -> Result<()> {
                let target = cfg.target_nonzeros(s.element_count());
                shrink_features(s, u, eta, target, z)?;
                dual_update_in_place(u, s, z, eta);
                Ok(())
            })?;
        if let (Some(m), Some((z_prev, u_prev))) = (momentum.as_mut(), previous) {
            m.advance(&state, z_prev, u_prev, eta);
        }
        state.eta = eta;
        state.iter = t + 1;

        let misfits = (0..n_images)
            .into_par_iter()
            .map(|n| term.misfit(n, &dict, &state.s[n], cfg))
            .collect::<Result<Vec<_>>>()?;
        let (res_sq, data_sq) = misfits
            .iter()
            .fold((0.0, 0.0), |(a, b), (r, d)| (a + r, b + d));
        let (primal, cross) = feature_sums(&state);
        let fidelity = 0.5 * res_sq;
        let objective = fidelity + cross + 0.5 * eta * primal;
        let recon_err = if data_sq > 0.0 { (res_sq / data_sq).sqrt() } else { 0.0 };
        let row = TraceRow {
            iter: t + 1,
            objective,
            recon_err,
            primal_residual: primal.sqrt(),
            eta,
            fidelity,
            cg_warnings: warnings,
        };
        trace.push(row);

        let base = *baseline.get_or_insert((0.5 * data_sq).max(objective.abs()));
        if !objective.is_finite() || (base > 0.0 && objective > 1e6 * base) {
            return Err(Error::Numeric(format!(
                "ADMM diverged at iteration {}: objective {:e} vs initial {:e}; last trace rows: {:?}",
                t + 1,
                objective,
                base,
                &trace[trace.len().saturating_sub(3)..]
            )));
        }
        if cfg.rel_tol > 0.0 && recon_err < cfg.rel_tol {
            break;
        }
    }
    Ok((dict, state, trace))
}

pub(crate) fn check_images(images: &[ImageTensor], kernel: (usize, usize)) -> Result<(usize, usize, usize)> {
    let first = images
        .first()
        .ok_or_else(|| Error::param("need at least one image"))?;
    let shape = first.shape();
    if let Some(n) = images.iter().position(|x| x.shape() != shape) {
        return Err(Error::shape(format!(
            "image {n} is {:?}, expected {:?}",
            images[n].shape(),
            shape
        )));
    }
    if kernel.0 == 0 || kernel.1 == 0 || kernel.0 > shape.0 || kernel.1 > shape.1 {
        return Err(Error::shape(format!(
            "{}x{} kernel does not fit {}x{} images",
            kernel.0, kernel.1, shape.0, shape.1
        )));
    }
    if let Some(n) = images.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("image {n} has non-finite pixels")));
    }
    Ok(shape)
}

/// Learns a `count`-atom dictionary of `kernel` size from `images`.
pub fn train_cfa(
    images: &[ImageTensor],
    count: usize,
    kernel: (usize, usize),
    config: &SolverConfig,
) -> Result<CfaModel> {
    let (_, _, c) = check_images(images, kernel)?;
    let mut init = rng::stream(config.seed, "cfa/init");
    let dict = ConvDictionary::random(count, kernel, c, 1, &mut init)?;
    train_cfa_from(images, dict, config)
}

/// [`train_cfa`] starting from a given dictionary.
pub fn train_cfa_from(images: &[ImageTensor], dict: ConvDictionary, config: &SolverConfig) -> Result<CfaModel> {
    let (h, w, c) = check_images(images, dict.kernel_shape())?;
    if dict.channels() != c {
        return Err(Error::shape(format!(
            "dictionary has {} channels, images have {c}",
            dict.channels()
        )));
    }
    let state = AdmmState::zeros(images.len(), dict.len(), dict.feature_shape(h, w));
    let (dictionary, state, trace) = run_admm(&Images(images), dict, state, true, config)?;
    Ok(CfaModel {
        dictionary,
        state,
        trace,
    })
}

/// Convolutional sparse coding with a frozen dictionary.
pub fn sparse_code(images: &[ImageTensor], dict: &ConvDictionary, config: &SolverConfig) -> Result<CfaModel> {
    let (h, w, c) = check_images(images, dict.kernel_shape())?;
    if dict.channels() != c {
        return Err(Error::shape(format!(
            "dictionary has {} channels, images have {c}",
            dict.channels()
        )));
    }
    let state = AdmmState::zeros(images.len(), dict.len(), dict.feature_shape(h, w));
    let (dictionary, state, trace) = run_admm(&Images(images), dict.clone(), state, false, config)?;
    Ok(CfaModel {
        dictionary,
        state,
        trace,
    })
}
