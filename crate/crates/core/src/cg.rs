//! Matrix-free conjugate gradient for symmetric positive definite systems.

use crate::tensor::dot;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgSettings {
    /// Stop once `||b - A x|| <= tol * ||b||`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgSettings {
    fn default() -> Self {
        CgSettings {
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `||b - A x|| / ||b||` of the returned iterate (recursive estimate).
    pub rel_residual: f64,
    pub converged: bool,
}

/// One CG system advanced step by step: [`Cg::pending`] names the vector the
/// operator must be applied to next, [`Cg::feed`] supplies the product.
struct Cg {
    x: Vec<f64>,
    r: Vec<f64>,
    p: Vec<f64>,
    b: Vec<f64>,
    rs: f64,
    b_norm: f64,
    best: (f64, Vec<f64>),
    it: usize,
    settings: CgSettings,
    phase: Phase,
}

enum Phase {
    Warm,
    Step,
    Done(bool),
}

impl Cg {
    fn new(b: &[f64], x0: Option<&[f64]>, settings: CgSettings) -> Self {
        let n = b.len();
        let b_norm = dot(b, b).sqrt();
        let x = match x0 {
            Some(x0) if b_norm > 0.0 => x0.to_vec(),
            _ => vec![0.0; n],
        };
        let mut cg = Cg {
            r: Vec::new(),
            p: Vec::new(),
            b: b.to_vec(),
            rs: 0.0,
            b_norm,
            best: (0.0, Vec::new()),
            it: 0,
            settings,
            phase: Phase::Warm,
            x,
        };
        if b_norm == 0.0 {
            cg.best = (0.0, cg.x.clone());
            cg.phase = Phase::Done(true);
        } else if cg.x.iter().all(|v| *v == 0.0) {
            cg.start(b.to_vec());
        }
        cg
    }

    fn start(&mut self, r: Vec<f64>) {
        self.rs = dot(&r, &r);
        self.best = (self.rs.sqrt() / self.b_norm, self.x.clone());
        self.p = r.clone();
        self.r = r;
        self.phase = if self.best.0 <= self.settings.tol {
            Phase::Done(true)
        } else if self.settings.max_iter == 0 {
            Phase::Done(false)
        } else {
            Phase::Step
        };
    }

    fn pending(&self) -> Option<&[f64]> {
        match self.phase {
            Phase::Warm => Some(&self.x),
            Phase::Step => Some(&self.p),
            Phase::Done(_) => None,
        }
    }

    fn feed(&mut self, ap: Vec<f64>) {
        match self.phase {
            Phase::Warm => {
                let r = self.b.iter().zip(&ap).map(|(bi, ai)| bi - ai).collect();
                self.start(r);
            }
            Phase::Step => self.step(ap),
            Phase::Done(_) => {}
        }
    }

    fn step(&mut self, ap: Vec<f64>) {
        self.it += 1;
        let pap = dot(&self.p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            self.phase = Phase::Done(false);
            return;
        }
        let alpha = self.rs / pap;
        for (xi, pi) in self.x.iter_mut().zip(&self.p) {
            *xi += alpha * pi;
        }
        for (ri, api) in self.r.iter_mut().zip(&ap) {
            *ri -= alpha * api;
        }
        let rs_new = dot(&self.r, &self.r);
        let rel = rs_new.sqrt() / self.b_norm;
        if rel < self.best.0 {
            self.best = (rel, self.x.clone());
        }
        if rel <= self.settings.tol {
            self.best = (rel, std::mem::take(&mut self.x));
            self.phase = Phase::Done(true);
            return;
        }
        if self.it >= self.settings.max_iter {
            self.phase = Phase::Done(false);
            return;
        }
        let beta = rs_new / self.rs;
        for (pi, ri) in self.p.iter_mut().zip(&self.r) {
            *pi = ri + beta * *pi;
        }
        self.rs = rs_new;
    }

    fn finish(self) -> CgOutcome {
        let converged = matches!(self.phase, Phase::Done(true));
        CgOutcome {
            x: self.best.1,
            iterations: if converged { self.it } else { self.settings.max_iter },
            rel_residual: self.best.0,
            converged,
        }
    }
}

/// Solves `A x = b` starting from `x0`. On non-convergence the iterate with
/// the smallest residual seen is returned and `converged` is false.
pub fn conjugate_gradient<F>(mut op: F, b: &[f64], x0: Option<&[f64]>, settings: CgSettings) -> CgOutcome
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut cg = Cg::new(b, x0, settings);
    while let Some(v) = cg.pending() {
        let av = op(v);
        cg.feed(av);
    }
    cg.finish()
}

/// Runs independent CG solves in lockstep so that `op` can apply the
/// operator to all active vectors at once. Each system follows exactly the
/// iteration of [`conjugate_gradient`].
pub fn conjugate_gradient_batch<F>(
    mut op: F,
    bs: &[&[f64]],
    x0s: Option<&[&[f64]]>,
    settings: CgSettings,
) -> Vec<CgOutcome>
where
    F: FnMut(&[usize], &[&[f64]]) -> Vec<Vec<f64>>,
{
    let mut systems: Vec<Cg> = bs
        .iter()
        .enumerate()
        .map(|(i, b)| Cg::new(b, x0s.map(|x| x[i]), settings))
        .collect();
    loop {
        let (ids, vs): (Vec<usize>, Vec<&[f64]>) = systems
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.pending().map(|v| (i, v)))
            .unzip();
        if ids.is_empty() {
            break;
        }
        let products = op(&ids, &vs);
        for (i, av) in ids.into_iter().zip(products) {
            systems[i].feed(av);
        }
    }
    systems.into_iter().map(Cg::finish).collect()
}
