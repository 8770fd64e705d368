//! Batched maximum-likelihood baseline under the Gaussian noise model.
//!
//! The objective is `sum_k (y_k - h_k(x))^T R_k^+ (y_k - h_k(x))` with `R_k`
//! built from the observed counts. Residuals are whitened by a factor
//! `F_k` with `F_k F_k^T = R_k^+` and minimized by Levenberg-Marquardt with
//! Marquardt scaling of the damping term.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::circuits::ExperimentDesign;
use crate::data::{CovarianceModel, Observation};
use crate::error::{Error, Result};
use crate::forward::{Linearization, Observer};
use crate::ptm::{psd_pseudo_inverse_factor, PINV_REL_TOL};
use crate::scalar::Real;

pub const INITIAL_DAMPING: f64 = 1e-3;
pub const GRADIENT_TOL: f64 = 1e-8;
pub const STEP_TOL: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 200;
/// Floor applied to probabilities inside the exact log-likelihood.
pub const PROBABILITY_FLOOR: f64 = 1e-10;

const MAX_DAMPING: f64 = 1e16;

struct Term<T: Real> {
    sequence: Vec<usize>,
    y: DVector<T>,
    whitener: DMatrix<T>,
}

/// Observations up to a batch boundary, with their noise weights.
pub struct BatchObjective<'o, 'a, T: Real> {
    observer: &'o Observer<'a, T>,
    terms: Vec<Term<T>>,
}

impl<'o, 'a, T: Real> BatchObjective<'o, 'a, T> {
    pub fn new(
        observer: &'o Observer<'a, T>,
        design: &ExperimentDesign,
        observations: &[Observation],
        covariance: CovarianceModel,
    ) -> Result<Self> {
        let terms = observations
            .iter()
            .map(|o| {
                let idx = design
                    .circuit_index(&o.circuit_id)
                    .ok_or_else(|| Error::StreamMismatch(format!("circuit {:?} not in design", o.circuit_id)))?;
                let r = covariance.covariance::<T>(o)?;
                Ok(Term {
                    sequence: observer.compile(&design.circuits[idx].gates)?,
                    y: o.frequency_vector(),
                    whitener: psd_pseudo_inverse_factor(&r, T::lit(PINV_REL_TOL))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { observer, terms })
    }

    /// Scalar-weight objective built from explicit pieces, for callers that
    /// already hold `y_k` and `R_k`.
    pub fn from_parts(observer: &'o Observer<'a, T>, parts: Vec<(Vec<usize>, DVector<T>, DMatrix<T>)>) -> Result<Self> {
        let terms = parts
            .into_iter()
            .map(|(sequence, y, r)| {
                Ok(Term {
                    sequence,
                    y,
                    whitener: psd_pseudo_inverse_factor(&r, T::lit(PINV_REL_TOL))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { observer, terms })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Quadratic form `sum r^T R^+ r` evaluated without whitening.
    pub fn objective(&self, x_f: &DVector<T>) -> Result<T> {
        let inst = self.observer.instance(x_f)?;
        let terms: Vec<T> = self
            .terms
            .par_iter()
            .map(|t| {
                let res = &t.y - inst.probabilities(&t.sequence);
                let rinv = &t.whitener * t.whitener.transpose();
                (res.transpose() * rinv * res)[(0, 0)]
            })
            .collect();
        Ok(terms.into_iter().fold(T::zero(), |a, b| a + b))
    }

    /// Stacked whitened residuals `F_k^T (y_k - h_k)`.
    pub fn whitened_residuals(&self, x_f: &DVector<T>) -> Result<DVector<T>> {
        let inst = self.observer.instance(x_f)?;
        let blocks: Vec<DVector<T>> = self
            .terms
            .par_iter()
            .map(|t| t.whitener.tr_mul(&(&t.y - inst.probabilities(&t.sequence))))
            .collect();
        Ok(stack_vectors(&blocks))
    }

    /// Whitened residuals and their Jacobian `-F_k^T H_k` at `lin`.
    pub fn residuals_and_jacobian(&self, lin: &Linearization<T>) -> (DVector<T>, DMatrix<T>) {
        let blocks: Vec<(DVector<T>, DMatrix<T>)> = self
            .terms
            .par_iter()
            .map(|t| {
                let (h, jac) = self.observer.predict_and_jacobian(lin, &t.sequence);
                let res = t.whitener.tr_mul(&(&t.y - h));
                let j = -(t.whitener.tr_mul(&jac));
                (res, j)
            })
            .collect();
        let rows: usize = blocks.iter().map(|b| b.0.len()).sum();
        let cols = self.observer.fogi().n_fogi();
        let mut r = DVector::zeros(rows);
        let mut j = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for (rb, jb) in blocks {
            let n = rb.len();
            r.rows_mut(at, n).copy_from(&rb);
            j.rows_mut(at, n).copy_from(&jb);
            at += n;
        }
        (r, j)
    }
}

fn stack_vectors<T: Real>(blocks: &[DVector<T>]) -> DVector<T> {
    let n = blocks.iter().map(|b| b.len()).sum();
    DVector::from_iterator(n, blocks.iter().flat_map(|b| b.iter().copied()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Gradient,
    Step,
    MaxIterations,
    /// Damping grew without finding a decrease.
    Stalled,
    /// A trial point produced a non-finite objective.
    NonFinite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    pub reason: StopReason,
}

impl ConvergenceReport {
    pub fn failed(&self) -> bool {
        self.reason == StopReason::NonFinite
    }
}

/// Levenberg-Marquardt from `x_init`. On a non-finite trial objective the
/// best point so far is returned with [`StopReason::NonFinite`].
pub fn fit<T: Real>(
    objective: &BatchObjective<'_, '_, T>,
    x_init: &DVector<T>,
) -> Result<(DVector<T>, ConvergenceReport)> {
    if objective.is_empty() {
        return Err(Error::invalid("cannot fit an empty batch"));
    }
    let observer = objective.observer;
    let mut x = x_init.clone();
    let mut lin = observer.linearize(&x)?;
    let (mut res, mut jac) = objective.residuals_and_jacobian(&lin);
    let mut cost = res.norm_squared();
    if !cost.is_finite() {
        return Err(Error::Numerical("objective is not finite at the starting point".into()));
    }
    let mut damping = T::lit(INITIAL_DAMPING);
    let mut iterations = 0;
    let mut gradient_norm;
    let reason = loop {
        let gradient = jac.tr_mul(&res);
        gradient_norm = gradient.norm();
        if gradient_norm < T::lit(GRADIENT_TOL) {
            break StopReason::Gradient;
        }
        if iterations >= MAX_ITERATIONS {
            break StopReason::MaxIterations;
        }
        iterations += 1;
        let normal = jac.tr_mul(&jac);
        let scale = normal.diagonal().map(|d| if d > T::zero() { d } else { T::one() });
        let mut outcome = None;
        while damping < T::lit(MAX_DAMPING) {
            let mut a = normal.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += damping * scale[i];
            }
            let Some(chol) = Cholesky::new(a) else {
                damping *= T::lit(10.0);
                continue;
            };
            let step = -chol.solve(&gradient);
            let trial = &x + &step;
            let trial_res = objective.whitened_residuals(&trial)?;
            let trial_cost = trial_res.norm_squared();
            if !trial_cost.is_finite() {
                outcome = Some(Err(()));
                break;
            }
            if trial_cost < cost {
                damping /= T::lit(10.0);
                outcome = Some(Ok((trial, step.norm(), trial_cost)));
                break;
            }
            damping *= T::lit(10.0);
        }
        match outcome {
            None => break StopReason::Stalled,
            Some(Err(())) => break StopReason::NonFinite,
            Some(Ok((trial, step_norm, trial_cost))) => {
                x = trial;
                cost = trial_cost;
                lin = observer.linearize(&x)?;
                (res, jac) = objective.residuals_and_jacobian(&lin);
                if step_norm < T::lit(STEP_TOL) {
                    gradient_norm = jac.tr_mul(&res).norm();
                    break StopReason::Step;
                }
            }
        }
    };
    Ok((
        x,
        ConvergenceReport {
            iterations,
            objective: cost.as_f64(),
            gradient_norm: gradient_norm.as_f64(),
            reason,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint<T: Real> {
    pub boundary_power: usize,
    pub n_circuits: usize,
    pub x: DVector<T>,
    pub report: ConvergenceReport,
}

/// Cumulative fits at the end of each germ-power batch, each warm-started
/// from the previous solution. `observations` are in stream order.
pub fn batched_curve<T: Real>(
    observer: &Observer<'_, T>,
    design: &ExperimentDesign,
    observations: &[Observation],
    boundaries: &[usize],
    covariance: CovarianceModel,
    x_init: &DVector<T>,
) -> Result<Vec<CurvePoint<T>>> {
    let mut ends = Vec::with_capacity(boundaries.len());
    for &power in boundaries {
        let mut end = 0;
        let mut found = false;
        for b in &design.batches {
            end += b.circuits.len();
            if b.power == power {
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::invalid(format!("no design batch has power {power}")));
        }
        if ends.last().is_some_and(|&(_, e)| e > end) {
            return Err(Error::invalid("batch boundaries must be increasing"));
        }
        if end > observations.len() {
            return Err(Error::StreamMismatch(format!(
                "boundary {power} needs {end} observations, have {}",
                observations.len()
            )));
        }
        ends.push((power, end));
    }
    let mut x = x_init.clone();
    let mut curve = Vec::with_capacity(ends.len());
    for (power, end) in ends {
        let objective = BatchObjective::new(observer, design, &observations[..end], covariance)?;
        let (xk, report) = fit(&objective, &x)?;
        x = xk.clone();
        curve.push(CurvePoint {
            boundary_power: power,
            n_circuits: end,
            x: xk,
            report,
        });
    }
    Ok(curve)
}

/// Multinomial log-likelihood `sum_k sum_j s_kj ln max(p_kj, floor)`.
pub fn log_likelihood<T: Real>(
    observer: &Observer<'_, T>,
    design: &ExperimentDesign,
    observations: &[Observation],
    x_f: &DVector<T>,
) -> Result<f64> {
    let inst = observer.instance(x_f)?;
    let mut total = 0.0;
    for o in observations {
        let idx = design
            .circuit_index(&o.circuit_id)
            .ok_or_else(|| Error::StreamMismatch(format!("circuit {:?} not in design", o.circuit_id)))?;
        let p = inst.probabilities(&observer.compile(&design.circuits[idx].gates)?);
        for (&s, q) in o.counts.iter().zip(p.iter()) {
            total += s as f64 * q.as_f64().max(PROBABILITY_FLOOR).ln();
        }
    }
    Ok(total)
}

/// Curve CSV: `boundary_power, <param labels>..., objective, iterations`.
pub fn write_curve_csv<T: Real, W: Write>(curve: &[CurvePoint<T>], labels: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["boundary_power".to_string()];
    header.extend(labels.iter().cloned());
    header.push("objective".into());
    header.push("iterations".into());
    w.write_record(&header)?;
    for pt in curve {
        if pt.x.len() != labels.len() {
            return Err(Error::invalid("curve point and label count differ"));
        }
        let mut row = vec![pt.boundary_power.to_string()];
        row.extend(pt.x.iter().map(|v| format!("{:e}", v.as_f64())));
        row.push(format!("{:e}", pt.report.objective));
        row.push(pt.report.iterations.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a curve CSV back as `(boundary_power, x)` pairs.
pub fn read_curve_csv<R: std::io::Read>(input: R) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut r = csv::Reader::from_reader(input);
    let n_params = r.headers()?.len().saturating_sub(3);
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("curve CSV: {e}")));
        let power = row[0]
            .parse::<usize>()
            .map_err(|e| Error::Parse(format!("curve CSV: {e}")))?;
        let x = (1..=n_params).map(|i| parse(&row[i])).collect::<Result<Vec<_>>>()?;
        out.push((power, x));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::{build_design, standard_fiducials_and_germs};
    use crate::data::simulate_design;
    use crate::gauge::{model_fogi_basis, FogiBasis};
    use crate::model::GateSetModel;

    fn setup() -> (GateSetModel<f64>, FogiBasis<f64>) {
        let m = GateSetModel::standard(1).unwrap();
        let f = model_fogi_basis(&m).unwrap();
        (m, f)
    }

    fn design(max_power: usize, seed: u64) -> ExperimentDesign {
        build_design(1, &standard_fiducials_and_germs(1).unwrap(), max_power, 1000, seed).unwrap()
    }

    #[test]
    fn objective_examples() {
        let (m, f) = setup();
        let obs = Observer::new(&m, &f);
        let zero = DVector::zeros(f.n_fogi());
        // ideal empty circuit predicts (1, 0)
        let r = DMatrix::from_row_slice(2, 2, &[0.01, -0.01, -0.01, 0.01]);
        let exact =
            BatchObjective::from_parts(&obs, vec![(vec![], DVector::from_vec(vec![1.0, 0.0]), r.clone())]).unwrap();
        assert!(exact.objective(&zero).unwrap() < 1e-20);

        // residual (-0.1, 0.1) against R^+ with (1,-1)/sqrt2 weight 1/(0.02) = 50
        // gives 0.02 * 50 = 1
        let one =
            BatchObjective::from_parts(&obs, vec![(vec![], DVector::from_vec(vec![0.9, 0.1]), r.clone())]).unwrap();
        assert!((one.objective(&zero).unwrap() - 1.0).abs() < 1e-12);
        let shifted = BatchObjective::from_parts(&obs, vec![(vec![], DVector::from_vec(vec![1.2, 0.4]), r)]).unwrap();
        assert!((shifted.objective(&zero).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn whitening_is_consistent() {
        let (m, f) = setup();
        let obs = Observer::new(&m, &f);
        let d = design(4, 2);
        let x = f.to_fogi(&m.random_truth_model(1e-2, 0.5, 2).unwrap()).unwrap();
        let data = simulate_design(&obs, &x, &d, 2, false).unwrap();
        let objective = BatchObjective::new(&obs, &d, &data, CovarianceModel::Dirichlet).unwrap();
        let a = objective.objective(&x).unwrap();
        let b = objective.whitened_residuals(&x).unwrap().norm_squared();
        assert!((a - b).abs() <= 1e-10 * a.max(1.0));

        // residual Jacobian against finite differences
        let lin = obs.linearize(&x).unwrap();
        let (r0, jac) = objective.residuals_and_jacobian(&lin);
        assert!((r0 - objective.whitened_residuals(&x).unwrap()).amax() < 1e-12);
        let h = 1e-6;
        for i in 0..f.n_fogi() {
            let mut p = x.clone();
            p[i] += h;
            let mut q = x.clone();
            q[i] -= h;
            let fd =
                (objective.whitened_residuals(&p).unwrap() - objective.whitened_residuals(&q).unwrap()) / (2.0 * h);
            // whitening multiplies by up to ~sqrt(M) so compare relative to scale
            assert!((fd - jac.column(i)).amax() < 1e-6 * jac.amax().max(1.0));
        }
    }

    #[test]
    fn noise_free_recovery() {
        let (m, f) = setup();
        let obs = Observer::new(&m, &f);
        let d = design(32, 5);
        let x = f.to_fogi(&m.random_truth_model(1e-2, 0.5, 5).unwrap()).unwrap();
        let data = simulate_design(&obs, &x, &d, 5, true).unwrap();
        let objective = BatchObjective::new(&obs, &d, &data, CovarianceModel::Dirichlet).unwrap();
        let (xhat, report) = fit(&objective, &DVector::zeros(f.n_fogi())).unwrap();
        assert!((&xhat - &x).norm() < 1e-6, "{report:?}");

        let (again, report) = fit(&objective, &x).unwrap();
        assert!(report.iterations <= 2);
        assert!((again - &x).norm() < 1e-8);
    }

    #[test]
    fn sampled_fit_is_optimal_and_deterministic() {
        let (m, f) = setup();
        let obs = Observer::new(&m, &f);
        let d = design(8, 6);
        let x = f.to_fogi(&m.random_truth_model(1e-2, 0.5, 6).unwrap()).unwrap();
        let data = simulate_design(&obs, &x, &d, 6, false).unwrap();
        let objective = BatchObjective::new(&obs, &d, &data, CovarianceModel::Dirichlet).unwrap();
        let start = DVector::zeros(f.n_fogi());
        let (a, ra) = fit(&objective, &start).unwrap();
        let (b, rb) = fit(&objective, &start).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(objective.objective(&a).unwrap() <= objective.objective(&x).unwrap());
        assert!(!ra.failed());
        assert!(log_likelihood(&obs, &d, &data, &a).unwrap() < 0.0);
    }

    #[test]
    fn curve_points_and_csv() {
        let (m, f) = setup();
        let obs = Observer::new(&m, &f);
        let d = design(8, 7);
        let x = f.to_fogi(&m.random_truth_model(1e-2, 0.5, 7).unwrap()).unwrap();
        let data = simulate_design(&obs, &x, &d, 7, false).unwrap();
        let zero = DVector::zeros(f.n_fogi());
        let powers: Vec<usize> = d.batches.iter().map(|b| b.power).collect();
        let curve = batched_curve(&obs, &d, &data, &powers, CovarianceModel::Dirichlet, &zero).unwrap();
        assert_eq!(curve.len(), powers.len());
        assert_eq!(curve.last().unwrap().n_circuits, data.len());

        let single = batched_curve(&obs, &d, &data, &[8], CovarianceModel::Dirichlet, &zero).unwrap();
        let objective = BatchObjective::new(&obs, &d, &data, CovarianceModel::Dirichlet).unwrap();
        let (direct, _) = fit(&objective, &zero).unwrap();
        assert_eq!(single[0].x, direct);
        assert!(batched_curve(&obs, &d, &data, &[3], CovarianceModel::Dirichlet, &zero).is_err());

        let mut bytes = Vec::new();
        write_curve_csv(&curve, f.labels(), &mut bytes).unwrap();
        let back = read_curve_csv(bytes.as_slice()).unwrap();
        assert_eq!(back.len(), curve.len());
        assert_eq!(back[0].0, 1);
        for (pt, (_, xb)) in curve.iter().zip(&back) {
            assert_eq!(pt.x.as_slice(), xb.as_slice());
        }
    }
}
