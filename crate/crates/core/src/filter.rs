//! Extended Kalman filter over FOGI coordinates.
//!
//! The state is static (`F = I`), so `predict` only adds the process noise
//! `Q` (zero by default). Each update linearizes the observation function at
//! the prior estimate and applies the gain `K = P H^T S^+` with
//! `S = H P H^T + R`. The pseudo-inverse is carried in factored form
//! `S^+ = F F^T`, which makes the simple-form covariance update
//! `P - (P H^T F)(P H^T F)^T` and keeps every diagonal entry of `P`
//! non-increasing in floating point.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::circuits::ExperimentDesign;
use crate::data::{CovarianceModel, Observation};
use crate::error::{Error, Result};
use crate::forward::Observer;
use crate::ptm::{psd_pseudo_inverse_factor, symmetric_eigenvalues, trace_sqrt_psd, PINV_REL_TOL};
use crate::scalar::Real;

/// Innovations beyond this magnitude cannot come from frequencies.
pub const INNOVATION_GATE: f64 = 1.0 + 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateForm {
    #[default]
    Simple,
    Joseph,
}

impl UpdateForm {
    pub fn name(self) -> &'static str {
        match self {
            UpdateForm::Simple => "simple",
            UpdateForm::Joseph => "joseph",
        }
    }
}

impl std::str::FromStr for UpdateForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(UpdateForm::Simple),
            "joseph" => Ok(UpdateForm::Joseph),
            other => Err(Error::invalid(format!("unknown update form {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub covariance: CovarianceModel,
    pub update: UpdateForm,
    /// Process noise added by every `predict`, row-major; `None` is `Q = 0`.
    #[serde(default)]
    pub q: Option<Vec<f64>>,
    pub pinv_rel_tol: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            covariance: CovarianceModel::Dirichlet,
            update: UpdateForm::Simple,
            q: None,
            pinv_rel_tol: PINV_REL_TOL,
        }
    }
}

impl FilterConfig {
    pub fn with_covariance(mut self, covariance: CovarianceModel) -> Self {
        self.covariance = covariance;
        self
    }

    pub fn with_update(mut self, update: UpdateForm) -> Self {
        self.update = update;
        self
    }

    pub fn with_q<T: Real>(mut self, q: &DMatrix<T>) -> Self {
        self.q = Some(q.transpose().iter().map(|v| v.as_f64()).collect());
        self
    }

    fn q_matrix<T: Real>(&self, m_f: usize) -> Result<Option<DMatrix<T>>> {
        let Some(q) = &self.q else { return Ok(None) };
        if q.len() != m_f * m_f {
            return Err(Error::invalid(format!(
                "Q has {} entries, expected {}",
                q.len(),
                m_f * m_f
            )));
        }
        Ok(Some(DMatrix::from_row_iterator(m_f, m_f, q.iter().map(|&v| T::lit(v)))))
    }
}

/// Telemetry of one update.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateRecord {
    pub k: usize,
    pub circuit_id: String,
    pub depth: usize,
    pub innovation: Vec<f64>,
    pub innovation_norm: f64,
    pub gain_norm: f64,
    pub trace_p: f64,
    pub trace_sqrt_p: f64,
    pub wall_time_us: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterState<T: Real> {
    /// Number of updates applied.
    pub k: usize,
    pub x_hat: DVector<T>,
    pub p: DMatrix<T>,
    pub config: FilterConfig,
}

/// `P_0 = (r / m_f) I` so that `Tr(P_0) = r`; `x_0` defaults to the target.
pub fn initialize<T: Real>(r: T, m_f: usize, x0: Option<DVector<T>>, config: FilterConfig) -> Result<FilterState<T>> {
    if !(r > T::zero()) || !r.is_finite() {
        return Err(Error::invalid(format!("initial trace r must be positive, got {r}")));
    }
    if m_f == 0 {
        return Err(Error::invalid("empty parameter space"));
    }
    let x_hat = x0.unwrap_or_else(|| DVector::zeros(m_f));
    if x_hat.len() != m_f {
        return Err(Error::invalid(format!("x0 has length {}, expected {m_f}", x_hat.len())));
    }
    if let Some(q) = config.q_matrix::<T>(m_f)? {
        let min = symmetric_eigenvalues(&q).min();
        if (&q - q.transpose()).amax() > T::lit(1e-12) || min < T::lit(-1e-12) {
            return Err(Error::Indefinite(min.as_f64()));
        }
    }
    let p = DMatrix::identity(m_f, m_f) * (r / T::from_usize_lossy(m_f));
    Ok(FilterState { k: 0, x_hat, p, config })
}

fn symmetrize<T: Real>(p: &mut DMatrix<T>) {
    let n = p.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (p[(i, j)] + p[(j, i)]) * half;
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

impl<T: Real> FilterState<T> {
    pub fn m_f(&self) -> usize {
        self.x_hat.len()
    }

    pub fn trace_p(&self) -> T {
        self.p.trace()
    }

    pub fn trace_sqrt_p(&self) -> T {
        trace_sqrt_psd(&self.p)
    }

    /// `P <- P + Q`; the estimate is unchanged.
    pub fn predict(&mut self) -> Result<()> {
        if let Some(q) = self.config.q_matrix::<T>(self.m_f())? {
            self.p += q;
            symmetrize(&mut self.p);
        }
        Ok(())
    }

    /// Kalman update with an explicit prediction `h`, design matrix `H` and
    /// noise covariance `R`. Returns the innovation and the gain's Frobenius
    /// norm.
    pub fn apply_update(
        &mut self,
        h: &DVector<T>,
        jac: &DMatrix<T>,
        y: &DVector<T>,
        r: &DMatrix<T>,
    ) -> Result<(DVector<T>, T)> {
        let m_f = self.m_f();
        if jac.ncols() != m_f || jac.nrows() != y.len() || h.len() != y.len() || r.shape() != (y.len(), y.len()) {
            return Err(Error::invalid("update dimensions are inconsistent"));
        }
        let innovation = y - h;
        if innovation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite innovation".into()));
        }
        if innovation.amax() > T::lit(INNOVATION_GATE) {
            return Err(Error::DataCorruption(format!(
                "innovation {} exceeds the probability range",
                innovation.amax()
            )));
        }
        let ph = &self.p * jac.transpose();
        let mut s = jac * &ph + r;
        symmetrize(&mut s);
        let f = psd_pseudo_inverse_factor(&s, T::lit(self.config.pinv_rel_tol))
            .map_err(|e| Error::Numerical(format!("innovation covariance: {e}")))?;
        let w = &ph * &f;
        let gain = &w * f.transpose();
        self.x_hat += &gain * &innovation;
        match self.config.update {
            UpdateForm::Simple => {
                self.p -= &w * w.transpose();
            }
            UpdateForm::Joseph => {
                let a = DMatrix::identity(m_f, m_f) - &gain * jac;
                self.p = &a * &self.p * a.transpose() + &gain * r * gain.transpose();
            }
        }
        symmetrize(&mut self.p);
        if self.x_hat.iter().any(|v| !v.is_finite()) || self.p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("filter state became non-finite".into()));
        }
        self.k += 1;
        Ok((innovation, gain.norm()))
    }

    /// One EKF step: predict, then update on `obs` for the compiled circuit
    /// `sequence`, linearizing at the current estimate.
    pub fn update(
        &mut self,
        observer: &Observer<'_, T>,
        obs: &Observation,
        sequence: &[usize],
    ) -> Result<UpdateRecord> {
        let start = Instant::now();
        if obs.n_outcomes() != observer.n_outcomes() {
            return Err(Error::invalid(format!(
                "observation has {} outcomes, model has {}",
                obs.n_outcomes(),
                observer.n_outcomes()
            )));
        }
        self.predict()?;
        let lin = observer.linearize(&self.x_hat)?;
        let (h, jac) = observer.predict_and_jacobian(&lin, sequence);
        let r = self.config.covariance.covariance::<T>(obs)?;
        let y = obs.frequency_vector::<T>();
        let (innovation, gain_norm) = self.apply_update(&h, &jac, &y, &r)?;
        let trace_sqrt_p = self.trace_sqrt_p().as_f64();
        Ok(UpdateRecord {
            k: self.k,
            circuit_id: obs.circuit_id.clone(),
            depth: sequence.len(),
            innovation_norm: innovation.norm().as_f64(),
            innovation: innovation.iter().map(|v| v.as_f64()).collect(),
            gain_norm: gain_norm.as_f64(),
            trace_p: self.trace_p().as_f64(),
            trace_sqrt_p,
            wall_time_us: start.elapsed().as_micros() as u64,
        })
    }

    pub fn to_checkpoint(&self, design_id: &str) -> Checkpoint {
        Checkpoint {
            k: self.k,
            x_hat: self.x_hat.iter().map(|v| v.as_f64()).collect(),
            p: self.p.transpose().iter().map(|v| v.as_f64()).collect(),
            config: self.config.clone(),
            design_id: design_id.to_string(),
            rng_position: self.k,
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        let m_f = cp.x_hat.len();
        if cp.p.len() != m_f * m_f {
            return Err(Error::Parse(format!(
                "checkpoint P has {} entries for m_f = {m_f}",
                cp.p.len()
            )));
        }
        if cp.rng_position != cp.k {
            return Err(Error::Parse(
                "checkpoint position does not match its step counter".into(),
            ));
        }
        Ok(Self {
            k: cp.k,
            x_hat: DVector::from_iterator(m_f, cp.x_hat.iter().map(|&v| T::lit(v))),
            p: DMatrix::from_row_iterator(m_f, m_f, cp.p.iter().map(|&v| T::lit(v))),
            config: cp.config.clone(),
        })
    }
}

/// Serialized filter state. `rng_position` is the number of observation
/// records already consumed from the stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub k: usize,
    pub x_hat: Vec<f64>,
    #[serde(rename = "P")]
    pub p: Vec<f64>,
    pub config: FilterConfig,
    pub design_id: String,
    pub rng_position: usize,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))
    }
}

/// Folds the filter over an observation stream in design schedule order.
///
/// The stream is read from its beginning; the first `state.k` records are
/// checked against the schedule and skipped, so a restored checkpoint
/// resumes where it stopped. At most `max_steps` updates are applied.
/// `on_update` sees the state after every update.
pub fn run_stream<T, I, F>(
    observer: &Observer<'_, T>,
    design: &ExperimentDesign,
    observations: I,
    state: &mut FilterState<T>,
    max_steps: Option<usize>,
    mut on_update: F,
) -> Result<Vec<UpdateRecord>>
where
    T: Real,
    I: IntoIterator<Item = Result<Observation>>,
    F: FnMut(&FilterState<T>, &UpdateRecord) -> Result<()>,
{
    if state.m_f() != observer.fogi().n_fogi() {
        return Err(Error::invalid("filter state does not match the FOGI basis"));
    }
    let compiled: Vec<Vec<usize>> = design
        .circuits
        .iter()
        .map(|c| observer.compile(&c.gates))
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    let mut position = 0usize;
    for obs in observations {
        if max_steps.is_some_and(|m| records.len() >= m) {
            break;
        }
        let obs = obs?;
        let Some(&idx) = design.schedule.get(position) else {
            return Err(Error::StreamMismatch(format!(
                "stream has more than {} records",
                design.schedule.len()
            )));
        };
        if design.circuits[idx].id != obs.circuit_id {
            return Err(Error::StreamMismatch(format!(
                "record {position} is {:?}, schedule expects {:?}",
                obs.circuit_id, design.circuits[idx].id
            )));
        }
        position += 1;
        if position <= state.k {
            continue;
        }
        let record = state.update(observer, &obs, &compiled[idx])?;
        on_update(state, &record)?;
        records.push(record);
    }
    if position < state.k {
        return Err(Error::StreamMismatch(format!(
            "stream ended after {position} records but the state has consumed {}",
            state.k
        )));
    }
    Ok(records)
}

pub const UPDATE_LOG_COLUMNS: [&str; 7] = [
    "k",
    "circuit_id",
    "depth",
    "trace_P",
    "trace_sqrtP",
    "innovation_norm",
    "wall_time_us",
];

/// CSV update log writer.
pub struct UpdateLogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> UpdateLogWriter<W> {
    pub fn new(out: W, write_header: bool) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        if write_header {
            inner.write_record(UPDATE_LOG_COLUMNS)?;
        }
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &UpdateRecord) -> Result<()> {
        self.inner.write_record([
            r.k.to_string(),
            r.circuit_id.clone(),
            r.depth.to_string(),
            format!("{:e}", r.trace_p),
            format!("{:e}", r.trace_sqrt_p),
            format!("{:e}", r.innovation_norm),
            r.wall_time_us.to_string(),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
