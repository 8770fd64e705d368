//! Synthetic observations, the observation stream format and the
//! observation-noise covariance models.
//!
//! Sampling is reproducible per `(global_seed, circuit_id)`: the circuit's
//! ChaCha20 key is `sha256(global_seed_le || circuit_id)` and each shot is
//! drawn by inverting the cumulative distribution at one uniform variate.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::circuits::{Circuit, ExperimentDesign};
use crate::error::{Error, Result};
use crate::forward::Observer;
use crate::scalar::Real;

/// Algorithm identifier written to every observation stream header.
pub const RNG_ID: &str = "chacha20/sha256(seed_le64||circuit_id)/inverse-cdf-f64";

/// Observed outcome counts of one circuit.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub circuit_id: String,
    pub shots: u64,
    pub counts: Vec<u64>,
    frequencies: Vec<f64>,
    exact: bool,
}

impl Observation {
    pub fn new(circuit_id: impl Into<String>, counts: Vec<u64>) -> Result<Self> {
        let shots: u64 = counts.iter().sum();
        if shots == 0 {
            return Err(Error::invalid("observation with zero shots"));
        }
        let frequencies = counts.iter().map(|&c| c as f64 / shots as f64).collect();
        Ok(Self {
            circuit_id: circuit_id.into(),
            shots,
            counts,
            frequencies,
            exact: false,
        })
    }

    /// Noise-free observation: the frequencies are the given probabilities
    /// themselves; counts are their largest-remainder rounding to `shots`.
    pub fn exact(circuit_id: impl Into<String>, probabilities: &[f64], shots: u64) -> Result<Self> {
        if shots == 0 {
            return Err(Error::invalid("observation with zero shots"));
        }
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Simulation("invalid probability vector".into()));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Simulation(format!("probabilities sum to {total}")));
        }
        Ok(Self {
            circuit_id: circuit_id.into(),
            shots,
            counts: round_counts(probabilities, shots),
            frequencies: probabilities.to_vec(),
            exact: true,
        })
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn frequency_vector<T: Real>(&self) -> DVector<T> {
        DVector::from_iterator(self.frequencies.len(), self.frequencies.iter().map(|&f| T::lit(f)))
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn n_outcomes(&self) -> usize {
        self.counts.len()
    }
}

/// Largest-remainder rounding of `p * shots` to integers summing to `shots`.
fn round_counts(p: &[f64], shots: u64) -> Vec<u64> {
    let scaled: Vec<f64> = p.iter().map(|&v| v * shots as f64).collect();
    let mut counts: Vec<u64> = scaled.iter().map(|v| v.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(shots.saturating_sub(assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

pub fn circuit_rng(global_seed: u64, circuit_id: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(circuit_id.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(key)
}

/// Multinomial draw of `shots` outcomes from `p`.
pub fn sample_counts<R: Rng>(p: &[f64], shots: u64, rng: &mut R) -> Result<Vec<u64>> {
    if p.is_empty() || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Simulation(format!("invalid probability vector {p:?}")));
    }
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        return Err(Error::Simulation("probability vector sums to zero".into()));
    }
    let mut cdf = Vec::with_capacity(p.len());
    let mut acc = 0.0;
    for v in p {
        acc += v / total;
        cdf.push(acc);
    }
    let last = p.iter().rposition(|v| *v > 0.0).unwrap();
    let mut counts = vec![0u64; p.len()];
    for _ in 0..shots {
        let u: f64 = rng.random();
        let j = cdf.iter().position(|&c| u < c).unwrap_or(last);
        counts[j] += 1;
    }
    Ok(counts)
}

/// Samples `shots` outcomes of `circuit` from the model at `x_f`.
pub fn sample_circuit(
    observer: &Observer<'_, f64>,
    x_f: &DVector<f64>,
    circuit: &Circuit,
    shots: u64,
    global_seed: u64,
) -> Result<Observation> {
    if shots == 0 {
        return Err(Error::invalid("shots must be at least 1"));
    }
    let seq = observer.compile(&circuit.gates)?;
    let p = observer.predict_probabilities(x_f, &seq)?.clipped;
    let mut rng = circuit_rng(global_seed, &circuit.id);
    let counts = sample_counts(p.as_slice(), shots, &mut rng)?;
    Observation::new(circuit.id.clone(), counts)
}

/// One observation per scheduled circuit, in stream order. With `noise_free`
/// the frequencies are the exact model probabilities.
pub fn simulate_design(
    observer: &Observer<'_, f64>,
    x_f: &DVector<f64>,
    design: &ExperimentDesign,
    global_seed: u64,
    noise_free: bool,
) -> Result<Vec<Observation>> {
    let instance = observer.instance(x_f)?;
    design
        .schedule
        .par_iter()
        .map(|&i| {
            let circuit = &design.circuits[i];
            let seq = observer.compile(&circuit.gates)?;
            let p = observer.predict_with(&instance, &seq);
            if p.raw.iter().any(|v| !v.is_finite()) {
                return Err(Error::Simulation(format!(
                    "non-finite probabilities for {}",
                    circuit.id
                )));
            }
            if noise_free {
                Observation::exact(circuit.id.clone(), p.clipped.as_slice(), design.shots)
            } else {
                let mut rng = circuit_rng(global_seed, &circuit.id);
                let counts = sample_counts(p.clipped.as_slice(), design.shots, &mut rng)?;
                Observation::new(circuit.id.clone(), counts)
            }
        })
        .collect()
}

/// `(diag(p) - p p^T) / M`.
pub fn multinomial_covariance<T: Real>(p: &DVector<T>, shots: u64) -> DMatrix<T> {
    let m = T::lit(shots as f64);
    (DMatrix::from_diagonal(p) - p * p.transpose()) / m
}

fn pseudo_counts<T: Real>(counts: &[u64], shots: u64, d: usize) -> Result<(DVector<T>, T)> {
    if counts.len() != d {
        return Err(Error::invalid(format!("{} counts for {d} outcomes", counts.len())));
    }
    let total: u64 = counts.iter().sum();
    if total != shots {
        return Err(Error::invalid(format!("counts sum to {total}, expected {shots}")));
    }
    let alpha = DVector::from_iterator(d, counts.iter().map(|&c| T::lit(c as f64 + 1.0)));
    Ok((alpha, T::lit((shots + d as u64) as f64)))
}

/// Covariance of the Dirichlet posterior with pseudo-counts `s + 1`:
/// `[diag(a)/(M+d) - a a^T/(M+d)^2] / (M+d+1)`.
pub fn dirichlet_covariance<T: Real>(counts: &[u64], shots: u64, d: usize) -> Result<DMatrix<T>> {
    let (alpha, md) = pseudo_counts::<T>(counts, shots, d)?;
    let mean = &alpha / md;
    Ok((DMatrix::from_diagonal(&mean) - &mean * mean.transpose()) / (md + T::one()))
}

/// `diag(a) / (M+d)^2`.
pub fn poisson_covariance<T: Real>(counts: &[u64], shots: u64, d: usize) -> Result<DMatrix<T>> {
    let (alpha, md) = pseudo_counts::<T>(counts, shots, d)?;
    Ok(DMatrix::from_diagonal(&(alpha / (md * md))))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceModel {
    #[default]
    Dirichlet,
    Poisson,
}

impl CovarianceModel {
    pub fn name(self) -> &'static str {
        match self {
            CovarianceModel::Dirichlet => "dirichlet",
            CovarianceModel::Poisson => "poisson",
        }
    }

    pub fn covariance<T: Real>(self, obs: &Observation) -> Result<DMatrix<T>> {
        match self {
            CovarianceModel::Dirichlet => dirichlet_covariance(&obs.counts, obs.shots, obs.n_outcomes()),
            CovarianceModel::Poisson => poisson_covariance(&obs.counts, obs.shots, obs.n_outcomes()),
        }
    }
}

impl std::str::FromStr for CovarianceModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dirichlet" => Ok(CovarianceModel::Dirichlet),
            "poisson" => Ok(CovarianceModel::Poisson),
            other => Err(Error::invalid(format!("unknown covariance model {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub design_id: String,
    pub rng_id: String,
    pub global_seed: u64,
    pub shots: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub noise_free: bool,
}

impl StreamHeader {
    pub fn new(design: &ExperimentDesign, global_seed: u64, noise_free: bool) -> Self {
        Self {
            design_id: design.design_id.clone(),
            rng_id: RNG_ID.to_string(),
            global_seed,
            shots: design.shots,
            noise_free,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ObservationRecord {
    circuit_id: String,
    counts: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frequencies: Option<Vec<f64>>,
}

/// Append-only JSONL writer: the header line, then one line per observation.
pub struct ObservationWriter<W: Write> {
    out: W,
}

impl<W: Write> ObservationWriter<W> {
    pub fn new(mut out: W, header: &StreamHeader) -> Result<Self> {
        serde_json::to_writer(&mut out, header)?;
        out.write_all(b"\n")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, obs: &Observation) -> Result<()> {
        let record = ObservationRecord {
            circuit_id: obs.circuit_id.clone(),
            counts: obs.counts.clone(),
            frequencies: obs.exact.then(|| obs.frequencies.clone()),
        };
        serde_json::to_writer(&mut self.out, &record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Incremental reader over an observation stream; never buffers more than
/// one line.
pub struct ObservationReader<R: BufRead> {
    input: R,
    header: StreamHeader,
    line: String,
    line_no: usize,
}

impl<R: BufRead> ObservationReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            return Err(Error::Parse("empty observation stream".into()));
        }
        let header: StreamHeader =
            serde_json::from_str(line.trim()).map_err(|e| Error::Parse(format!("observation header: {e}")))?;
        Ok(Self {
            input,
            header,
            line,
            line_no: 1,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    fn next_record(&mut self) -> Result<Option<Observation>> {
        loop {
            self.line.clear();
            if self.input.read_line(&mut self.line)? == 0 {
                return Ok(None);
            }
            self.line_no += 1;
            if !self.line.trim().is_empty() {
                break;
            }
        }
        let rec: ObservationRecord = serde_json::from_str(self.line.trim())
            .map_err(|e| Error::Parse(format!("observation line {}: {e}", self.line_no)))?;
        let total: u64 = rec.counts.iter().sum();
        if total != self.header.shots {
            return Err(Error::DataCorruption(format!(
                "line {}: counts sum to {total}, header says {} shots",
                self.line_no, self.header.shots
            )));
        }
        match rec.frequencies {
            Some(freqs) => {
                let obs = Observation::exact(rec.circuit_id, &freqs, total)?;
                if obs.counts != rec.counts {
                    return Err(Error::DataCorruption(format!(
                        "line {}: counts disagree with exact frequencies",
                        self.line_no
                    )));
                }
                Ok(Some(obs))
            }
            None => Observation::new(rec.circuit_id, rec.counts).map(Some),
        }
    }
}

impl<R: BufRead> Iterator for ObservationReader<R> {
    type Item = Result<Observation>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

/// Spreadsheet export: `circuit_id, shots, count_j..., freq_j...`.
pub fn write_csv<W: Write>(observations: &[Observation], out: W) -> Result<()> {
    let d = observations.first().map_or(0, |o| o.n_outcomes());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["circuit_id".to_string(), "shots".to_string()];
    header.extend((0..d).map(|j| format!("count_{j}")));
    header.extend((0..d).map(|j| format!("freq_{j}")));
    w.write_record(&header)?;
    for o in observations {
        if o.n_outcomes() != d {
            return Err(Error::invalid("observations with differing outcome counts"));
        }
        let mut row = vec![o.circuit_id.clone(), o.shots.to_string()];
        row.extend(o.counts.iter().map(|c| c.to_string()));
        row.extend(o.frequencies.iter().map(|f| f.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
