//! GST experiment designs: fiducials, germs, germ powers and the streaming
//! schedule.
//!
//! Circuits have the form `meas_fid . germ^p . prep_fid` (prep fiducial
//! applied first). Batches group circuits by germ power, shortest first, and
//! the stream visits the batches in order with a seeded shuffle inside each.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::Observer;
use crate::scalar::Real;

pub type GateSequence = Vec<String>;

/// Default shots per circuit.
pub const DEFAULT_SHOTS: u64 = 1000;

pub fn default_max_power(n_qubits: usize) -> usize {
    if n_qubits == 1 {
        32
    } else {
        8
    }
}

/// Stable circuit key: gate labels concatenated, `{}` for the empty circuit.
pub fn circuit_id(gates: &[String]) -> String {
    if gates.is_empty() {
        "{}".to_string()
    } else {
        gates.concat()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitMeta {
    pub prep_fid: usize,
    pub germ: usize,
    pub power: usize,
    pub meas_fid: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Circuit {
    pub id: String,
    pub gates: GateSequence,
    pub meta: CircuitMeta,
}

impl Circuit {
    pub fn depth(&self) -> usize {
        self.gates.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FiducialsAndGerms {
    pub prep: Vec<GateSequence>,
    pub meas: Vec<GateSequence>,
    pub germs: Vec<GateSequence>,
}

fn seq(labels: &[&str]) -> GateSequence {
    labels.iter().map(|s| s.to_string()).collect()
}

/// Standard X(pi/2)/Y(pi/2) fiducials and germs.
///
/// Two-qubit fiducials are products of the per-qubit set
/// `{{}, Gx, Gy, GxGx}`; germs are the single-qubit germs on each qubit plus
/// CNOT-containing sequences. Both sets pass [`verify_design`].
pub fn standard_fiducials_and_germs(n_qubits: usize) -> Result<FiducialsAndGerms> {
    match n_qubits {
        1 => {
            let fids = vec![
                seq(&[]),
                seq(&["Gx"]),
                seq(&["Gy"]),
                seq(&["Gx", "Gx"]),
                seq(&["Gx", "Gx", "Gx"]),
                seq(&["Gy", "Gy", "Gy"]),
            ];
            let germs = vec![
                seq(&["Gx"]),
                seq(&["Gy"]),
                seq(&["Gx", "Gy"]),
                seq(&["Gx", "Gx", "Gy"]),
                seq(&["Gx", "Gy", "Gy"]),
                seq(&["Gx", "Gy", "Gx", "Gy", "Gy"]),
            ];
            Ok(FiducialsAndGerms {
                prep: fids.clone(),
                meas: fids,
                germs,
            })
        }
        2 => {
            let local: [&[&str]; 4] = [&[], &["x"], &["y"], &["x", "x"]];
            let on = |q: usize, axes: &[&str]| -> GateSequence {
                axes.iter()
                    .map(|a| if q == 0 { format!("G{a}i") } else { format!("Gi{a}") })
                    .collect()
            };
            let mut fids = Vec::new();
            for a in local {
                for b in local {
                    let mut f = on(0, a);
                    f.extend(on(1, b));
                    fids.push(f);
                }
            }
            let germs = vec![
                seq(&["Gxi"]),
                seq(&["Gyi"]),
                seq(&["Gix"]),
                seq(&["Giy"]),
                seq(&["Gcnot"]),
                seq(&["Gxi", "Gyi"]),
                seq(&["Gix", "Giy"]),
                seq(&["Gxi", "Gcnot"]),
                seq(&["Giy", "Gcnot"]),
                seq(&["Gxi", "Giy", "Gcnot"]),
                seq(&["Gyi", "Gix", "Gcnot"]),
            ];
            Ok(FiducialsAndGerms {
                prep: fids.clone(),
                meas: fids,
                germs,
            })
        }
        _ => Err(Error::invalid(format!("no standard fiducials for {n_qubits} qubits"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub power: usize,
    /// Indices into [`ExperimentDesign::circuits`].
    pub circuits: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperimentDesign {
    pub design_id: String,
    pub n_qubits: usize,
    pub max_power: usize,
    pub shots: u64,
    pub seed: u64,
    pub circuits: Vec<Circuit>,
    pub batches: Vec<Batch>,
    /// Stream order as indices into `circuits`.
    pub schedule: Vec<usize>,
}

pub fn powers_up_to(max_power: usize) -> Result<Vec<usize>> {
    if max_power == 0 || !max_power.is_power_of_two() {
        return Err(Error::invalid(format!(
            "max_power must be a power of two >= 1, got {max_power}"
        )));
    }
    Ok(std::iter::successors(Some(1usize), |p| Some(p * 2))
        .take_while(|p| *p <= max_power)
        .collect())
}

/// Fisher-Yates shuffle driven by `rng`.
fn shuffle<R: Rng>(items: &mut [usize], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

pub fn build_design(
    n_qubits: usize,
    fg: &FiducialsAndGerms,
    max_power: usize,
    shots: u64,
    seed: u64,
) -> Result<ExperimentDesign> {
    if shots == 0 {
        return Err(Error::invalid("shots must be >= 1"));
    }
    let powers = powers_up_to(max_power)?;
    let mut circuits = Vec::new();
    let mut seen = HashSet::new();
    let mut batches = Vec::new();
    for &power in &powers {
        let mut batch = Vec::new();
        for (pi, prep) in fg.prep.iter().enumerate() {
            for (gi, germ) in fg.germs.iter().enumerate() {
                for (mi, meas) in fg.meas.iter().enumerate() {
                    let mut gates = prep.clone();
                    for _ in 0..power {
                        gates.extend(germ.iter().cloned());
                    }
                    gates.extend(meas.iter().cloned());
                    let id = circuit_id(&gates);
                    if !seen.insert(id.clone()) {
                        continue;
                    }
                    batch.push(circuits.len());
                    circuits.push(Circuit {
                        id,
                        gates,
                        meta: CircuitMeta {
                            prep_fid: pi,
                            germ: gi,
                            power,
                            meas_fid: mi,
                        },
                    });
                }
            }
        }
        if !batch.is_empty() {
            batches.push(Batch { power, circuits: batch });
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut schedule = Vec::with_capacity(circuits.len());
    for batch in &batches {
        let mut order = batch.circuits.clone();
        shuffle(&mut order, &mut rng);
        schedule.extend(order);
    }
    let design_id = design_hash(n_qubits, max_power, shots, seed, &circuits, &schedule);
    Ok(ExperimentDesign {
        design_id,
        n_qubits,
        max_power,
        shots,
        seed,
        circuits,
        batches,
        schedule,
    })
}

fn design_hash(
    n_qubits: usize,
    max_power: usize,
    shots: u64,
    seed: u64,
    circuits: &[Circuit],
    schedule: &[usize],
) -> String {
    let mut h = Sha256::new();
    h.update(format!("{n_qubits}|{max_power}|{shots}|{seed}|").as_bytes());
    for c in circuits {
        h.update(c.id.as_bytes());
        h.update(b";");
    }
    for i in schedule {
        h.update(i.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

impl ExperimentDesign {
    pub fn circuit_index(&self, id: &str) -> Option<usize> {
        self.circuits.iter().position(|c| c.id == id)
    }

    pub fn scheduled(&self) -> impl Iterator<Item = &Circuit> {
        self.schedule.iter().map(|&i| &self.circuits[i])
    }

    /// Design restricted to circuits with germ power at most `max_power`,
    /// keeping the stream order.
    pub fn truncated(&self, max_power: usize) -> ExperimentDesign {
        let keep: Vec<usize> = self
            .schedule
            .iter()
            .copied()
            .filter(|&i| self.circuits[i].meta.power <= max_power)
            .collect();
        let mut remap = vec![usize::MAX; self.circuits.len()];
        let mut circuits = Vec::new();
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
            circuits.push(self.circuits[old].clone());
        }
        let batches = self
            .batches
            .iter()
            .filter(|b| b.power <= max_power)
            .map(|b| Batch {
                power: b.power,
                circuits: b.circuits.iter().map(|&i| remap[i]).collect(),
            })
            .collect();
        let schedule: Vec<usize> = (0..circuits.len()).collect();
        let mp = max_power.min(self.max_power);
        ExperimentDesign {
            design_id: design_hash(self.n_qubits, mp, self.shots, self.seed, &circuits, &schedule),
            n_qubits: self.n_qubits,
            max_power: mp,
            shots: self.shots,
            seed: self.seed,
            circuits,
            batches,
            schedule,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = DesignHeader {
            kind: "header".into(),
            design_id: self.design_id.clone(),
            n_qubits: self.n_qubits,
            max_power: self.max_power,
            shots: self.shots,
            seed: self.seed,
            n_circuits: self.circuits.len(),
            schedule: self.schedule.iter().map(|&i| self.circuits[i].id.clone()).collect(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for c in &self.circuits {
            let rec = CircuitRecord {
                id: c.id.clone(),
                gates: c.gates.clone(),
                prep_fid: c.meta.prep_fid,
                germ: c.meta.germ,
                power: c.meta.power,
                meas_fid: c.meta.meas_fid,
                depth: c.depth(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| Error::Parse("empty design file".into()))??;
        let header: DesignHeader = serde_json::from_str(&first)?;
        if header.kind != "header" {
            return Err(Error::Parse("design file must start with a header record".into()));
        }
        let mut circuits = Vec::with_capacity(header.n_circuits);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CircuitRecord = serde_json::from_str(&line)?;
            if rec.depth != rec.gates.len() || rec.id != circuit_id(&rec.gates) {
                return Err(Error::Parse(format!("inconsistent circuit record {}", rec.id)));
            }
            circuits.push(Circuit {
                id: rec.id,
                gates: rec.gates,
                meta: CircuitMeta {
                    prep_fid: rec.prep_fid,
                    germ: rec.germ,
                    power: rec.power,
                    meas_fid: rec.meas_fid,
                },
            });
        }
        if circuits.len() != header.n_circuits {
            return Err(Error::Parse(format!(
                "header announces {} circuits, file has {}",
                header.n_circuits,
                circuits.len()
            )));
        }
        let index: std::collections::HashMap<&str, usize> =
            circuits.iter().enumerate().map(|(i, c)| (c.id.as_str(), i)).collect();
        let schedule = header
            .schedule
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Parse(format!("schedule names unknown circuit {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut powers: Vec<usize> = circuits.iter().map(|c| c.meta.power).collect();
        powers.sort_unstable();
        powers.dedup();
        let batches = powers
            .into_iter()
            .map(|p| Batch {
                power: p,
                circuits: (0..circuits.len()).filter(|&i| circuits[i].meta.power == p).collect(),
            })
            .collect();
        let design = ExperimentDesign {
            design_id: header.design_id,
            n_qubits: header.n_qubits,
            max_power: header.max_power,
            shots: header.shots,
            seed: header.seed,
            circuits,
            batches,
            schedule,
        };
        design.validate()?;
        Ok(design)
    }

    /// Checks the schedule is a permutation that visits batches in order of
    /// increasing power.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.circuits.len()];
        for &i in &self.schedule {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Parse("schedule is not a permutation of the circuits".into()));
            }
        }
        if seen.iter().any(|s| !s) || self.schedule.len() != self.circuits.len() {
            return Err(Error::Parse("schedule is not a permutation of the circuits".into()));
        }
        let powers: Vec<usize> = self.scheduled().map(|c| c.meta.power).collect();
        if powers.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Parse(
                "schedule does not visit powers in increasing order".into(),
            ));
        }
        let mut ids = HashSet::new();
        if !self.circuits.iter().all(|c| ids.insert(c.id.as_str())) {
            return Err(Error::Parse("duplicate circuit sequences".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DesignHeader {
    kind: String,
    design_id: String,
    n_qubits: usize,
    max_power: usize,
    shots: u64,
    seed: u64,
    n_circuits: usize,
    schedule: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CircuitRecord {
    id: String,
    gates: Vec<String>,
    prep_fid: usize,
    germ: usize,
    power: usize,
    meas_fid: usize,
    depth: usize,
}

/// Observability summary of a design at the target model.
#[derive(Clone, Debug)]
pub struct DesignReport {
    /// Smallest singular value of the row-normalized stacked FOGI Jacobian.
    pub min_singular_value: f64,
    pub rank: usize,
    pub n_fogi: usize,
    pub amplified_complete: bool,
    /// `(power, mean row norm)` of the unnormalized stacked Jacobian.
    pub row_norm_by_power: Vec<(usize, f64)>,
}

/// Rank tolerance on singular values of the row-normalized stack.
pub const OBSERVABILITY_TOL: f64 = 1e-6;

/// Stacks `H_k B` over every circuit at the target and checks it has full
/// column rank.
pub fn verify_design<T: Real>(design: &ExperimentDesign, observer: &Observer<'_, T>) -> Result<DesignReport> {
    let m_f = observer.fogi().n_fogi();
    let point = observer.linearize(&nalgebra::DVector::zeros(m_f))?;
    let n_out = observer.model().n_outcomes();
    let mut rows: Vec<f64> = Vec::with_capacity(design.circuits.len() * n_out * m_f);
    let mut n_rows = 0;
    let mut by_power: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for c in &design.circuits {
        let seq = observer.compile(&c.gates)?;
        let h = observer.jacobian(&point, &seq);
        for r in 0..n_out {
            let row: Vec<f64> = h.row(r).iter().map(|v| v.as_f64()).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let e = by_power.entry(c.meta.power).or_insert((0.0, 0));
            e.0 += norm;
            e.1 += 1;
            if norm > 1e-12 {
                rows.extend(row.iter().map(|v| v / norm));
                n_rows += 1;
            }
        }
    }
    let stacked = DMatrix::from_row_slice(n_rows, m_f, &rows);
    let gram = stacked.tr_mul(&stacked);
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut sv: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|s| **s > OBSERVABILITY_TOL).count();
    Ok(DesignReport {
        min_singular_value: min,
        rank,
        n_fogi: m_f,
        amplified_complete: rank == m_f,
        row_norm_by_power: by_power.into_iter().map(|(p, (sum, n))| (p, sum / n as f64)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauge::model_fogi_basis;
    use crate::model::GateSetModel;

    fn design1(max_power: usize) -> ExperimentDesign {
        let fg = standard_fiducials_and_germs(1).unwrap();
        build_design(1, &fg, max_power, 1000, 7).unwrap()
    }

    #[test]
    fn one_qubit_sets() {
        let fg = standard_fiducials_and_germs(1).unwrap();
        assert_eq!(fg.prep.len(), 6);
        assert!(fg.prep[0].is_empty());
        assert!(fg.germs.iter().all(|g| g.len() <= 5));
        assert!(standard_fiducials_and_germs(3).is_err());
    }

    #[test]
    fn one_qubit_fiducials_are_informationally_complete() {
        let model = GateSetModel::<f64>::standard(1).unwrap();
        let fg = standard_fiducials_and_germs(1).unwrap();
        let target = model.target_instance();
        let rows: Vec<f64> = fg
            .prep
            .iter()
            .flat_map(|f| {
                let mut v = target.rho.clone();
                for g in f {
                    v = &target.gates[model.gate_index(g).unwrap()].0 * v;
                }
                v.iter().copied().collect::<Vec<_>>()
            })
            .collect();
        let m = DMatrix::from_row_slice(6, 4, &rows);
        let sv = m.singular_values();
        assert_eq!(sv.iter().filter(|s| **s > 1e-10).count(), 4);
    }

    #[test]
    fn circuit_counts() {
        let fg = standard_fiducials_and_germs(1).unwrap();
        let before = fg.prep.len() * fg.meas.len() * fg.germs.len() * powers_up_to(32).unwrap().len();
        assert_eq!(before, 1296);
        let d = design1(32);
        assert_eq!(d.circuits.len(), 1077);
        assert!(d.circuits.len() <= before);
        let mut ids = HashSet::new();
        assert!(d.circuits.iter().all(|c| ids.insert(c.id.clone())));
        for c in &d.circuits {
            let fg = &fg;
            let expected = fg.prep[c.meta.prep_fid].len()
                + c.meta.power * fg.germs[c.meta.germ].len()
                + fg.meas[c.meta.meas_fid].len();
            assert_eq!(c.depth(), expected);
        }
    }

    #[test]
    fn batches_and_schedule() {
        let d = design1(32);
        for (k, b) in d.batches.iter().enumerate() {
            assert_eq!(b.power, 1 << k);
            assert!(b.circuits.iter().all(|&i| d.circuits[i].meta.power == b.power));
        }
        d.validate().unwrap();
        assert_eq!(design1(32).schedule, d.schedule);
        let other = build_design(1, &standard_fiducials_and_germs(1).unwrap(), 32, 1000, 8).unwrap();
        assert_ne!(other.schedule, d.schedule);
        assert!(build_design(1, &standard_fiducials_and_germs(1).unwrap(), 12, 1000, 8).is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let d = design1(4);
        let mut buf = Vec::new();
        d.write_jsonl(&mut buf).unwrap();
        let back = ExperimentDesign::read_jsonl(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back, d);
        let mut again = Vec::new();
        back.write_jsonl(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn observability_of_designs() {
        let model = GateSetModel::<f64>::standard(1).unwrap();
        let fogi = model_fogi_basis(&model).unwrap();
        let obs = Observer::new(&model, &fogi);
        let full = verify_design(&design1(8), &obs).unwrap();
        assert!(full.amplified_complete);
        assert_eq!(full.rank, 9);
        // short circuits only: the flag is reported, not required
        let short = verify_design(&design1(1), &obs).unwrap();
        assert!(short.rank <= 9);
        // Hamiltonian sensitivity grows with germ power
        let norms = &verify_design(&design1(32), &obs).unwrap().row_norm_by_power;
        assert!(norms.last().unwrap().1 > 4.0 * norms[0].1);

        let mut doubled = design1(8);
        let extra: Vec<Circuit> = doubled.circuits.clone();
        doubled.circuits.extend(extra);
        let rep = verify_design(&doubled, &obs).unwrap();
        assert_eq!(rep.rank, full.rank);
    }

    #[test]
    fn germ_power_matches_matrix_power() {
        let model = GateSetModel::<f64>::standard(1).unwrap();
        let x = model.random_truth_model(1e-2, 0.5, 3).unwrap();
        let inst = model.instantiate(&x).unwrap();
        let fg = standard_fiducials_and_germs(1).unwrap();
        for germ in &fg.germs {
            let idx: Vec<usize> = germ.iter().map(|g| model.gate_index(g).unwrap()).collect();
            let mut g = DMatrix::identity(4, 4);
            for &i in &idx {
                g = &inst.gates[i].0 * g;
            }
            let p = 8;
            let repeated: Vec<usize> = idx.iter().copied().cycle().take(idx.len() * p).collect();
            let mut seq_mat = DMatrix::identity(4, 4);
            for &i in &repeated {
                seq_mat = &inst.gates[i].0 * seq_mat;
            }
            let powered = (0..p).fold(DMatrix::identity(4, 4), |acc, _| &g * acc);
            assert!((seq_mat - powered).amax() < 1e-10);
        }
    }
}
