//! Circuit outcome probabilities `h_k(x)` and their Jacobians in FOGI
//! coordinates.
//!
//! The Jacobian is analytic: the product rule over circuit layers, with each
//! gate's derivative `d exp(A)/dx_i` taken from the Fréchet derivative of the
//! exponential. Everything that depends only on the evaluation point (built
//! gates and their per-generator derivatives) is computed once in a
//! [`Linearization`] and reused across circuits.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gauge::FogiBasis;
use crate::model::{GateSetInstance, GateSetModel};
use crate::ptm::{ExpFrechet, SuperOp};
use crate::scalar::Real;

/// Raw and clipped outcome probabilities of one circuit.
#[derive(Clone, Debug, PartialEq)]
pub struct Probabilities<T: Real> {
    /// Direct model output; may be slightly negative.
    pub raw: DVector<T>,
    /// Negatives clipped to zero and renormalized; safe for sampling.
    pub clipped: DVector<T>,
}

pub fn clip_probabilities<T: Real>(raw: &DVector<T>) -> DVector<T> {
    let clipped = raw.map(|p| if p > T::zero() { p } else { T::zero() });
    let total = clipped.sum();
    if total > T::zero() {
        clipped / total
    } else {
        clipped
    }
}

/// Evaluation-point cache: built gates plus the derivative of every built
/// gate (and SPAM vector) with respect to each of its rates.
#[derive(Clone, Debug)]
pub struct Linearization<T: Real> {
    x_f: DVector<T>,
    instance: GateSetInstance<T>,
    /// `gate_derivs[g][i] = d G_g / d x_{g,i}`.
    gate_derivs: Vec<Vec<DMatrix<T>>>,
    rho_derivs: Vec<DVector<T>>,
    /// `effect_derivs[i][j] = d E_j / d x_{povm,i}`.
    effect_derivs: Vec<Vec<DVector<T>>>,
}

impl<T: Real> Linearization<T> {
    pub fn point(&self) -> &DVector<T> {
        &self.x_f
    }

    pub fn instance(&self) -> &GateSetInstance<T> {
        &self.instance
    }
}

/// The observation model bound to a gate set and FOGI basis.
#[derive(Clone, Copy, Debug)]
pub struct Observer<'a, T: Real> {
    model: &'a GateSetModel<T>,
    fogi: &'a FogiBasis<T>,
}

impl<'a, T: Real> Observer<'a, T> {
    pub fn new(model: &'a GateSetModel<T>, fogi: &'a FogiBasis<T>) -> Self {
        Self { model, fogi }
    }

    pub fn model(&self) -> &'a GateSetModel<T> {
        self.model
    }

    pub fn fogi(&self) -> &'a FogiBasis<T> {
        self.fogi
    }

    pub fn n_outcomes(&self) -> usize {
        self.model.n_outcomes()
    }

    /// Resolves gate labels to indices into the model's gate list.
    pub fn compile(&self, gates: &[String]) -> Result<Vec<usize>> {
        gates
            .iter()
            .map(|g| {
                self.model
                    .gate_index(g)
                    .ok_or_else(|| Error::invalid(format!("unknown gate label {g}")))
            })
            .collect()
    }

    fn check_point(&self, x_f: &DVector<T>) -> Result<()> {
        if x_f.len() != self.fogi.n_fogi() {
            return Err(Error::invalid(format!(
                "FOGI vector has length {}, expected {}",
                x_f.len(),
                self.fogi.n_fogi()
            )));
        }
        if x_f.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite model parameters"));
        }
        Ok(())
    }

    /// Gate set at the gauge-fixed point `B x_f`.
    pub fn instance(&self, x_f: &DVector<T>) -> Result<GateSetInstance<T>> {
        self.check_point(x_f)?;
        self.model.instantiate(&self.fogi.from_fogi(x_f)?)
    }

    pub fn predict_probabilities(&self, x_f: &DVector<T>, sequence: &[usize]) -> Result<Probabilities<T>> {
        let inst = self.instance(x_f)?;
        Ok(self.predict_with(&inst, sequence))
    }

    pub fn predict_with(&self, instance: &GateSetInstance<T>, sequence: &[usize]) -> Probabilities<T> {
        let raw = instance.probabilities(sequence);
        let clipped = clip_probabilities(&raw);
        Probabilities { raw, clipped }
    }

    /// Builds the per-point cache used by [`jacobian`](Self::jacobian).
    pub fn linearize(&self, x_f: &DVector<T>) -> Result<Linearization<T>> {
        self.check_point(x_f)?;
        let x = self.fogi.from_fogi(x_f)?;
        let model = self.model;
        let gens = model.generators();
        let block = model.block_len();
        let exp_of = |offset: usize| -> Result<ExpFrechet<T>> {
            let a = gens.combine(&x.as_slice()[offset..offset + block])?;
            Ok(ExpFrechet::new(&a))
        };

        let gate_caches = (0..model.gates().len())
            .into_par_iter()
            .map(|g| {
                let cache = exp_of(model.gate_offset(g))?;
                let target = &model.gates()[g].target.0;
                let built = SuperOp(cache.exp() * target);
                let derivs: Vec<DMatrix<T>> = gens
                    .generators()
                    .iter()
                    .map(|l| cache.derivative(&l.0) * target)
                    .collect();
                Ok((built, derivs))
            })
            .collect::<Result<Vec<_>>>()?;
        let (gates, gate_derivs): (Vec<_>, Vec<_>) = gate_caches.into_iter().unzip();

        let (rho, effects, rho_derivs, effect_derivs) = match (model.rho_offset(), model.povm_offset()) {
            (Some(r), Some(e)) => {
                let prep = exp_of(r)?;
                let meas = exp_of(e)?;
                let rho0 = model.target_rho();
                let rho = prep.exp() * rho0;
                let effects: Vec<DVector<T>> = model
                    .target_effects()
                    .iter()
                    .map(|eff| meas.exp().tr_mul(eff))
                    .collect();
                let rho_derivs = gens.generators().iter().map(|l| prep.derivative(&l.0) * rho0).collect();
                let effect_derivs = gens
                    .generators()
                    .iter()
                    .map(|l| {
                        let d = meas.derivative(&l.0);
                        model.target_effects().iter().map(|eff| d.tr_mul(eff)).collect()
                    })
                    .collect();
                (rho, effects, rho_derivs, effect_derivs)
            }
            _ => (
                model.target_rho().clone(),
                model.target_effects().to_vec(),
                Vec::new(),
                Vec::new(),
            ),
        };
        Ok(Linearization {
            x_f: x_f.clone(),
            instance: GateSetInstance { rho, gates, effects },
            gate_derivs,
            rho_derivs,
            effect_derivs,
        })
    }

    /// `d h / d x` over the full rate vector, `n_outcomes x m`.
    pub fn jacobian_full(&self, lin: &Linearization<T>, sequence: &[usize]) -> DMatrix<T> {
        let model = self.model;
        let inst = &lin.instance;
        let dim = model.basis().dim();
        let n_out = model.n_outcomes();
        let n_gates = model.gates().len();

        // states before each layer
        let mut states = Vec::with_capacity(sequence.len() + 1);
        states.push(inst.rho.clone());
        for &g in sequence {
            let next = &inst.gates[g].0 * states.last().unwrap();
            states.push(next);
        }

        // left covectors E_j G_L ... G_{l+1}, one row per outcome
        let mut left = DMatrix::<T>::zeros(n_out, dim);
        for (j, e) in inst.effects.iter().enumerate() {
            left.row_mut(j).copy_from(&e.transpose());
        }
        let mut weights: Vec<Option<Vec<DMatrix<T>>>> = vec![None; n_gates];
        for (l, &g) in sequence.iter().enumerate().rev() {
            let w = weights[g].get_or_insert_with(|| vec![DMatrix::zeros(dim, dim); n_out]);
            let right = &states[l];
            for (j, wj) in w.iter_mut().enumerate() {
                // wj += left_j^T right^T
                wj.ger(T::one(), &left.row(j).transpose(), right, T::one());
            }
            left = &left * &inst.gates[g].0;
        }

        let mut jac = DMatrix::<T>::zeros(n_out, model.n_params());
        for (g, w) in weights.iter().enumerate() {
            let Some(w) = w else { continue };
            let offset = model.gate_offset(g);
            for (i, d) in lin.gate_derivs[g].iter().enumerate() {
                for (j, wj) in w.iter().enumerate() {
                    jac[(j, offset + i)] = d.dot(wj);
                }
            }
        }
        if let (Some(r), Some(e)) = (model.rho_offset(), model.povm_offset()) {
            // left is now E C, the covector of the whole circuit
            for (i, drho) in lin.rho_derivs.iter().enumerate() {
                let v = &left * drho;
                for j in 0..n_out {
                    jac[(j, r + i)] = v[j];
                }
            }
            let last = states.last().unwrap();
            for (i, de) in lin.effect_derivs.iter().enumerate() {
                for j in 0..n_out {
                    jac[(j, e + i)] = de[j].dot(last);
                }
            }
        }
        jac
    }

    /// Design matrix `H_k = (d h / d x) B`, `n_outcomes x m_f`.
    pub fn jacobian(&self, lin: &Linearization<T>, sequence: &[usize]) -> DMatrix<T> {
        self.jacobian_full(lin, sequence) * self.fogi.basis()
    }

    /// Raw probabilities and Jacobian at the linearization point.
    pub fn predict_and_jacobian(&self, lin: &Linearization<T>, sequence: &[usize]) -> (DVector<T>, DMatrix<T>) {
        (lin.instance.probabilities(sequence), self.jacobian(lin, sequence))
    }

    /// First-order prediction `h(base) + H(base) (x_f - base)`.
    pub fn linearized_predict(
        &self,
        x_f: &DVector<T>,
        sequence: &[usize],
        base: &Linearization<T>,
    ) -> Result<DVector<T>> {
        self.check_point(x_f)?;
        let (h, jac) = self.predict_and_jacobian(base, sequence);
        Ok(h + jac * (x_f - &base.x_f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::{build_design, standard_fiducials_and_germs};
    use crate::gauge::model_fogi_basis;
    use crate::model::GeneratorKind;
    use crate::ptm::matrix_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, spam: bool) -> (GateSetModel<f64>, FogiBasis<f64>) {
        let m = GateSetModel::standard_with_spam(n, spam).unwrap();
        let f = model_fogi_basis(&m).unwrap();
        (m, f)
    }

    /// Central finite differences of raw probabilities in FOGI coordinates.
    fn fd_jacobian(obs: &Observer<'_, f64>, x_f: &DVector<f64>, seq: &[usize], h: f64) -> DMatrix<f64> {
        let m_f = x_f.len();
        let n_out = obs.n_outcomes();
        let mut jac = DMatrix::zeros(n_out, m_f);
        for i in 0..m_f {
            let mut plus = x_f.clone();
            plus[i] += h;
            let mut minus = x_f.clone();
            minus[i] -= h;
            let d = (obs.predict_probabilities(&plus, seq).unwrap().raw
                - obs.predict_probabilities(&minus, seq).unwrap().raw)
                / (2.0 * h);
            jac.set_column(i, &d);
        }
        jac
    }

    fn random_point(rng: &mut impl Rng, m_f: usize, bound: f64) -> DVector<f64> {
        DVector::from_fn(m_f, |_, _| rng.random_range(-bound..bound))
    }

    #[test]
    fn ideal_predictions() {
        let (m, f) = setup(1, false);
        let obs = Observer::new(&m, &f);
        let zero = DVector::zeros(f.n_fogi());
        let p = obs.predict_probabilities(&zero, &[]).unwrap();
        assert_eq!(p.clipped, DVector::from_vec(vec![1.0, 0.0]));
        let gx = obs.compile(&["Gx".into(), "Gx".into()]).unwrap();
        let p = obs.predict_probabilities(&zero, &gx).unwrap().clipped;
        assert!((p[0]).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
        assert!(obs.compile(&["Gz".into()]).is_err());
        let mut bad = zero.clone();
        bad[0] = f64::NAN;
        assert!(obs.predict_probabilities(&bad, &[]).is_err());
    }

    #[test]
    fn over_rotation_oscillation() {
        let (m, f) = setup(1, false);
        let obs = Observer::new(&m, &f);
        let eps = 0.01;
        let (w, _) = f.functional("Gx:H:X").unwrap();
        let x_f = w * eps;
        let gx = m.gate_index("Gx").unwrap();
        // rotation per Gx^2 from the transfer matrix of the planted gate
        let j = m.generators().index_of(GeneratorKind::Hamiltonian, "X").unwrap();
        let mut rates = vec![0.0; m.block_len()];
        rates[j] = eps;
        let gate = matrix_exp(&m.generators().combine(&rates).unwrap()).unwrap() * &m.gates()[gx].target.0;
        let sq = &gate * &gate;
        // Gx^2 is a rotation about X: its Y-Y/Z-Z block is a rotation by pi + theta
        let angle = sq[(3, 2)].atan2(sq[(2, 2)]);
        let theta = angle.abs() - std::f64::consts::PI;
        for p in [1usize, 2, 5, 16] {
            let seq = vec![gx; 2 * p];
            let got = obs.predict_probabilities(&x_f, &seq).unwrap().raw;
            // |0> rotated by p (pi + theta) about X, p(0) = cos^2(p(pi+theta)/2)
            let want = (p as f64 * (std::f64::consts::PI + theta) / 2.0).cos().powi(2);
            assert!((got[0] - want).abs() < 1e-10, "p={p}: {} vs {want}", got[0]);
            let mut dense = DMatrix::identity(4, 4);
            for _ in 0..p {
                dense = &sq * dense;
            }
            let direct = m.target_effects()[0].dot(&(dense * m.target_rho()));
            assert!((got[0] - direct).abs() < 1e-12);
        }
        assert!((4.0 * eps - theta.abs()).abs() < 1e-6);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (m, f) = setup(1, false);
        let obs = Observer::new(&m, &f);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let x_f = random_point(&mut rng, f.n_fogi(), 0.05);
            let depth = rng.random_range(0..=64);
            let seq: Vec<usize> = (0..depth).map(|_| rng.random_range(0..2)).collect();
            let lin = obs.linearize(&x_f).unwrap();
            let analytic = obs.jacobian(&lin, &seq);
            let fd = fd_jacobian(&obs, &x_f, &seq, 1e-6);
            assert!((analytic - fd).amax() < 1e-6);
        }
    }

    #[test]
    fn jacobian_with_spam_matches_finite_differences() {
        let (m, f) = setup(1, true);
        let obs = Observer::new(&m, &f);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x_f = random_point(&mut rng, f.n_fogi(), 0.05);
            let seq: Vec<usize> = (0..12).map(|_| rng.random_range(0..2)).collect();
            let lin = obs.linearize(&x_f).unwrap();
            assert!((obs.jacobian(&lin, &seq) - fd_jacobian(&obs, &x_f, &seq, 1e-6)).amax() < 1e-6);
        }
    }

    #[test]
    fn two_qubit_jacobian_spot_check() {
        let (m, f) = setup(2, false);
        let obs = Observer::new(&m, &f);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x_f = random_point(&mut rng, f.n_fogi(), 0.02);
        let seq = obs
            .compile(&["Gxi", "Gcnot", "Giy", "Gcnot", "Gyi"].map(String::from))
            .unwrap();
        let lin = obs.linearize(&x_f).unwrap();
        let analytic = obs.jacobian(&lin, &seq);
        let fd = fd_jacobian(&obs, &x_f, &seq, 1e-6);
        assert!((analytic - fd).amax() < 1e-6);
    }

    #[test]
    fn jacobian_structure() {
        let (m, f) = setup(1, false);
        let obs = Observer::new(&m, &f);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x_f = random_point(&mut rng, f.n_fogi(), 0.05);
        let lin = obs.linearize(&x_f).unwrap();
        let gx = m.gate_index("Gx").unwrap();
        let full = obs.jacobian_full(&lin, &[gx, gx, gx]);
        let gy_block = full.columns(m.gate_offset(m.gate_index("Gy").unwrap()), m.block_len());
        assert_eq!(gy_block.amax(), 0.0);
        let h = obs.jacobian(&lin, &[gx, 1, 0, 1]);
        for c in 0..h.ncols() {
            assert!(h.column(c).sum().abs() < 1e-10);
        }
    }

    #[test]
    fn gauge_blind_at_target() {
        let (m, f) = setup(1, false);
        let obs = Observer::new(&m, &f);
        let lin = obs.linearize(&DVector::zeros(f.n_fogi())).unwrap();
        let design = build_design(1, &standard_fiducials_and_germs(1).unwrap(), 8, 100, 1).unwrap();
        for c in &design.circuits {
            let seq = obs.compile(&c.gates).unwrap();
            let blind = obs.jacobian_full(&lin, &seq) * f.gauge_span();
            assert!(blind.amax() < 1e-8);
        }
    }

    #[test]
    fn linearized_prediction_is_second_order() {
        let (m, f) = setup(1, false);
        let obs = Observer::new(&m, &f);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = random_point(&mut rng, f.n_fogi(), 0.02);
        let lin = obs.linearize(&base).unwrap();
        let seq = obs.compile(&["Gx", "Gy", "Gy", "Gx", "Gy"].map(String::from)).unwrap();
        assert!(
            (obs.linearized_predict(&base, &seq, &lin).unwrap() - obs.predict_probabilities(&base, &seq).unwrap().raw)
                .amax()
                < 1e-15
        );
        let dir = random_point(&mut rng, f.n_fogi(), 1.0);
        let err = |t: f64| {
            let x = &base + &dir * t;
            (obs.linearized_predict(&x, &seq, &lin).unwrap() - obs.predict_probabilities(&x, &seq).unwrap().raw).amax()
        };
        let ratio = err(0.02) / err(0.01);
        assert!(ratio >= 3.5, "ratio {ratio}");
    }

    #[test]
    fn long_circuits_linearize_worse() {
        let (m, f) = setup(1, false);
        let obs = Observer::new(&m, &f);
        let (w, _) = f.functional("Gx:H:X").unwrap();
        let gx = m.gate_index("Gx").unwrap();
        let lin = obs.linearize(&DVector::zeros(f.n_fogi())).unwrap();
        // a shift that winds the p = 32 circuit a quarter turn
        let delta = &w * (std::f64::consts::PI / 512.0);
        let err = |p: usize| {
            let seq = vec![gx; 4 * p];
            (obs.linearized_predict(&delta, &seq, &lin).unwrap() - obs.predict_probabilities(&delta, &seq).unwrap().raw)
                .amax()
        };
        assert!(err(32) > err(1));
    }

    #[test]
    fn predictions_are_gauge_invariant() {
        let (m, f) = setup(1, false);
        let obs = Observer::new(&m, &f);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x_f = random_point(&mut rng, f.n_fogi(), 0.05);
        let inst = obs.instance(&x_f).unwrap();
        let coeffs: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = m.generators().combine(&coeffs).unwrap() * 0.05;
        let gauged = crate::gauge::apply_gauge(&inst, &SuperOp(matrix_exp(&k).unwrap())).unwrap();
        for _ in 0..20 {
            let seq: Vec<usize> = (0..24).map(|_| rng.random_range(0..2)).collect();
            let a = obs.predict_with(&inst, &seq).raw;
            let b = obs.predict_with(&gauged, &seq).raw;
            assert!((a - b).amax() < 1e-9);
        }
    }

    #[test]
    fn clipping_renormalizes() {
        let raw = DVector::<f64>::from_vec(vec![-1e-12, 0.4, 0.6 + 1e-12]);
        let c = clip_probabilities(&raw);
        assert_eq!(c[0], 0.0);
        assert!((c.sum() - 1.0).abs() < 1e-15);
    }
}
