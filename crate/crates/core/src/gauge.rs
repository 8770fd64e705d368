//! Gauge transformations and the first-order gauge-invariant (FOGI)
//! parameter basis.
//!
//! Gauge directions are generators `K` from the model's own H + S span. When
//! the model has no SPAM rates the preparation and effects are fixed, so only
//! directions with `K rho = 0` and `E_j K = 0` map the model family onto
//! itself; those are the ones used.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GateSetInstance, GateSetModel, ParameterVector};
use crate::ptm::SuperOp;
use crate::scalar::Real;

/// Default singular-value cutoff (relative) separating gauge from FOGI
/// directions.
pub const FOGI_REL_TOL: f64 = 1e-9;

/// `rho -> M rho`, `G -> M G M^-1`, `E -> E M^-1`.
pub fn apply_gauge<T: Real>(instance: &GateSetInstance<T>, m: &SuperOp<T>) -> Result<GateSetInstance<T>> {
    instance.gauge_transform(m)
}

/// Trace-preserving generators whose infinitesimal gauge action keeps the
/// model inside its parameterized family.
pub fn gauge_directions<T: Real>(model: &GateSetModel<T>) -> Vec<SuperOp<T>> {
    let gens = model.generators();
    if model.spam_enabled() {
        return gens.generators().to_vec();
    }
    // constraint rows: K rho = 0 and E_j K = 0, linear in the generator coefficients
    let dim = model.basis().dim();
    let n_out = model.n_outcomes();
    let rows = dim * (1 + n_out);
    let mut constraints = DMatrix::<T>::zeros(rows, gens.len());
    for (j, g) in gens.generators().iter().enumerate() {
        let krho = &g.0 * model.target_rho();
        constraints.view_mut((0, j), (dim, 1)).copy_from(&krho);
        for (o, e) in model.target_effects().iter().enumerate() {
            let ek = g.0.transpose() * e;
            constraints.view_mut((dim * (1 + o), j), (dim, 1)).copy_from(&ek);
        }
    }
    null_space(&constraints, T::lit(1e-10))
        .column_iter()
        .map(|c| SuperOp(gens.combine(c.as_slice()).expect("coefficient length matches")))
        .collect()
}

/// Orthonormal basis of the null space of `a` (columns). Requires
/// `a.nrows() >= a.ncols()`.
fn null_space<T: Real>(a: &DMatrix<T>, rel_tol: T) -> DMatrix<T> {
    let n = a.ncols();
    debug_assert!(a.nrows() >= n);
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let smax = svd.singular_values.max();
    let cols: Vec<DVector<T>> = (0..n)
        .filter(|&i| svd.singular_values[i] <= rel_tol * smax)
        .map(|i| v_t.row(i).transpose())
        .collect();
    if cols.is_empty() {
        return DMatrix::zeros(n, 0);
    }
    DMatrix::from_columns(&cols)
}

/// First-order change of the full rate vector under `M = exp(eps K)`.
///
/// Gate rows hold the generator coefficients of `K - G K G^-1`; with SPAM
/// rates the preparation block moves by `+K` and the measurement block by
/// `-K`.
pub fn gauge_action_column<T: Real>(model: &GateSetModel<T>, k: &SuperOp<T>) -> Result<DVector<T>> {
    let gens = model.generators();
    let mut col = DVector::zeros(model.n_params());
    for (g, gate) in model.gates().iter().enumerate() {
        let inv = gate
            .target
            .0
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical(format!("target {} is singular", gate.label)))?;
        let delta = &k.0 - &gate.target.0 * &k.0 * inv;
        let (coeffs, _) = gens.decompose(&delta);
        col.rows_mut(model.gate_offset(g), gens.len()).copy_from(&coeffs);
    }
    if let (Some(r), Some(e)) = (model.rho_offset(), model.povm_offset()) {
        let (coeffs, _) = gens.decompose(&k.0);
        col.rows_mut(r, gens.len()).copy_from(&coeffs);
        col.rows_mut(e, gens.len()).copy_from(&(-coeffs));
    }
    Ok(col)
}

/// Matrix whose columns are [`gauge_action_column`] for every gauge direction
/// at the target model.
pub fn gauge_action_jacobian<T: Real>(model: &GateSetModel<T>) -> Result<DMatrix<T>> {
    let dirs = gauge_directions(model);
    let mut phi = DMatrix::zeros(model.n_params(), dirs.len());
    for (a, k) in dirs.iter().enumerate() {
        phi.set_column(a, &gauge_action_column(model, k)?);
    }
    Ok(phi)
}

/// Orthonormal split of parameter space into FOGI and gauge directions.
#[derive(Clone, Debug, PartialEq)]
pub struct FogiBasis<T: Real> {
    basis: DMatrix<T>,
    gauge_span: DMatrix<T>,
    labels: Vec<String>,
    param_labels: Vec<String>,
}

impl<T: Real> FogiBasis<T> {
    /// `m x m_f` matrix with orthonormal columns.
    pub fn basis(&self) -> &DMatrix<T> {
        &self.basis
    }

    pub fn gauge_span(&self) -> &DMatrix<T> {
        &self.gauge_span
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn param_labels(&self) -> &[String] {
        &self.param_labels
    }

    pub fn n_params(&self) -> usize {
        self.basis.nrows()
    }

    pub fn n_fogi(&self) -> usize {
        self.basis.ncols()
    }

    pub fn n_gauge(&self) -> usize {
        self.gauge_span.ncols()
    }

    pub fn to_fogi(&self, x: &ParameterVector<T>) -> Result<DVector<T>> {
        if x.len() != self.n_params() {
            return Err(Error::invalid(format!(
                "parameter vector length {} does not match FOGI basis rows {}",
                x.len(),
                self.n_params()
            )));
        }
        Ok(self.basis.tr_mul(x))
    }

    /// Gauge-fixed representative `B x_f`.
    pub fn from_fogi(&self, x_f: &DVector<T>) -> Result<ParameterVector<T>> {
        if x_f.len() != self.n_fogi() {
            return Err(Error::invalid(format!(
                "FOGI vector length {} does not match basis columns {}",
                x_f.len(),
                self.n_fogi()
            )));
        }
        Ok(&self.basis * x_f)
    }

    /// FOGI-space functional `w = B^T e` reading off the named parameter.
    ///
    /// The second value is `|w|`, which is 1 when the parameter is itself
    /// gauge invariant.
    pub fn functional(&self, param_label: &str) -> Option<(DVector<T>, T)> {
        let i = self.param_labels.iter().position(|l| l == param_label)?;
        let w = self.basis.row(i).transpose();
        let norm = w.norm();
        Some((w, norm))
    }
}

/// Splits the column space of `phi` (gauge) from its orthogonal complement.
///
/// The complement is built greedily from coordinate directions, largest
/// remaining component first, so coordinates that are already gauge
/// invariant become individual FOGI columns.
pub fn fogi_basis<T: Real>(phi: &DMatrix<T>, param_labels: &[String], rel_tol: T) -> Result<FogiBasis<T>> {
    let m = phi.nrows();
    if param_labels.len() != m {
        return Err(Error::invalid(format!(
            "{} labels for {} parameters",
            param_labels.len(),
            m
        )));
    }
    let gauge_span = if phi.ncols() == 0 || phi.amax() == T::zero() {
        DMatrix::zeros(m, 0)
    } else {
        let svd = phi.clone().svd(true, false);
        let u = svd.u.expect("left singular vectors requested");
        let smax = svd.singular_values.max();
        let keep: Vec<DVector<T>> = svd
            .singular_values
            .iter()
            .enumerate()
            .filter(|(_, s)| **s > rel_tol * smax)
            .map(|(i, _)| u.column(i).into_owned())
            .collect();
        if keep.is_empty() {
            DMatrix::zeros(m, 0)
        } else {
            DMatrix::from_columns(&keep)
        }
    };

    let rank = gauge_span.ncols();
    let mut chosen: Vec<DVector<T>> = Vec::with_capacity(m - rank);
    let project_out = |v: &mut DVector<T>, chosen: &[DVector<T>]| {
        for _ in 0..2 {
            for q in gauge_span.column_iter() {
                let c = q.dot(v);
                v.axpy(-c, &q, T::one());
            }
            for q in chosen {
                let c = q.dot(v);
                v.axpy(-c, q, T::one());
            }
        }
    };
    let mut used = vec![false; m];
    while chosen.len() < m - rank {
        let mut best: Option<(usize, DVector<T>, T)> = None;
        for i in (0..m).filter(|&i| !used[i]) {
            let mut v = DVector::zeros(m);
            v[i] = T::one();
            project_out(&mut v, &chosen);
            let norm = v.norm();
            let better = match &best {
                None => true,
                Some((_, _, bn)) => norm > *bn * (T::one() + T::lit(1e-9)),
            };
            if better {
                best = Some((i, v, norm));
            }
        }
        let (i, v, norm) = best.ok_or_else(|| Error::Numerical("ran out of FOGI candidates".into()))?;
        if norm < T::lit(1e-6) {
            return Err(Error::Numerical("degenerate FOGI complement".into()));
        }
        used[i] = true;
        let mut v = v / norm;
        // snap round-off so exact coordinate directions stay exact
        v.apply(|c| {
            if c.abs() < T::lit(1e-14) {
                *c = T::zero()
            }
        });
        let n = v.norm();
        chosen.push(v / n);
    }
    let basis = if chosen.is_empty() {
        DMatrix::zeros(m, 0)
    } else {
        DMatrix::from_columns(&chosen)
    };
    let labels = basis
        .column_iter()
        .map(|c| column_label(c.as_slice(), param_labels))
        .collect();
    Ok(FogiBasis {
        basis,
        gauge_span,
        labels,
        param_labels: param_labels.to_vec(),
    })
}

/// FOGI basis of a model at its target, with the default cutoff.
pub fn model_fogi_basis<T: Real>(model: &GateSetModel<T>) -> Result<FogiBasis<T>> {
    let phi = gauge_action_jacobian(model)?;
    fogi_basis(&phi, &model.param_labels(), T::lit(FOGI_REL_TOL))
}

fn column_label<T: Real>(col: &[T], names: &[String]) -> String {
    let mut idx: Vec<usize> = (0..col.len()).filter(|&i| col[i].abs() > T::lit(1e-9)).collect();
    idx.sort_by(|&a, &b| {
        col[b]
            .abs()
            .partial_cmp(&col[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    if idx.len() == 1 && (col[idx[0]].abs() - T::one()).abs() < T::lit(1e-12) {
        let sign = if col[idx[0]] < T::zero() { "-" } else { "" };
        return format!("{sign}{}", names[idx[0]]);
    }
    let mut out = String::new();
    for (n, &i) in idx.iter().take(3).enumerate() {
        let v = col[i].as_f64();
        if n == 0 {
            out.push_str(&format!("{v:.3}*{}", names[i]));
        } else {
            let sign = if v < 0.0 { '-' } else { '+' };
            out.push_str(&format!(" {sign} {:.3}*{}", v.abs(), names[i]));
        }
    }
    if idx.len() > 3 {
        out.push_str(" + ...");
    }
    out
}

/// Random truth model moved onto the gauge-fixed slice `x = B B^T x`, where
/// it is exactly representable in FOGI coordinates. If the projection
/// leaves the CPTP set the draw is repeated with the next seed. Returns the
/// rate vector and the seed that produced it.
pub fn gauge_fixed_truth(
    model: &GateSetModel<f64>,
    fogi: &FogiBasis<f64>,
    target_infidelity: f64,
    coherent_fraction: f64,
    seed: u64,
) -> Result<(DVector<f64>, u64)> {
    for attempt in 0..crate::model::MAX_TRUTH_REJECTIONS as u64 {
        let s = seed.wrapping_add(attempt);
        let x = model.random_truth_model(target_infidelity, coherent_fraction, s)?;
        let fixed = fogi.from_fogi(&fogi.to_fogi(&x)?)?;
        if model.is_cptp(&fixed)? {
            return Ok((fixed, s));
        }
    }
    Err(Error::GenerationFailure(crate::model::MAX_TRUTH_REJECTIONS))
}

/// JSON form of a [`FogiBasis`], matrices row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FogiBasisFile {
    pub n_params: usize,
    pub n_fogi: usize,
    pub n_gauge: usize,
    pub param_labels: Vec<String>,
    pub labels: Vec<String>,
    pub basis: Vec<f64>,
    pub gauge_span: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

impl FogiBasis<f64> {
    pub fn to_file(&self) -> FogiBasisFile {
        FogiBasisFile {
            n_params: self.n_params(),
            n_fogi: self.n_fogi(),
            n_gauge: self.n_gauge(),
            param_labels: self.param_labels.clone(),
            labels: self.labels.clone(),
            basis: row_major(&self.basis),
            gauge_span: row_major(&self.gauge_span),
        }
    }

    pub fn from_file(file: &FogiBasisFile) -> Result<Self> {
        let m = file.n_params;
        if file.basis.len() != m * file.n_fogi
            || file.gauge_span.len() != m * file.n_gauge
            || file.labels.len() != file.n_fogi
            || file.param_labels.len() != m
        {
            return Err(Error::Parse("FOGI basis file has inconsistent sizes".into()));
        }
        Ok(Self {
            basis: DMatrix::from_row_slice(m, file.n_fogi, &file.basis),
            gauge_span: DMatrix::from_row_slice(m, file.n_gauge, &file.gauge_span),
            labels: file.labels.clone(),
            param_labels: file.param_labels.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauge_fixed_truth_is_representable() {
        for n in [1, 2] {
            let model = GateSetModel::standard(n).unwrap();
            let fogi = model_fogi_basis(&model).unwrap();
            let (x, _) = gauge_fixed_truth(&model, &fogi, 1e-2, 0.5, 3).unwrap();
            let back = fogi.from_fogi(&fogi.to_fogi(&x).unwrap()).unwrap();
            assert!((back - &x).amax() < 1e-14);
            assert!(model.is_cptp(&x).unwrap());
        }
    }

    use crate::model::GeneratorKind;
    use crate::ptm::matrix_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model1() -> GateSetModel<f64> {
        GateSetModel::standard(1).unwrap()
    }

    fn random_sequence(rng: &mut impl Rng, n_gates: usize, max_depth: usize) -> Vec<usize> {
        let depth = rng.random_range(0..=max_depth);
        (0..depth).map(|_| rng.random_range(0..n_gates)).collect()
    }

    fn random_generator(rng: &mut impl Rng, model: &GateSetModel<f64>) -> DMatrix<f64> {
        let coeffs: Vec<f64> = (0..model.block_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        model.generators().combine(&coeffs).unwrap()
    }

    /// Central differences of the gate rates after a finite gauge transform.
    fn finite_difference_column(model: &GateSetModel<f64>, k: &SuperOp<f64>, eps: f64) -> DVector<f64> {
        let target = model.target_instance();
        let plus = apply_gauge(&target, &SuperOp(matrix_exp(&(&k.0 * eps)).unwrap())).unwrap();
        let minus = apply_gauge(&target, &SuperOp(matrix_exp(&(&k.0 * -eps)).unwrap())).unwrap();
        let mut col = DVector::zeros(model.n_gate_params());
        for (g, gate) in model.gates().iter().enumerate() {
            let inv = gate.target.0.clone().try_inverse().unwrap();
            let d = (&plus.gates[g].0 - &minus.gates[g].0) * &inv / (2.0 * eps);
            let (c, _) = model.generators().decompose(&d);
            col.rows_mut(model.gate_offset(g), model.block_len()).copy_from(&c);
        }
        col
    }

    #[test]
    fn identity_gauge_is_noop() {
        let m = model1();
        let inst = m.target_instance();
        let same = apply_gauge(&inst, &SuperOp::identity(4)).unwrap();
        assert_eq!(same.gates, inst.gates);
        assert!(apply_gauge(&inst, &SuperOp(DMatrix::zeros(4, 4))).is_err());
    }

    #[test]
    fn gauge_preserves_probabilities() {
        let m = model1();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = m.random_truth_model(1e-2, 0.5, 1).unwrap();
        let inst = m.instantiate(&x).unwrap();
        for _ in 0..20 {
            let k = random_generator(&mut rng, &m);
            let g = apply_gauge(&inst, &SuperOp(matrix_exp(&(k * 0.01)).unwrap())).unwrap();
            for _ in 0..20 {
                let seq = random_sequence(&mut rng, 2, 16);
                let d = (inst.probabilities(&seq) - g.probabilities(&seq)).amax();
                assert!(d < 1e-10, "probability moved by {d}");
            }
        }
    }

    #[test]
    fn successive_gauges_compose() {
        let m = model1();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = m.instantiate(&m.random_truth_model(1e-2, 0.5, 2).unwrap()).unwrap();
        let m1 = SuperOp(matrix_exp(&(random_generator(&mut rng, &m) * 0.05)).unwrap());
        let m2 = SuperOp(matrix_exp(&(random_generator(&mut rng, &m) * 0.05)).unwrap());
        let twice = apply_gauge(&apply_gauge(&inst, &m1).unwrap(), &m2).unwrap();
        let once = apply_gauge(&inst, &m2.compose(&m1)).unwrap();
        for (a, b) in twice.gates.iter().zip(&once.gates) {
            assert!((&a.0 - &b.0).amax() < 1e-12);
        }
        assert!((twice.rho - once.rho).amax() < 1e-12);
    }

    #[test]
    fn identity_direction_has_zero_action() {
        let m = model1();
        let col = gauge_action_column(&m, &SuperOp::identity(4)).unwrap();
        assert!(col.amax() < 1e-14);
    }

    #[test]
    fn commuting_direction_leaves_identity_gate_alone() {
        // a gate set whose only gate is the identity
        let m = model1();
        let k = m
            .generators()
            .generator(m.generators().index_of(GeneratorKind::Hamiltonian, "Z").unwrap());
        let id = SuperOp::<f64>::identity(4);
        let delta = &k.0 - &id.0 * &k.0 * id.0.clone().try_inverse().unwrap();
        assert_eq!(m.generators().decompose(&delta).0.amax(), 0.0);
    }

    #[test]
    fn analytic_action_matches_finite_differences() {
        for spam in [false, true] {
            let m = GateSetModel::<f64>::standard_with_spam(1, spam).unwrap();
            let dirs = gauge_directions(&m);
            let phi = gauge_action_jacobian(&m).unwrap();
            for (a, k) in dirs.iter().enumerate() {
                let fd = finite_difference_column(&m, k, 1e-6);
                let analytic = phi.column(a).rows(0, m.n_gate_params()).into_owned();
                assert!((analytic - fd).amax() < 1e-6);
            }
        }
        let m2 = GateSetModel::<f64>::standard(2).unwrap();
        let phi = gauge_action_jacobian(&m2).unwrap();
        let k = &gauge_directions(&m2)[0];
        let fd = finite_difference_column(&m2, k, 1e-6);
        assert!((phi.column(0).into_owned() - fd).amax() < 1e-6);
    }

    #[test]
    fn fixed_spam_directions_preserve_spam() {
        let m = model1();
        let dirs = gauge_directions(&m);
        assert_eq!(dirs.len(), 3);
        for k in &dirs {
            assert!((&k.0 * m.target_rho()).amax() < 1e-12);
            for e in m.target_effects() {
                assert!((k.0.transpose() * e).amax() < 1e-12);
            }
        }
    }

    /// Rank by counting singular values above a sweep of cutoffs; the count
    /// must be stable across the sweep for the answer to be trusted.
    fn stable_rank(a: &DMatrix<f64>) -> usize {
        let sv = a.clone().singular_values();
        let smax = sv.max();
        let ranks: Vec<usize> = [1e-6, 1e-8, 1e-10, 1e-12]
            .iter()
            .map(|t| sv.iter().filter(|s| **s > t * smax).count())
            .collect();
        assert!(ranks.windows(2).all(|w| w[0] == w[1]), "unstable rank {ranks:?}");
        ranks[0]
    }

    #[test]
    fn fogi_counts() {
        let m = model1();
        let phi = gauge_action_jacobian(&m).unwrap();
        let f = model_fogi_basis(&m).unwrap();
        assert_eq!(f.n_fogi(), m.n_params() - stable_rank(&phi));
        assert_eq!((f.n_params(), f.n_fogi(), f.n_gauge()), (12, 9, 3));

        let m2 = GateSetModel::<f64>::standard(2).unwrap();
        let f2 = model_fogi_basis(&m2).unwrap();
        assert_eq!((f2.n_fogi(), f2.n_gauge()), (135, 15));
    }

    #[test]
    fn fogi_orthonormality() {
        for spam in [false, true] {
            let m = GateSetModel::<f64>::standard_with_spam(1, spam).unwrap();
            let f = model_fogi_basis(&m).unwrap();
            let b = f.basis();
            assert!((b.tr_mul(b) - DMatrix::identity(f.n_fogi(), f.n_fogi())).amax() < 1e-10);
            assert!(b.tr_mul(f.gauge_span()).amax() < 1e-10);
            // gauge_span spans the image of phi
            let phi = gauge_action_jacobian(&m).unwrap();
            let resid = &phi - f.gauge_span() * f.gauge_span().tr_mul(&phi);
            assert!(resid.amax() < 1e-8);
        }
    }

    #[test]
    fn zero_action_gives_identity_basis() {
        let labels: Vec<String> = (0..4).map(|i| format!("p{i}")).collect();
        let f = fogi_basis(&DMatrix::<f64>::zeros(4, 2), &labels, 1e-9).unwrap();
        assert_eq!(*f.basis(), DMatrix::identity(4, 4));
        assert_eq!(f.labels()[2], "p2");
    }

    #[test]
    fn over_rotation_is_a_fogi_coordinate() {
        let f = model_fogi_basis(&model1()).unwrap();
        let (w, norm) = f.functional("Gx:H:X").unwrap();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(w.iter().filter(|v| v.abs() > 1e-12).count(), 1);
        assert!(f.labels().iter().any(|l| l == "Gx:H:X"));
    }

    #[test]
    fn fogi_roundtrips() {
        let m = model1();
        let f = model_fogi_basis(&m).unwrap();
        assert_eq!(f.to_fogi(&m.zero_params()).unwrap().amax(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xf = DVector::from_fn(f.n_fogi(), |_, _| rng.random_range(-0.1..0.1));
        let back = f.to_fogi(&f.from_fogi(&xf).unwrap()).unwrap();
        assert!((back - &xf).amax() < 1e-12);
        let x = f.from_fogi(&xf).unwrap();
        let w = DVector::from_fn(f.n_gauge(), |_, _| rng.random_range(-1.0..1.0));
        let shifted = &x + f.gauge_span() * w;
        assert!((f.to_fogi(&shifted).unwrap() - f.to_fogi(&x).unwrap()).amax() < 1e-12);
        assert!(f.to_fogi(&DVector::zeros(3)).is_err());
        assert!(f.from_fogi(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn basis_file_roundtrip() {
        let f = model_fogi_basis(&model1()).unwrap();
        let text = serde_json::to_string(&f.to_file()).unwrap();
        let back = FogiBasis::from_file(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, f);
    }
}
