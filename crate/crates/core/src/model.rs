//! Gate-set error models: targets, the Hamiltonian + Pauli-stochastic error
//! generator basis, and the map from a rate vector to a concrete gate set.
//!
//! Generator conventions (unnormalized Pauli strings `P`, eigenvalues +-1):
//!
//! * Hamiltonian `H_P(X) = -i [P, X]`. A rate `h` rotates by angle `2h`
//!   about the `P` axis.
//! * Stochastic `S_P(X) = P X P - X`. A rate `s` multiplies the transfer
//!   matrix eigenvalues of Paulis anticommuting with `P` by `exp(-2s)`.
//!
//! Parameter layout is gate-major. Each gate block lists the Hamiltonian
//! generators followed by the stochastic generators, both in
//! Pauli-lexicographic order (`X, Y, Z` for one qubit; `IX, IY, ..., ZZ`
//! for two). When SPAM rates are enabled a preparation block and a
//! measurement block follow the gate blocks.

use nalgebra::{Complex, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ptm::{check_cptp, matrix_exp, CMatrix, PauliBasis, SuperOp, CPTP_TOL};
use crate::scalar::Real;

/// Rate vector `x` laid out as documented at the module level.
pub type ParameterVector<T> = DVector<T>;

/// Tag written into serialized models so readers can reject files that use a
/// different generator normalization.
pub const GENERATOR_CONVENTION: &str = "H:-i[P,.];S:P.P-(.);P-unnormalized;basis:P/sqrt(2^n)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeneratorKind {
    Hamiltonian,
    Stochastic,
}

impl GeneratorKind {
    pub fn tag(self) -> &'static str {
        match self {
            GeneratorKind::Hamiltonian => "H",
            GeneratorKind::Stochastic => "S",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GeneratorLabel {
    pub kind: GeneratorKind,
    pub pauli: String,
}

impl std::fmt::Display for GeneratorLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.kind.tag(), self.pauli)
    }
}

/// Ordered H + S error generators as transfer matrices.
#[derive(Clone, Debug)]
pub struct ErrorGeneratorBasis<T: Real> {
    labels: Vec<GeneratorLabel>,
    generators: Vec<SuperOp<T>>,
    /// Inverse Gram matrix under the Frobenius inner product.
    gram_inv: DMatrix<T>,
}

impl<T: Real> ErrorGeneratorBasis<T> {
    pub fn hamiltonian_stochastic(basis: &PauliBasis<T>) -> Self {
        let minus_i = Complex::new(T::zero(), -T::one());
        let mut labels = Vec::new();
        let mut generators = Vec::new();
        for a in 1..basis.dim() {
            let p = basis.pauli(a).clone();
            generators.push(basis.ptm_of_map(|x: &CMatrix<T>| (&p * x - x * &p).map(|z| z * minus_i)));
            labels.push(GeneratorLabel {
                kind: GeneratorKind::Hamiltonian,
                pauli: basis.label(a).to_string(),
            });
        }
        for a in 1..basis.dim() {
            let p = basis.pauli(a).clone();
            generators.push(basis.ptm_of_map(|x: &CMatrix<T>| &p * x * &p - x));
            labels.push(GeneratorLabel {
                kind: GeneratorKind::Stochastic,
                pauli: basis.label(a).to_string(),
            });
        }
        let n = generators.len();
        let gram = DMatrix::from_fn(n, n, |i, j| generators[i].0.dot(&generators[j].0));
        let gram_inv = gram.try_inverse().expect("H+S generators are linearly independent");
        Self {
            labels,
            generators,
            gram_inv,
        }
    }

    pub fn len(&self) -> usize {
        self.generators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    pub fn generators(&self) -> &[SuperOp<T>] {
        &self.generators
    }

    pub fn generator(&self, j: usize) -> &SuperOp<T> {
        &self.generators[j]
    }

    pub fn labels(&self) -> &[GeneratorLabel] {
        &self.labels
    }

    pub fn index_of(&self, kind: GeneratorKind, pauli: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.kind == kind && l.pauli == pauli)
    }

    /// `sum_j rates_j L_j`.
    pub fn combine(&self, rates: &[T]) -> Result<DMatrix<T>> {
        if rates.len() != self.len() {
            return Err(Error::invalid(format!(
                "expected {} rates, got {}",
                self.len(),
                rates.len()
            )));
        }
        let dim = self.generators[0].dim();
        let mut out = DMatrix::zeros(dim, dim);
        for (g, &r) in self.generators.iter().zip(rates) {
            if r != T::zero() {
                out += &g.0 * r;
            }
        }
        Ok(out)
    }

    /// Least-squares coefficients of `m` in the generator basis, with the
    /// Frobenius norm of the part outside the span.
    pub fn decompose(&self, m: &DMatrix<T>) -> (DVector<T>, T) {
        let overlaps = DVector::from_iterator(self.len(), self.generators.iter().map(|g| g.0.dot(m)));
        let coeffs = &self.gram_inv * overlaps;
        let mut residual = m.clone();
        for (g, &c) in self.generators.iter().zip(coeffs.iter()) {
            residual -= &g.0 * c;
        }
        (coeffs, residual.norm())
    }

    /// Gram matrix of the generators, used to check linear independence.
    pub fn gram(&self) -> DMatrix<T> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| self.generators[i].0.dot(&self.generators[j].0))
    }
}

/// `exp(sum_j rates_j L_j) * target`.
pub fn build_gate<T: Real>(
    target: &SuperOp<T>,
    rates: &[T],
    generators: &ErrorGeneratorBasis<T>,
) -> Result<SuperOp<T>> {
    let gen = generators.combine(rates)?;
    if rates.iter().all(|r| *r == T::zero()) {
        return Ok(target.clone());
    }
    Ok(SuperOp(matrix_exp(&gen)? * &target.0))
}

#[derive(Clone, Debug)]
pub struct Gate<T: Real> {
    pub label: String,
    pub target: SuperOp<T>,
}

/// Gate set with target operations and a rate-vector parameterization.
#[derive(Clone, Debug)]
pub struct GateSetModel<T: Real> {
    basis: PauliBasis<T>,
    generators: ErrorGeneratorBasis<T>,
    rho: DVector<T>,
    effects: Vec<DVector<T>>,
    gates: Vec<Gate<T>>,
    spam: bool,
}

/// Concrete prep vector, gates and measurement effects at one parameter point.
#[derive(Clone, Debug)]
pub struct GateSetInstance<T: Real> {
    pub rho: DVector<T>,
    pub gates: Vec<SuperOp<T>>,
    pub effects: Vec<DVector<T>>,
}

impl<T: Real> GateSetInstance<T> {
    /// Raw outcome probabilities of the gate sequence (indices into `gates`,
    /// applied first to last).
    pub fn probabilities(&self, sequence: &[usize]) -> DVector<T> {
        let mut state = self.rho.clone();
        for &g in sequence {
            state = &self.gates[g].0 * state;
        }
        DVector::from_iterator(self.effects.len(), self.effects.iter().map(|e| e.dot(&state)))
    }

    /// Gauge transform `rho -> M rho`, `G -> M G M^-1`, `E -> E M^-1`.
    pub fn gauge_transform(&self, m: &SuperOp<T>) -> Result<Self> {
        let inv = invert_well_conditioned(&m.0)?;
        Ok(Self {
            rho: &m.0 * &self.rho,
            gates: self.gates.iter().map(|g| SuperOp(&m.0 * &g.0 * &inv)).collect(),
            effects: self
                .effects
                .iter()
                .map(|e| (e.transpose() * &inv).transpose())
                .collect(),
        })
    }
}

fn invert_well_conditioned<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid("gauge matrix must be square"));
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(min > T::zero()) || max / min >= T::lit(1e8) {
        return Err(Error::invalid(format!(
            "gauge matrix is singular or ill-conditioned (sigma_min {min}, sigma_max {max})"
        )));
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::invalid("gauge matrix is singular"))
}

fn rotation<T: Real>(axis: &CMatrix<T>, angle: f64) -> CMatrix<T> {
    // exp(-i angle/2 P) for a Pauli P
    let n = axis.nrows();
    let c = Complex::new(T::lit((angle / 2.0).cos()), T::zero());
    let s = Complex::new(T::zero(), T::lit(-(angle / 2.0).sin()));
    DMatrix::<Complex<T>>::identity(n, n).map(|z| z * c) + axis.map(|z| z * s)
}

fn single_qubit_pauli<T: Real>(index: usize) -> CMatrix<T> {
    PauliBasis::<T>::new(1).expect("one qubit").pauli(index).clone()
}

impl<T: Real> GateSetModel<T> {
    /// X(pi/2)/Y(pi/2) gate set on one qubit, or the same rotations on each
    /// of two qubits plus CNOT (control on the first qubit).
    pub fn standard(n_qubits: usize) -> Result<Self> {
        Self::standard_with_spam(n_qubits, false)
    }

    pub fn standard_with_spam(n_qubits: usize, spam: bool) -> Result<Self> {
        let basis = PauliBasis::<T>::new(n_qubits)?;
        let generators = ErrorGeneratorBasis::hamiltonian_stochastic(&basis);
        let x = single_qubit_pauli::<T>(1);
        let y = single_qubit_pauli::<T>(2);
        let gx = rotation(&x, std::f64::consts::FRAC_PI_2);
        let gy = rotation(&y, std::f64::consts::FRAC_PI_2);
        let id = single_qubit_pauli::<T>(0);
        let unitaries: Vec<(&str, CMatrix<T>)> = match n_qubits {
            1 => vec![("Gx", gx), ("Gy", gy)],
            2 => {
                let one = Complex::new(T::one(), T::zero());
                let zero = Complex::new(T::zero(), T::zero());
                let mut cnot = DMatrix::from_element(4, 4, zero);
                cnot[(0, 0)] = one;
                cnot[(1, 1)] = one;
                cnot[(2, 3)] = one;
                cnot[(3, 2)] = one;
                vec![
                    ("Gxi", gx.kronecker(&id)),
                    ("Gyi", gy.kronecker(&id)),
                    ("Gix", id.kronecker(&gx)),
                    ("Giy", id.kronecker(&gy)),
                    ("Gcnot", cnot),
                ]
            }
            _ => unreachable!("PauliBasis validated the qubit count"),
        };
        let gates = unitaries
            .into_iter()
            .map(|(label, u)| Gate {
                label: label.to_string(),
                target: basis.ptm_of_unitary(&u),
            })
            .collect();

        let d = basis.hilbert_dim();
        let projector = |j: usize| {
            let mut m = DMatrix::from_element(d, d, Complex::new(T::zero(), T::zero()));
            m[(j, j)] = Complex::new(T::one(), T::zero());
            m
        };
        let rho = basis.vectorize(&projector(0));
        let effects = (0..d).map(|j| basis.vectorize(&projector(j))).collect();
        Ok(Self {
            basis,
            generators,
            rho,
            effects,
            gates,
            spam,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.basis.n_qubits()
    }

    pub fn basis(&self) -> &PauliBasis<T> {
        &self.basis
    }

    pub fn generators(&self) -> &ErrorGeneratorBasis<T> {
        &self.generators
    }

    pub fn gates(&self) -> &[Gate<T>] {
        &self.gates
    }

    pub fn gate_labels(&self) -> Vec<String> {
        self.gates.iter().map(|g| g.label.clone()).collect()
    }

    pub fn gate_index(&self, label: &str) -> Option<usize> {
        self.gates.iter().position(|g| g.label == label)
    }

    pub fn target_rho(&self) -> &DVector<T> {
        &self.rho
    }

    pub fn target_effects(&self) -> &[DVector<T>] {
        &self.effects
    }

    pub fn n_outcomes(&self) -> usize {
        self.effects.len()
    }

    pub fn spam_enabled(&self) -> bool {
        self.spam
    }

    /// Rates per gate (or SPAM) block.
    pub fn block_len(&self) -> usize {
        self.generators.len()
    }

    pub fn n_gate_params(&self) -> usize {
        self.gates.len() * self.block_len()
    }

    /// Length of the full parameter vector.
    pub fn n_params(&self) -> usize {
        self.n_gate_params() + if self.spam { 2 * self.block_len() } else { 0 }
    }

    /// Start of the rate block for gate `g`.
    pub fn gate_offset(&self, g: usize) -> usize {
        g * self.block_len()
    }

    pub fn rho_offset(&self) -> Option<usize> {
        self.spam.then(|| self.n_gate_params())
    }

    pub fn povm_offset(&self) -> Option<usize> {
        self.spam.then(|| self.n_gate_params() + self.block_len())
    }

    /// Human-readable label of every parameter, e.g. `Gx:H:X` or `rho:S:Z`.
    pub fn param_labels(&self) -> Vec<String> {
        let mut owners: Vec<&str> = self.gates.iter().map(|g| g.label.as_str()).collect();
        if self.spam {
            owners.push("rho");
            owners.push("povm");
        }
        owners
            .iter()
            .flat_map(|o| self.generators.labels().iter().map(move |l| format!("{o}:{l}")))
            .collect()
    }

    pub fn param_index(&self, label: &str) -> Option<usize> {
        self.param_labels().iter().position(|l| l == label)
    }

    pub fn zero_params(&self) -> ParameterVector<T> {
        DVector::zeros(self.n_params())
    }

    fn check_layout(&self, x: &ParameterVector<T>) -> Result<()> {
        if x.len() != self.n_params() {
            return Err(Error::invalid(format!(
                "parameter vector has length {}, model expects {}",
                x.len(),
                self.n_params()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameter vector has non-finite entries"));
        }
        Ok(())
    }

    fn block<'a>(&self, x: &'a ParameterVector<T>, offset: usize) -> &'a [T] {
        &x.as_slice()[offset..offset + self.block_len()]
    }

    /// Gate `g` built at parameter point `x`.
    pub fn build_gate_at(&self, g: usize, x: &ParameterVector<T>) -> Result<SuperOp<T>> {
        self.check_layout(x)?;
        build_gate(
            &self.gates[g].target,
            self.block(x, self.gate_offset(g)),
            &self.generators,
        )
    }

    pub fn instantiate(&self, x: &ParameterVector<T>) -> Result<GateSetInstance<T>> {
        self.check_layout(x)?;
        let gates = (0..self.gates.len())
            .map(|g| {
                build_gate(
                    &self.gates[g].target,
                    self.block(x, self.gate_offset(g)),
                    &self.generators,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let (rho, effects) = match (self.rho_offset(), self.povm_offset()) {
            (Some(r), Some(e)) => {
                let prep = build_gate(&SuperOp::identity(self.basis.dim()), self.block(x, r), &self.generators)?;
                let meas = build_gate(&SuperOp::identity(self.basis.dim()), self.block(x, e), &self.generators)?;
                (
                    &prep.0 * &self.rho,
                    self.effects
                        .iter()
                        .map(|eff| (eff.transpose() * &meas.0).transpose())
                        .collect(),
                )
            }
            _ => (self.rho.clone(), self.effects.clone()),
        };
        Ok(GateSetInstance { rho, gates, effects })
    }

    pub fn target_instance(&self) -> GateSetInstance<T> {
        GateSetInstance {
            rho: self.rho.clone(),
            gates: self.gates.iter().map(|g| g.target.clone()).collect(),
            effects: self.effects.clone(),
        }
    }

    /// Mean over gates of the average gate infidelity against the targets.
    pub fn avg_gate_infidelity(&self, x: &ParameterVector<T>) -> Result<T> {
        let inst = self.instantiate(x)?;
        let d = T::from_usize_lossy(self.basis.hilbert_dim());
        let total = self
            .gates
            .iter()
            .zip(&inst.gates)
            .fold(T::zero(), |acc, (gate, built)| {
                acc + (T::one() - average_fidelity(&gate.target, built, d))
            });
        Ok(total / T::from_usize_lossy(self.gates.len()))
    }

    /// Every built gate (and SPAM map) passes [`check_cptp`].
    pub fn is_cptp(&self, x: &ParameterVector<T>) -> Result<bool> {
        let inst = self.instantiate(x)?;
        let tol = T::lit(CPTP_TOL);
        for g in &inst.gates {
            if !check_cptp(&self.basis, g, tol)?.is_cptp {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// `F_avg = (d F_ent + 1) / (d + 1)` with `F_ent = Tr(target^T actual) / d^2`.
pub fn average_fidelity<T: Real>(target: &SuperOp<T>, actual: &SuperOp<T>, d: T) -> T {
    let f_ent = target.0.dot(&actual.0) / (d * d);
    (d * f_ent + T::one()) / (d + T::one())
}

/// Largest number of consecutive non-CPTP draws tolerated.
pub const MAX_TRUTH_REJECTIONS: usize = 100;

impl GateSetModel<f64> {
    /// Random H + S rate vector whose average gate infidelity is close to
    /// `target_infidelity`, with `coherent_fraction` of it from Hamiltonian
    /// rates.
    ///
    /// Hamiltonian rates are drawn from `N(0, sigma_H^2)` and stochastic
    /// rates from `|N(0, sigma_S^2)|`; the two scales are solved separately
    /// so each error type contributes its share of the target.
    pub fn random_truth_model(
        &self,
        target_infidelity: f64,
        coherent_fraction: f64,
        seed: u64,
    ) -> Result<ParameterVector<f64>> {
        if !(target_infidelity > 0.0 && target_infidelity <= 0.1) {
            return Err(Error::invalid(format!(
                "target infidelity {target_infidelity} outside (0, 0.1]"
            )));
        }
        if !(0.0..=1.0).contains(&coherent_fraction) {
            return Err(Error::invalid(format!(
                "coherent fraction {coherent_fraction} outside [0, 1]"
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = self.n_params();
        let block = self.block_len();
        let half = block / 2;
        let is_hamiltonian = |i: usize| (i % block) < half;

        for _ in 0..MAX_TRUTH_REJECTIONS {
            let mut ham = DVector::zeros(n);
            let mut sto = DVector::zeros(n);
            for i in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                if is_hamiltonian(i) {
                    ham[i] = z;
                } else {
                    sto[i] = z.abs();
                }
            }
            let ham_scale = self.scale_for(&ham, coherent_fraction * target_infidelity)?;
            let sto_scale = self.scale_for(&sto, (1.0 - coherent_fraction) * target_infidelity)?;
            let x = ham * ham_scale + sto * sto_scale;
            if self.is_cptp(&x)? {
                return Ok(x);
            }
        }
        Err(Error::GenerationFailure(MAX_TRUTH_REJECTIONS))
    }

    /// Scale `a` such that `avg_gate_infidelity(a * direction) = goal`.
    fn scale_for(&self, direction: &DVector<f64>, goal: f64) -> Result<f64> {
        if goal <= 0.0 || direction.iter().all(|v| *v == 0.0) {
            return Ok(0.0);
        }
        let infid = |a: f64| self.avg_gate_infidelity(&(direction * a));
        let mut hi = 1e-3;
        while infid(hi)? < goal {
            hi *= 2.0;
            if hi > 1e3 {
                return Err(Error::Numerical("could not bracket the requested infidelity".into()));
            }
        }
        let mut lo = 0.0;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if infid(mid)? < goal {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    pub fn to_config(&self, rates: &ParameterVector<f64>, seed: Option<u64>) -> ModelConfig {
        ModelConfig {
            n_qubits: self.n_qubits(),
            gate_labels: self.gate_labels(),
            generator_convention: GENERATOR_CONVENTION.to_string(),
            spam: self.spam,
            param_labels: self.param_labels(),
            rates: rates.iter().copied().collect(),
            seed,
        }
    }

    /// Rebuilds the standard model a config describes, returning it with the
    /// stored rate vector.
    pub fn from_config(config: &ModelConfig) -> Result<(Self, ParameterVector<f64>)> {
        if config.generator_convention != GENERATOR_CONVENTION {
            return Err(Error::Parse(format!(
                "unsupported generator convention {:?}",
                config.generator_convention
            )));
        }
        let model = Self::standard_with_spam(config.n_qubits, config.spam)?;
        if model.gate_labels() != config.gate_labels {
            return Err(Error::Parse(format!(
                "gate labels {:?} do not match the standard {}-qubit gate set",
                config.gate_labels, config.n_qubits
            )));
        }
        let x = DVector::from_vec(config.rates.clone());
        model.check_layout(&x)?;
        Ok((model, x))
    }
}

/// JSON form of a model and one rate vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_qubits: usize,
    pub gate_labels: Vec<String>,
    pub generator_convention: String,
    pub spam: bool,
    pub param_labels: Vec<String>,
    pub rates: Vec<f64>,
    pub seed: Option<u64>,
}
