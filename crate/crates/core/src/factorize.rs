//! Compiling dense layers into cascades of short filters.
//!
//! A long sequence `u` is split into short filters by factoring its symbol
//! `ũ(z) = Σ u_k z^k` over the reals; a dense matrix `W` is turned into such a
//! sequence by interleaving its rows, so that a location-based pooling of the
//! Toeplitz product picks out `W x`. Adding shared scalar biases that keep
//! every hidden ReLU in its identity region then gives an eDCNN stage that
//! computes `σ(W x + θ)` exactly.

use nalgebra::{Complex, DMatrix, DVector, Schur};
use serde::{Deserialize, Serialize};

use crate::convops::{convolve_sequences, expansive_into};
use crate::error::{invalid, Error, Result};
use crate::nets::DenseNet;
use crate::primitives::{pool, translate, Filter, Matrix, PoolingSpec, SupportedVector, TranslationOp};

/// Relative cutoff below which trailing symbol coefficients are treated as zero.
pub const DEGREE_TOLERANCE: f64 = 1e-12;

/// Reconstruction error a cascade must reach before it is used by the compilers.
pub const RECONSTRUCTION_TOL: f64 = 1e-8;

/// Gap under which two compiled evaluations are considered equal, relative
/// to `max(1, ‖output‖∞)`.
pub const INVARIANCE_TOL: f64 = 1e-6;

const BIAS_MARGIN: f64 = 1e-9;
const NEWTON_POLISH_STEPS: usize = 3;
const REFINE_STEPS: usize = 12;

/// Coefficients `u_0, …, u_S` of the symbol `ũ(z) = Σ u_k z^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymbolPolynomial {
    pub coeffs: Vec<f64>,
}

impl SymbolPolynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.max_abs() == 0.0
    }

    /// Largest `k` with `|u_k| > DEGREE_TOLERANCE · max|u|`, or `None` for the zero polynomial.
    pub fn effective_degree(&self) -> Option<usize> {
        let cutoff = DEGREE_TOLERANCE * self.max_abs();
        self.coeffs.iter().rposition(|c| c.abs() > cutoff)
    }
}

/// Filters `w^1, …, w^L` on `{0, …, s}` with `w^L ∗ ⋯ ∗ w^1 ≈ u`.
///
/// `filters[0]` is applied first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCascade {
    pub s: usize,
    pub filters: Vec<Filter>,
    /// `max_k |(w^L ∗ ⋯ ∗ w^1)_k − u_k| / max_k |u_k|`.
    pub reconstruction_error: f64,
}

impl FilterCascade {
    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    /// The composed sequence `w^L ∗ ⋯ ∗ w^1`.
    pub fn compose(&self) -> Vec<f64> {
        compose_all(self.filters.iter().map(Filter::coeffs))
    }

    /// Appends delta filters until the cascade has `len` filters.
    pub fn pad_with_deltas(&mut self, len: usize) {
        while self.filters.len() < len {
            self.filters.push(Filter::delta(self.s));
        }
    }

    /// `w^L ∗ ⋯ ∗ w^1 ∗ x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for w in &self.filters {
            let mut next = vec![0.0; h.len() + w.s()];
            expansive_into(w.coeffs(), &h, &mut next);
            h = next;
        }
        h
    }
}

fn compose_all<'a>(seqs: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    seqs.into_iter()
        .fold(vec![1.0], |acc, w| convolve_sequences(&acc, w))
}

fn relative_error(approx: &[f64], target: &[f64]) -> f64 {
    let scale = target.iter().fold(0.0, |m: f64, c| m.max(c.abs()));
    let n = approx.len().max(target.len());
    let gap = (0..n)
        .map(|k| {
            let a = approx.get(k).copied().unwrap_or(0.0);
            let t = target.get(k).copied().unwrap_or(0.0);
            (a - t).abs()
        })
        .fold(0.0, f64::max);
    if scale == 0.0 {
        gap
    } else {
        gap / scale
    }
}

// ---------------------------------------------------------------------------
// Root finding

fn horner(coeffs: &[f64], z: Complex<f64>) -> (Complex<f64>, Complex<f64>) {
    let mut p = Complex::new(0.0, 0.0);
    let mut dp = Complex::new(0.0, 0.0);
    for &c in coeffs.iter().rev() {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

/// In-place diagonal similarity scaling (powers of two) to even out row and column norms.
fn balance(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    loop {
        let mut converged = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let total = c + r;
            let mut f = 1.0;
            let mut g = r / 2.0;
            while c < g {
                f *= 2.0;
                c *= 4.0;
            }
            g = r * 2.0;
            while c > g {
                f /= 2.0;
                c /= 4.0;
            }
            if (c + r) / f < 0.95 * total {
                converged = false;
                for j in 0..n {
                    a[(i, j)] /= f;
                    a[(j, i)] *= f;
                }
            }
        }
        if converged {
            break;
        }
    }
}

/// Roots of `Σ coeffs[k] z^k` (leading coefficient nonzero, `coeffs[0]` nonzero)
/// via eigenvalues of the balanced companion matrix, each polished by Newton steps.
/// Complex roots are returned in exact conjugate pairs.
fn companion_roots(coeffs: &[f64]) -> Result<Vec<Complex<f64>>> {
    let n = coeffs.len() - 1;
    if n == 0 {
        return Ok(Vec::new());
    }
    let lead = coeffs[n];
    if n == 1 {
        return Ok(vec![Complex::new(-coeffs[0] / lead, 0.0)]);
    }
    let mut companion = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..n {
        companion[(i, n - 1)] = -coeffs[i] / lead;
    }
    balance(&mut companion);
    let schur = Schur::try_new(companion, f64::EPSILON, 100 * n.max(10)).ok_or_else(|| {
        Error::NumericFailure(format!(
            "companion-matrix eigenvalue iteration did not converge (degree {n})"
        ))
    })?;
    let eig = schur.complex_eigenvalues();

    let mut roots = Vec::with_capacity(n);
    let mut upper = Vec::new();
    for z in eig.iter() {
        if !z.re.is_finite() || !z.im.is_finite() {
            return Err(Error::NumericFailure(format!(
                "non-finite eigenvalue {z} for a degree-{n} symbol"
            )));
        }
        if z.im == 0.0 {
            roots.push(polish(coeffs, *z, true));
        } else if z.im > 0.0 {
            upper.push(polish(coeffs, *z, false));
        }
    }
    for z in upper {
        if z.im == 0.0 {
            // Polishing collapsed the pair onto the real axis: keep it as a double real root.
            roots.push(z);
            roots.push(z);
        } else {
            roots.push(z);
            roots.push(z.conj());
        }
    }
    if roots.len() != n {
        return Err(Error::NumericFailure(format!(
            "eigenvalues of the degree-{n} companion matrix are not closed under conjugation \
             ({} roots recovered)",
            roots.len()
        )));
    }
    Ok(roots)
}

fn polish(coeffs: &[f64], mut z: Complex<f64>, real: bool) -> Complex<f64> {
    let (mut p, _) = horner(coeffs, z);
    for _ in 0..NEWTON_POLISH_STEPS {
        let (_, dp) = horner(coeffs, z);
        if dp.norm() == 0.0 {
            break;
        }
        let mut cand = z - p / dp;
        if real {
            cand.im = 0.0;
        }
        let (pc, _) = horner(coeffs, cand);
        if !(pc.norm() < p.norm()) {
            break;
        }
        z = cand;
        p = pc;
    }
    z
}

// ---------------------------------------------------------------------------
// Factorization

/// Splits `u` into at most `⌈S/(s−1)⌉` filters on `{0, …, s}`.
///
/// Complex roots are kept in conjugate pairs (real quadratics); real roots and
/// quadratics are packed into factors of degree `≤ s`, the factors are ordered
/// to keep partial products small, and a Gauss–Newton pass on the filter
/// coefficients absorbs root-finding error. The leading coefficient is folded
/// into the first filter.
pub fn factor_filter(u: &SymbolPolynomial, s: usize) -> Result<FilterCascade> {
    if s < 2 {
        return invalid(format!("factorization needs filter length s >= 2, got {s}"));
    }
    if u.coeffs.iter().any(|c| !c.is_finite()) {
        return invalid("symbol has non-finite coefficients");
    }
    let degree = u
        .effective_degree()
        .ok_or_else(|| Error::InvalidArgument("cannot factor the zero polynomial".into()))?;
    let trimmed = &u.coeffs[..=degree];

    if degree <= s {
        let filter = Filter::new(trimmed.to_vec())
            .unwrap_or_else(|_| Filter::new(vec![trimmed[0], 0.0]).expect("two coefficients"))
            .padded_to(s)?;
        let reconstruction_error = relative_error(filter.coeffs(), &u.coeffs);
        return Ok(FilterCascade {
            s,
            filters: vec![filter],
            reconstruction_error,
        });
    }

    // Low-order zeros are exact roots at the origin.
    let zeros_at_origin = trimmed.iter().position(|&c| c != 0.0).unwrap_or(0);
    let reduced = &trimmed[zeros_at_origin..];
    let lead = reduced[reduced.len() - 1];

    let mut roots = companion_roots(reduced)?;
    roots.extend(std::iter::repeat(Complex::new(0.0, 0.0)).take(zeros_at_origin));

    let mut factors = pack_factors(&roots, s);
    order_factors(&mut factors);
    for c in factors[0].iter_mut() {
        *c *= lead;
    }
    refine(&mut factors, trimmed);

    let filters = factors
        .into_iter()
        .map(|f| {
            let mut f = f;
            if f.len() < 2 {
                f.push(0.0);
            }
            Filter::new(f).and_then(|f| f.padded_to(s))
        })
        .collect::<Result<Vec<_>>>()?;
    let composed = compose_all(filters.iter().map(Filter::coeffs));
    let reconstruction_error = relative_error(&composed, &u.coeffs);
    if !reconstruction_error.is_finite() {
        return Err(Error::NumericFailure(format!(
            "factorization of a degree-{degree} symbol produced non-finite coefficients"
        )));
    }
    Ok(FilterCascade {
        s,
        filters,
        reconstruction_error,
    })
}

/// Monic real factors (ascending coefficients) of degree `≤ s` from a
/// conjugation-closed root list, never splitting a conjugate pair.
fn pack_factors(roots: &[Complex<f64>], s: usize) -> Vec<Vec<f64>> {
    let mut linear: Vec<Vec<f64>> = Vec::new();
    let mut quadratic: Vec<Vec<f64>> = Vec::new();
    for z in roots {
        if z.im == 0.0 {
            linear.push(vec![-z.re, 1.0]);
        } else if z.im > 0.0 {
            quadratic.push(vec![z.norm_sqr(), -2.0 * z.re, 1.0]);
        }
    }

    let mut bins: Vec<Vec<f64>> = Vec::new();
    let mut room: Vec<usize> = Vec::new();
    for q in quadratic {
        match room.iter().position(|&r| r >= 2) {
            Some(b) => {
                bins[b] = convolve_sequences(&bins[b], &q);
                room[b] -= 2;
            }
            None => {
                bins.push(q);
                room.push(s - 2);
            }
        }
    }
    for l in linear {
        match room.iter().position(|&r| r >= 1) {
            Some(b) => {
                bins[b] = convolve_sequences(&bins[b], &l);
                room[b] -= 1;
            }
            None => {
                bins.push(l);
                room.push(s - 1);
            }
        }
    }
    bins
}

/// Greedy ordering: each next factor is the one keeping the running product smallest.
fn order_factors(factors: &mut Vec<Vec<f64>>) {
    let mut remaining = std::mem::take(factors);
    let mut partial = vec![1.0];
    while !remaining.is_empty() {
        let (best, next) = remaining
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let p = convolve_sequences(&partial, f);
                let size = p.iter().fold(0.0, |m: f64, c| m.max(c.abs()));
                (i, size, p)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _, p)| (i, p))
            .expect("nonempty");
        partial = next;
        factors.push(remaining.swap_remove(best));
    }
}

/// Minimum-norm Gauss–Newton steps on all factor coefficients towards `target`.
fn refine(factors: &mut [Vec<f64>], target: &[f64]) {
    let n_params: usize = factors.iter().map(Vec::len).sum();
    let n_out = target.len();
    let mut best = factors.to_vec();
    let mut best_err = relative_error(&compose_all(factors.iter().map(Vec::as_slice)), target);

    for _ in 0..REFINE_STEPS {
        if best_err <= 1e-15 {
            break;
        }
        let current: Vec<Vec<f64>> = best.clone();
        let product = compose_all(current.iter().map(Vec::as_slice));
        let residual = DVector::from_fn(n_out, |k, _| {
            target[k] - product.get(k).copied().unwrap_or(0.0)
        });

        // Products of all factors but one, via prefix/suffix products.
        let mut prefix = vec![vec![1.0]];
        for f in &current {
            let next = convolve_sequences(prefix.last().unwrap(), f);
            prefix.push(next);
        }
        let mut suffix = vec![vec![1.0]; current.len() + 1];
        for i in (0..current.len()).rev() {
            suffix[i] = convolve_sequences(&suffix[i + 1], &current[i]);
        }
        let mut jac = DMatrix::<f64>::zeros(n_out, n_params);
        let mut col = 0;
        for (i, f) in current.iter().enumerate() {
            let others = convolve_sequences(&prefix[i], &suffix[i + 1]);
            for t in 0..f.len() {
                for (k, &o) in others.iter().enumerate() {
                    if k + t < n_out {
                        jac[(k + t, col)] = o;
                    }
                }
                col += 1;
            }
        }

        let svd = jac.svd(true, true);
        let cutoff = 1e-13 * svd.singular_values.max();
        let step = match svd.solve(&residual, cutoff) {
            Ok(step) => step,
            Err(_) => break,
        };

        let mut candidate = current.clone();
        let mut idx = 0;
        for f in candidate.iter_mut() {
            for c in f.iter_mut() {
                *c += step[idx];
                idx += 1;
            }
        }
        let err = relative_error(&compose_all(candidate.iter().map(Vec::as_slice)), target);
        if err.is_finite() && err < best_err {
            best = candidate;
            best_err = err;
        } else {
            break;
        }
    }
    for (f, b) in factors.iter_mut().zip(best) {
        *f = b;
    }
}

/// Interleaves the rows of `W` (`d̃ × d′`) into a sequence with
/// `u_{j·d′−k} = W_{j,k}` (1-based), so that row `j·d′` of the Toeplitz matrix
/// `T^u` equals row `j` of `W`.
pub fn matrix_to_sequence(w: &Matrix) -> SymbolPolynomial {
    let (rows, cols) = (w.rows(), w.cols());
    let mut u = vec![0.0; rows * cols];
    for j in 1..=rows {
        for k in 1..=cols {
            u[j * cols - k] = w[(j - 1, k - 1)];
        }
    }
    SymbolPolynomial::new(u)
}

/// `⌈n·d′/(s−1)⌉`, the cascade depth used for an `n × d′` matrix.
pub fn cascade_depth(rows: usize, cols: usize, s: usize) -> usize {
    (rows * cols).div_ceil(s - 1)
}

/// A cascade of exactly `⌈n·d′/(s−1)⌉` filters realising `W` through pooling
/// with stride `d′`. A zero matrix yields a zero filter followed by deltas.
pub fn factor_matrix(w: &Matrix, s: usize) -> Result<FilterCascade> {
    if s < 2 {
        return invalid(format!("factorization needs filter length s >= 2, got {s}"));
    }
    if w.rows() == 0 || w.cols() == 0 {
        return invalid("cannot factor an empty matrix");
    }
    let depth = cascade_depth(w.rows(), w.cols(), s);
    let mut cascade = if w.is_zero() {
        FilterCascade {
            s,
            filters: vec![Filter::zero(s)],
            reconstruction_error: 0.0,
        }
    } else {
        factor_filter(&matrix_to_sequence(w), s)?
    };
    if cascade.len() > depth {
        return Err(Error::NumericFailure(format!(
            "factorization used {} filters, more than the bound {depth}",
            cascade.len()
        )));
    }
    cascade.pad_with_deltas(depth);
    Ok(cascade)
}

/// Linear chain `W^J ⋯ W^1`: one pooled cascade per matrix.
pub fn compile_matrix_chain(ws: &[Matrix], s: usize) -> Result<Vec<(FilterCascade, PoolingSpec)>> {
    for pair in ws.windows(2) {
        if pair[1].cols() != pair[0].rows() {
            return invalid(format!(
                "matrix chain mismatch: {}x{} followed by {}x{}",
                pair[0].rows(),
                pair[0].cols(),
                pair[1].rows(),
                pair[1].cols()
            ));
        }
    }
    ws.iter()
        .map(|w| {
            let cascade = factor_matrix(w, s)?;
            let width = w.cols() + cascade.len() * s;
            let pooling = PoolingSpec::with_output_len(width, w.cols(), 0, w.rows())?;
            Ok((cascade, pooling))
        })
        .collect()
}

pub fn apply_matrix_chain(chain: &[(FilterCascade, PoolingSpec)], x: &[f64]) -> Result<Vec<f64>> {
    chain.iter().try_fold(x.to_vec(), |h, (cascade, pooling)| {
        if h.len() != pooling.stride {
            return invalid(format!(
                "chain stage expects input of length {}, got {}",
                pooling.stride,
                h.len()
            ));
        }
        pool(pooling, &cascade.apply(&h))
    })
}

// ---------------------------------------------------------------------------
// Compiled networks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasSynthesis {
    /// Exact lower bounds of each hidden pre-activation over the input box.
    #[default]
    Tight,
    /// `b^ℓ = 2^{ℓ−1} B^ℓ` with `B^ℓ = ‖w^ℓ‖₁ B^{ℓ−1}`, `B^0` the input bound.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePooling {
    pub stride: usize,
    pub offset: usize,
    pub output_len: usize,
}

fn is_true(b: &bool) -> bool {
    *b
}

fn default_true() -> bool {
    true
}

/// One pooled restricted-eDCNN block: hidden layers `σ(w^ℓ ∗ h + b^ℓ·1)`, a last
/// layer with a full bias vector, then location-based pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledStage {
    pub filters: Vec<Filter>,
    pub scalar_biases: Vec<f64>,
    pub final_bias: Vec<f64>,
    pub pooling: StagePooling,
    /// Whether the last layer applies ReLU (true for every `σ(Wx+θ)` layer).
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub activated: bool,
}

impl CompiledStage {
    pub fn depth(&self) -> usize {
        self.filters.len()
    }

    pub fn input_len(&self) -> usize {
        self.final_bias.len() - self.filters.iter().map(Filter::s).sum::<usize>()
    }

    pub fn parameter_count(&self) -> usize {
        self.filters.iter().map(|f| f.s() + 1).sum::<usize>()
            + self.scalar_biases.len()
            + self.final_bias.len()
    }

    /// Output before pooling.
    pub fn pre_pool(&self, x: &[f64]) -> Vec<f64> {
        let last = self.filters.len() - 1;
        let mut h = x.to_vec();
        for (l, w) in self.filters.iter().enumerate() {
            let mut next = vec![0.0; h.len() + w.s()];
            expansive_into(w.coeffs(), &h, &mut next);
            if l < last {
                let b = self.scalar_biases[l];
                next.iter_mut().for_each(|z| *z = (*z + b).max(0.0));
            } else {
                for (z, b) in next.iter_mut().zip(&self.final_bias) {
                    *z += b;
                    if self.activated {
                        *z = z.max(0.0);
                    }
                }
            }
            h = next;
        }
        h
    }

    pub fn forward(&self, x: &[f64], offset: usize) -> Result<Vec<f64>> {
        if x.len() != self.input_len() {
            return invalid(format!(
                "stage expects input of length {}, got {}",
                self.input_len(),
                x.len()
            ));
        }
        let h = self.pre_pool(x);
        let spec =
            PoolingSpec::with_output_len(h.len(), self.pooling.stride, offset, self.pooling.output_len)?;
        pool(&spec, &h)
    }

    fn validate(&self, index: usize, s: usize, input_len: usize) -> Result<()> {
        let ctx = |msg: String| Error::Input(format!("stage {index}: {msg}"));
        if self.filters.is_empty() {
            return Err(ctx("no filters".into()));
        }
        if let Some(f) = self.filters.iter().find(|f| f.s() != s) {
            return Err(ctx(format!("filter with s={} in a network with s={s}", f.s())));
        }
        if self.scalar_biases.len() + 1 != self.filters.len() {
            return Err(ctx(format!(
                "{} scalar biases for {} filters",
                self.scalar_biases.len(),
                self.filters.len()
            )));
        }
        let width = input_len + self.filters.len() * s;
        if self.final_bias.len() != width {
            return Err(ctx(format!(
                "final bias has length {}, expected {width}",
                self.final_bias.len()
            )));
        }
        if self.pooling.stride == 0 || self.pooling.offset > width {
            return Err(ctx("invalid pooling parameters".into()));
        }
        Ok(())
    }
}

/// A dense network compiled into pooled restricted eDCNN stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledEDCNN {
    pub s: usize,
    pub stages: Vec<CompiledStage>,
    pub input_dim: usize,
    pub input_bound: f64,
}

impl CompiledEDCNN {
    pub fn output_dims(&self) -> Vec<usize> {
        self.stages.iter().map(|st| st.pooling.output_len).collect()
    }

    pub fn output_dim(&self) -> usize {
        self.stages.last().map_or(self.input_dim, |st| st.pooling.output_len)
    }

    pub fn parameter_count(&self) -> usize {
        self.stages.iter().map(CompiledStage::parameter_count).sum()
    }

    /// Filter coefficients only, the quantity bounded by `3·Σ d_j d_{j−1}`.
    pub fn filter_parameter_count(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|st| &st.filters)
            .map(|f| f.s() + 1)
            .sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_with_offset(x, 0)
    }

    /// Forward pass with the first stage pooled at `first_offset`.
    pub fn forward_with_offset(&self, x: &[f64], first_offset: usize) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return invalid(format!(
                "compiled network expects input of length {}, got {}",
                self.input_dim,
                x.len()
            ));
        }
        self.stages
            .iter()
            .enumerate()
            .try_fold(x.to_vec(), |h, (i, st)| {
                st.forward(&h, if i == 0 { first_offset } else { st.pooling.offset })
            })
    }

    /// Structural consistency: filter lengths, bias lengths and width chain.
    pub fn validate(&self) -> Result<()> {
        if self.s < 2 {
            return Err(Error::Input(format!("filter length s={} < 2", self.s)));
        }
        let mut width = self.input_dim;
        for (i, st) in self.stages.iter().enumerate() {
            st.validate(i, self.s, width)?;
            width = st.pooling.output_len;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(s)?;
        net.validate()?;
        Ok(net)
    }
}

fn partial_window_l1(p: &[f64], row: usize, input_len: usize) -> f64 {
    // Σ_{k=1..d} |p_{i−k}| for 1-based row i = row + 1.
    (0..input_len)
        .filter_map(|k| row.checked_sub(k).and_then(|m| p.get(m)))
        .map(|c| c.abs())
        .sum()
}

/// Hidden-layer scalar biases for a cascade applied to inputs in `[−bound, bound]^d`.
fn synthesize_biases(
    filters: &[Filter],
    input_len: usize,
    bound: f64,
    mode: BiasSynthesis,
) -> Result<Vec<f64>> {
    let hidden = filters.len().saturating_sub(1);
    let mut biases = Vec::with_capacity(hidden);
    match mode {
        BiasSynthesis::Paper => {
            let mut big_b = bound;
            for (l, w) in filters[..hidden].iter().enumerate() {
                big_b *= w.l1_norm();
                let b = 2f64.powi(l as i32) * big_b;
                if !b.is_finite() {
                    return Err(Error::NumericFailure(format!(
                        "paper-mode bias b^{} overflows double precision; use tight mode",
                        l + 1
                    )));
                }
                biases.push(b);
            }
        }
        BiasSynthesis::Tight => {
            let mut partial = vec![1.0];
            let mut offset = vec![0.0; input_len];
            for w in &filters[..hidden] {
                partial = convolve_sequences(&partial, w.coeffs());
                let mut shifted = vec![0.0; offset.len() + w.s()];
                expansive_into(w.coeffs(), &offset, &mut shifted);
                let lowest = shifted
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c - bound * partial_window_l1(&partial, i, input_len))
                    .fold(f64::INFINITY, f64::min);
                let b = BIAS_MARGIN - lowest;
                if !b.is_finite() {
                    return Err(Error::NumericFailure("non-finite bias in tight mode".into()));
                }
                shifted.iter_mut().for_each(|c| *c += b);
                offset = shifted;
                biases.push(b);
            }
        }
    }
    Ok(biases)
}

/// Smallest hidden pre-activation over `[−bound, bound]^d`, computed from the
/// exact affine form of each hidden layer. Nonnegative means every hidden ReLU
/// acts as the identity on the box.
pub fn relu_affine_certificate(stage: &CompiledStage, bound: f64) -> f64 {
    let input_len = stage.input_len();
    let hidden = stage.filters.len() - 1;
    let mut partial = vec![1.0];
    let mut offset = vec![0.0; input_len];
    let mut worst = f64::INFINITY;
    for (w, &b) in stage.filters[..hidden].iter().zip(&stage.scalar_biases) {
        partial = convolve_sequences(&partial, w.coeffs());
        let mut next = vec![0.0; offset.len() + w.s()];
        expansive_into(w.coeffs(), &offset, &mut next);
        next.iter_mut().for_each(|c| *c += b);
        for (i, c) in next.iter().enumerate() {
            worst = worst.min(c - bound * partial_window_l1(&partial, i, input_len));
        }
        offset = next;
    }
    worst
}

/// Compiles `x ↦ σ(W x + θ)` (or `W x + θ` when `activated` is false) into one
/// pooled stage, exact for inputs in `[−input_bound, input_bound]^{d′}`.
///
/// The final bias is block-replicated (`θ_j` on rows `j·d′, …, j·d′ + d′ − 1`)
/// so that the stage stays exact when the pooling offset follows a translated input.
pub fn compile_dense_layer(
    w: &Matrix,
    theta: &[f64],
    s: usize,
    input_bound: f64,
    mode: BiasSynthesis,
    activated: bool,
) -> Result<CompiledStage> {
    let (n, d) = (w.rows(), w.cols());
    if s < 2 {
        return invalid(format!("compilation needs filter length s >= 2, got {s}"));
    }
    if theta.len() != n {
        return invalid(format!("bias has length {}, expected {n}", theta.len()));
    }
    if !(input_bound.is_finite() && input_bound >= 0.0) {
        return invalid(format!("input bound must be finite and nonnegative, got {input_bound}"));
    }
    let cascade = factor_matrix(w, s)?;
    if cascade.reconstruction_error > RECONSTRUCTION_TOL {
        return Err(Error::NumericFailure(format!(
            "filter factorization of a {n}x{d} layer reached relative error {:.3e} > {:.0e}",
            cascade.reconstruction_error, RECONSTRUCTION_TOL
        )));
    }
    let filters = cascade.filters;
    let scalar_biases = synthesize_biases(&filters, d, input_bound, mode)?;
    let width = d + filters.len() * s;

    let mut stage = CompiledStage {
        filters,
        scalar_biases,
        final_bias: vec![0.0; width],
        pooling: StagePooling {
            stride: d,
            offset: 0,
            output_len: n,
        },
        activated: false,
    };
    // Accumulated bias offset: the cascade at x = 0, where every hidden
    // pre-activation is nonnegative by construction. The last layer stays
    // linear here so negative offsets survive.
    let offset = stage.pre_pool(&vec![0.0; d]);
    stage.activated = activated;
    stage.final_bias = (0..width)
        .map(|r| {
            let block = (r + 1) / d;
            let t = if (1..=n).contains(&block) { theta[block - 1] } else { 0.0 };
            t - offset[r]
        })
        .collect();
    if stage.final_bias.iter().any(|b| !b.is_finite()) {
        return Err(Error::NumericFailure(
            "accumulated bias offset is not finite; use tight mode".into(),
        ));
    }
    Ok(stage)
}

/// Sup-norm bound of `σ(Wx+θ)` (or `Wx+θ`) over `[−bound, bound]^d` by interval propagation.
fn layer_output_bound(w: &Matrix, theta: &[f64], bound: f64, activated: bool) -> f64 {
    (0..w.rows())
        .map(|j| {
            let spread = bound * w.row(j).iter().map(|c| c.abs()).sum::<f64>();
            let (lo, hi) = (theta[j] - spread, theta[j] + spread);
            if activated {
                hi.max(0.0)
            } else {
                lo.abs().max(hi.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Compiles every layer of a dense network; stage `ℓ` is synthesised for the
/// interval bound of stage `ℓ−1`'s output.
pub fn compile_dense_net(
    net: &DenseNet,
    s: usize,
    input_bound: f64,
    mode: BiasSynthesis,
) -> Result<CompiledEDCNN> {
    net.validate()?;
    let mut bound = input_bound;
    let mut stages = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        stages.push(compile_dense_layer(
            &layer.weights,
            &layer.bias,
            s,
            bound,
            mode,
            layer.activated,
        )?);
        bound = layer_output_bound(&layer.weights, &layer.bias, bound, layer.activated);
    }
    Ok(CompiledEDCNN {
        s,
        stages,
        input_dim: net.input_dim,
        input_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub equal: bool,
    pub max_abs_gap: f64,
}

/// Compares the compiled network on `x` with the network on `x` translated by
/// `shift` places (`A_{shift+1,d} x`) and first-stage pooling offset `shift`.
pub fn verify_translation_invariance(
    compiled: &CompiledEDCNN,
    x: &SupportedVector,
    shift: usize,
) -> Result<InvarianceReport> {
    let d = compiled.input_dim;
    if x.dim() != d {
        return invalid(format!("input has dimension {}, network expects {d}", x.dim()));
    }
    if x.support_end() + shift > d {
        return invalid(format!(
            "shift {shift} moves support ending at {} outside dimension {d}",
            x.support_end()
        ));
    }
    let stride = compiled.stages.first().map_or(d, |st| st.pooling.stride);
    if shift >= stride.max(1) {
        return invalid(format!(
            "shift {shift} is not an admissible first-stage pooling offset (stride {stride})"
        ));
    }
    let base = compiled.forward(x.values())?;
    let moved = translate(TranslationOp::by(shift, d)?, x.values())?;
    let shifted = compiled.forward_with_offset(&moved, shift)?;
    let max_abs_gap = base
        .iter()
        .zip(&shifted)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(InvarianceReport {
        equal: max_abs_gap <= INVARIANCE_TOL * base.iter().fold(1.0f64, |m, v| m.max(v.abs())),
        max_abs_gap,
    })
}
