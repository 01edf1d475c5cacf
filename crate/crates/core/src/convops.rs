//! Contracting (`⋆`) and expansive (`∗`) one-channel convolutions, the
//! restricted (shared scalar bias) feature extractor, and translation
//! equivariance checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::primitives::{translate, Filter, SupportedVector, TranslationOp};

/// Absolute tolerance for the equivariance identity; it is exact in real arithmetic.
pub const EQUIVARIANCE_TOL: f64 = 1e-10;

const WITNESS_CANDIDATES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    /// No padding: `d′ → d′ − s`.
    Contracting,
    /// Full zero padding: `d′ → d′ + s`.
    Expansive,
}

impl ConvKind {
    pub fn output_len(self, input_len: usize, s: usize) -> Option<usize> {
        match self {
            ConvKind::Contracting => input_len.checked_sub(s).filter(|&n| n > 0),
            ConvKind::Expansive => Some(input_len + s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    None,
    /// One scalar `b` broadcast as `b·1` (the restricted operator).
    ScalarShared,
    FullVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerKind {
    pub tag: ConvKind,
    pub bias_mode: BiasMode,
    pub activated: bool,
}

/// `(w ∗ v)_j = Σ_k w_{j−k} v_k` written into `out` (length `v.len() + s`).
pub(crate) fn expansive_into(w: &[f64], v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), v.len() + w.len() - 1);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (k, &vk) in v.iter().enumerate() {
        if vk == 0.0 {
            continue;
        }
        for (t, &wt) in w.iter().enumerate() {
            out[k + t] += wt * vk;
        }
    }
}

/// `(w ⋆ v)_j = Σ_{t=0}^{s} w_t v_{j+s−t}` written into `out` (length `v.len() − s`).
pub(crate) fn contracting_into(w: &[f64], v: &[f64], out: &mut [f64]) {
    let s = w.len() - 1;
    debug_assert_eq!(out.len() + s, v.len());
    for (i, o) in out.iter_mut().enumerate() {
        *o = w.iter().enumerate().map(|(t, &wt)| wt * v[i + s - t]).sum();
    }
}

pub fn expansive_conv(w: &Filter, v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return invalid("expansive convolution needs a nonempty input");
    }
    let mut out = vec![0.0; v.len() + w.s()];
    expansive_into(w.coeffs(), v, &mut out);
    Ok(out)
}

pub fn contracting_conv(w: &Filter, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() <= w.s() {
        return invalid(format!(
            "contracting convolution needs input length > s (got d′={}, s={})",
            v.len(),
            w.s()
        ));
    }
    let mut out = vec![0.0; v.len() - w.s()];
    contracting_into(w.coeffs(), v, &mut out);
    Ok(out)
}

/// Applies a stack of convolutions of one kind, `w^L ⊗ ⋯ ⊗ w^1 ⊗ v`.
pub fn conv_stack(kind: ConvKind, filters: &[Filter], v: &[f64]) -> Result<Vec<f64>> {
    filters.iter().try_fold(v.to_vec(), |h, w| match kind {
        ConvKind::Contracting => contracting_conv(w, &h),
        ConvKind::Expansive => expansive_conv(w, &h),
    })
}

/// `w1 ∗ w2` as a filter on `{0, …, s1 + s2}`.
pub fn conv_compose(w1: &Filter, w2: &Filter) -> Filter {
    let mut out = vec![0.0; w1.s() + w2.s() + 1];
    expansive_into(w1.coeffs(), w2.coeffs(), &mut out);
    Filter::new(out).expect("composed filter has at least 3 coefficients")
}

/// Full convolution of two coefficient sequences (polynomial product).
pub fn convolve_sequences(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    expansive_into(a, b, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictedLayer {
    pub filter: Filter,
    pub bias: f64,
}

/// `σ∘C^R_L∘⋯∘σ∘C^R_1(x)` with `C^R(v) = w ∗ v + b·1`.
///
/// All layers must share one filter length so widths chain as `d, d+s, d+2s, …`.
pub fn restricted_forward(layers: &[RestrictedLayer], x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return invalid("restricted forward needs a nonempty input");
    }
    if let Some(first) = layers.first() {
        let s = first.filter.s();
        if let Some((i, l)) = layers.iter().enumerate().find(|(_, l)| l.filter.s() != s) {
            return invalid(format!(
                "width chain broken at layer {}: filter length s={} but the chain uses s={s}",
                i + 1,
                l.filter.s()
            ));
        }
    }
    let mut h = x.to_vec();
    for layer in layers {
        let mut next = expansive_conv(&layer.filter, &h)?;
        for z in &mut next {
            *z = (*z + layer.bias).max(0.0);
        }
        h = next;
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivarianceReport {
    pub holds: bool,
    pub max_abs_gap: f64,
}

/// Compares `conv(A_{j,d} v)` with `A_{j,d_L} conv(v)` for a stack of filters.
///
/// `j` follows the translation-matrix convention: `A_{1,d}` is the identity and
/// `A_{j,d}` moves the support `j − 1` places. The translated support must stay
/// inside the vector.
pub fn equivariance_check(
    kind: ConvKind,
    filters: &[Filter],
    v: &SupportedVector,
    j: usize,
) -> Result<EquivarianceReport> {
    let d = v.dim();
    if j < 1 || v.support_end() + (j - 1) > d {
        return invalid(format!(
            "shift j={j} moves support {{{}, …, {}}} outside dimension {d}",
            v.support_start(),
            v.support_end()
        ));
    }
    let shifted_input = translate(TranslationOp::new(j, d)?, v.values())?;
    let lhs = conv_stack(kind, filters, &shifted_input)?;
    let out = conv_stack(kind, filters, v.values())?;
    let out_dim = out.len();
    if j > out_dim {
        return invalid(format!("shift j={j} exceeds output dimension {out_dim}"));
    }
    let rhs = translate(TranslationOp::new(j, out_dim)?, &out)?;
    let max_abs_gap = lhs
        .iter()
        .zip(&rhs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(EquivarianceReport {
        holds: max_abs_gap <= EQUIVARIANCE_TOL,
        max_abs_gap,
    })
}

/// Searches for a filter and shift violating contracting-convolution
/// equivariance on the all-ones vector supported on `{1, …, p}`.
///
/// Shifts are drawn from `s ≤ j ≤ d′ − p − s`; returns `None` when that range is
/// empty or the parameters are outside `2 ≤ s ≤ d′`, `1 ≤ p ≤ d′`.
pub fn find_equivariance_witness(s: usize, d_prime: usize, p: usize) -> Option<(Filter, usize)> {
    if s < 2 || s > d_prime || p < 1 || p > d_prime || d_prime < p + 2 * s {
        return None;
    }
    let v = SupportedVector::new(d_prime, 1, &vec![1.0; p]).ok()?;
    let shifts = s..=(d_prime - p - s);

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let candidates = std::iter::once(vec![1.0; s + 1]).chain(
        std::iter::repeat_with(move || (0..=s).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .take(WITNESS_CANDIDATES - 1),
    );
    for coeffs in candidates {
        let w = Filter::new(coeffs).ok()?;
        for j in shifts.clone() {
            let report =
                equivariance_check(ConvKind::Contracting, std::slice::from_ref(&w), &v, j).ok()?;
            if !report.holds {
                return Some((w, j));
            }
        }
    }
    None
}
