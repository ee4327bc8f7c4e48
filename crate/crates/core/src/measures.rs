//! Data- and weight-dependent quantities consumed by the bounds: patch norms,
//! threshold gaps, σ′ norms, empirical Lipschitz constants of subnetworks and
//! the norm-concentration Monte-Carlo check.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::convnet::{
    layer_input, subnet_jacobian, ActivationTrace, Activation, Architecture, ConvOperator, WeightSet,
};
use crate::error::{Error, Result};
use crate::linalg::{l1, l2, matrix_norms, spectral_norm, LinearOperator, Matrix, SpectralOptions};
use crate::scalar::Scalar;

/// `|x|_level`: the largest L2 norm of a patch the next layer reads,
/// constant coordinate included when that layer has an offset.
pub fn patch_norm<T: Scalar>(arch: &Architecture, level: usize, x: &[T]) -> Result<f64> {
    if level >= arch.depth() {
        return Err(Error::invalid("level", "the output level has no patches"));
    }
    if x.len() != arch.level_len(level) {
        return Err(Error::shape("activation length differs from the level"));
    }
    let spec = &arch.layers[level];
    let input = layer_input(x, spec.offset);
    Ok(spec
        .patches
        .patches()
        .iter()
        .map(|p| p.iter().map(|&i| input[i].as_f64().powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max))
}

/// `B_level(X)`: the largest patch norm over a dataset of traces.
#[allow(non_snake_case)]
pub fn patch_norm_B<T: Scalar>(arch: &Architecture, traces: &[ActivationTrace<T>], level: usize) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::invalid("traces", "empty dataset"));
    }
    let mut best = 0.0f64;
    for t in traces {
        best = best.max(patch_norm(arch, level, t.level(level))?);
    }
    Ok(best)
}

/// `|x|_{∞,level}`: the largest channel-vector norm of a pixel, over the
/// coordinates the next layer reads.
pub fn pixel_norm_inf<T: Scalar>(arch: &Architecture, level: usize, x: &[T]) -> f64 {
    let (channels, w) = arch.level_shape(level);
    let mut read = vec![false; x.len()];
    for p in arch.level_patches(level) {
        for i in p {
            read[i] = true;
        }
    }
    (0..w)
        .map(|p| {
            (0..channels)
                .map(|u| u * w + p)
                .filter(|&i| read[i])
                .map(|i| x[i].as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Smallest distance to a decision threshold in one layer: relu inputs are
/// compared with 0, each pooling window of size ≥ 2 contributes its max
/// minus second max. `+∞` when the layer has no thresholds.
pub fn threshold_gap<T: Scalar>(pre: &Matrix<T>, windows: &[Vec<usize>], activation: Activation) -> f64 {
    let mut gap = f64::INFINITY;
    for j in 0..pre.rows() {
        let row = pre.row(j);
        for win in windows {
            let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &q in win {
                let v = row[q].as_f64();
                if v > first {
                    second = first;
                    first = v;
                } else if v > second {
                    second = v;
                }
            }
            if win.len() > 1 {
                gap = gap.min(first - second);
            }
            if activation == Activation::Relu {
                gap = gap.min(first.abs());
            }
        }
    }
    gap
}

/// `E_level(x)` for one trace; level 0 and the output level give `+∞`.
pub fn preactivation_gap<T: Scalar>(arch: &Architecture, trace: &ActivationTrace<T>, level: usize) -> f64 {
    if level == 0 || level > arch.depth() {
        return f64::INFINITY;
    }
    let spec = arch.layer(level);
    threshold_gap(&trace.layers[level - 1].pre, spec.pooling.windows(), spec.activation)
}

/// Smallest gap over levels `from..=to`.
pub fn subnet_gap<T: Scalar>(arch: &Architecture, trace: &ActivationTrace<T>, from: usize, to: usize) -> f64 {
    (from..=to)
        .map(|l| preactivation_gap(arch, trace, l))
        .fold(f64::INFINITY, f64::min)
}

/// `‖Ã^l‖_{∞→∞}`: the largest row L1 norm of the filter matrix.
pub fn layer_theta_bound<T: Scalar>(w: &WeightSet<T>, l: usize) -> f64 {
    let a = &w.filters[l - 1];
    (0..a.rows()).map(|j| l1(a.row(j)).as_f64()).fold(0.0, f64::max)
}

/// How the per-input gaps are turned into the thresholds `E_l`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GapAggregation {
    /// Half the smallest gap, so every input meets `E_l(x) ≥ 2 E_l`.
    HalfMin,
    /// A third of the largest gap.
    ThirdMax,
}

impl GapAggregation {
    pub fn name(self) -> &'static str {
        match self {
            GapAggregation::HalfMin => "half_min",
            GapAggregation::ThirdMax => "third_max",
        }
    }
}

/// Dataset-level statistics of one activation level.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub level: usize,
    /// `B_level(X)`; `None` at the output level, where `γ` takes its place.
    pub b: Option<f64>,
    /// Smallest per-input gap.
    pub e_min: f64,
    /// Largest per-input gap.
    pub e_max: f64,
    pub pixel_inf: f64,
    pub kappa: f64,
}

impl LayerStats {
    pub fn e_threshold(&self, agg: GapAggregation) -> f64 {
        match agg {
            GapAggregation::HalfMin => self.e_min / 2.0,
            GapAggregation::ThirdMax => self.e_max / 3.0,
        }
    }
}

/// Statistics for levels `0..=L`.
pub fn layer_stats<T: Scalar>(arch: &Architecture, traces: &[ActivationTrace<T>]) -> Result<Vec<LayerStats>> {
    if traces.is_empty() {
        return Err(Error::invalid("traces", "empty dataset"));
    }
    let depth = arch.depth();
    (0..=depth)
        .map(|level| {
            let b = if level < depth {
                Some(patch_norm_B(arch, traces, level)?)
            } else {
                None
            };
            let gaps: Vec<f64> = traces.iter().map(|t| preactivation_gap(arch, t, level)).collect();
            let pixel_inf = traces
                .iter()
                .map(|t| pixel_norm_inf(arch, level, t.level(level)))
                .fold(0.0, f64::max);
            Ok(LayerStats {
                level,
                b,
                e_min: gaps.iter().copied().fold(f64::INFINITY, f64::min),
                e_max: gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                pixel_inf,
                kappa: arch.kappa(level),
            })
        })
        .collect()
}

/// Rows of a linear operator kept by index.
pub struct RowSubset<'a, T> {
    inner: &'a dyn LinearOperator<T>,
    rows: Vec<usize>,
}

impl<'a, T: Scalar> RowSubset<'a, T> {
    pub fn new(inner: &'a dyn LinearOperator<T>, rows: Vec<usize>) -> Result<Self> {
        if rows.iter().any(|&r| r >= inner.rows()) {
            return Err(Error::invalid("rows", "row index beyond the operator"));
        }
        Ok(RowSubset { inner, rows })
    }
}

impl<T: Scalar> LinearOperator<T> for RowSubset<'_, T> {
    fn rows(&self) -> usize {
        self.rows.len()
    }

    fn cols(&self) -> usize {
        self.inner.cols()
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        let mut full = vec![T::zero(); self.inner.rows()];
        self.inner.apply(x, &mut full);
        for (dst, &r) in y.iter_mut().zip(&self.rows) {
            *dst = full[r];
        }
    }

    fn apply_transpose(&self, y: &[T], x: &mut [T]) {
        let mut full = vec![T::zero(); self.inner.rows()];
        for (&v, &r) in y.iter().zip(&self.rows) {
            full[r] += v;
        }
        self.inner.apply_transpose(&full, x);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmaMode {
    Exact,
    Upper,
    Sampled,
}

impl SigmaMode {
    pub fn name(self) -> &'static str {
        match self {
            SigmaMode::Exact => "exact",
            SigmaMode::Upper => "upper",
            SigmaMode::Sampled => "sampled",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaPrime {
    pub value: f64,
    /// True when the value is the exact σ′ (up to the spectral tolerance).
    pub exact: bool,
    pub mode: SigmaMode,
    pub converged: bool,
}

/// Number of keep-one-row-per-window selections.
pub fn selection_count(windows: &[Vec<usize>]) -> f64 {
    windows.iter().map(|w| w.len() as f64).product()
}

/// `σ′`: the largest spectral norm over submatrices keeping one row of each
/// pooling window (windows are lists of operator rows).
pub fn sigma_prime(
    op: &dyn LinearOperator<f64>,
    windows: &[Vec<usize>],
    mode: SigmaMode,
    budget: usize,
    opts: &SpectralOptions,
) -> Result<SigmaPrime> {
    let mut seen = vec![false; op.rows()];
    for &r in windows.iter().flatten() {
        if r >= op.rows() {
            return Err(Error::invalid("windows", format!("row {r} beyond the operator")));
        }
        if seen[r] {
            return Err(Error::invalid("windows", format!("row {r} in two windows")));
        }
        seen[r] = true;
    }
    let count = selection_count(windows);
    let single = windows.iter().all(|w| w.len() == 1);
    let subset_norm = |rows: Vec<usize>| -> Result<(f64, bool)> {
        let sub = RowSubset::new(op, rows)?;
        let s = spectral_norm(&sub, opts)?;
        Ok((s.value, s.converged))
    };
    if single {
        let (value, converged) = subset_norm(windows.iter().map(|w| w[0]).collect())?;
        return Ok(SigmaPrime {
            value,
            exact: true,
            mode,
            converged,
        });
    }
    match mode {
        SigmaMode::Upper => {
            let s = spectral_norm(op, opts)?;
            Ok(SigmaPrime {
                value: s.value,
                exact: false,
                mode,
                converged: s.converged,
            })
        }
        SigmaMode::Exact => {
            if count > budget as f64 {
                return Err(Error::BudgetExceeded { count, budget });
            }
            let mut idx = vec![0usize; windows.len()];
            let mut best = 0.0f64;
            let mut converged = true;
            loop {
                let rows = windows.iter().zip(&idx).map(|(w, &i)| w[i]).collect();
                let (v, c) = subset_norm(rows)?;
                best = best.max(v);
                converged &= c;
                let mut k = 0;
                loop {
                    if k == windows.len() {
                        return Ok(SigmaPrime {
                            value: best,
                            exact: true,
                            mode,
                            converged,
                        });
                    }
                    idx[k] += 1;
                    if idx[k] < windows[k].len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
            }
        }
        SigmaMode::Sampled => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x51_6d_a5);
            let mut best = 0.0f64;
            let mut converged = true;
            for _ in 0..budget.max(1) {
                let rows = windows
                    .iter()
                    .map(|w| *w.choose(&mut rng).expect("nonempty window"))
                    .collect();
                let (v, c) = subset_norm(rows)?;
                best = best.max(v);
                converged &= c;
            }
            Ok(SigmaPrime {
                value: best,
                exact: false,
                mode,
                converged,
            })
        }
    }
}

/// Rows of `Ã^l` grouped by pooling window: channel `j`, window `p` holds
/// rows `j O + o` for the window's positions `o`.
pub fn row_windows(arch: &Architecture, l: usize) -> Vec<Vec<usize>> {
    let spec = arch.layer(l);
    let o = spec.num_patches();
    (0..spec.filters)
        .flat_map(|j| {
            spec.pooling
                .windows()
                .iter()
                .map(move |win| win.iter().map(|&q| j * o + q).collect())
        })
        .collect()
}

/// σ′ of layer `l`; for the output layer this is `ρ_L max_i ‖A^L_i‖`.
pub fn layer_sigma_prime(
    arch: &Architecture,
    w: &WeightSet<f64>,
    l: usize,
    mode: SigmaMode,
    budget: usize,
    opts: &SpectralOptions,
) -> Result<SigmaPrime> {
    let spec = arch.layer(l);
    let a = &w.filters[l - 1];
    if l == arch.depth() {
        let rows = matrix_norms(a)?.max_row_l2;
        return Ok(SigmaPrime {
            value: spec.rho * rows,
            exact: true,
            mode,
            converged: true,
        });
    }
    let op = ConvOperator::new(a, &spec.patches)?;
    sigma_prime(&op, &row_windows(arch, l), mode, budget, opts)
}

/// Local Lipschitz constants of a subnetwork at one input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lipschitz {
    /// ℓ∞ → ℓ∞ bound: largest row L1 norm of the Jacobian.
    pub theta: f64,
    /// ℓ∞ → patch-ℓ2 bound: largest `√(Σ_{rows in patch} (row L1)²)`.
    pub rho: f64,
}

pub fn lipschitz_from_jacobian<T: Scalar>(j: &Matrix<T>, patches: &[Vec<usize>]) -> Lipschitz {
    let row_l1: Vec<f64> = (0..j.rows()).map(|r| l1(j.row(r)).as_f64()).collect();
    let theta = row_l1.iter().copied().fold(0.0, f64::max);
    let rho = patches
        .iter()
        .map(|p| p.iter().map(|&r| row_l1[r] * row_l1[r]).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    Lipschitz { theta, rho }
}

/// θ and ρ of `F^{l1→l2}` at `trace`, with output patches of level `l2`.
pub fn empirical_lipschitz<T: Scalar>(
    arch: &Architecture,
    w: &WeightSet<T>,
    trace: &ActivationTrace<T>,
    l1: usize,
    l2: usize,
) -> Result<Lipschitz> {
    let j = subnet_jacobian(arch, w, trace, l1, l2)?;
    Ok(lipschitz_from_jacobian(&j, &arch.level_patches(l2)))
}

/// θ and ρ for every pair `1 ≤ l1 ≤ l2 ≤ L` at one input, indexed
/// `[l1][l2]`; entries are `None` where the Jacobian is undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzProfile {
    pub entries: Vec<Vec<Option<Lipschitz>>>,
}

impl LipschitzProfile {
    pub fn get(&self, l1: usize, l2: usize) -> Option<Lipschitz> {
        self.entries.get(l1).and_then(|r| r.get(l2)).copied().flatten()
    }

    /// True when every pair was computed.
    pub fn complete(&self) -> bool {
        self.entries
            .iter()
            .enumerate()
            .skip(1)
            .all(|(l1, row)| row.iter().skip(l1).all(Option::is_some))
    }
}

pub fn lipschitz_profile<T: Scalar>(
    arch: &Architecture,
    w: &WeightSet<T>,
    trace: &ActivationTrace<T>,
) -> LipschitzProfile {
    let depth = arch.depth();
    let mut entries = vec![vec![None; depth + 1]; depth + 1];
    for (l1, row) in entries.iter_mut().enumerate().skip(1) {
        for (l2, cell) in row.iter_mut().enumerate().skip(l1) {
            *cell = empirical_lipschitz(arch, w, trace, l1, l2).ok();
        }
    }
    LipschitzProfile { entries }
}

/// `ρ^𝒜_l = max(max_i max_{l̃≥l} ρ_{l→l̃}/b_{l̃}, max_i max_{l̃≥l} θ_{l→l̃}/E_{l̃})`.
///
/// `b` and `e` are indexed by level `0..=L` with `b[L] = γ`; an infinite
/// `e` contributes nothing. Profiles lacking an entry are skipped.
pub fn rho_aggregate(profiles: &[LipschitzProfile], b: &[f64], e: &[f64], l: usize) -> Result<f64> {
    let depth = b.len().checked_sub(1).ok_or_else(|| Error::invalid("b", "empty"))?;
    if e.len() != b.len() || l == 0 || l > depth {
        return Err(Error::shape("thresholds do not match the layer range"));
    }
    let mut best = 0.0f64;
    for lt in l..=depth {
        if b[lt] <= 0.0 {
            return Err(Error::ZeroDivisor(format!("vanishing patch norm B at level {lt}")));
        }
        if e[lt] <= 0.0 {
            return Err(Error::ZeroDivisor(format!("vanishing threshold gap E at level {lt}")));
        }
        for p in profiles {
            if let Some(lip) = p.get(l, lt) {
                best = best.max(lip.rho / b[lt]);
                if e[lt].is_finite() {
                    best = best.max(lip.theta / e[lt]);
                }
            }
        }
    }
    Ok(best)
}

/// Filter- and operator-level norms of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorms {
    pub layer: usize,
    /// Patch count `O`.
    pub patches: usize,
    /// Spatial width after pooling `w`.
    pub out_width: usize,
    /// Post-pooling neurons `k`.
    pub k: usize,
    pub kappa: f64,
    /// `‖(A−M)ᵀ‖_{2,1}`.
    pub a21: f64,
    /// `‖A−M‖_F`.
    pub fro_dist: f64,
    /// `‖A‖_F`.
    pub fro: f64,
    /// `max_i ‖A_i‖`.
    pub max_row: f64,
    /// `‖Ã‖_σ`.
    pub spectral: f64,
    pub spectral_converged: bool,
    pub sigma_prime: SigmaPrime,
    /// `‖(Ã−M̃)ᵀ‖_{2,1} = O ‖(A−M)ᵀ‖_{2,1}`.
    pub expanded_a21: f64,
    /// `‖Ã−M̃‖_F = √O ‖A−M‖_F`.
    pub expanded_fro_dist: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct NormOptions {
    pub spectral: SpectralOptions,
    /// Used when `Ã` has more entries than `large_entries`.
    pub large_spectral: SpectralOptions,
    pub large_entries: usize,
    pub sigma_mode: SigmaMode,
    pub sigma_budget: usize,
}

impl Default for NormOptions {
    fn default() -> Self {
        NormOptions {
            spectral: SpectralOptions::default(),
            large_spectral: SpectralOptions {
                rel_tol: 1e-4,
                max_iter: 400,
                restarts: 3,
                ..SpectralOptions::default()
            },
            large_entries: 4_000_000,
            sigma_mode: SigmaMode::Exact,
            sigma_budget: 4096,
        }
    }
}

/// Norms of every layer of `w` relative to the reference weights `refs`.
/// Exact σ′ falls back to the upper mode when the budget is exceeded.
pub fn layer_norms(
    arch: &Architecture,
    w: &WeightSet<f64>,
    refs: &WeightSet<f64>,
    opts: &NormOptions,
) -> Result<Vec<LayerNorms>> {
    w.check(arch)?;
    refs.check(arch)?;
    (1..=arch.depth())
        .map(|l| {
            let spec = arch.layer(l);
            let a = &w.filters[l - 1];
            let diff = a.sub(&refs.filters[l - 1])?;
            let dn = matrix_norms(&diff)?;
            let an = matrix_norms(a)?;
            let o = spec.num_patches();
            let entries = spec.pre_len().saturating_mul(spec.patches.input_len());
            let sopts = if entries > opts.large_entries {
                opts.large_spectral
            } else {
                opts.spectral
            };
            let op = ConvOperator::new(a, &spec.patches)?;
            let s = spectral_norm(&op, &sopts)?;
            let sigma_prime = if l == arch.depth() {
                layer_sigma_prime(arch, w, l, opts.sigma_mode, opts.sigma_budget, &sopts)?
            } else if spec.pooling.is_trivial() {
                SigmaPrime {
                    value: s.value,
                    exact: true,
                    mode: opts.sigma_mode,
                    converged: s.converged,
                }
            } else {
                match layer_sigma_prime(arch, w, l, opts.sigma_mode, opts.sigma_budget, &sopts) {
                    Err(Error::BudgetExceeded { .. }) => SigmaPrime {
                        value: s.value,
                        exact: false,
                        mode: SigmaMode::Upper,
                        converged: s.converged,
                    },
                    other => other?,
                }
            };
            Ok(LayerNorms {
                layer: l,
                patches: o,
                out_width: spec.out_width(),
                k: spec.out_len(),
                kappa: arch.kappa(l),
                a21: dn.l21_of_transpose,
                fro_dist: dn.frobenius,
                fro: an.frobenius,
                max_row: an.max_row_l2,
                spectral: s.value,
                spectral_converged: s.converged,
                sigma_prime,
                expanded_a21: o as f64 * dn.l21_of_transpose,
                expanded_fro_dist: (o as f64).sqrt() * dn.frobenius,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConcentrationReport {
    pub c: f64,
    pub u: f64,
    pub failures: usize,
    pub trials: usize,
    pub failure_rate: f64,
    /// `5 e^{−2ε²n}`.
    pub bound: f64,
}

/// `√n ‖x‖₂ / ‖x‖₁`.
pub fn norm_ratio(x: &[f64]) -> f64 {
    (x.len() as f64).sqrt() * l2(x) / l1(x)
}

/// Samples standard normal vectors and counts violations of
/// `C(1−U)‖X‖₁ ≤ √n‖X‖₂ ≤ C(1+U)‖X‖₁`.
pub fn norm_concentration_check(n: usize, trials: usize, eps: f64, seed: u64) -> Result<ConcentrationReport> {
    if !(eps > 0.0 && eps < 1.0 / 3.0) {
        return Err(Error::invalid("eps", "must lie in (0, 1/3)"));
    }
    if n == 0 || trials == 0 {
        return Err(Error::invalid("n", "dimension and trials must be positive"));
    }
    let second: f64 = 1.0;
    let first = (2.0 / std::f64::consts::PI).sqrt();
    let c = second.sqrt() / first;
    let u = 4.0 * eps / second + 4.0 * eps / first + eps;
    let mut failures = 0;
    let mut x = vec![0.0; n];
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        for v in x.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let r = norm_ratio(&x);
        if !(c * (1.0 - u) <= r && r <= c * (1.0 + u)) {
            failures += 1;
        }
    }
    Ok(ConcentrationReport {
        c,
        u,
        failures,
        trials,
        failure_rate: failures as f64 / trials as f64,
        bound: 5.0 * (-2.0 * eps * eps * n as f64).exp(),
    })
}

/// `|F^{0→l}(x)|_l` for levels `0..L`.
pub fn level_norms<T: Scalar>(arch: &Architecture, trace: &ActivationTrace<T>) -> Result<Vec<f64>> {
    (0..arch.depth()).map(|l| patch_norm(arch, l, trace.level(l))).collect()
}

/// `E_l(x)` for levels `0..=L`.
pub fn level_gaps<T: Scalar>(arch: &Architecture, trace: &ActivationTrace<T>) -> Vec<f64> {
    (0..=arch.depth()).map(|l| preactivation_gap(arch, trace, l)).collect()
}
