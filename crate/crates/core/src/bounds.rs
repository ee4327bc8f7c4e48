//! Bound expressions evaluated as pure formulas over measured quantities.
//!
//! Conventions shared by every evaluator: unsubscripted logarithms are
//! natural, `log2` is binary, unspecified absolute constants equal
//! `BoundInputs::constant` (1 by default), and 2,1 norms of filter matrices
//! are taken of the transpose, i.e. summed row norms.

use crate::error::{Error, Result};

/// `num / den`, treating `0 / 0` as 0.
fn ratio(num: f64, den: f64, what: &str) -> Result<f64> {
    if den == 0.0 {
        if num == 0.0 {
            return Ok(0.0);
        }
        return Err(Error::ZeroDivisor(what.to_string()));
    }
    Ok(num / den)
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be positive and finite, got {v}")))
    }
}

fn nonneg(name: &'static str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be nonnegative and finite, got {v}")))
    }
}

/// `(Σ t^{2/3})^{3/2}`.
pub fn aggregate_two_thirds(terms: &[f64]) -> f64 {
    terms.iter().map(|t| t.powf(2.0 / 3.0)).sum::<f64>().powf(1.5)
}

/// Spectral norm and distance term of one layer of a baseline bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineLayer {
    /// `‖A‖_σ` of the (expanded) operator.
    pub spectral: f64,
    /// The distance-to-initialization norm the baseline uses.
    pub distance: f64,
}

/// Per-layer ratios `distance / ‖A‖_σ` entering the spectral baselines.
pub fn baseline_ratios(layers: &[BaselineLayer]) -> Result<Vec<f64>> {
    layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            nonneg("spectral", l.spectral)?;
            nonneg("distance", l.distance)?;
            ratio(l.distance, l.spectral, &format!("zero spectral norm at layer {}", i + 1))
        })
        .collect()
}

/// Spectrally normalized capacity
/// `M = (1/√n) ∏‖A^i‖_σ (Σ (‖(A^i−M^i)ᵀ‖_{2,1}/‖A^i‖_σ)^{2/3})^{3/2}`,
/// with `distance` the 2,1 norm of each expanded layer.
pub fn bartlett_capacity(layers: &[BaselineLayer], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n", "need at least one sample"));
    }
    let r = baseline_ratios(layers)?;
    let prod: f64 = layers.iter().map(|l| l.spectral).product();
    Ok(prod * aggregate_two_thirds(&r) / (n as f64).sqrt())
}

/// PAC-Bayesian capacity
/// `(L√W/(γ√n)) ∏‖A^i‖_σ (Σ ‖A^i−M^i‖_F²/‖A^i‖_σ²)^{1/2}`, with `distance`
/// the Frobenius distance of each expanded layer.
pub fn neyshabur_capacity(layers: &[BaselineLayer], n: usize, gamma: f64, width: usize) -> Result<f64> {
    positive("gamma", gamma)?;
    if n == 0 {
        return Err(Error::invalid("n", "need at least one sample"));
    }
    let r = baseline_ratios(layers)?;
    let prod: f64 = layers.iter().map(|l| l.spectral).product();
    let depth = layers.len() as f64;
    let s: f64 = r.iter().map(|x| x * x).sum();
    Ok(depth * (width as f64).sqrt() / (gamma * (n as f64).sqrt()) * prod * s.sqrt())
}

/// One layer of a fully connected network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenseLayer {
    pub spectral: f64,
    /// `‖(A−M)ᵀ‖_{2,1}`.
    pub a21: f64,
    /// `‖A‖_F`, used for the last layer only.
    pub fro: f64,
    /// `max_i ‖A_i‖`, used for the last layer only.
    pub max_row: f64,
}

/// `R_𝒜 = L max_i‖A^L_i‖ ∏_{i<L}‖A^i‖_σ (Σ_{i<L} (‖(A^i−M^i)ᵀ‖_{2,1}/‖A^i‖_σ)^{2/3}
/// + (‖A^L‖_F / max_i‖A^L_i‖)^{2/3})^{3/2}`.
#[allow(non_snake_case)]
pub fn fully_connected_RA(layers: &[DenseLayer]) -> Result<f64> {
    let (last, hidden) = layers
        .split_last()
        .ok_or_else(|| Error::invalid("layers", "need at least one layer"))?;
    if last.max_row <= 0.0 {
        return Err(Error::ZeroDivisor("last layer has no nonzero row".into()));
    }
    let mut sum = 0.0;
    let mut prod = 1.0;
    for (i, l) in hidden.iter().enumerate() {
        sum += ratio(l.a21, l.spectral, &format!("zero spectral norm at layer {}", i + 1))?.powf(2.0 / 3.0);
        prod *= l.spectral;
    }
    sum += (last.fro / last.max_row).powf(2.0 / 3.0);
    Ok(layers.len() as f64 * last.max_row * prod * sum.powf(1.5))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoLayerParams {
    pub b0: f64,
    pub a1: f64,
    pub a2: f64,
    pub a_star: f64,
    pub b1: f64,
    pub gamma: f64,
    /// Spatial width after pooling.
    pub w: usize,
    /// `W̄`.
    pub w_bar: usize,
    pub classes: usize,
    pub n: usize,
    pub delta: f64,
    pub constant: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoLayerBound {
    pub r: f64,
    pub d: f64,
    pub rhs: f64,
}

/// Two-layer convolutional bound.
pub fn two_layer_bound(p: &TwoLayerParams) -> Result<TwoLayerBound> {
    for (name, v) in [("b0", p.b0), ("a_star", p.a_star), ("b1", p.b1), ("gamma", p.gamma), ("delta", p.delta)] {
        positive(name, v)?;
    }
    nonneg("a1", p.a1)?;
    nonneg("a2", p.a2)?;
    if p.n == 0 {
        return Err(Error::invalid("n", "need at least one sample"));
    }
    let first = p.b0 * p.a1 * (1.0 / p.b1).max((p.w as f64).sqrt() * p.a_star / p.gamma);
    let second = p.b1 * p.a2 / p.gamma;
    let r = (first.powf(2.0 / 3.0) + second.powf(2.0 / 3.0)).powf(1.5);
    let d = (p.b0 * p.a1 * p.w_bar as f64 * p.a_star / p.b1).max(p.b1 * p.a2 * p.classes as f64 / p.gamma);
    let n = p.n as f64;
    let log_term = if d > 0.0 { (n * n * d).log2().max(0.0).sqrt() } else { 0.0 };
    let rhs = 3.0 * ((2.0 / p.delta).ln() / (2.0 * n)).sqrt() + p.constant / n.sqrt() * r * log_term * n.ln();
    Ok(TwoLayerBound { r, d, rhs })
}

/// Which multilayer capacity to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Main,
    Simplified,
    Lipschitz,
    ExplicitNorm,
    ExplicitNormKappa,
    Augmented,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Main,
        Variant::Simplified,
        Variant::Lipschitz,
        Variant::ExplicitNorm,
        Variant::ExplicitNormKappa,
        Variant::Augmented,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Main => "main",
            Variant::Simplified => "simplified",
            Variant::Lipschitz => "lipschitz",
            Variant::ExplicitNorm => "explicit_norm",
            Variant::ExplicitNormKappa => "explicit_norm_kappa",
            Variant::Augmented => "augmented",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid("variant", format!("unknown variant `{s}`")))
    }

    /// Human-readable identity of the evaluated expression.
    pub fn formula(self) -> &'static str {
        match self {
            Variant::Main => {
                "T_l = b_{l-1} a21_l sqrt(w_l) max_{l<=U<=L} prod_{u=l+1..U} sigma'_u / b_U; T_L = b_{L-1} fro_L / gamma; R = (sum T^(2/3))^(3/2)"
            }
            Variant::Simplified => {
                "T_l = prod_{i!=l} sigma_i a21_l sqrt(w_l) / gamma; T_L = prod_{i<L} sigma_i fro_L; R = (sum T^(2/3))^(3/2)"
            }
            Variant::Lipschitz => {
                "T_l = b_{l-1} a21_l max_{l~>l} rho_{l->l~} / b_{l~}; T_L = b_{L-1} fro_L / gamma; R = (sum T^(2/3))^(3/2)"
            }
            Variant::ExplicitNorm => {
                "R = (L/gamma) rho_L maxrow_L prod_{l<L} rho_l sigma_l (sum_{l<L} k_l fro_l^2/sigma_l^2 + fro_L^2/maxrow_L^2)^(1/2)"
            }
            Variant::ExplicitNormKappa => {
                "R = (1/gamma) rho_L maxrow_L prod_{l<L} rho_l sigma_l (sum_{l<L} kappa_l^(1/3) (a21_l/sigma_l)^(2/3) + (fro_L/maxrow_L)^(2/3))^(3/2)"
            }
            Variant::Augmented => {
                "T_l = b_{l-1} a21_l rho^A_l; T_L = b_{L-1} fro_L / gamma; R = (sum T^(2/3))^(3/2)"
            }
        }
    }

    /// Whether the capacity carries a distance-to-initialization factor.
    pub fn distance_based(self) -> bool {
        true
    }
}

/// Measured quantities for the multilayer capacities. Per-layer vectors are
/// indexed by layer `1..=L` (position `l-1`); `b` is indexed by level
/// `0..L-1`. Missing fields raise a named error from the variants that need
/// them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundInputs {
    pub n: usize,
    pub gamma: f64,
    pub delta: f64,
    /// `B_l(X)` for levels `0..L-1`, unclamped.
    pub b: Option<Vec<f64>>,
    /// `‖(A^l−M^l)ᵀ‖_{2,1}`.
    pub a21: Option<Vec<f64>>,
    /// `‖A^l−M^l‖_F`.
    pub fro_dist: Option<Vec<f64>>,
    /// `‖Ã^l‖_σ`.
    pub spectral: Option<Vec<f64>>,
    /// `‖Ã^l‖_{σ′}`; the last entry is `ρ_L max_i ‖A^L_i‖`.
    pub sigma_prime: Option<Vec<f64>>,
    /// `max_i ‖A^L_i‖`.
    pub last_max_row: Option<f64>,
    /// Spatial widths after pooling.
    pub w: Option<Vec<usize>>,
    /// Post-pooling neuron counts.
    pub k: Option<Vec<usize>>,
    pub kappa: Option<Vec<f64>>,
    /// `ρ_l` of each activation.
    pub rho: Option<Vec<f64>>,
    /// `ρ_{l→l̃}` indexed by level `[l][l̃]`, `(L+1) x (L+1)`.
    pub lipschitz: Option<Vec<Vec<f64>>>,
    /// `ρ^𝒜_l` for layers `1..L-1`.
    pub rho_augmented: Option<Vec<f64>>,
    /// Clamp `b_l` below at 1, as the chaining argument assumes.
    pub clamp_b: bool,
    /// Value of the unspecified absolute constants.
    pub constant: f64,
}

impl BoundInputs {
    pub fn new(n: usize, gamma: f64, delta: f64) -> Self {
        BoundInputs {
            n,
            gamma,
            delta,
            clamp_b: true,
            constant: 1.0,
            ..Default::default()
        }
    }

    fn depth(&self) -> Result<usize> {
        self.a21
            .as_ref()
            .or(self.fro_dist.as_ref())
            .map(Vec::len)
            .filter(|&d| d > 0)
            .ok_or(Error::MissingField("a21"))
    }

    fn vec<'a, V>(field: &'a Option<Vec<V>>, name: &'static str, len: usize) -> Result<&'a [V]> {
        let v = field.as_deref().ok_or(Error::MissingField(name))?;
        if v.len() != len {
            return Err(Error::Shape(format!("`{name}` has {} entries, expected {len}", v.len())));
        }
        Ok(v)
    }

    /// `b_0..b_{L-1}` after optional clamping, followed by `b_L = γ`.
    pub fn b_levels(&self, depth: usize) -> Result<Vec<f64>> {
        let raw = Self::vec(&self.b, "b", depth)?;
        let mut out: Vec<f64> = raw
            .iter()
            .map(|&v| if self.clamp_b { v.max(1.0) } else { v })
            .collect();
        out.push(self.gamma);
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub terms: Vec<f64>,
    pub r_a: f64,
}

/// Per-layer terms and aggregate capacity of one multilayer variant.
#[allow(non_snake_case)]
pub fn multilayer_RA(inp: &BoundInputs, variant: Variant) -> Result<VariantResult> {
    positive("gamma", inp.gamma)?;
    let depth = inp.depth()?;
    let g = inp.gamma;
    let terms: Vec<f64>;
    let r_a;
    match variant {
        Variant::Main | Variant::Lipschitz | Variant::Augmented => {
            let a21 = BoundInputs::vec(&inp.a21, "a21", depth)?;
            let fro = BoundInputs::vec(&inp.fro_dist, "fro_dist", depth)?;
            let b = inp.b_levels(depth)?;
            for (l, &v) in b.iter().enumerate() {
                if v <= 0.0 {
                    return Err(Error::ZeroDivisor(format!("patch norm B at level {l} is zero")));
                }
            }
            let mut t = Vec::with_capacity(depth);
            for l in 1..depth {
                let factor = match variant {
                    Variant::Main => {
                        let w = BoundInputs::vec(&inp.w, "w", depth)?;
                        let sp = BoundInputs::vec(&inp.sigma_prime, "sigma_prime", depth)?;
                        let mut best = 1.0 / b[l];
                        let mut prod = 1.0;
                        for u in l + 1..=depth {
                            prod *= sp[u - 1];
                            best = best.max(prod / b[u]);
                        }
                        (w[l - 1] as f64).sqrt() * best
                    }
                    Variant::Lipschitz => {
                        let lip = inp.lipschitz.as_ref().ok_or(Error::MissingField("lipschitz"))?;
                        if lip.len() != depth + 1 || lip.iter().any(|r| r.len() != depth + 1) {
                            return Err(Error::Shape("`lipschitz` must be (L+1) x (L+1)".into()));
                        }
                        (l + 1..=depth).map(|lt| lip[l][lt] / b[lt]).fold(0.0, f64::max)
                    }
                    _ => {
                        let ra = BoundInputs::vec(&inp.rho_augmented, "rho_augmented", depth - 1)?;
                        ra[l - 1]
                    }
                };
                t.push(b[l - 1] * a21[l - 1] * factor);
            }
            t.push(b[depth - 1] / g * fro[depth - 1]);
            r_a = aggregate_two_thirds(&t);
            terms = t;
        }
        Variant::Simplified => {
            let a21 = BoundInputs::vec(&inp.a21, "a21", depth)?;
            let fro = BoundInputs::vec(&inp.fro_dist, "fro_dist", depth)?;
            let s = BoundInputs::vec(&inp.spectral, "spectral", depth)?;
            let w = BoundInputs::vec(&inp.w, "w", depth)?;
            let mut t = Vec::with_capacity(depth);
            for l in 1..depth {
                let prod: f64 = (1..=depth).filter(|&i| i != l).map(|i| s[i - 1]).product();
                t.push(prod * a21[l - 1] * (w[l - 1] as f64).sqrt() / g);
            }
            let prod: f64 = s[..depth - 1].iter().product();
            t.push(prod * fro[depth - 1]);
            r_a = aggregate_two_thirds(&t);
            terms = t;
        }
        Variant::ExplicitNorm | Variant::ExplicitNormKappa => {
            let s = BoundInputs::vec(&inp.spectral, "spectral", depth)?;
            let rho = BoundInputs::vec(&inp.rho, "rho", depth)?;
            let fro = BoundInputs::vec(&inp.fro_dist, "fro_dist", depth)?;
            let max_row = inp.last_max_row.ok_or(Error::MissingField("last_max_row"))?;
            let lead = rho[depth - 1]
                * max_row
                * (0..depth - 1).map(|i| rho[i] * s[i]).product::<f64>()
                / g;
            let last = ratio(fro[depth - 1], max_row, "last layer has no nonzero row")?;
            let mut t = Vec::with_capacity(depth);
            if variant == Variant::ExplicitNorm {
                let k = BoundInputs::vec(&inp.k, "k", depth)?;
                let lead = lead * depth as f64;
                for l in 1..depth {
                    let q = ratio(fro[l - 1], s[l - 1], &format!("zero spectral norm at layer {l}"))?;
                    t.push(lead * (k[l - 1] as f64).sqrt() * q);
                }
                t.push(lead * last);
                r_a = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            } else {
                let a21 = BoundInputs::vec(&inp.a21, "a21", depth)?;
                let kappa = BoundInputs::vec(&inp.kappa, "kappa", depth)?;
                for l in 1..depth {
                    let q = ratio(a21[l - 1], s[l - 1], &format!("zero spectral norm at layer {l}"))?;
                    t.push(lead * kappa[l - 1].sqrt() * q);
                }
                t.push(lead * last);
                r_a = aggregate_two_thirds(&t);
            }
            terms = t;
        }
    }
    if let Some(i) = terms.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite {
            context: "bound term",
            index: i,
        });
    }
    Ok(VariantResult {
        variant,
        terms,
        r_a,
    })
}

/// `(n−#I)/n + 8/n + (1536/√n) R √(log2(32Γn² + 7W̄n)) ln n + 3√(ln(2/δ)/(2n))`.
pub fn firstmilestone_rhs(n: usize, r: f64, gamma_cap: f64, w_bar: f64, delta: f64, certified: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n", "need at least one sample"));
    }
    if certified > n {
        return Err(Error::invalid("certified_count", "exceeds n"));
    }
    if !(gamma_cap >= 1.0 && w_bar >= 1.0) {
        return Err(Error::invalid("Gamma", "Γ and W̄ must be at least 1"));
    }
    positive("delta", delta)?;
    nonneg("R", r)?;
    let nf = n as f64;
    let empirical = (n - certified) as f64 / nf;
    let cap = 1536.0 / nf.sqrt() * r * (32.0 * gamma_cap * nf * nf + 7.0 * w_bar * nf).log2().sqrt() * nf.ln();
    let conf = (2.0 / delta).ln() / (2.0 * nf);
    Ok(empirical + 8.0 / nf + cap + 3.0 * conf.max(0.0).sqrt())
}

/// Parameter-counting baseline `𝒞 B √((𝒲(Σs_l − ln γ) + ln(1/δ))/n)`.
pub fn param_count_bound(
    params: usize,
    s: &[f64],
    gamma: f64,
    n: usize,
    delta: f64,
    b: f64,
    constant: f64,
) -> Result<f64> {
    positive("gamma", gamma)?;
    positive("delta", delta)?;
    if n == 0 {
        return Err(Error::invalid("n", "need at least one sample"));
    }
    let radicand = (params as f64 * (s.iter().sum::<f64>() - gamma.ln()) + (1.0 / delta).ln()) / n as f64;
    if radicand < 0.0 {
        return Err(Error::invalid(
            "gamma",
            format!("ln γ exceeds Σ s_l, leaving a negative radicand {radicand}"),
        ));
    }
    Ok(constant * b * radicand.sqrt())
}

/// A margin-type statistic `γ_i` with its grid scale `κ_i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaStat {
    pub gamma: f64,
    pub kappa: f64,
}

/// A norm-type statistic `N_i` with its grid step `β_i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStat {
    pub n: f64,
    pub beta: f64,
}

/// Union bound over a grid of norm budgets:
/// `f(min(γ_i/2, 1/κ_i), N_i + β_i) + (C1/√C2) √(ln(1/δ) + Σ ln(2κ_i/γ_i) + 2Σ ln(2 + N_i/β_i))`.
pub fn posthoc_adjust<F>(f: F, gammas: &[GammaStat], norms: &[NormStat], delta: f64, c1: f64, c2: f64) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    positive("delta", delta)?;
    positive("C2", c2)?;
    for g in gammas {
        positive("gamma_i", g.gamma)?;
        positive("kappa_i", g.kappa)?;
    }
    for s in norms {
        positive("beta_i", s.beta)?;
        nonneg("N_i", s.n)?;
    }
    let gs: Vec<f64> = gammas.iter().map(|g| (g.gamma / 2.0).min(1.0 / g.kappa)).collect();
    let ns: Vec<f64> = norms.iter().map(|s| s.n + s.beta).collect();
    let arg = (1.0 / delta).ln()
        + gammas.iter().map(|g| (2.0 * g.kappa / g.gamma).ln()).sum::<f64>()
        + 2.0 * norms.iter().map(|s| (2.0 + s.n / s.beta).ln()).sum::<f64>();
    if arg < 0.0 {
        return Err(Error::invalid("delta", "the union-bound penalty is negative"));
    }
    Ok(f(&gs, &ns) + c1 / c2.sqrt() * arg.sqrt())
}

/// Normalizer `R = (B̃/√n) √(k Σf² max F² + Σf² ΣF²)` of the synthetic
/// experiment, with `filter_norms` the first-layer filter norms and
/// `class_norms` the rows of the class layer.
pub fn synthetic_normalizer(b_tilde: f64, n: usize, k: f64, filter_norms: &[f64], class_norms: &[f64]) -> Result<f64> {
    nonneg("b_tilde", b_tilde)?;
    nonneg("k", k)?;
    if n == 0 {
        return Err(Error::invalid("n", "need at least one sample"));
    }
    for &v in filter_norms.iter().chain(class_norms) {
        nonneg("norm", v)?;
    }
    let sf: f64 = filter_norms.iter().map(|f| f * f).sum();
    let sup_f = class_norms.iter().map(|f| f * f).fold(0.0, f64::max);
    let sum_f: f64 = class_norms.iter().map(|f| f * f).sum();
    Ok(b_tilde / (n as f64).sqrt() * (k * sf * sup_f + sf * sum_f).sqrt())
}

/// Which conditions a sample must satisfy to be certified.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CertifyMode {
    NormsOnly,
    Augmented,
}

/// Per-sample quantities used by certification.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeasure {
    pub margin: f64,
    /// `|F^{0→l}(x)|_l` for levels `0..L-1`.
    pub level_norms: Vec<f64>,
    /// `E_l(x)` for levels `0..=L`.
    pub gaps: Vec<f64>,
    /// `(θ, ρ)` by level pair `[l1][l2]`, when available.
    pub lipschitz: Option<Vec<Vec<Option<(f64, f64)>>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Thresholds {
    /// `b_l` for levels `0..L-1`.
    pub b: Vec<f64>,
    /// `E_l` for levels `0..=L`.
    pub e: Vec<f64>,
    /// `ρ_l` caps for levels `0..=L`.
    pub rho: Vec<f64>,
}

/// Indices `i` with margin above `γ` and all threshold conditions met.
pub fn certify_samples(samples: &[SampleMeasure], th: &Thresholds, gamma: f64, mode: CertifyMode) -> Vec<usize> {
    let depth = th.b.len();
    samples
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            if !(s.margin > gamma) {
                return false;
            }
            if s.level_norms.iter().zip(&th.b).any(|(v, b)| v > b) {
                return false;
            }
            if mode == CertifyMode::NormsOnly {
                return true;
            }
            if s.gaps.iter().zip(&th.e).any(|(g, e)| e.is_finite() && *g < 2.0 * e) {
                return false;
            }
            let Some(lip) = &s.lipschitz else {
                return false;
            };
            let mut b_ext = th.b.clone();
            b_ext.push(gamma);
            for (l1, row) in lip.iter().enumerate().take(depth + 1) {
                for (l2, cell) in row.iter().enumerate().skip(l1).take(depth + 1 - l1) {
                    let Some((theta, rho)) = *cell else {
                        continue;
                    };
                    if rho > th.rho[l1] * b_ext[l2] {
                        return false;
                    }
                    if th.e[l2].is_finite() && theta > th.e[l2] * th.rho[l1] {
                        return false;
                    }
                }
            }
            true
        })
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn bartlett_examples() {
        let at_init = [BaselineLayer { spectral: 2.0, distance: 0.0 }; 3];
        assert_eq!(bartlett_capacity(&at_init, 10).unwrap(), 0.0);
        let one = [BaselineLayer { spectral: 1.0, distance: 1.0 }];
        assert_eq!(bartlett_capacity(&one, 1).unwrap(), 1.0);
        let bad = [BaselineLayer { spectral: 0.0, distance: 1.0 }];
        assert!(matches!(bartlett_capacity(&bad, 1), Err(Error::ZeroDivisor(_))));
    }

    #[test]
    fn neyshabur_examples() {
        let at_init = [BaselineLayer { spectral: 2.0, distance: 0.0 }; 2];
        assert_eq!(neyshabur_capacity(&at_init, 10, 1.0, 4).unwrap(), 0.0);
        let one = [BaselineLayer { spectral: 1.0, distance: 1.0 }];
        assert_eq!(neyshabur_capacity(&one, 1, 1.0, 4).unwrap(), 2.0);
        let base = [BaselineLayer { spectral: 1.5, distance: 0.7 }, BaselineLayer { spectral: 0.8, distance: 0.3 }];
        let scaled: Vec<_> = base.iter().map(|l| BaselineLayer { distance: 3.0 * l.distance, ..*l }).collect();
        let v0 = neyshabur_capacity(&base, 50, 0.5, 10).unwrap();
        let v1 = neyshabur_capacity(&scaled, 50, 0.5, 10).unwrap();
        assert!(close(v1, 3.0 * v0, 1e-12));
    }

    #[test]
    fn fully_connected_examples() {
        for c in [1usize, 4, 9] {
            let layers = [
                DenseLayer { spectral: 1.0, a21: 0.0, fro: 3.0, max_row: 1.0 },
                DenseLayer { spectral: 1.0, a21: 0.0, fro: (c as f64).sqrt(), max_row: 1.0 },
            ];
            let v = fully_connected_RA(&layers).unwrap();
            assert!(close(v, 2.0 * (c as f64).sqrt(), 1e-12));
        }
        let zero = [DenseLayer { spectral: 0.0, a21: 0.0, fro: 0.0, max_row: 0.0 }];
        assert!(fully_connected_RA(&zero).is_err());
    }

    fn base_params() -> TwoLayerParams {
        TwoLayerParams {
            b0: 1.0,
            a1: 1.0,
            a2: 1.0,
            a_star: 1.0,
            b1: 1.0,
            gamma: 1.0,
            w: 1,
            w_bar: 1,
            classes: 1,
            n: 1,
            delta: 1.0,
            constant: 1.0,
        }
    }

    #[test]
    fn two_layer_examples() {
        let r = two_layer_bound(&base_params()).unwrap();
        assert!((r.r - 2f64.powf(1.5)).abs() < 1e-12);
        assert!((r.r - 2.8284).abs() < 1e-4);
        let z = two_layer_bound(&TwoLayerParams { a1: 0.0, a2: 0.0, ..base_params() }).unwrap();
        assert_eq!(z.r, 0.0);
        // Large γ: the norm-control branch 1/b1 persists, the class term vanishes.
        let big = two_layer_bound(&TwoLayerParams { gamma: 1e6, ..base_params() }).unwrap();
        let want = (1.0f64.powf(2.0 / 3.0) + 1e-6f64.powf(2.0 / 3.0)).powf(1.5);
        assert!(close(big.r, want, 1e-12));
        assert!(big.r > 1.0);
    }

    fn main_inputs() -> BoundInputs {
        BoundInputs {
            b: Some(vec![1.0, 1.0]),
            a21: Some(vec![1.0, 1.0]),
            fro_dist: Some(vec![1.0, 1.0]),
            spectral: Some(vec![1.0, 1.0]),
            sigma_prime: Some(vec![1.0, 1.0]),
            last_max_row: Some(1.0),
            w: Some(vec![1, 1]),
            k: Some(vec![1, 1]),
            kappa: Some(vec![1.0, 1.0]),
            rho: Some(vec![1.0, 1.0]),
            lipschitz: Some(vec![vec![1.0; 3]; 3]),
            rho_augmented: Some(vec![1.0]),
            ..BoundInputs::new(10, 1.0, 0.1)
        }
    }

    #[test]
    fn main_variant_example() {
        let r = multilayer_RA(&main_inputs(), Variant::Main).unwrap();
        assert_eq!(r.terms, vec![1.0, 1.0]);
        assert!((r.r_a - 2f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn every_variant_vanishes_at_init() {
        let mut inp = main_inputs();
        inp.a21 = Some(vec![0.0, 0.0]);
        inp.fro_dist = Some(vec![0.0, 0.0]);
        for v in Variant::ALL {
            let r = multilayer_RA(&inp, v).unwrap();
            assert_eq!(r.r_a, 0.0, "{}", v.name());
            assert!(r.terms.iter().all(|&t| t == 0.0));
        }
    }

    #[test]
    fn missing_field_is_named() {
        let mut inp = main_inputs();
        inp.sigma_prime = None;
        assert!(matches!(multilayer_RA(&inp, Variant::Main), Err(Error::MissingField("sigma_prime"))));
        inp.rho_augmented = None;
        assert!(matches!(multilayer_RA(&inp, Variant::Augmented), Err(Error::MissingField("rho_augmented"))));
        assert!(multilayer_RA(&inp, Variant::Simplified).is_ok());
    }

    #[test]
    fn b_clamping_reported_raw() {
        let mut inp = main_inputs();
        inp.b = Some(vec![0.25, 0.5]);
        let clamped = multilayer_RA(&inp, Variant::Main).unwrap();
        inp.clamp_b = false;
        let raw = multilayer_RA(&inp, Variant::Main).unwrap();
        assert_eq!(clamped.terms, vec![1.0, 1.0]);
        assert!(raw.terms[1] < clamped.terms[1]);
    }

    #[test]
    fn milestone_examples() {
        let v = firstmilestone_rhs(100, 1.0, 1.0, 1.0, 2.0, 100).unwrap();
        let want = 0.08 + 153.6 * 320_700f64.log2().sqrt() * 100f64.ln();
        assert!(close(v, want, 1e-12));
        assert!((v - 3.03e3).abs() / 3.03e3 < 5e-3);
        let v0 = firstmilestone_rhs(100, 1.0, 1.0, 1.0, 2.0, 0).unwrap();
        assert!((v0 - v - 1.0).abs() < 1e-9);
        assert!((firstmilestone_rhs(100, 0.0, 1.0, 1.0, 2.0, 100).unwrap() - 0.08).abs() < 1e-15);
    }

    #[test]
    fn param_count_examples() {
        let v = param_count_bound(10, &[1.0, 1.0], 1.0, 100, 1.0, 1.0, 1.0).unwrap();
        assert!((v - 0.2f64.sqrt()).abs() < 1e-12);
        assert_eq!(param_count_bound(0, &[1.0], 1.0, 100, 1.0, 1.0, 1.0).unwrap(), 0.0);
        assert!(param_count_bound(10, &[0.0], 1e6, 100, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn posthoc_examples() {
        let f = |_: &[f64], n: &[f64]| n.iter().sum::<f64>();
        let v = posthoc_adjust(f, &[], &[NormStat { n: 1.0, beta: 1.0 }], (-1.0f64).exp(), 1.0, 1.0).unwrap();
        assert!((v - (2.0 + (1.0 + 2.0 * 3f64.ln()).sqrt())).abs() < 1e-12);
        assert!((v - 3.788).abs() < 1e-3);
        let z = posthoc_adjust(f, &[], &[NormStat { n: 0.0, beta: 0.5 }], 1.0, 1.0, 1.0).unwrap();
        assert!((z - (0.5 + (2.0 * 2f64.ln()).sqrt())).abs() < 1e-12);
        let g = |_: &[f64], _: &[f64]| 0.0;
        let a = posthoc_adjust(g, &[GammaStat { gamma: 0.1, kappa: 1.0 }], &[], 0.5, 1.0, 1.0).unwrap();
        let b = posthoc_adjust(g, &[GammaStat { gamma: 0.1, kappa: 2.0 }], &[], 0.5, 1.0, 1.0).unwrap();
        assert!((b * b - a * a - 2f64.ln()).abs() < 1e-12);
        assert!(posthoc_adjust(g, &[GammaStat { gamma: 0.0, kappa: 2.0 }], &[], 0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn synthetic_normalizer_examples() {
        assert_eq!(synthetic_normalizer(1.0, 10, 3.0, &[0.0, 0.0], &[0.0]).unwrap(), 0.0);
        assert!((synthetic_normalizer(1.0, 1, 1.0, &[1.0], &[1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let a = synthetic_normalizer(1.5, 7, 2.0, &[0.3, 0.4], &[1.0, 2.0]).unwrap();
        let b = synthetic_normalizer(3.0, 7, 2.0, &[0.3, 0.4], &[1.0, 2.0]).unwrap();
        assert!(close(b, 2.0 * a, 1e-15));
    }

    fn sample(margin: f64, norms: Vec<f64>) -> SampleMeasure {
        SampleMeasure {
            margin,
            level_norms: norms,
            gaps: vec![f64::INFINITY; 3],
            lipschitz: None,
        }
    }

    #[test]
    fn certification_examples() {
        let samples: Vec<_> = (0..10).map(|i| sample(i as f64 + 1.0, vec![1.0 + i as f64, 0.5])).collect();
        let th = Thresholds { b: vec![10.0, 0.5], e: vec![f64::INFINITY; 3], rho: vec![1.0; 3] };
        assert_eq!(certify_samples(&samples, &th, 0.5, CertifyMode::NormsOnly).len(), 10);
        assert!(certify_samples(&samples, &th, 100.0, CertifyMode::NormsOnly).is_empty());
        let tight = Thresholds { b: vec![5.0, 0.5], ..th.clone() };
        let got = certify_samples(&samples, &tight, 2.5, CertifyMode::NormsOnly);
        let want: Vec<usize> = (0..10).filter(|&i| i as f64 + 1.0 > 2.5 && 1.0 + i as f64 <= 5.0).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn certification_augmented_checks_gaps() {
        let mut s = sample(2.0, vec![1.0, 1.0]);
        s.gaps = vec![f64::INFINITY, 0.3, f64::INFINITY];
        s.lipschitz = Some(vec![vec![None; 3], vec![None, Some((1.0, 1.0)), Some((0.5, 0.5))], vec![None; 3]]);
        let th = Thresholds { b: vec![1.0, 1.0], e: vec![f64::INFINITY, 0.1, f64::INFINITY], rho: vec![10.0; 3] };
        assert_eq!(certify_samples(&[s.clone()], &th, 1.0, CertifyMode::Augmented), vec![0]);
        let th2 = Thresholds { e: vec![f64::INFINITY, 0.2, f64::INFINITY], ..th.clone() };
        assert!(certify_samples(&[s.clone()], &th2, 1.0, CertifyMode::Augmented).is_empty());
        let th3 = Thresholds { rho: vec![0.1; 3], ..th };
        assert!(certify_samples(&[s], &th3, 1.0, CertifyMode::Augmented).is_empty());
    }

    #[test]
    fn jensen_identity() {
        for &t in &[0.1, 1.0, 10.0] {
            for depth in 1..6usize {
                let l = depth as f64;
                let terms = vec![t; depth];
                let lhs = aggregate_two_thirds(&terms);
                assert!(close(lhs, l.powf(1.5) * t, 1e-12));
                let rhs = l * (l * t * t).sqrt() * l.sqrt();
                assert!(lhs <= rhs * (1.0 + 1e-12));
            }
        }
    }

    proptest! {
        #[test]
        fn main_variant_homogeneous(t in 0.0f64..10.0, a in 0.1f64..5.0, b in 0.1f64..5.0) {
            let mut inp = main_inputs();
            inp.a21 = Some(vec![a, b]);
            let r0 = multilayer_RA(&inp, Variant::Main).unwrap();
            inp.a21 = Some(vec![t * a, b]);
            let r1 = multilayer_RA(&inp, Variant::Main).unwrap();
            prop_assert!((r1.terms[0] - t * r0.terms[0]).abs() <= 1e-12 * r0.terms[0].max(1.0) * t.max(1.0));
            prop_assert_eq!(r1.terms[1], r0.terms[1]);
        }

        #[test]
        fn bartlett_homogeneous(t in 0.0f64..10.0, d in 0.0f64..5.0, s in 0.1f64..5.0) {
            let base = [BaselineLayer { spectral: s, distance: d }, BaselineLayer { spectral: 1.0, distance: 0.0 }];
            let scaled = [BaselineLayer { spectral: s, distance: t * d }, base[1]];
            let v0 = bartlett_capacity(&base, 4).unwrap();
            let v1 = bartlett_capacity(&scaled, 4).unwrap();
            prop_assert!((v1 - t * v0).abs() <= 1e-12 * (1.0 + v1.abs()));
        }
    }
}
