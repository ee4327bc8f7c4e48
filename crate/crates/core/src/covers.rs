//! Covering-number machinery: closed-form log-cardinality bounds, an explicit
//! L1-ball cover with an empirical check, chaining cardinalities and a
//! Dudley entropy integral.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};

/// Closed-form log2-cardinality bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoverKind {
    /// Linear class with L2-bounded inputs, cover in the empirical L∞ sense.
    Maurey,
    /// Vector-valued linear maps, `‖·‖_{∞}` output norm.
    SupLinN,
    /// Vector-valued linear maps, mixed sup norm over patches.
    SupLin,
    /// One layer composed with a `ρ`-Lipschitz activation.
    OneStep,
}

impl CoverKind {
    pub const ALL: [CoverKind; 4] = [CoverKind::Maurey, CoverKind::SupLinN, CoverKind::SupLin, CoverKind::OneStep];

    pub fn name(self) -> &'static str {
        match self {
            CoverKind::Maurey => "maurey",
            CoverKind::SupLinN => "suplinn",
            CoverKind::SupLin => "suplin",
            CoverKind::OneStep => "onestep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("kind", format!("unknown cover kind `{s}`")))
    }
}

/// Arguments of [`cover_size_bound`]. Fields unused by a kind are ignored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoverParams {
    pub a: f64,
    pub b: f64,
    pub eps: f64,
    pub n: f64,
    pub m: f64,
    pub u: f64,
    pub o: f64,
    pub rho: f64,
}

impl Default for CoverParams {
    fn default() -> Self {
        CoverParams {
            a: 1.0,
            b: 1.0,
            eps: 1.0,
            n: 1.0,
            m: 1.0,
            u: 1.0,
            o: 1.0,
            rho: 1.0,
        }
    }
}

pub fn cover_size_bound(kind: CoverKind, p: &CoverParams) -> Result<f64> {
    let check = |name: &'static str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(name, format!("must be positive, got {v}")))
        }
    };
    check("a", p.a)?;
    check("b", p.b)?;
    check("eps", p.eps)?;
    check("n", p.n)?;
    let ab = p.a * p.b;
    let q = ab * ab / (p.eps * p.eps);
    Ok(match kind {
        CoverKind::Maurey => 36.0 * q * (8.0 * ab * p.n / p.eps + 6.0 * p.n + 1.0).log2(),
        CoverKind::SupLinN | CoverKind::SupLin => {
            check("m", p.m)?;
            check("U", p.u)?;
            let c = if kind == CoverKind::SupLinN { 36.0 } else { 64.0 };
            c * q * ((8.0 * ab / p.eps + 7.0) * p.m * p.n * p.u).log2()
        }
        CoverKind::OneStep => {
            check("m", p.m)?;
            check("O", p.o)?;
            check("rho", p.rho)?;
            let omn = p.o * p.m * p.n;
            64.0 * q / (p.rho * p.rho) * (8.0 * ab * omn / (p.eps * p.rho) + 7.0 * omn).log2()
        }
    })
}

/// Result of an empirical cover check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verification {
    pub trials: usize,
    pub worst_distance: f64,
    pub pass: bool,
}

/// Finite cover of the L1 ball of radius `beta` in `R^d` at L2 scale `eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverCertificate {
    pub d: usize,
    pub beta: f64,
    pub eps: f64,
    /// Lattice resolution: points are `beta * z / k` with `Σ|z_i| ≤ k`.
    pub k: usize,
    pub points: Vec<Vec<f64>>,
    /// Natural-log size bound `k ln(2d)`.
    pub claimed_size_bound: f64,
    pub verified: Option<Verification>,
}

/// Default cap on the number of lattice points.
pub const COVER_SIZE_CAP: usize = 2_000_000;

/// Number of integer vectors in `Z^d` with `Σ|z_i| ≤ k`.
pub fn lattice_count(d: usize, k: usize) -> f64 {
    // Σ_j 2^j C(d, j) C(k, j)
    let mut total = 0.0;
    let mut cd = 1.0;
    let mut ck = 1.0;
    let mut pow = 1.0;
    for j in 0..=d.min(k) {
        if j > 0 {
            cd *= (d - j + 1) as f64 / j as f64;
            ck *= (k - j + 1) as f64 / j as f64;
            pow *= 2.0;
        }
        total += pow * cd * ck;
    }
    total
}

pub fn l1_ball_cover(d: usize, beta: f64, eps: f64) -> Result<CoverCertificate> {
    l1_ball_cover_capped(d, beta, eps, COVER_SIZE_CAP)
}

pub fn l1_ball_cover_capped(d: usize, beta: f64, eps: f64, cap: usize) -> Result<CoverCertificate> {
    if d == 0 {
        return Err(Error::invalid("d", "dimension must be at least 1"));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid("eps", "must be positive"));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid("beta", "must be nonnegative"));
    }
    let kf = (beta * beta / (eps * eps)).ceil().max(1.0);
    let count = lattice_count(d, kf.min(u32::MAX as f64) as usize);
    if kf > u32::MAX as f64 || count > cap as f64 {
        return Err(Error::invalid(
            "eps",
            format!("cover would hold {count:.3e} points, above the cap of {cap}"),
        ));
    }
    let k = kf as usize;
    let mut points = Vec::with_capacity(count as usize);
    let mut z = vec![0i64; d];
    enumerate(&mut z, 0, k as i64, &mut |z| {
        points.push(z.iter().map(|&v| beta * v as f64 / k as f64).collect());
    });
    Ok(CoverCertificate {
        d,
        beta,
        eps,
        k,
        points,
        claimed_size_bound: k as f64 * (2.0 * d as f64).ln(),
        verified: None,
    })
}

fn enumerate(z: &mut [i64], i: usize, budget: i64, out: &mut impl FnMut(&[i64])) {
    if i == z.len() {
        out(z);
        return;
    }
    for v in -budget..=budget {
        z[i] = v;
        enumerate(z, i + 1, budget - v.abs(), out);
    }
    z[i] = 0;
}

/// Nearest lattice point `beta z / k` (`Σ|z_i| ≤ k`) to `a`, by L2 distance.
///
/// Rounds every coordinate toward zero, then spends the remaining L1
/// budget on the coordinates whose fractional part gains the most from
/// rounding away from zero. An exchange argument shows this is optimal.
pub fn nearest_lattice_point(a: &[f64], beta: f64, k: usize) -> Vec<f64> {
    if beta == 0.0 {
        return vec![0.0; a.len()];
    }
    let scale = k as f64 / beta;
    let mut z: Vec<f64> = Vec::with_capacity(a.len());
    let mut gains: Vec<(f64, usize)> = Vec::new();
    let mut used = 0.0;
    for (i, &v) in a.iter().enumerate() {
        let y = v.abs() * scale;
        let f = y.floor();
        used += f;
        z.push(f);
        let frac = y - f;
        let gain = frac * frac - (1.0 - frac) * (1.0 - frac);
        if gain > 0.0 {
            gains.push((gain, i));
        }
    }
    // Outside the ball the toward-zero rounding may overshoot; clip greedily.
    while used > k as f64 {
        let (i, _) = z
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, &v)| (i, (a[i].abs() * scale - v + 1.0).powi(2) - (a[i].abs() * scale - v).powi(2)))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("positive coordinate exists when budget is exceeded");
        z[i] -= 1.0;
        used -= 1.0;
        gains.clear();
    }
    gains.sort_by(|x, y| y.0.total_cmp(&x.0));
    let budget = (k as f64 - used) as usize;
    for &(_, i) in gains.iter().take(budget) {
        z[i] += 1.0;
    }
    z.iter()
        .zip(a)
        .map(|(&m, &v)| m.copysign(v) / scale)
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimum L2 distance from `a` to any point of `points`; `+∞` when empty.
pub fn brute_nearest_distance(points: &[Vec<f64>], a: &[f64]) -> f64 {
    points.iter().map(|p| dist2(p, a)).fold(f64::INFINITY, f64::min)
}

/// Uniform draw from the L1 ball of radius `beta` in `R^d`.
pub fn sample_l1_ball<R: Rng + ?Sized>(d: usize, beta: f64, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..=d).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    e[..d]
        .iter()
        .map(|&v| {
            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            s * beta * v / total
        })
        .collect()
}

/// Samples `trials` points of the ball and records the worst nearest distance.
///
/// Certificates produced by [`l1_ball_cover`] use the exact lattice nearest
/// point; any other point set is scanned exhaustively.
pub fn cover_verify(cert: &CoverCertificate, trials: usize, seed: u64) -> Result<Verification> {
    if trials == 0 {
        return Err(Error::invalid("trials", "need at least one trial"));
    }
    let lattice = is_lattice(cert);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let a = sample_l1_ball(cert.d, cert.beta, &mut rng);
        let dist = if cert.points.is_empty() {
            f64::INFINITY
        } else if lattice {
            dist2(&nearest_lattice_point(&a, cert.beta, cert.k), &a)
        } else {
            brute_nearest_distance(&cert.points, &a)
        };
        worst = worst.max(dist);
    }
    Ok(Verification {
        trials,
        worst_distance: worst,
        pass: worst <= cert.eps,
    })
}

fn is_lattice(cert: &CoverCertificate) -> bool {
    cert.k > 0 && cert.points.len() as f64 == lattice_count(cert.d, cert.k)
}

/// Log-cardinality of the chained multilayer cover: tight form
/// `4 [Σ (√C_l a_l b_{l−1} ρ_l / ε)^{2/3}]³` and the Jensen relaxation
/// `4L²/ε² Σ (√C_l a_l b_{l−1} ρ_l)²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chaining {
    pub tight: f64,
    pub jensen: f64,
}

pub fn chaining_cardinality(c: &[f64], a: &[f64], b_prev: &[f64], rho: &[f64], eps: f64) -> Result<Chaining> {
    let depth = c.len();
    if depth == 0 || a.len() != depth || b_prev.len() != depth || rho.len() != depth {
        return Err(Error::shape("chaining inputs must have equal nonzero length"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("eps", "must be positive"));
    }
    let mut tight = 0.0;
    let mut sq = 0.0;
    for l in 0..depth {
        for (name, v) in [("C", c[l]), ("a", a[l]), ("b", b_prev[l]), ("rho", rho[l])] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be nonnegative, got {v}")));
            }
        }
        let x = c[l].sqrt() * a[l] * b_prev[l] * rho[l];
        tight += (x / eps).powf(2.0 / 3.0);
        sq += x * x;
    }
    let l = depth as f64;
    Ok(Chaining {
        tight: 4.0 * tight.powi(3),
        jensen: 4.0 * l * l / (eps * eps) * sq,
    })
}

/// Maximum number of integrand evaluations in [`dudley_bound`].
pub const QUADRATURE_CAP: usize = 1_000_000;

/// `4α + (12/√n) ∫_α^1 √(log N(ε)) dε`.
pub fn dudley_bound<F: Fn(f64) -> f64>(log_n: F, n: usize, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", "must lie in (0, 1)"));
    }
    if n == 0 {
        return Err(Error::invalid("n", "need at least one sample"));
    }
    let f = |e: f64| -> Result<f64> {
        let v = log_n(e);
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Quadrature(format!("log N({e}) = {v} is not a finite nonnegative number")));
        }
        Ok(v.sqrt())
    };
    let integral = adaptive_simpson(&f, alpha, 1.0, 1e-8, QUADRATURE_CAP)?;
    Ok(4.0 * alpha + 12.0 / (n as f64).sqrt() * integral)
}

/// Adaptive Simpson quadrature with an absolute tolerance and an evaluation cap.
pub fn adaptive_simpson<F>(f: &F, a: f64, b: f64, tol: f64, cap: usize) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    struct Seg {
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    }
    let mut evals = 3;
    let fa = f(a)?;
    let fb = f(b)?;
    let m = 0.5 * (a + b);
    let fm = f(m)?;
    let mut stack = vec![Seg {
        a,
        b,
        fa,
        fm,
        fb,
        whole: (b - a) / 6.0 * (fa + 4.0 * fm + fb),
        tol,
        depth: 0,
    }];
    let mut total = 0.0;
    while let Some(s) = stack.pop() {
        let m = 0.5 * (s.a + s.b);
        let lm = 0.5 * (s.a + m);
        let rm = 0.5 * (m + s.b);
        let flm = f(lm)?;
        let frm = f(rm)?;
        evals += 2;
        if evals > cap {
            return Err(Error::Quadrature(format!("no convergence within {cap} evaluations")));
        }
        let left = (m - s.a) / 6.0 * (s.fa + 4.0 * flm + s.fm);
        let right = (s.b - m) / 6.0 * (s.fm + 4.0 * frm + s.fb);
        let delta = left + right - s.whole;
        if delta.abs() <= 15.0 * s.tol || s.depth >= 60 {
            total += left + right + delta / 15.0;
        } else {
            stack.push(Seg { a: s.a, b: m, fa: s.fa, fm: flm, fb: s.fm, whole: left, tol: s.tol / 2.0, depth: s.depth + 1 });
            stack.push(Seg { a: m, b: s.b, fa: s.fm, fm: frm, fb: s.fb, whole: right, tol: s.tol / 2.0, depth: s.depth + 1 });
        }
    }
    if !total.is_finite() {
        return Err(Error::Quadrature("integral is not finite".into()));
    }
    Ok(total)
}
