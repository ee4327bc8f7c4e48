//! The compare pipeline: measure a trained network on its training set,
//! evaluate every capacity next to the baselines, and render the tables.
//!
//! Traces are never held for the whole dataset; each input is measured and
//! dropped, so memory stays flat for wide image networks.

use crate::bounds::{
    bartlett_capacity, certify_samples, firstmilestone_rhs, multilayer_RA, neyshabur_capacity, param_count_bound,
    synthetic_normalizer, two_layer_bound, BaselineLayer, BoundInputs, CertifyMode, SampleMeasure, Thresholds,
    TwoLayerParams, Variant, VariantResult,
};
use crate::convnet::{forward, margin, Architecture, WeightSet};
use crate::data::LabeledDataset;
use crate::dip::{dip_test, DipTest};
use crate::error::{Error, Result};
use crate::linalg::matrix_norms;
use crate::measures::{
    layer_norms, level_gaps, lipschitz_profile, patch_norm, pixel_norm_inf, rho_aggregate, GapAggregation,
    LayerNorms, LayerStats, LipschitzProfile, NormOptions,
};
use crate::train::select_margin;

/// Ordered `key=value` pairs written as the `#` block of every report.
pub type Header = Vec<(String, String)>;

/// The two architectures of the experiments, sized from a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Synthetic2,
    Mnist4,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Synthetic2 => "synthetic2",
            Preset::Mnist4 => "mnist4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic2" => Ok(Preset::Synthetic2),
            "mnist4" => Ok(Preset::Mnist4),
            _ => Err(Error::invalid("preset", format!("unknown preset `{s}`"))),
        }
    }

    /// The preset matching a dataset's generator.
    pub fn for_dataset(ds: &LabeledDataset) -> Result<Self> {
        match ds.provenance.generator.as_str() {
            "signatures" => Ok(Preset::Synthetic2),
            "augmented-mnist" => Ok(Preset::Mnist4),
            g => Err(Error::invalid("generator", format!("no preset for datasets from `{g}`"))),
        }
    }

    pub fn build(self, ds: &LabeledDataset) -> Result<Architecture> {
        match self {
            Preset::Synthetic2 => {
                if ds.channels != 4 || ds.classes != 2 {
                    return Err(Error::shape("synthetic2 expects 4 channels and 2 classes"));
                }
                Architecture::synthetic2(ds.width)
            }
            Preset::Mnist4 => {
                let side = (ds.width as f64).sqrt().round() as usize;
                if ds.channels != 1 || side * side != ds.width || ds.classes != 10 {
                    return Err(Error::shape("mnist4 expects square single-channel images and 10 classes"));
                }
                Architecture::mnist4(side)
            }
        }
    }
}

/// How `γ` is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MarginRule {
    Fixed(f64),
    /// Largest margin reaching this training accuracy.
    Auto(f64),
}

#[derive(Clone, Copy, Debug)]
pub struct CompareOptions {
    pub norms: NormOptions,
    pub gaps: GapAggregation,
    pub delta: f64,
    pub margin: MarginRule,
    /// Compute Jacobian-based quantities; needed by the lipschitz and
    /// augmented variants.
    pub lipschitz: bool,
    pub bins: usize,
    pub dip_replicates: usize,
    pub seed: u64,
    pub constant: f64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            norms: NormOptions::default(),
            gaps: GapAggregation::HalfMin,
            delta: 0.01,
            margin: MarginRule::Auto(0.96),
            lipschitz: true,
            bins: 50,
            dip_replicates: 2000,
            seed: 0,
            constant: 1.0,
        }
    }
}

/// Dataset-level quantities gathered in one streaming pass.
#[derive(Clone, Debug)]
pub struct DatasetMeasures {
    pub margins: Vec<f64>,
    pub stats: Vec<LayerStats>,
    pub samples: Vec<SampleMeasure>,
    pub profiles: Option<Vec<LipschitzProfile>>,
    /// `max_i ‖x_i‖₂`.
    pub input_l2: f64,
    /// `max_i ‖Ã^l x‖_F` of the preactivations, per layer `1..=L`.
    pub pre_fro: Vec<f64>,
}

/// Forward every input once and keep only the summary quantities.
pub fn measure_dataset(
    arch: &Architecture,
    w: &WeightSet<f64>,
    ds: &LabeledDataset,
    lipschitz: bool,
) -> Result<DatasetMeasures> {
    if ds.is_empty() {
        return Err(Error::invalid("dataset", "empty dataset"));
    }
    let depth = arch.depth();
    let mut margins = Vec::with_capacity(ds.len());
    let mut samples = Vec::with_capacity(ds.len());
    let mut profiles = lipschitz.then(Vec::new);
    let mut b = vec![0.0f64; depth];
    let mut pixel = vec![0.0f64; depth + 1];
    let mut e_min = vec![f64::INFINITY; depth + 1];
    let mut e_max = vec![f64::NEG_INFINITY; depth + 1];
    let mut pre_fro = vec![0.0f64; depth];
    let mut input_l2 = 0.0f64;
    for i in 0..ds.len() {
        let x = ds.input::<f64>(i);
        let trace = forward(arch, w, &x)?;
        if let Some((level, index)) = trace.nonfinite {
            return Err(Error::Degenerate(format!(
                "non-finite activation for input {i} at level {level}, index {index}"
            )));
        }
        input_l2 = input_l2.max(x.iter().map(|v| v * v).sum::<f64>().sqrt());
        let norms: Vec<f64> = (0..depth)
            .map(|l| patch_norm(arch, l, trace.level(l)))
            .collect::<Result<_>>()?;
        for (acc, v) in b.iter_mut().zip(&norms) {
            *acc = acc.max(*v);
        }
        for (level, acc) in pixel.iter_mut().enumerate() {
            *acc = acc.max(pixel_norm_inf(arch, level, trace.level(level)));
        }
        for (acc, lt) in pre_fro.iter_mut().zip(&trace.layers) {
            let f = lt.pre.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
            *acc = acc.max(f);
        }
        let gaps = level_gaps(arch, &trace);
        for (level, g) in gaps.iter().enumerate() {
            e_min[level] = e_min[level].min(*g);
            e_max[level] = e_max[level].max(*g);
        }
        let m = margin(trace.scores(), ds.labels[i])?;
        margins.push(m);
        let lip = profiles.as_mut().map(|ps| {
            let p = lipschitz_profile(arch, w, &trace);
            let cells = p
                .entries
                .iter()
                .map(|row| row.iter().map(|c| c.map(|l| (l.theta, l.rho))).collect())
                .collect();
            ps.push(p);
            cells
        });
        samples.push(SampleMeasure {
            margin: m,
            level_norms: norms,
            gaps,
            lipschitz: lip,
        });
    }
    let stats = (0..=depth)
        .map(|level| LayerStats {
            level,
            b: (level < depth).then(|| b[level]),
            e_min: e_min[level],
            e_max: e_max[level],
            pixel_inf: pixel[level],
            kappa: arch.kappa(level),
        })
        .collect();
    Ok(DatasetMeasures {
        margins,
        stats,
        samples,
        profiles,
        input_l2,
        pre_fro,
    })
}

/// One row of the bound comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundRow {
    pub name: String,
    /// `ours` or `baseline`.
    pub family: &'static str,
    /// The expression exactly as stated.
    pub raw: Option<f64>,
    /// The margin normalizer on a common scale: includes the `1/√n` factor
    /// and excludes `1/γ` where the expression separates it.
    pub capacity: Option<f64>,
    /// What enters the bound: `R_A/√n`, `M/γ`, or a full right-hand side.
    pub term: Option<f64>,
    pub distance_based: bool,
    pub formula: String,
    pub note: String,
}

impl BoundRow {
    fn failed(name: &str, family: &'static str, formula: &str, err: &Error) -> Self {
        BoundRow {
            name: name.to_string(),
            family,
            raw: None,
            capacity: None,
            term: None,
            distance_based: true,
            formula: formula.to_string(),
            note: err.to_string(),
        }
    }
}

/// Fixed-width histogram over `[min, max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub series: String,
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(series: &str, values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::invalid("bins", "need at least one bin"));
        }
        if values.is_empty() {
            return Err(Error::invalid("values", "empty series"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "histogram series",
                index: i,
            });
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0usize; bins];
        let span = max - min;
        for &v in values {
            let b = if span > 0.0 {
                (((v - min) / span * bins as f64) as usize).min(bins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Ok(Histogram {
            series: series.to_string(),
            min,
            max,
            counts,
        })
    }

    pub fn bin_left(&self, i: usize) -> f64 {
        self.min + (self.max - self.min) * i as f64 / self.counts.len() as f64
    }
}

/// Peaks of a histogram after a 5-bin moving average. A peak must reach a
/// tenth of the tallest one, and two peaks count separately only when the
/// valley between them drops below three quarters of the lower peak.
pub fn count_modes(counts: &[usize]) -> usize {
    let n = counts.len();
    if n == 0 {
        return 0;
    }
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(2);
            let hi = (i + 2).min(n - 1);
            counts[lo..=hi].iter().sum::<usize>() as f64 / (hi - lo + 1) as f64
        })
        .collect();
    let top = smooth.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    let mut peaks: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < n {
        // plateau [i, j)
        let mut j = i + 1;
        while j < n && smooth[j] == smooth[i] {
            j += 1;
        }
        let left_lower = i == 0 || smooth[i - 1] < smooth[i];
        let right_lower = j == n || smooth[j] < smooth[i];
        if left_lower && right_lower && smooth[i] >= 0.1 * top {
            peaks.push(i);
        }
        i = j;
    }
    let mut kept: Vec<usize> = Vec::new();
    for p in peaks {
        match kept.last().copied() {
            None => kept.push(p),
            Some(q) => {
                let valley = smooth[q..=p].iter().copied().fold(f64::INFINITY, f64::min);
                if valley < 0.75 * smooth[q].min(smooth[p]) {
                    kept.push(p);
                } else if smooth[p] > smooth[q] {
                    *kept.last_mut().expect("nonempty") = p;
                }
            }
        }
    }
    kept.len()
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub n: usize,
    pub gamma: f64,
    pub gamma_rule: MarginRule,
    pub norms: Vec<LayerNorms>,
    pub measures: DatasetMeasures,
    pub inputs: BoundInputs,
    pub variants: Vec<(Variant, std::result::Result<VariantResult, String>)>,
    pub rows: Vec<BoundRow>,
    pub certified: Option<usize>,
    pub dip: DipTest,
    pub modes: usize,
    pub histograms: Vec<Histogram>,
    pub flags: Header,
}

impl CompareReport {
    pub fn row(&self, name: &str) -> Option<&BoundRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn capacity(&self, name: &str) -> Option<f64> {
        self.row(name).and_then(|r| r.capacity)
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.row(name).and_then(|r| r.term)
    }

    pub fn norm_table(&self, header: &Header) -> String {
        let mut out = header_block(header, &self.flags);
        out.push_str(
            "layer,patches,out_width,k,kappa,b_prev,b_prev_clamped,e_min,e_max,pixel_inf,a21,fro_dist,fro,max_row,\
             spectral,spectral_converged,sigma_prime,sigma_prime_mode,sigma_prime_exact,expanded_a21,expanded_fro_dist\n",
        );
        for ln in &self.norms {
            let st = &self.measures.stats[ln.layer - 1];
            let next = &self.measures.stats[ln.layer];
            let b = st.b.unwrap_or(f64::NAN);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                ln.layer,
                ln.patches,
                ln.out_width,
                ln.k,
                ln.kappa,
                num(b),
                num(b.max(1.0)),
                num(next.e_min),
                num(next.e_max),
                num(st.pixel_inf),
                num(ln.a21),
                num(ln.fro_dist),
                num(ln.fro),
                num(ln.max_row),
                num(ln.spectral),
                ln.spectral_converged,
                num(ln.sigma_prime.value),
                ln.sigma_prime.mode.name(),
                ln.sigma_prime.exact,
                num(ln.expanded_a21),
                num(ln.expanded_fro_dist),
            ));
        }
        out
    }

    pub fn bound_table(&self, header: &Header) -> String {
        let mut out = header_block(header, &self.flags);
        out.push_str("name,family,raw,capacity,term,distance_based,formula,note\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.name,
                r.family,
                opt(r.raw),
                opt(r.capacity),
                opt(r.term),
                r.distance_based,
                quote(&r.formula),
                quote(&r.note),
            ));
        }
        out
    }

    pub fn histogram_table(&self, header: &Header) -> String {
        let mut out = header_block(header, &self.flags);
        out.push_str("series,bin,bin_left,count\n");
        for h in &self.histograms {
            for (i, c) in h.counts.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", h.series, i, num(h.bin_left(i)), c));
            }
        }
        out
    }

    pub fn margin_table(&self, header: &Header) -> String {
        let mut out = header_block(header, &self.flags);
        out.push_str("index,margin\n");
        for (i, m) in self.measures.margins.iter().enumerate() {
            out.push_str(&format!("{i},{}\n", num(*m)));
        }
        out
    }
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `# key=value` lines for the run header followed by the decision flags.
pub fn header_block(header: &Header, flags: &Header) -> String {
    let mut out = String::new();
    for (k, v) in header.iter().chain(flags) {
        out.push_str(&format!("# {k}={}\n", v.replace('\n', " ")));
    }
    out
}

/// Measure `w` against `refs` on `ds` and evaluate every capacity.
pub fn compare(
    arch: &Architecture,
    w: &WeightSet<f64>,
    refs: &WeightSet<f64>,
    ds: &LabeledDataset,
    opts: &CompareOptions,
) -> Result<CompareReport> {
    let depth = arch.depth();
    let n = ds.len();
    let measures = measure_dataset(arch, w, ds, opts.lipschitz)?;
    let gamma = match opts.margin {
        MarginRule::Fixed(g) => g,
        MarginRule::Auto(t) => {
            let c = select_margin(&measures.margins, t)?;
            if c.degenerate {
                return Err(Error::Degenerate(format!(
                    "no positive margin reaches training accuracy {t}"
                )));
            }
            c.gamma
        }
    };
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("gamma", format!("must be positive, got {gamma}")));
    }
    let norms = layer_norms(arch, w, refs, &opts.norms)?;

    let mut inp = BoundInputs::new(n, gamma, opts.delta);
    inp.constant = opts.constant;
    inp.b = Some(measures.stats[..depth].iter().map(|s| s.b.unwrap_or(0.0)).collect());
    inp.a21 = Some(norms.iter().map(|l| l.a21).collect());
    inp.fro_dist = Some(norms.iter().map(|l| l.fro_dist).collect());
    inp.spectral = Some(norms.iter().map(|l| l.spectral).collect());
    inp.sigma_prime = Some(norms.iter().map(|l| l.sigma_prime.value).collect());
    inp.last_max_row = Some(norms[depth - 1].max_row);
    inp.w = Some(norms.iter().map(|l| l.out_width).collect());
    inp.k = Some(norms.iter().map(|l| l.k).collect());
    inp.kappa = Some(norms.iter().map(|l| l.kappa).collect());
    inp.rho = Some(arch.layers.iter().map(|l| l.rho).collect());

    let mut flags: Header = vec![
        ("log_convention".into(), "natural; log2 where written".into()),
        ("constants_symbolic".into(), "true".into()),
        ("constants_mode".into(), opts.constant.to_string()),
        ("b_clamped_below_at".into(), "1".into()),
        ("norm_1_2_reading".into(), "linf_to_patch_l2".into()),
        ("gap_aggregation".into(), opts.gaps.name().into()),
        ("neyshabur_difference".into(), "A-M".into()),
        ("fc_21_norm".into(), "transpose (row sums)".into()),
        ("gamma".into(), num(gamma)),
        (
            "gamma_rule".into(),
            match opts.margin {
                MarginRule::Fixed(_) => "fixed".into(),
                MarginRule::Auto(t) => format!("auto target={t}"),
            },
        ),
        ("delta".into(), opts.delta.to_string()),
        ("n".into(), n.to_string()),
    ];
    let exact: Vec<String> = norms
        .iter()
        .map(|l| format!("{}:{}", l.sigma_prime.mode.name(), l.sigma_prime.exact))
        .collect();
    flags.push(("sigma_prime_exactness".into(), exact.join(" ")));
    flags.push(("lipschitz_quantities".into(), if opts.lipschitz { "computed" } else { "skipped" }.into()));

    // Jacobian-based inputs.
    let b_ext = inp.b_levels(depth)?;
    let e: Vec<f64> = measures.stats.iter().map(|s| s.e_threshold(opts.gaps)).collect();
    let mut lip_matrix: Option<Vec<Vec<f64>>> = None;
    let mut rho_caps: Option<Vec<f64>> = None;
    if let Some(profiles) = &measures.profiles {
        let mut m = vec![vec![0.0f64; depth + 1]; depth + 1];
        let mut missing = 0usize;
        for p in profiles {
            for l1 in 1..=depth {
                for l2 in l1..=depth {
                    match p.get(l1, l2) {
                        Some(lip) => m[l1][l2] = m[l1][l2].max(lip.rho),
                        None => missing += 1,
                    }
                }
            }
        }
        flags.push(("lipschitz_missing_pairs".into(), missing.to_string()));
        lip_matrix = Some(m);
        let caps: Result<Vec<f64>> = (1..=depth).map(|l| rho_aggregate(profiles, &b_ext, &e, l)).collect();
        match caps {
            Ok(c) => {
                inp.rho_augmented = Some(c[..depth - 1].to_vec());
                rho_caps = Some(c);
            }
            Err(err) => flags.push(("rho_augmented_error".into(), err.to_string())),
        }
    }
    inp.lipschitz = lip_matrix.clone();

    let sqrt_n = (n as f64).sqrt();
    let mut rows = Vec::new();
    let mut variants = Vec::new();
    for v in Variant::ALL {
        if !opts.lipschitz && matches!(v, Variant::Lipschitz | Variant::Augmented) {
            let err = Error::MissingField("lipschitz");
            rows.push(BoundRow::failed(v.name(), "ours", v.formula(), &err));
            variants.push((v, Err("Jacobian quantities skipped".to_string())));
            continue;
        }
        match multilayer_RA(&inp, v) {
            Ok(r) => {
                rows.push(BoundRow {
                    name: v.name().into(),
                    family: "ours",
                    raw: Some(r.r_a),
                    capacity: Some(r.r_a / sqrt_n),
                    term: Some(r.r_a / sqrt_n),
                    distance_based: v.distance_based(),
                    formula: v.formula().into(),
                    note: String::new(),
                });
                variants.push((v, Ok(r)));
            }
            Err(err) => {
                rows.push(BoundRow::failed(v.name(), "ours", v.formula(), &err));
                variants.push((v, Err(err.to_string())));
            }
        }
    }

    if depth == 2 {
        let filter_norms = row_norms(&w.filters[0])?;
        let class_norms = row_norms(&w.filters[1])?;
        let b0 = inp.b.as_ref().expect("set")[0];
        let k = norms[0].k as f64;
        let formula = "R = (b_0/sqrt(n)) sqrt(k sum f^2 max F^2 + sum f^2 sum F^2), f = layer-1 rows, F = class rows";
        match synthetic_normalizer(b0, n, k, &filter_norms, &class_norms) {
            Ok(r) => rows.push(BoundRow {
                name: "synthetic_normalizer".into(),
                family: "ours",
                raw: Some(r),
                capacity: Some(r),
                term: Some(r / gamma),
                distance_based: false,
                formula: formula.into(),
                note: "weight norms, not distances".into(),
            }),
            Err(err) => rows.push(BoundRow::failed("synthetic_normalizer", "ours", formula, &err)),
        }
        let p = TwoLayerParams {
            b0: b0.max(f64::MIN_POSITIVE),
            a1: norms[0].a21,
            a2: norms[1].fro_dist,
            a_star: norms[1].max_row,
            b1: measures.pre_fro[0].max(f64::MIN_POSITIVE),
            gamma,
            w: norms[0].out_width,
            w_bar: arch.max_pre_width(),
            classes: arch.class_count(),
            n,
            delta: opts.delta,
            constant: opts.constant,
        };
        let formula = "R^(2/3) = [b0 a1 max(1/b1, sqrt(w) a*/gamma)]^(2/3) + [b1 a2/gamma]^(2/3)";
        match two_layer_bound(&p) {
            Ok(t) => rows.push(BoundRow {
                name: "two_layer".into(),
                family: "ours",
                raw: Some(t.r),
                capacity: Some(t.r / sqrt_n),
                term: Some(t.rhs),
                distance_based: true,
                formula: formula.into(),
                note: format!("D={}", num(t.d)),
            }),
            Err(err) => rows.push(BoundRow::failed("two_layer", "ours", formula, &err)),
        }
    }

    // Certified set and the explicit-constant bound.
    let mut certified = None;
    {
        let th = Thresholds {
            b: b_ext[..depth].to_vec(),
            e: e.clone(),
            rho: match &rho_caps {
                Some(c) => std::iter::once(f64::INFINITY).chain(c.iter().copied()).collect(),
                None => vec![f64::INFINITY; depth + 1],
            },
        };
        let mode = if rho_caps.is_some() {
            CertifyMode::Augmented
        } else {
            CertifyMode::NormsOnly
        };
        let idx = certify_samples(&measures.samples, &th, gamma, mode);
        certified = certified.or(Some(idx.len()));
        flags.push((
            "certify_mode".into(),
            match mode {
                CertifyMode::Augmented => "augmented",
                CertifyMode::NormsOnly => "norms_only",
            }
            .into(),
        ));
        let formula = "(n-#I)/n + 8/n + (1536/sqrt(n)) R sqrt(log2(32 Gamma n^2 + 7 Wbar n)) ln n + 3 sqrt(ln(2/delta)/(2n))";
        if let (Some(m), Some(Ok(lr))) = (
            &lip_matrix,
            variants
                .iter()
                .find(|(v, _)| *v == Variant::Lipschitz)
                .map(|(_, r)| r.as_ref()),
        ) {
            let mut cap = 1.0f64;
            for l in 1..=depth {
                let rho_plus = (l..=depth).map(|i| m[l][i] / b_ext[i]).fold(0.0, f64::max);
                let spec = arch.layer(l);
                cap = cap.max(b_ext[l - 1] * norms[l - 1].a21 * spec.num_patches() as f64 * spec.filters as f64 * rho_plus);
            }
            let w_bar = arch.max_pre_width() as f64;
            match firstmilestone_rhs(n, lr.r_a, cap, w_bar.max(1.0), opts.delta, idx.len()) {
                Ok(v) => rows.push(BoundRow {
                    name: "explicit_constant".into(),
                    family: "ours",
                    raw: Some(lr.r_a),
                    capacity: Some(lr.r_a / sqrt_n),
                    term: Some(v),
                    distance_based: true,
                    formula: formula.into(),
                    note: format!("certified={} Gamma={}", idx.len(), num(cap)),
                }),
                Err(err) => rows.push(BoundRow::failed("explicit_constant", "ours", formula, &err)),
            }
        }
    }

    // Baselines on the expanded operators.
    let bart: Vec<BaselineLayer> = norms
        .iter()
        .map(|l| BaselineLayer {
            spectral: l.spectral,
            distance: l.expanded_a21,
        })
        .collect();
    let formula = "M = (1/sqrt(n)) prod ||A~||_s (sum (||(A~-M~)^T||_21/||A~||_s)^(2/3))^(3/2); term M/gamma";
    match bartlett_capacity(&bart, n) {
        Ok(m) => rows.push(BoundRow {
            name: "bartlett".into(),
            family: "baseline",
            raw: Some(m),
            capacity: Some(m),
            term: Some(m / gamma),
            distance_based: true,
            formula: formula.into(),
            note: String::new(),
        }),
        Err(err) => rows.push(BoundRow::failed("bartlett", "baseline", formula, &err)),
    }
    let ney: Vec<BaselineLayer> = norms
        .iter()
        .map(|l| BaselineLayer {
            spectral: l.spectral,
            distance: l.expanded_fro_dist,
        })
        .collect();
    let formula = "(L sqrt(W)/(gamma sqrt(n))) prod ||A~||_s (sum ||A~-M~||_F^2/||A~||_s^2)^(1/2)";
    match neyshabur_capacity(&ney, n, gamma, arch.max_width()) {
        Ok(v) => rows.push(BoundRow {
            name: "neyshabur".into(),
            family: "baseline",
            raw: Some(v),
            capacity: Some(v * gamma),
            term: Some(v),
            distance_based: true,
            formula: formula.into(),
            note: String::new(),
        }),
        Err(err) => rows.push(BoundRow::failed("neyshabur", "baseline", formula, &err)),
    }
    let s: Vec<f64> = norms.iter().map(|l| l.spectral.max(1.0).ln()).collect();
    let formula = "C B sqrt((P (sum s_l - ln gamma) + ln(1/delta))/n), s_l = ln max(||A~||_s, 1), B = max ||x||_2";
    match param_count_bound(arch.param_count(), &s, gamma, n, opts.delta, measures.input_l2, opts.constant) {
        Ok(v) => rows.push(BoundRow {
            name: "param_count".into(),
            family: "baseline",
            raw: Some(v),
            capacity: Some(v),
            term: Some(v),
            distance_based: false,
            formula: formula.into(),
            note: format!("params={}", arch.param_count()),
        }),
        Err(err) => {
            let mut r = BoundRow::failed("param_count", "baseline", formula, &err);
            r.distance_based = false;
            rows.push(r);
        }
    }

    // Margin distributions.
    let mut histograms = vec![Histogram::new("raw", &measures.margins, opts.bins)?];
    for r in &rows {
        if let Some(c) = r.capacity.filter(|c| *c > 0.0 && c.is_finite()) {
            let normalized: Vec<f64> = measures.margins.iter().map(|m| m / c).collect();
            histograms.push(Histogram::new(&r.name, &normalized, opts.bins)?);
        }
    }
    let dip = dip_test(&measures.margins, opts.dip_replicates.max(1), opts.seed)?;
    let modes = count_modes(&histograms[0].counts);
    flags.push(("dip".into(), num(dip.dip)));
    flags.push(("dip_p_value".into(), num(dip.p_value)));
    flags.push(("dip_replicates".into(), dip.replicates.to_string()));
    flags.push(("histogram_modes".into(), modes.to_string()));
    if let Some(c) = certified {
        flags.push(("certified".into(), c.to_string()));
    }

    Ok(CompareReport {
        n,
        gamma,
        gamma_rule: opts.margin,
        norms,
        measures,
        inputs: inp,
        variants,
        rows,
        certified,
        dip,
        modes,
        histograms,
        flags,
    })
}

fn row_norms(a: &crate::linalg::Matrix<f64>) -> Result<Vec<f64>> {
    matrix_norms(a)?;
    Ok((0..a.rows())
        .map(|i| a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// One block-constant image with a stride-2 filter bank, measured before and
/// after [`downsample_pair`].
#[derive(Clone, Debug, PartialEq)]
pub struct DownsampleCheck {
    pub channels: usize,
    pub side: usize,
    pub kernel: usize,
    pub filters: usize,
    pub b0: [f64; 2],
    /// `‖Aᵀ‖_{2,1}` against a zero reference.
    pub a1: [f64; 2],
    pub params: [usize; 2],
    /// [`param_count_bound`] with `s = ln max(‖A‖_F, 1)`, `γ = 1/2`, `n = 1000`.
    pub param_count: [f64; 2],
}

impl DownsampleCheck {
    /// Largest relative change of `b₀` and `a₁`.
    pub fn drift(&self) -> f64 {
        let rel = |v: [f64; 2]| (v[0] - v[1]).abs() / v[0].abs().max(1.0);
        rel(self.b0).max(rel(self.a1))
    }
}

/// Draws a random instance from `seed` and measures both resolutions.
pub fn downsample_check(seed: u64) -> Result<DownsampleCheck> {
    use crate::convnet::{Activation, LayerSpec, PatchMap, Pooling};
    use crate::linalg::Matrix;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (c, h2, k2): (usize, usize, usize) = (rng.random_range(1..4), rng.random_range(3..8), rng.random_range(1..3));
    let (h, k) = (2 * h2, 2 * k2);
    let mut x = vec![0.0f64; c * h * h];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..h2 {
                let v: f64 = rng.random_range(-1.0..1.0);
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    x[ch * h * h + (2 * i + dr) * h + 2 * j + dc] = v;
                }
            }
        }
    }
    let m: usize = rng.random_range(1..6);
    let data = (0..m * c * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = Matrix::new(m, c * k * k, data)?;
    let (xt, ft) = crate::data::downsample_pair(&x, c, h, h, &f, k, k)?;
    let conv_arch = |side: usize, kernel: usize, stride: usize| -> Result<Architecture> {
        let (pm, oh, ow) = PatchMap::conv2d(c, side, side, kernel, kernel, stride)?;
        let o = pm.len();
        let conv = LayerSpec::new(m, pm, Pooling::none(o), Activation::Relu)?;
        let out = LayerSpec::dense_output(m * oh * ow, 2)?;
        Architecture::new(c, side * side, vec![conv, out])
    };
    let b0 = [
        patch_norm(&conv_arch(h, k, 2)?, 0, &x)?,
        patch_norm(&conv_arch(h2, k2, 1)?, 0, &xt)?,
    ];
    let (na, nb) = (matrix_norms(&f)?, matrix_norms(&ft)?);
    let bound = |fro: f64, params: usize| param_count_bound(params, &[fro.max(1.0).ln()], 0.5, 1000, 0.01, b0[0], 1.0);
    let params = [f.rows() * f.cols(), ft.rows() * ft.cols()];
    Ok(DownsampleCheck {
        channels: c,
        side: h,
        kernel: k,
        filters: m,
        b0,
        a1: [na.l21_of_transpose, nb.l21_of_transpose],
        params,
        param_count: [bound(na.frobenius, params[0])?, bound(nb.frobenius, params[1])?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_signature_dataset;
    use crate::train::{train_network, TrainConfig};

    #[test]
    fn histogram_bins_cover_range() {
        let h = Histogram::new("x", &[0.0, 0.5, 1.0, 1.0], 4).unwrap();
        assert_eq!(h.counts, vec![1, 0, 1, 2]);
        assert_eq!(h.bin_left(2), 0.5);
        let c = Histogram::new("c", &[2.0; 3], 5).unwrap();
        assert_eq!(c.counts[0], 3);
        assert!(Histogram::new("e", &[], 5).is_err());
        assert!(Histogram::new("n", &[f64::NAN], 5).is_err());
    }

    #[test]
    fn mode_counting() {
        let one: Vec<usize> = (0..50).map(|i| 50 - (i as i64 - 25).unsigned_abs() as usize).collect();
        assert_eq!(count_modes(&one), 1);
        let mut two = vec![0usize; 50];
        for i in 0..50 {
            two[i] = 30usize.saturating_sub(3 * (i as i64 - 10).unsigned_abs() as usize)
                + 20usize.saturating_sub(2 * (i as i64 - 38).unsigned_abs() as usize);
        }
        assert_eq!(count_modes(&two), 2);
        assert_eq!(count_modes(&[0; 10]), 0);
        // A tiny bump is ignored.
        let mut bump = one.clone();
        bump[2] += 3;
        assert_eq!(count_modes(&bump), 1);
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(quote("a,b"), "\"a,b\"");
        assert_eq!(quote("plain"), "plain");
        let h = header_block(&vec![("k".into(), "v".into())], &vec![("f".into(), "x\ny".into())]);
        assert_eq!(h, "# k=v\n# f=x y\n");
    }

    #[test]
    fn untrained_network_has_zero_distance_capacities() {
        let (ds, _) = gen_signature_dataset(3, 12, 120, 1).unwrap();
        let arch = Preset::Synthetic2.build(&ds).unwrap();
        let w = WeightSet::<f64>::glorot(&arch, 5);
        let opts = CompareOptions {
            margin: MarginRule::Fixed(0.1),
            dip_replicates: 20,
            ..CompareOptions::default()
        };
        let rep = compare(&arch, &w, &w, &ds, &opts).unwrap();
        for r in rep.rows.iter().filter(|r| r.distance_based) {
            if let Some(c) = r.capacity {
                assert_eq!(c, 0.0, "{}", r.name);
            }
        }
        for v in [Variant::Main, Variant::Simplified, Variant::Lipschitz, Variant::ExplicitNorm, Variant::ExplicitNormKappa] {
            assert_eq!(rep.capacity(v.name()), Some(0.0), "{}", v.name());
        }
        // Repeated signatures tie inside the global pool, so E_1 = 0 and the
        // augmented capacity is undefined rather than zero.
        let aug = rep.row("augmented").unwrap();
        assert!(aug.capacity.is_none() && aug.note.contains("rho_augmented"));
        assert!(rep.flags.iter().any(|(k, v)| k == "rho_augmented_error" && v.contains("level 1")));
        assert!(rep.term("param_count").unwrap() > 0.0);
        assert!(rep.capacity("synthetic_normalizer").unwrap() > 0.0);
        let t = rep.bound_table(&vec![("command".into(), "compare".into())]);
        assert!(t.starts_with("# command=compare\n"));
        assert!(t.contains("\nbartlett,baseline,0e0,0e0,"));
        assert_eq!(rep.norm_table(&Header::new()).lines().filter(|l| !l.starts_with('#')).count(), 3);
    }

    #[test]
    fn trained_synthetic_report_is_consistent() {
        let (ds, _) = gen_signature_dataset(11, 60, 150, 1).unwrap();
        let arch = Preset::Synthetic2.build(&ds).unwrap();
        let cfg = TrainConfig {
            max_epochs: 40,
            seed: 2,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let tr = train_network::<f32>(&arch, &ds, &cfg).unwrap();
        let (w, m) = (tr.weights.convert::<f64>(), tr.reference.convert::<f64>());
        let opts = CompareOptions {
            dip_replicates: 50,
            ..CompareOptions::default()
        };
        let rep = compare(&arch, &w, &m, &ds, &opts).unwrap();
        assert_eq!(rep.measures.margins.len(), ds.len());
        for (a, b) in rep.measures.margins.iter().zip(&tr.margins) {
            assert!((a - b).abs() < 1e-3 * (1.0 + b.abs()));
        }
        let bart = rep.capacity("bartlett").unwrap();
        assert!(bart > 0.0);
        assert!((rep.term("bartlett").unwrap() - bart / rep.gamma).abs() <= 1e-12 * bart / rep.gamma);
        let main = rep.variants.iter().find(|(v, _)| *v == Variant::Main).unwrap();
        assert!(main.1.is_ok(), "{:?}", main.1);
        assert_eq!(rep.histograms[0].counts.iter().sum::<usize>(), ds.len());
        assert!(rep.histograms.iter().any(|h| h.series == "synthetic_normalizer"));
        assert!(rep.certified.unwrap() <= ds.len());
    }

    #[test]
    fn downsampling_keeps_data_terms() {
        for seed in 0..5 {
            let d = downsample_check(seed).unwrap();
            assert!(d.drift() <= 1e-12, "{d:?}");
            assert_eq!(d.params[0], 4 * d.params[1]);
            assert!(d.param_count[0] > d.param_count[1]);
        }
    }
}
