//! Weight-sharing networks described by explicit patch maps.
//!
//! Activations at every level are flat channel-major vectors: coordinate
//! `u * w + p` holds channel `u` at spatial position `p`. A layer with `m`
//! filters of length `d` reads `O` patches of `d` coordinates each from the
//! previous level, producing an `m x O` preactivation matrix whose row-major
//! flattening is again channel-major. Max-pooling windows are lists of patch
//! indices applied to every channel separately, followed by the activation.
//!
//! An optional constant coordinate can be appended to a layer's input (index
//! `prev_len`) so that patches may carry an offset term.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{LinearOperator, Matrix};
use crate::scalar::Scalar;

/// Ordered list of `O` equally sized, duplicate-free index lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMap {
    patches: Vec<Vec<usize>>,
    input_len: usize,
}

impl PatchMap {
    pub fn new(patches: Vec<Vec<usize>>, input_len: usize) -> Result<Self> {
        let d = match patches.first() {
            Some(p) if !p.is_empty() => p.len(),
            _ => return Err(Error::invalid("patches", "need at least one nonempty patch")),
        };
        let mut seen = vec![usize::MAX; input_len];
        for (o, p) in patches.iter().enumerate() {
            if p.len() != d {
                return Err(Error::invalid(
                    "patches",
                    format!("patch {o} has {} entries, expected {d}", p.len()),
                ));
            }
            for &i in p {
                if i >= input_len {
                    return Err(Error::invalid(
                        "patches",
                        format!("patch {o} index {i} outside input of length {input_len}"),
                    ));
                }
                if seen[i] == o {
                    return Err(Error::invalid(
                        "patches",
                        format!("patch {o} repeats index {i}"),
                    ));
                }
                seen[i] = o;
            }
        }
        Ok(PatchMap { patches, input_len })
    }

    /// One patch spanning the whole input: a fully connected layer.
    pub fn dense(input_len: usize) -> Result<Self> {
        Self::new(vec![(0..input_len).collect()], input_len)
    }

    /// Valid 1-D convolution over a `channels x len` input.
    pub fn conv1d(channels: usize, len: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel == 0 || kernel > len || stride == 0 {
            return Err(Error::invalid("kernel", format!("kernel {kernel}, stride {stride}, length {len}")));
        }
        let out = (len - kernel) / stride + 1;
        let patches = (0..out)
            .map(|o| {
                let start = o * stride;
                (0..channels)
                    .flat_map(|u| (0..kernel).map(move |t| u * len + start + t))
                    .collect()
            })
            .collect();
        Self::new(patches, channels * len)
    }

    /// Valid 2-D convolution over a `channels x height x width` input.
    /// Returns the map with the output height and width.
    pub fn conv2d(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
    ) -> Result<(Self, usize, usize)> {
        if kh == 0 || kw == 0 || kh > height || kw > width || stride == 0 {
            return Err(Error::invalid(
                "kernel",
                format!("{kh}x{kw} stride {stride} on {height}x{width}"),
            ));
        }
        let oh = (height - kh) / stride + 1;
        let ow = (width - kw) / stride + 1;
        let mut patches = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            for j in 0..ow {
                let mut p = Vec::with_capacity(channels * kh * kw);
                for c in 0..channels {
                    for dr in 0..kh {
                        for dc in 0..kw {
                            p.push(c * height * width + (i * stride + dr) * width + j * stride + dc);
                        }
                    }
                }
                patches.push(p);
            }
        }
        Ok((Self::new(patches, channels * height * width)?, oh, ow))
    }

    /// Appends the constant coordinate (index `input_len`) to every patch.
    pub fn with_constant(self) -> Self {
        let c = self.input_len;
        PatchMap {
            patches: self
                .patches
                .into_iter()
                .map(|mut p| {
                    p.push(c);
                    p
                })
                .collect(),
            input_len: c + 1,
        }
    }

    /// Lists every patch `times` times in a row.
    pub fn replicate(&self, times: usize) -> Self {
        PatchMap {
            patches: self
                .patches
                .iter()
                .flat_map(|p| std::iter::repeat_n(p.clone(), times))
                .collect(),
            input_len: self.input_len,
        }
    }

    /// Number of patches `O`.
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Patch length `d`.
    pub fn width(&self) -> usize {
        self.patches[0].len()
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn patch(&self, o: usize) -> &[usize] {
        &self.patches[o]
    }

    pub fn patches(&self) -> &[Vec<usize>] {
        &self.patches
    }

    /// Copies the patches of `x` into `out` as an `O x d` row-major block.
    pub(crate) fn gather<T: Scalar>(&self, x: &[T], out: &mut [T]) {
        let d = self.width();
        for (p, row) in self.patches.iter().zip(out.chunks_exact_mut(d)) {
            for (dst, &i) in row.iter_mut().zip(p) {
                *dst = x[i];
            }
        }
    }

    /// Adds an `O x d` block of patch values back onto `x`.
    pub(crate) fn scatter_add<T: Scalar>(&self, block: &[T], x: &mut [T]) {
        let d = self.width();
        for (p, row) in self.patches.iter().zip(block.chunks_exact(d)) {
            for (&v, &i) in row.iter().zip(p) {
                if i < x.len() {
                    x[i] += v;
                }
            }
        }
    }
}

/// Disjoint max-pooling windows over the patch positions of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pooling {
    windows: Vec<Vec<usize>>,
}

impl Pooling {
    pub fn new(windows: Vec<Vec<usize>>, positions: usize) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::invalid("pooling", "need at least one window"));
        }
        let mut used = vec![false; positions];
        for (p, win) in windows.iter().enumerate() {
            if win.is_empty() {
                return Err(Error::invalid("pooling", format!("window {p} is empty")));
            }
            for &o in win {
                if o >= positions {
                    return Err(Error::invalid(
                        "pooling",
                        format!("window {p} position {o} out of {positions}"),
                    ));
                }
                if used[o] {
                    return Err(Error::invalid("pooling", format!("position {o} in two windows")));
                }
                used[o] = true;
            }
        }
        Ok(Pooling { windows })
    }

    /// Every position its own window.
    pub fn none(positions: usize) -> Self {
        Pooling {
            windows: (0..positions).map(|o| vec![o]).collect(),
        }
    }

    /// A single window over all positions.
    pub fn global(positions: usize) -> Self {
        Pooling {
            windows: vec![(0..positions).collect()],
        }
    }

    pub fn windows(&self) -> &[Vec<usize>] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn is_trivial(&self) -> bool {
        self.windows.iter().all(|w| w.len() == 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    /// Number of filters `m`.
    pub filters: usize,
    pub patches: PatchMap,
    pub pooling: Pooling,
    pub activation: Activation,
    /// Whether the input carries the constant coordinate.
    pub offset: bool,
    /// Lipschitz constant of pooling plus activation.
    pub rho: f64,
}

impl LayerSpec {
    pub fn new(filters: usize, patches: PatchMap, pooling: Pooling, activation: Activation) -> Result<Self> {
        if filters == 0 {
            return Err(Error::invalid("filters", "need at least one filter"));
        }
        if pooling.windows.iter().flatten().any(|&o| o >= patches.len()) {
            return Err(Error::invalid("pooling", "window refers to a missing patch"));
        }
        Ok(LayerSpec {
            filters,
            patches,
            pooling,
            activation,
            offset: false,
            rho: 1.0,
        })
    }

    /// A fully connected output layer with `classes` rows.
    pub fn dense_output(input_len: usize, classes: usize) -> Result<Self> {
        Self::new(
            classes,
            PatchMap::dense(input_len)?,
            Pooling::none(1),
            Activation::Identity,
        )
    }

    /// Filter length `d`.
    pub fn filter_cols(&self) -> usize {
        self.patches.width()
    }

    /// Patch count `O`.
    pub fn num_patches(&self) -> usize {
        self.patches.len()
    }

    /// Spatial width after pooling `w`.
    pub fn out_width(&self) -> usize {
        self.pooling.len()
    }

    /// Neurons after pooling, `k = U w` with `U = m`.
    pub fn out_len(&self) -> usize {
        self.filters * self.out_width()
    }

    /// Preactivation count `m O`.
    pub fn pre_len(&self) -> usize {
        self.filters * self.num_patches()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(input_channels: usize, input_width: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("layers", "need at least one layer"));
        }
        let mut prev = input_channels * input_width;
        if prev == 0 {
            return Err(Error::invalid("input", "empty input shape"));
        }
        for (l, layer) in layers.iter().enumerate() {
            let expect = prev + usize::from(layer.offset);
            if layer.patches.input_len() != expect {
                return Err(Error::shape(format!(
                    "layer {} patch map expects input length {}, previous level has {expect}",
                    l + 1,
                    layer.patches.input_len()
                )));
            }
            prev = layer.out_len();
        }
        let last = layers.last().expect("nonempty");
        let prev_len = if layers.len() == 1 {
            input_channels * input_width
        } else {
            layers[layers.len() - 2].out_len()
        };
        if last.num_patches() != 1
            || last.filter_cols() != prev_len + usize::from(last.offset)
            || last.activation != Activation::Identity
        {
            return Err(Error::invalid(
                "layers",
                "the last layer must be fully connected without activation",
            ));
        }
        if last.filters < 2 {
            return Err(Error::invalid("layers", "need at least two classes"));
        }
        Ok(Architecture {
            input_channels,
            input_width,
            layers,
        })
    }

    /// Number of layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Layer `l` in 1-based numbering.
    pub fn layer(&self, l: usize) -> &LayerSpec {
        &self.layers[l - 1]
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().expect("nonempty").filters
    }

    /// Length of the activation vector at `level` (0 is the input).
    pub fn level_len(&self, level: usize) -> usize {
        if level == 0 {
            self.input_channels * self.input_width
        } else {
            self.layers[level - 1].out_len()
        }
    }

    /// `(channels, spatial width)` at `level`.
    pub fn level_shape(&self, level: usize) -> (usize, usize) {
        if level == 0 {
            (self.input_channels, self.input_width)
        } else {
            let l = &self.layers[level - 1];
            (l.filters, l.out_width())
        }
    }

    /// `W`: the widest level, input included.
    pub fn max_width(&self) -> usize {
        (0..=self.depth()).map(|l| self.level_len(l)).max().unwrap_or(0)
    }

    /// `W̄`: the largest preactivation count `O_{l-1} m_l`.
    pub fn max_pre_width(&self) -> usize {
        self.layers.iter().map(LayerSpec::pre_len).max().unwrap_or(0)
    }

    /// `𝒲 = Σ m_l d_l`.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.filters * l.filter_cols()).sum()
    }

    /// Patches, restricted to non-constant coordinates, that define the
    /// `|.|_level` norm. The output level uses singletons.
    pub fn level_patches(&self, level: usize) -> Vec<Vec<usize>> {
        let len = self.level_len(level);
        if level == self.depth() {
            return (0..len).map(|i| vec![i]).collect();
        }
        self.layers[level]
            .patches
            .patches()
            .iter()
            .map(|p| p.iter().copied().filter(|&i| i < len).collect())
            .collect()
    }

    /// Constant `κ` with `|x|_{∞,level} ≤ √κ |x|_level` on the coordinates
    /// the next layer reads, from a greedy cover of each pixel by patches.
    pub fn kappa(&self, level: usize) -> f64 {
        let patches = self.level_patches(level);
        let (channels, w) = self.level_shape(level);
        let len = self.level_len(level);
        let mut read = vec![false; len];
        let mut owners: Vec<Vec<usize>> = vec![Vec::new(); len];
        for (o, p) in patches.iter().enumerate() {
            for &i in p {
                read[i] = true;
                owners[i].push(o);
            }
        }
        let mut worst = 1usize;
        let mut open = vec![false; len];
        for pix in 0..w {
            let mut cells: Vec<usize> = (0..channels)
                .map(|u| u * w + pix)
                .filter(|&i| read[i])
                .collect();
            cells.iter().for_each(|&i| open[i] = true);
            let mut candidates: Vec<usize> = cells.iter().flat_map(|&i| owners[i].iter().copied()).collect();
            candidates.sort_unstable();
            candidates.dedup();
            let mut used = 0;
            while !cells.is_empty() {
                let mut best = (0usize, 0usize);
                for &o in &candidates {
                    let hit = patches[o].iter().filter(|&&k| open[k]).count();
                    if hit > best.1 {
                        best = (o, hit);
                    }
                }
                patches[best.0].iter().for_each(|&k| open[k] = false);
                cells.retain(|&k| open[k]);
                used += 1;
            }
            worst = worst.max(used);
        }
        worst as f64
    }

    /// One conv layer of 50 width-15 filters with global max-pooling, then a
    /// dense layer to two classes, for one-hot sequences of length `len`.
    pub fn synthetic2(len: usize) -> Result<Self> {
        const FILTERS: usize = 50;
        const WIDTH: usize = 15;
        let pm = PatchMap::conv1d(4, len, WIDTH, 1)?;
        let o = pm.len();
        let conv = LayerSpec::new(FILTERS, pm, Pooling::global(o), Activation::Relu)?;
        let out = LayerSpec::dense_output(FILTERS, 2)?;
        Self::new(4, len, vec![conv, out])
    }

    /// Four 3x3 stride-2 relu conv layers (64, 128, 128, 64 channels) and a
    /// dense layer to ten classes on a `side x side` single-channel image.
    pub fn mnist4(side: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let (mut c, mut h) = (1, side);
        for &m in &[64, 128, 128, 64] {
            let (pm, oh, _) = PatchMap::conv2d(c, h, h, 3, 3, 2)?;
            let o = pm.len();
            layers.push(LayerSpec::new(m, pm, Pooling::none(o), Activation::Relu)?);
            c = m;
            h = oh;
        }
        layers.push(LayerSpec::dense_output(c * h * h, 10)?);
        Self::new(1, side * side, layers)
    }
}

/// Filter matrices `A^1..A^L`, each `m_l x d_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet<T> {
    pub filters: Vec<Matrix<T>>,
}

impl<T: Scalar> WeightSet<T> {
    pub fn new(arch: &Architecture, filters: Vec<Matrix<T>>) -> Result<Self> {
        let w = WeightSet { filters };
        w.check(arch)?;
        Ok(w)
    }

    pub fn check(&self, arch: &Architecture) -> Result<()> {
        if self.filters.len() != arch.depth() {
            return Err(Error::shape(format!(
                "{} filter matrices for {} layers",
                self.filters.len(),
                arch.depth()
            )));
        }
        for (l, (a, spec)) in self.filters.iter().zip(&arch.layers).enumerate() {
            if a.shape() != (spec.filters, spec.filter_cols()) {
                return Err(Error::shape(format!(
                    "layer {} filter is {:?}, expected {:?}",
                    l + 1,
                    a.shape(),
                    (spec.filters, spec.filter_cols())
                )));
            }
        }
        Ok(())
    }

    pub fn zeros(arch: &Architecture) -> Self {
        WeightSet {
            filters: arch
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.filters, l.filter_cols()))
                .collect(),
        }
    }

    /// Uniform in `±√(6 / (d_l + m_l))` per layer.
    pub fn glorot(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filters = arch
            .layers
            .iter()
            .map(|l| {
                let (m, d) = (l.filters, l.filter_cols());
                let lim = (6.0 / (m + d) as f64).sqrt();
                let data = (0..m * d)
                    .map(|_| T::lit(rng.random_range(-lim..lim)))
                    .collect();
                Matrix::new(m, d, data).expect("finite draws")
            })
            .collect();
        WeightSet { filters }
    }

    pub fn convert<U: Scalar>(&self) -> WeightSet<U> {
        WeightSet {
            filters: self.filters.iter().map(Matrix::convert).collect(),
        }
    }
}

/// Intermediate values of one layer for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace<T> {
    /// `m x O` preactivations.
    pub pre: Matrix<T>,
    /// Pooled and activated output, channel-major `m x w`.
    pub post: Vec<T>,
    /// Patch index chosen by each pooling window, per output coordinate.
    pub argmax: Vec<usize>,
}

impl<T: Scalar> LayerTrace<T> {
    /// Pooled value feeding the activation at output coordinate `r`.
    pub fn pooled(&self, r: usize, windows: usize) -> T {
        self.pre[(r / windows, self.argmax[r])]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace<T> {
    pub input: Vec<T>,
    pub layers: Vec<LayerTrace<T>>,
    /// First non-finite intermediate as `(level, index)`, if any.
    pub nonfinite: Option<(usize, usize)>,
}

impl<T: Scalar> ActivationTrace<T> {
    pub fn scores(&self) -> &[T] {
        &self.layers.last().expect("nonempty").post
    }

    /// Activation vector at `level`; level 0 is the input.
    pub fn level(&self, level: usize) -> &[T] {
        if level == 0 {
            &self.input
        } else {
            &self.layers[level - 1].post
        }
    }
}

/// Appends the constant coordinate when the layer uses an offset.
pub(crate) fn layer_input<T: Scalar>(prev: &[T], offset: bool) -> std::borrow::Cow<'_, [T]> {
    if offset {
        let mut v = prev.to_vec();
        v.push(T::one());
        std::borrow::Cow::Owned(v)
    } else {
        std::borrow::Cow::Borrowed(prev)
    }
}

/// `out = A Pᵀ` for a gathered `O x d` patch block `p`; `out` is `m x O`.
pub(crate) fn conv_block<T: Scalar>(a: &Matrix<T>, p: &[T], o: usize, out: &mut [T]) {
    let (m, d) = a.shape();
    T::gemm(
        m,
        d,
        o,
        T::one(),
        a.as_slice(),
        d as isize,
        1,
        p,
        1,
        d as isize,
        T::zero(),
        out,
        o as isize,
        1,
    );
}

/// `Λ_A(x)_{j,o} = Σ_i x_{S^o_i} A_{j,i}` as an `m x O` matrix.
pub fn apply_conv<T: Scalar>(x: &[T], a: &Matrix<T>, pm: &PatchMap) -> Result<Matrix<T>> {
    if x.len() != pm.input_len() {
        return Err(Error::shape(format!(
            "input of length {} for a patch map over {}",
            x.len(),
            pm.input_len()
        )));
    }
    if a.cols() != pm.width() {
        return Err(Error::shape(format!(
            "filter with {} columns for patches of length {}",
            a.cols(),
            pm.width()
        )));
    }
    let (o, d) = (pm.len(), pm.width());
    let mut p = vec![T::zero(); o * d];
    pm.gather(x, &mut p);
    let mut out = vec![T::zero(); a.rows() * o];
    conv_block(a, &p, o, &mut out);
    Ok(Matrix::from_raw(a.rows(), o, out))
}

/// Dense `Ã` with row `j O + o` holding filter `j` scattered on patch `o`.
pub fn expand_operator<T: Scalar>(a: &Matrix<T>, pm: &PatchMap) -> Result<Matrix<T>> {
    if a.cols() != pm.width() {
        return Err(Error::shape(format!(
            "filter with {} columns for patches of length {}",
            a.cols(),
            pm.width()
        )));
    }
    let o = pm.len();
    let mut e = Matrix::zeros(a.rows() * o, pm.input_len());
    for j in 0..a.rows() {
        for (q, patch) in pm.patches().iter().enumerate() {
            let row = e.row_mut(j * o + q);
            for (&i, &v) in patch.iter().zip(a.row(j)) {
                row[i] += v;
            }
        }
    }
    Ok(e)
}

/// Matrix-free `Ã`, optionally restricted to a subset of its rows.
pub struct ConvOperator<'a, T> {
    a: &'a Matrix<T>,
    pm: &'a PatchMap,
    rows: Option<Vec<usize>>,
}

impl<'a, T: Scalar> ConvOperator<'a, T> {
    pub fn new(a: &'a Matrix<T>, pm: &'a PatchMap) -> Result<Self> {
        if a.cols() != pm.width() {
            return Err(Error::shape("filter width differs from patch length"));
        }
        Ok(ConvOperator { a, pm, rows: None })
    }

    /// Keeps only the listed rows of `Ã` (indices `j O + o`).
    pub fn restricted(a: &'a Matrix<T>, pm: &'a PatchMap, rows: Vec<usize>) -> Result<Self> {
        let full = a.rows() * pm.len();
        if rows.iter().any(|&r| r >= full) {
            return Err(Error::invalid("rows", "row index beyond the expanded operator"));
        }
        let mut op = Self::new(a, pm)?;
        op.rows = Some(rows);
        Ok(op)
    }

    fn full_rows(&self) -> usize {
        self.a.rows() * self.pm.len()
    }
}

impl<T: Scalar> LinearOperator<T> for ConvOperator<'_, T> {
    fn rows(&self) -> usize {
        self.rows.as_ref().map_or(self.full_rows(), Vec::len)
    }

    fn cols(&self) -> usize {
        self.pm.input_len()
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        let (o, d) = (self.pm.len(), self.pm.width());
        let mut p = vec![T::zero(); o * d];
        self.pm.gather(x, &mut p);
        match &self.rows {
            None => conv_block(self.a, &p, o, y),
            Some(rows) => {
                let mut full = vec![T::zero(); self.full_rows()];
                conv_block(self.a, &p, o, &mut full);
                for (dst, &r) in y.iter_mut().zip(rows) {
                    *dst = full[r];
                }
            }
        }
    }

    fn apply_transpose(&self, y: &[T], x: &mut [T]) {
        let (m, d) = self.a.shape();
        let o = self.pm.len();
        let full;
        let yf: &[T] = match &self.rows {
            None => y,
            Some(rows) => {
                let mut f = vec![T::zero(); self.full_rows()];
                for (&v, &r) in y.iter().zip(rows) {
                    f[r] += v;
                }
                full = f;
                &full
            }
        };
        // G = Yᵀ A, an O x d block of patch gradients.
        let mut g = vec![T::zero(); o * d];
        T::gemm(
            o,
            m,
            d,
            T::one(),
            yf,
            1,
            o as isize,
            self.a.as_slice(),
            d as isize,
            1,
            T::zero(),
            &mut g,
            d as isize,
            1,
        );
        x.iter_mut().for_each(|v| *v = T::zero());
        self.pm.scatter_add(&g, x);
    }
}

/// Max-pools each channel row of `pre` and applies the activation.
pub(crate) fn pool_activate<T: Scalar>(
    pre: &[T],
    spec: &LayerSpec,
    post: &mut [T],
    argmax: &mut [usize],
) {
    let o = spec.num_patches();
    let wn = spec.out_width();
    for j in 0..spec.filters {
        let row = &pre[j * o..(j + 1) * o];
        for (p, win) in spec.pooling.windows().iter().enumerate() {
            let mut best = win[0];
            for &q in &win[1..] {
                if row[q] > row[best] {
                    best = q;
                }
            }
            let v = row[best];
            let r = j * wn + p;
            argmax[r] = best;
            post[r] = match spec.activation {
                Activation::Relu => v.max(T::zero()),
                Activation::Identity => v,
            };
        }
    }
}

/// Runs every layer and records all intermediates.
pub fn forward<T: Scalar>(arch: &Architecture, w: &WeightSet<T>, x: &[T]) -> Result<ActivationTrace<T>> {
    w.check(arch)?;
    if x.len() != arch.level_len(0) {
        return Err(Error::shape(format!(
            "input of length {}, architecture expects {}",
            x.len(),
            arch.level_len(0)
        )));
    }
    let mut layers: Vec<LayerTrace<T>> = Vec::with_capacity(arch.depth());
    let mut nonfinite = x.iter().position(|v| !v.is_finite()).map(|i| (0, i));
    for (l, (spec, a)) in arch.layers.iter().zip(&w.filters).enumerate() {
        let prev: &[T] = layers.last().map_or(x, |t| &t.post);
        let input = layer_input(prev, spec.offset);
        let o = spec.num_patches();
        let mut p = vec![T::zero(); o * spec.filter_cols()];
        spec.patches.gather(&input, &mut p);
        let mut pre = vec![T::zero(); spec.pre_len()];
        conv_block(a, &p, o, &mut pre);
        let mut post = vec![T::zero(); spec.out_len()];
        let mut argmax = vec![0; spec.out_len()];
        pool_activate(&pre, spec, &mut post, &mut argmax);
        if nonfinite.is_none() {
            nonfinite = post.iter().position(|v| !v.is_finite()).map(|i| (l + 1, i));
        }
        layers.push(LayerTrace {
            pre: Matrix::from_raw(spec.filters, o, pre),
            post,
            argmax,
        });
    }
    Ok(ActivationTrace {
        input: x.to_vec(),
        layers,
        nonfinite,
    })
}

/// Rejects activation patterns at which the network is not differentiable.
pub fn check_differentiable<T: Scalar>(spec: &LayerSpec, lt: &LayerTrace<T>, layer: usize) -> Result<()> {
    let wn = spec.out_width();
    for j in 0..spec.filters {
        let row = lt.pre.row(j);
        for (p, win) in spec.pooling.windows().iter().enumerate() {
            let r = j * wn + p;
            let best = lt.argmax[r];
            if win.len() > 1 && win.iter().any(|&q| q != best && row[q] == row[best]) {
                return Err(Error::Degenerate(format!(
                    "tied max-pool window {p} of channel {j} at layer {layer}"
                )));
            }
            if spec.activation == Activation::Relu && row[best].is_zero() {
                return Err(Error::Degenerate(format!(
                    "zero relu input at channel {j}, window {p} of layer {layer}"
                )));
            }
        }
    }
    Ok(())
}

/// Jacobian of `F^{l1→l2}` at the activation pattern of `trace`, with rows
/// indexed by level `l2` and columns by level `l1` (the constant coordinate
/// excluded). `l1 == l2` yields the identity.
pub fn subnet_jacobian<T: Scalar>(
    arch: &Architecture,
    w: &WeightSet<T>,
    trace: &ActivationTrace<T>,
    l1: usize,
    l2: usize,
) -> Result<Matrix<T>> {
    if l1 > l2 || l2 > arch.depth() {
        return Err(Error::invalid(
            "layers",
            format!("need l1 <= l2 <= {}, got {l1} and {l2}", arch.depth()),
        ));
    }
    if trace.layers.len() != arch.depth() {
        return Err(Error::shape("trace does not match the architecture"));
    }
    let n1 = arch.level_len(l1);
    let mut jac: Option<Matrix<T>> = None;
    for u in l1 + 1..=l2 {
        let spec = arch.layer(u);
        let lt = &trace.layers[u - 1];
        check_differentiable(spec, lt, u)?;
        let a = &w.filters[u - 1];
        let prev_len = arch.level_len(u - 1);
        let wn = spec.out_width();
        let mut next = Matrix::zeros(spec.out_len(), n1);
        for r in 0..spec.out_len() {
            let j = r / wn;
            if spec.activation == Activation::Relu && lt.pooled(r, wn) <= T::zero() {
                continue;
            }
            let patch = spec.patches.patch(lt.argmax[r]);
            let out = next.row_mut(r);
            for (&idx, &coef) in patch.iter().zip(a.row(j)) {
                if idx >= prev_len || coef.is_zero() {
                    continue;
                }
                match &jac {
                    None => out[idx] += coef,
                    Some(m) => {
                        for (o, &v) in out.iter_mut().zip(m.row(idx)) {
                            *o += coef * v;
                        }
                    }
                }
            }
        }
        jac = Some(next);
    }
    Ok(jac.unwrap_or_else(|| Matrix::identity(n1)))
}

/// `F(x)_y − max_{j≠y} F(x)_j`.
pub fn margin<T: Scalar>(scores: &[T], y: usize) -> Result<T> {
    if scores.len() < 2 {
        return Err(Error::invalid("scores", "need at least two classes"));
    }
    if y >= scores.len() {
        return Err(Error::invalid("label", format!("{y} out of {} classes", scores.len())));
    }
    let other = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &s)| s)
        .fold(T::neg_infinity(), T::max);
    Ok(scores[y] - other)
}

/// Index of the largest score, lowest index on ties.
pub fn predict<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::LinearOperator;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn normal_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::new(r, c, normal_vec(r * c, rng)).unwrap()
    }

    fn small_net(seed: u64) -> (Architecture, WeightSet<f64>) {
        // 2 channels x 6 positions -> conv k=3 (4 patches) x 3 filters,
        // pooled in pairs -> 3 x 2 -> conv k=2 stride 1 over 3 channels
        // (1 patch) x 4 filters -> dense to 3 classes.
        let pm1 = PatchMap::conv1d(2, 6, 3, 1).unwrap();
        let l1 = LayerSpec::new(
            3,
            pm1,
            Pooling::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap(),
            Activation::Relu,
        )
        .unwrap();
        let pm2 = PatchMap::conv1d(3, 2, 2, 1).unwrap();
        let l2 = LayerSpec::new(4, pm2, Pooling::none(1), Activation::Relu).unwrap();
        let l3 = LayerSpec::dense_output(4, 3).unwrap();
        let arch = Architecture::new(2, 6, vec![l1, l2, l3]).unwrap();
        let w = WeightSet::glorot(&arch, seed);
        (arch, w)
    }

    /// Expand every layer, apply pooling and relu elementwise.
    fn dense_pipeline(arch: &Architecture, w: &WeightSet<f64>, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        for (spec, a) in arch.layers.iter().zip(&w.filters) {
            let input = layer_input(&v, spec.offset).into_owned();
            let e = expand_operator(a, &spec.patches).unwrap();
            let mut pre = vec![0.0; e.rows()];
            e.apply(&input, &mut pre);
            let o = spec.num_patches();
            let mut out = Vec::new();
            for j in 0..spec.filters {
                for win in spec.pooling.windows() {
                    let m = win.iter().map(|&q| pre[j * o + q]).fold(f64::MIN, f64::max);
                    out.push(match spec.activation {
                        Activation::Relu => m.max(0.0),
                        Activation::Identity => m,
                    });
                }
            }
            v = out;
        }
        v
    }

    #[test]
    fn conv_hand_sum() {
        let pm = PatchMap::new(vec![vec![0, 1], vec![1, 2]], 3).unwrap();
        let a = Matrix::<f64>::from_f64_rows(&[&[1.0, 1.0]]).unwrap();
        let out = apply_conv(&[1.0, 2.0, 3.0], &a, &pm).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 5.0]);
        let z = apply_conv(&[1.0, 2.0, 3.0], &Matrix::zeros(1, 2), &pm).unwrap();
        assert!(z.is_zero());
    }

    #[test]
    fn patch_map_rejects_bad_indices() {
        assert!(PatchMap::new(vec![vec![0, 3]], 3).is_err());
        assert!(PatchMap::new(vec![vec![0, 1], vec![1]], 3).is_err());
        assert!(PatchMap::new(vec![vec![1, 1]], 3).is_err());
        assert!(PatchMap::new(vec![], 3).is_err());
    }

    #[test]
    fn expand_stride_one() {
        let pm = PatchMap::new(vec![vec![0, 1], vec![1, 2]], 3).unwrap();
        let a = Matrix::<f64>::from_f64_rows(&[&[2.0, 5.0]]).unwrap();
        let e = expand_operator(&a, &pm).unwrap();
        let want = Matrix::<f64>::from_f64_rows(&[&[2.0, 5.0, 0.0], &[0.0, 2.0, 5.0]]).unwrap();
        assert_eq!(e, want);
    }

    #[test]
    fn expand_dense_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = normal_matrix(3, 5, &mut rng);
        let e = expand_operator(&a, &PatchMap::dense(5).unwrap()).unwrap();
        assert_eq!(e, a);
    }

    #[test]
    fn expand_matches_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (pm, _, _) = PatchMap::conv2d(2, 5, 4, 2, 2, 1).unwrap();
        let a = normal_matrix(3, pm.width(), &mut rng);
        let e = expand_operator(&a, &pm).unwrap();
        let mut y = vec![0.0; e.rows()];
        for _ in 0..50 {
            let x = normal_vec(pm.input_len(), &mut rng);
            e.apply(&x, &mut y);
            let c = apply_conv(&x, &a, &pm).unwrap();
            for (u, v) in y.iter().zip(c.as_slice()) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn conv_operator_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pm = PatchMap::conv1d(2, 7, 3, 2).unwrap().with_constant();
        let a = normal_matrix(4, pm.width(), &mut rng);
        let e = expand_operator(&a, &pm).unwrap();
        let op = ConvOperator::new(&a, &pm).unwrap();
        let x = normal_vec(pm.input_len(), &mut rng);
        let y = normal_vec(e.rows(), &mut rng);
        let (mut y1, mut y2) = (vec![0.0; e.rows()], vec![0.0; e.rows()]);
        e.apply(&x, &mut y1);
        op.apply(&x, &mut y2);
        for (u, v) in y1.iter().zip(&y2) {
            assert!((u - v).abs() < 1e-12);
        }
        let (mut x1, mut x2) = (vec![0.0; e.cols()], vec![0.0; e.cols()]);
        e.apply_transpose(&y, &mut x1);
        op.apply_transpose(&y, &mut x2);
        for (u, v) in x1.iter().zip(&x2) {
            assert!((u - v).abs() < 1e-12);
        }
        let rows = vec![5, 0, 9];
        let sub = e.select_rows(&rows);
        let rop = ConvOperator::restricted(&a, &pm, rows).unwrap();
        let mut z1 = vec![0.0; 3];
        let mut z2 = vec![0.0; 3];
        sub.apply(&x, &mut z1);
        rop.apply(&x, &mut z2);
        assert_eq!(z1.len(), LinearOperator::<f64>::rows(&rop));
        for (u, v) in z1.iter().zip(&z2) {
            assert!((u - v).abs() < 1e-12);
        }
        let yy = [1.0, -2.0, 0.5];
        sub.apply_transpose(&yy, &mut x1);
        rop.apply_transpose(&yy, &mut x2);
        for (u, v) in x1.iter().zip(&x2) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_zero_weights() {
        let (arch, _) = small_net(0);
        let w = WeightSet::zeros(&arch);
        let t = forward(&arch, &w, &[1.0; 12]).unwrap();
        assert!(t.layers.iter().all(|l| l.post.iter().all(|&v| v == 0.0)));
        assert_eq!(t.scores(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_identity_layer() {
        let l = LayerSpec::dense_output(3, 3).unwrap();
        let arch = Architecture::new(3, 1, vec![l]).unwrap();
        let w = WeightSet::new(&arch, vec![Matrix::identity(3)]).unwrap();
        let t = forward(&arch, &w, &[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(t.scores(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn forward_matches_dense_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..20 {
            let (arch, w) = small_net(seed);
            let x = normal_vec(12, &mut rng);
            let t = forward(&arch, &w, &x).unwrap();
            let want = dense_pipeline(&arch, &w, &x);
            for (u, v) in t.scores().iter().zip(&want) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_deterministic_and_flags_nonfinite() {
        let (arch, w) = small_net(5);
        let x: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        assert_eq!(forward(&arch, &w, &x).unwrap(), forward(&arch, &w, &x).unwrap());
        let mut bad = x.clone();
        bad[3] = f64::INFINITY;
        assert_eq!(forward(&arch, &w, &bad).unwrap().nonfinite, Some((0, 3)));
    }

    #[test]
    fn offset_uses_constant_coordinate() {
        let pm = PatchMap::dense(2).unwrap().with_constant();
        let mut l = LayerSpec::new(2, pm, Pooling::none(1), Activation::Identity).unwrap();
        l.offset = true;
        let arch = Architecture::new(2, 1, vec![l]).unwrap();
        let a = Matrix::<f64>::from_f64_rows(&[&[1.0, 0.0, 3.0], &[0.0, 1.0, -1.0]]).unwrap();
        let w = WeightSet::new(&arch, vec![a]).unwrap();
        let t = forward(&arch, &w, &[1.0, 2.0]).unwrap();
        assert_eq!(t.scores(), &[4.0, 1.0]);
        let j = subnet_jacobian(&arch, &w, &t, 0, 1).unwrap();
        assert_eq!(j, Matrix::identity(2));
    }

    #[test]
    fn jacobian_linear_layer_is_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = LayerSpec::dense_output(4, 3).unwrap();
        let arch = Architecture::new(4, 1, vec![l]).unwrap();
        let w = WeightSet::new(&arch, vec![normal_matrix(3, 4, &mut rng)]).unwrap();
        let t = forward(&arch, &w, &normal_vec(4, &mut rng)).unwrap();
        assert_eq!(subnet_jacobian(&arch, &w, &t, 0, 1).unwrap(), w.filters[0]);
    }

    #[test]
    fn jacobian_all_positive_relu_is_expansion() {
        let pm = PatchMap::conv1d(1, 4, 2, 1).unwrap();
        let l1 = LayerSpec::new(1, pm.clone(), Pooling::none(3), Activation::Relu).unwrap();
        let l2 = LayerSpec::dense_output(3, 2).unwrap();
        let arch = Architecture::new(1, 4, vec![l1, l2]).unwrap();
        let a = Matrix::<f64>::from_f64_rows(&[&[1.0, 2.0]]).unwrap();
        let w = WeightSet::new(&arch, vec![a.clone(), Matrix::from_f64_rows(&[&[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]).unwrap()]).unwrap();
        let t = forward(&arch, &w, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let j = subnet_jacobian(&arch, &w, &t, 0, 1).unwrap();
        assert_eq!(j, expand_operator(&a, &pm).unwrap());
    }

    #[test]
    fn jacobian_rejects_ties() {
        let pm = PatchMap::conv1d(1, 3, 1, 1).unwrap();
        let l1 = LayerSpec::new(1, pm, Pooling::global(3), Activation::Relu).unwrap();
        let l2 = LayerSpec::dense_output(1, 2).unwrap();
        let arch = Architecture::new(1, 3, vec![l1, l2]).unwrap();
        let w = WeightSet::new(
            &arch,
            vec![Matrix::identity(1), Matrix::from_f64_rows(&[&[1.0], &[-1.0]]).unwrap()],
        )
        .unwrap();
        let t = forward(&arch, &w, &[2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(subnet_jacobian(&arch, &w, &t, 0, 2), Err(Error::Degenerate(_))));
        let t = forward(&arch, &w, &[0.0, -1.0, -2.0]).unwrap();
        assert!(matches!(subnet_jacobian(&arch, &w, &t, 0, 1), Err(Error::Degenerate(_))));
        let t = forward(&arch, &w, &[3.0, 2.0, 1.0]).unwrap();
        assert!(subnet_jacobian(&arch, &w, &t, 0, 2).is_ok());
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin(&[2.0, 0.5], 0).unwrap(), 1.5);
        assert_eq!(margin(&[1.0, 1.0, 1.0], 2).unwrap(), 0.0);
        assert_eq!(margin(&[0.0, 3.0, 1.0], 0).unwrap(), -3.0);
        assert!(margin(&[1.0], 0).is_err());
    }

    #[test]
    fn presets_have_expected_shapes() {
        let a = Architecture::synthetic2(1000).unwrap();
        assert_eq!(a.layer(1).num_patches(), 986);
        assert_eq!(a.layer(1).out_len(), 50);
        assert_eq!(a.class_count(), 2);
        let m = Architecture::mnist4(56).unwrap();
        let o: Vec<usize> = m.layers.iter().map(|l| l.num_patches()).collect();
        assert_eq!(o, vec![27 * 27, 13 * 13, 36, 4, 1]);
        assert_eq!(m.class_count(), 10);
        assert_eq!(m.layer(5).filter_cols(), 64 * 4);
    }

    #[test]
    fn kappa_counts_cover() {
        let a = Architecture::synthetic2(40).unwrap();
        // Each input pixel's 4 channels lie in one width-15 patch.
        assert_eq!(a.kappa(0), 1.0);
        // The dense last layer reads every hidden unit at once.
        assert_eq!(a.kappa(1), 1.0);
        // Patches holding one channel each need one patch per channel.
        let pm = PatchMap::new(vec![vec![0], vec![1], vec![2], vec![3]], 4).unwrap();
        let l1 = LayerSpec::new(1, pm, Pooling::none(4), Activation::Relu).unwrap();
        let l2 = LayerSpec::dense_output(4, 2).unwrap();
        let arch = Architecture::new(2, 2, vec![l1, l2]).unwrap();
        assert_eq!(arch.kappa(0), 2.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn weight_sharing_invariant(c in 1usize..3, h in 3usize..6, wd in 3usize..6, k in 1usize..3, s in 1usize..3, m in 1usize..4, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (pm, _, _) = PatchMap::conv2d(c, h, wd, k, k, s).unwrap();
            let a = normal_matrix(m, pm.width(), &mut rng);
            let e = expand_operator(&a, &pm).unwrap();
            let x = normal_vec(pm.input_len(), &mut rng);
            let mut y = vec![0.0; e.rows()];
            e.apply(&x, &mut y);
            let conv = apply_conv(&x, &a, &pm).unwrap();
            for (u, v) in y.iter().zip(conv.as_slice()) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }

        #[test]
        fn jacobian_exact_below_gap(seed in 0u64..500) {
            let (arch, w) = small_net(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
            let x = normal_vec(12, &mut rng);
            let t = forward(&arch, &w, &x).unwrap();
            let j = subnet_jacobian(&arch, &w, &t, 0, 3).unwrap();
            let gap = crate::measures::subnet_gap(&arch, &t, 1, 3);
            let theta = (1..=3).map(|l| crate::measures::layer_theta_bound(&w, l)).fold(1.0f64, |acc, v| acc * v.max(1.0));
            prop_assume!(gap > 1e-9);
            let step = 0.25 * gap / theta;
            let h: Vec<f64> = (0..12).map(|_| if rng.random::<bool>() { step } else { -step }).collect();
            let xh: Vec<f64> = x.iter().zip(&h).map(|(a, b)| a + b).collect();
            let th = forward(&arch, &w, &xh).unwrap();
            let mut jh = vec![0.0; 3];
            j.apply(&h, &mut jh);
            for ((a, b), c) in th.scores().iter().zip(t.scores()).zip(&jh) {
                prop_assert!((a - b - c).abs() <= 1e-10, "{} vs {}", a - b, c);
            }
        }
    }
}
