//! Deterministic mini-batch Adam on softmax cross-entropy with an L2 penalty
//! `λ Σ_l ‖A^l‖_F²`, and margin selection at a target training accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::convnet::{forward, layer_input, margin, predict, ActivationTrace, Activation, Architecture, WeightSet};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs to run before the accuracy target may stop training.
    pub min_epochs: usize,
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 100,
            min_epochs: 0,
            target_accuracy: 0.99,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |name: &'static str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must lie in (0, 1), got {v}")))
            }
        };
        open("beta1", self.beta1)?;
        open("beta2", self.beta2)?;
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            return Err(Error::invalid("target_accuracy", "must lie in (0, 1]"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be nonnegative"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        Ok(())
    }

    /// `key=value` pairs for report headers.
    pub fn describe(&self) -> Vec<(String, String)> {
        vec![
            ("lr".into(), self.lr.to_string()),
            ("beta1".into(), self.beta1.to_string()),
            ("beta2".into(), self.beta2.to_string()),
            ("adam_eps".into(), self.eps.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("max_epochs".into(), self.max_epochs.to_string()),
            ("min_epochs".into(), self.min_epochs.to_string()),
            ("target_accuracy".into(), self.target_accuracy.to_string()),
            ("train_seed".into(), self.seed.to_string()),
            ("init".into(), "glorot-uniform".into()),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean penalized loss over the epoch's mini-batches.
    pub loss: f64,
    /// Training accuracy: a full pass when one ran, else the running value.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult<T> {
    pub weights: WeightSet<T>,
    /// The initialization, untouched by training.
    pub reference: WeightSet<T>,
    pub log: Vec<EpochLog>,
    pub margins: Vec<f64>,
    pub train_accuracy: f64,
    pub reached_target: bool,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,accuracy\n");
    for e in log {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.accuracy));
    }
    s
}

/// Gradient of the unpenalized loss at one sample, accumulated into `grads`
/// with weight `scale`. Returns the sample's cross-entropy and the trace.
pub fn sample_gradient<T: Scalar>(
    arch: &Architecture,
    w: &WeightSet<T>,
    x: &[T],
    y: usize,
    scale: T,
    grads: &mut [Matrix<T>],
) -> Result<(f64, ActivationTrace<T>)> {
    let trace = forward(arch, w, x)?;
    let scores = trace.scores();
    let mx = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = scores.iter().fold(T::zero(), |acc, &s| acc + (s - mx).exp());
    let ce = (z.ln() + mx - scores[y]).as_f64();
    let mut dpost: Vec<T> = scores.iter().map(|&s| (s - mx).exp() / z * scale).collect();
    dpost[y] -= scale;
    for l in (1..=arch.depth()).rev() {
        let spec = arch.layer(l);
        let lt = &trace.layers[l - 1];
        let (m, o, d) = (spec.filters, spec.num_patches(), spec.filter_cols());
        let wn = spec.out_width();
        let mut dpre = vec![T::zero(); m * o];
        for (r, &g) in dpost.iter().enumerate() {
            if g.is_zero() {
                continue;
            }
            if spec.activation == Activation::Relu && lt.pooled(r, wn) <= T::zero() {
                continue;
            }
            dpre[(r / wn) * o + lt.argmax[r]] += g;
        }
        let input = layer_input(trace.level(l - 1), spec.offset);
        let mut p = vec![T::zero(); o * d];
        spec.patches.gather(&input, &mut p);
        // dA += dpre P
        T::gemm(
            m,
            o,
            d,
            T::one(),
            &dpre,
            o as isize,
            1,
            &p,
            d as isize,
            1,
            T::one(),
            grads[l - 1].as_mut_slice(),
            d as isize,
            1,
        );
        if l > 1 {
            // G = dpreᵀ A, scattered back over the patches.
            let mut g = vec![T::zero(); o * d];
            T::gemm(
                o,
                m,
                d,
                T::one(),
                &dpre,
                1,
                o as isize,
                w.filters[l - 1].as_slice(),
                d as isize,
                1,
                T::zero(),
                &mut g,
                d as isize,
                1,
            );
            dpost = vec![T::zero(); arch.level_len(l - 1)];
            spec.patches.scatter_add(&g, &mut dpost);
        }
    }
    Ok((ce, trace))
}

/// Penalized mean loss and its gradient over a set of samples.
pub fn batch_loss_and_gradient<T: Scalar>(
    arch: &Architecture,
    w: &WeightSet<T>,
    inputs: &[Vec<T>],
    labels: &[usize],
    weight_decay: f64,
) -> Result<(f64, Vec<Matrix<T>>)> {
    let mut grads: Vec<Matrix<T>> = w.filters.iter().map(|a| Matrix::zeros(a.rows(), a.cols())).collect();
    let scale = T::lit(1.0 / inputs.len() as f64);
    let mut loss = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        loss += sample_gradient(arch, w, x, y, scale, &mut grads)?.0;
    }
    loss /= inputs.len() as f64;
    add_decay(w, weight_decay, &mut grads, &mut loss);
    Ok((loss, grads))
}

fn add_decay<T: Scalar>(w: &WeightSet<T>, lambda: f64, grads: &mut [Matrix<T>], loss: &mut f64) {
    if lambda == 0.0 {
        return;
    }
    let two_l = T::lit(2.0 * lambda);
    for (a, g) in w.filters.iter().zip(grads) {
        for (gv, &av) in g.as_mut_slice().iter_mut().zip(a.as_slice()) {
            *gv += two_l * av;
            *loss += lambda * av.as_f64() * av.as_f64();
        }
    }
}

/// Adam state for a list of matrices.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(shapes: impl IntoIterator<Item = usize>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<T>> = shapes.into_iter().map(|n| vec![T::zero(); n]).collect();
        Adam {
            v: zeros.clone(),
            m: zeros,
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::lit(self.lr / c1);
        let c2 = T::lit(c2);
        let eps = T::lit(self.eps);
        let one = T::one();
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                p[i] -= step * m[i] / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Trains from a Glorot initialization drawn with `cfg.seed`.
pub fn train_network<T: Scalar>(arch: &Architecture, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainResult<T>> {
    train_from(arch, ds, cfg, WeightSet::glorot(arch, cfg.seed))
}

/// Trains from the given initialization, which becomes the reference `M`.
pub fn train_from<T: Scalar>(
    arch: &Architecture,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    init: WeightSet<T>,
) -> Result<TrainResult<T>> {
    cfg.validate()?;
    init.check(arch)?;
    if ds.is_empty() {
        return Err(Error::invalid("dataset", "no samples"));
    }
    if ds.classes != arch.class_count() {
        return Err(Error::shape(format!(
            "dataset has {} classes, the network outputs {}",
            ds.classes,
            arch.class_count()
        )));
    }
    if ds.channels * ds.width != arch.level_len(0) {
        return Err(Error::shape("dataset inputs do not match the architecture input"));
    }
    let inputs: Vec<Vec<T>> = (0..ds.len()).map(|i| ds.input(i)).collect();
    let reference = init.clone();
    let mut w = init;
    let mut adam = Adam::<T>::new(w.filters.iter().map(|a| a.as_slice().len()), cfg);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut log = Vec::new();
    let mut reached = false;
    let mut accuracy = evaluate_accuracy(arch, &w, &inputs, &ds.labels)?;
    for epoch in 0..cfg.max_epochs {
        if accuracy >= cfg.target_accuracy {
            reached = true;
            if epoch >= cfg.min_epochs {
                break;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Matrix<T>> = w.filters.iter().map(|a| Matrix::zeros(a.rows(), a.cols())).collect();
            let scale = T::lit(1.0 / batch.len() as f64);
            let mut loss = 0.0;
            for &i in batch {
                let (ce, trace) = sample_gradient(arch, &w, &inputs[i], ds.labels[i], scale, &mut grads)?;
                loss += ce;
                if trace.nonfinite.is_none() && predict(trace.scores()) == ds.labels[i] {
                    correct += 1;
                }
            }
            loss /= batch.len() as f64;
            add_decay(&w, cfg.weight_decay, &mut grads, &mut loss);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss;
            batches += 1;
            let mut params: Vec<&mut [T]> = w.filters.iter_mut().map(|a| a.as_mut_slice()).collect();
            let gs: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut params, &gs);
        }
        let running = correct as f64 / ds.len() as f64;
        // The running value mixes weights from across the epoch; confirm
        // with a full pass before stopping.
        accuracy = if (running >= cfg.target_accuracy && epoch + 1 >= cfg.min_epochs) || epoch + 1 == cfg.max_epochs {
            evaluate_accuracy(arch, &w, &inputs, &ds.labels)?
        } else {
            running
        };
        log.push(EpochLog {
            epoch,
            loss: loss_sum / batches as f64,
            accuracy,
        });
    }
    let train_accuracy = evaluate_accuracy(arch, &w, &inputs, &ds.labels)?;
    reached |= train_accuracy >= cfg.target_accuracy;
    let margins = training_margins(arch, &w, &inputs, &ds.labels)?;
    Ok(TrainResult {
        weights: w,
        reference,
        log,
        margins,
        train_accuracy,
        reached_target: reached,
    })
}

pub fn evaluate_accuracy<T: Scalar>(arch: &Architecture, w: &WeightSet<T>, inputs: &[Vec<T>], labels: &[usize]) -> Result<f64> {
    let mut correct = 0;
    for (x, &y) in inputs.iter().zip(labels) {
        let t = forward(arch, w, x)?;
        if t.nonfinite.is_none() && predict(t.scores()) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / inputs.len().max(1) as f64)
}

pub fn training_margins<T: Scalar>(arch: &Architecture, w: &WeightSet<T>, inputs: &[Vec<T>], labels: &[usize]) -> Result<Vec<f64>> {
    inputs
        .iter()
        .zip(labels)
        .map(|(x, &y)| Ok(margin(forward(arch, w, x)?.scores(), y)?.as_f64()))
        .collect()
}

/// `R̂_γ`: fraction of margins strictly below `γ`.
pub fn margin_risk(margins: &[f64], gamma: f64) -> f64 {
    margins.iter().filter(|&&m| m < gamma).count() as f64 / margins.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginChoice {
    pub gamma: f64,
    /// Set when no positive margin meets the target; `gamma` is then 0.
    pub degenerate: bool,
}

/// Largest observed margin `γ` with `#{i : margin_i < γ} / n ≤ 1 − target`.
pub fn select_margin(margins: &[f64], target: f64) -> Result<MarginChoice> {
    if margins.is_empty() {
        return Err(Error::invalid("margins", "empty"));
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::invalid("target", "must lie in (0, 1]"));
    }
    if let Some(i) = margins.iter().position(|m| m.is_nan()) {
        return Err(Error::NonFinite { context: "margins", index: i });
    }
    let mut sorted = margins.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let allowed = ((1.0 - target) * n as f64 + 1e-9).floor() as usize;
    // sorted[k] has exactly (first index of its value) margins below it.
    let mut best = sorted[0];
    let mut first = 0;
    for k in 0..n {
        if k > 0 && sorted[k] != sorted[k - 1] {
            first = k;
        }
        if first <= allowed {
            best = sorted[k];
        } else {
            break;
        }
    }
    if best <= 0.0 {
        return Ok(MarginChoice {
            gamma: 0.0,
            degenerate: true,
        });
    }
    Ok(MarginChoice {
        gamma: best,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::{LayerSpec, PatchMap, Pooling};
    use crate::data::Provenance;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn select_margin_examples() {
        let m: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(select_margin(&m, 0.96).unwrap().gamma, 5.0);
        assert_eq!(select_margin(&m, 1.0).unwrap().gamma, 1.0);
        assert_eq!(select_margin(&[2.5; 7], 0.3).unwrap().gamma, 2.5);
        let neg = select_margin(&[-1.0, -0.5], 1.0).unwrap();
        assert!(neg.degenerate);
        assert_eq!(neg.gamma, 0.0);
    }

    proptest! {
        #[test]
        fn select_margin_is_generalized_inverse(
            margins in proptest::collection::vec(-2.0f64..5.0, 1..60),
            target in 0.05f64..1.0,
        ) {
            let c = select_margin(&margins, target).unwrap();
            let mut values = margins.clone();
            values.sort_by(f64::total_cmp);
            for w in values.windows(2) {
                prop_assert!(margin_risk(&margins, w[0]) <= margin_risk(&margins, w[1]));
            }
            if !c.degenerate {
                prop_assert!(margin_risk(&margins, c.gamma) <= 1.0 - target + 1e-9);
                for &v in &values {
                    if v > c.gamma {
                        prop_assert!(margin_risk(&margins, v) > 1.0 - target + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn adam_first_step() {
        let cfg = TrainConfig { lr: 0.01, ..Default::default() };
        let mut adam = Adam::<f64>::new([1], &cfg);
        let mut w = [1.0f64];
        let g = [w[0]];
        adam.step(&mut [&mut w[..]], &[&g[..]]);
        assert!((w[0] - (1.0 - 0.01)).abs() < 1e-9);
    }

    fn grad_net() -> Architecture {
        let pm = PatchMap::conv1d(2, 9, 3, 1).unwrap().with_constant();
        let windows = vec![vec![0, 1], vec![2, 3, 4], vec![5, 6]];
        let mut conv = LayerSpec::new(3, pm, Pooling::new(windows, 7).unwrap(), Activation::Relu).unwrap();
        conv.offset = true;
        let pm2 = PatchMap::conv1d(3, 3, 2, 1).unwrap();
        let conv2 = LayerSpec::new(2, pm2, Pooling::none(2), Activation::Relu).unwrap();
        let out = LayerSpec::dense_output(4, 3).unwrap();
        Architecture::new(2, 9, vec![conv, conv2, out]).unwrap()
    }

    fn same_pattern(a: &ActivationTrace<f64>, b: &ActivationTrace<f64>) -> bool {
        a.layers.iter().zip(&b.layers).all(|(x, y)| {
            x.argmax == y.argmax && x.post.iter().zip(&y.post).all(|(p, q)| (*p > 0.0) == (*q > 0.0))
        })
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let arch = grad_net();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = WeightSet::<f64>::glorot(&arch, 3);
        let inputs: Vec<Vec<f64>> = (0..4).map(|_| (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels = vec![0, 2, 1, 2];
        let lambda = 1e-2;
        let (_, grads) = batch_loss_and_gradient(&arch, &w, &inputs, &labels, lambda).unwrap();
        let traces: Vec<_> = inputs.iter().map(|x| forward(&arch, &w, x).unwrap()).collect();
        let h = 1e-4;
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 20 {
            attempts += 1;
            assert!(attempts < 500, "could not find coordinates away from ties");
            let l = rng.random_range(0..arch.depth());
            let k = rng.random_range(0..w.filters[l].as_slice().len());
            let mut plus = w.clone();
            plus.filters[l].as_mut_slice()[k] += h;
            let mut minus = w.clone();
            minus.filters[l].as_mut_slice()[k] -= h;
            let stable = inputs.iter().zip(&traces).all(|(x, t)| {
                same_pattern(t, &forward(&arch, &plus, x).unwrap()) && same_pattern(t, &forward(&arch, &minus, x).unwrap())
            });
            if !stable {
                continue;
            }
            let lp = batch_loss_and_gradient(&arch, &plus, &inputs, &labels, lambda).unwrap().0;
            let lm = batch_loss_and_gradient(&arch, &minus, &inputs, &labels, lambda).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[l].as_slice()[k];
            assert!(
                (fd - an).abs() <= 1e-5 * an.abs().max(1e-3),
                "layer {l} coord {k}: fd {fd} analytic {an}"
            );
            checked += 1;
        }
    }

    fn separable() -> (Architecture, LabeledDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let y = i % 2;
            let shift = if y == 0 { 1.0 } else { -1.0 };
            let x: Vec<f32> = (0..6).map(|_| shift + rng.random_range(-0.3f32..0.3)).collect();
            inputs.push(x);
            labels.push(y);
        }
        let ds = LabeledDataset::new(1, 6, 2, inputs, labels, Provenance::default()).unwrap();
        let pm = PatchMap::conv1d(1, 6, 3, 1).unwrap().with_constant();
        let mut conv = LayerSpec::new(1, pm, Pooling::global(4), Activation::Identity).unwrap();
        conv.offset = true;
        let out = LayerSpec::dense_output(1, 2).unwrap();
        (Architecture::new(1, 6, vec![conv, out]).unwrap(), ds)
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let (arch, ds) = separable();
        let cfg = TrainConfig {
            lr: 0.05,
            max_epochs: 200,
            target_accuracy: 1.0,
            batch_size: 4,
            seed: 1,
            ..Default::default()
        };
        // Start from an init that gets most samples wrong.
        let mut init = WeightSet::<f32>::glorot(&arch, 1);
        let xs: Vec<Vec<f32>> = (0..ds.len()).map(|i| ds.input(i)).collect();
        if evaluate_accuracy(&arch, &init, &xs, &ds.labels).unwrap() > 0.5 {
            init.filters[1] = init.filters[1].scaled(-1.0);
        }
        assert!(evaluate_accuracy(&arch, &init, &xs, &ds.labels).unwrap() <= 0.5);
        let r = train_from(&arch, &ds, &cfg, init.clone()).unwrap();
        assert!(r.reached_target);
        assert_eq!(r.train_accuracy, 1.0);
        assert!(r.log.len() <= 200);
        assert!(r.margins.iter().all(|&m| m > 0.0));
        let again = train_from(&arch, &ds, &cfg, init.clone()).unwrap();
        assert_eq!(r, again);
        assert_ne!(r.weights, r.reference);
        assert_eq!(r.reference, init);
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let (arch, ds) = separable();
        let cfg = TrainConfig { lr: 0.0, max_epochs: 3, target_accuracy: 1.0, ..Default::default() };
        let r = train_network::<f64>(&arch, &ds, &cfg).unwrap();
        assert_eq!(r.weights, r.reference);
    }

    #[test]
    fn zero_decay_matches_reference_loss() {
        let arch = grad_net();
        let w = WeightSet::<f64>::glorot(&arch, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs: Vec<Vec<f64>> = (0..3).map(|_| (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels = vec![1, 0, 2];
        let (loss, _) = batch_loss_and_gradient(&arch, &w, &inputs, &labels, 0.0).unwrap();
        let ce: f64 = inputs
            .iter()
            .zip(&labels)
            .map(|(x, &y)| {
                let s = forward(&arch, &w, x).unwrap().scores().to_vec();
                let z: f64 = s.iter().map(|v| v.exp()).sum();
                z.ln() - s[y]
            })
            .sum::<f64>()
            / 3.0;
        assert!((loss - ce).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_reported() {
        let (arch, ds) = separable();
        let mut init = WeightSet::<f32>::glorot(&arch, 0);
        init.filters[0].as_mut_slice()[0] = 3e38;
        init.filters[1].as_mut_slice()[0] = 3e38;
        let cfg = TrainConfig { target_accuracy: 1.0, ..Default::default() };
        let e = train_from(&arch, &ds, &cfg, init).unwrap_err();
        assert!(matches!(e, Error::Diverged { epoch: 0 }), "{e}");
    }
}
