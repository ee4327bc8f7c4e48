//! Hartigan's dip statistic of unimodality and a bootstrap p-value against
//! the uniform null.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dip statistic of a sample: the sup distance between its empirical CDF and
/// the closest unimodal CDF. Lies in `[1/(2n), 1/4]`.
pub fn dip_statistic(sample: &[f64]) -> Result<f64> {
    if let Some(i) = sample.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "dip sample", index: i });
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    Ok(dip_sorted(&x))
}

/// Greatest convex minorant / least concave majorant cycling of
/// Hartigan & Hartigan (1985), with 1-based indices into `xs`.
fn dip_sorted(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 || xs[0] == xs[n - 1] {
        return 1.0 / (2.0 * n.max(1) as f64);
    }
    let x = |i: usize| xs[i - 1];
    let mut mn = vec![0usize; n + 1];
    let mut mj = vec![0usize; n + 1];
    mn[1] = 1;
    for j in 2..=n {
        mn[j] = j - 1;
        loop {
            let mnj = mn[j];
            let mnmnj = mn[mnj];
            if mnj == 1 || (x(j) - x(mnj)) * ((mnj - mnmnj) as f64) < (x(mnj) - x(mnmnj)) * (j - mnj) as f64 {
                break;
            }
            mn[j] = mnmnj;
        }
    }
    mj[n] = n;
    for k in (1..n).rev() {
        mj[k] = k + 1;
        loop {
            let mjk = mj[k];
            let mjmjk = mj[mjk];
            if mjk == n || (x(k) - x(mjk)) * (mjk as f64 - mjmjk as f64) < (x(mjk) - x(mjmjk)) * (k as f64 - mjk as f64) {
                break;
            }
            mj[k] = mjmjk;
        }
    }
    let mut gcm = vec![0usize; n + 2];
    let mut lcm = vec![0usize; n + 2];
    let (mut low, mut high) = (1usize, n);
    let mut dip = 1.0f64;
    loop {
        gcm[1] = high;
        let mut i = 1;
        while gcm[i] > low {
            gcm[i + 1] = mn[gcm[i]];
            i += 1;
        }
        let l_gcm = i;
        let mut ig = l_gcm;
        let mut ix = ig - 1;
        lcm[1] = low;
        let mut i = 1;
        while lcm[i] < high {
            lcm[i + 1] = mj[lcm[i]];
            i += 1;
        }
        let l_lcm = i;
        let mut ih = l_lcm;
        let mut iv = 2;
        let mut d = 0.0f64;
        if l_gcm != 2 || l_lcm != 2 {
            loop {
                let gcmix = gcm[ix];
                let lcmiv = lcm[iv];
                if gcmix > lcmiv {
                    let gcmi1 = gcm[ix + 1];
                    let dx = (lcmiv as f64 - gcmi1 as f64 + 1.0)
                        - (x(lcmiv) - x(gcmi1)) * (gcmix - gcmi1) as f64 / (x(gcmix) - x(gcmi1));
                    iv += 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv - 1;
                    }
                } else {
                    let lcmiv1 = lcm[iv - 1];
                    let dx = (x(gcmix) - x(lcmiv1)) * (lcmiv - lcmiv1) as f64 / (x(lcmiv) - x(lcmiv1))
                        - (gcmix as f64 - lcmiv1 as f64 - 1.0);
                    ix -= 1;
                    if dx >= d {
                        d = dx;
                        ig = ix + 1;
                        ih = iv;
                    }
                }
                ix = ix.max(1);
                iv = iv.min(l_lcm);
                if gcm[ix] == lcm[iv] {
                    break;
                }
            }
        } else {
            d = 1.0;
        }
        if d < dip {
            break;
        }
        let mut dip_l = 0.0f64;
        for j in ig..l_gcm {
            let mut max_t = 1.0f64;
            let (jb, je) = (gcm[j + 1], gcm[j]);
            if je - jb > 1 && x(je) != x(jb) {
                let c = (je - jb) as f64 / (x(je) - x(jb));
                for jj in jb..=je {
                    let t = (jj - jb + 1) as f64 - (x(jj) - x(jb)) * c;
                    max_t = max_t.max(t);
                }
            }
            dip_l = dip_l.max(max_t);
        }
        let mut dip_u = 0.0f64;
        for j in ih..l_lcm {
            let mut max_t = 1.0f64;
            let (jb, je) = (lcm[j], lcm[j + 1]);
            if je - jb > 1 && x(je) != x(jb) {
                let c = (je - jb) as f64 / (x(je) - x(jb));
                for jj in jb..=je {
                    let t = (x(jj) - x(jb)) * c - (jj as f64 - jb as f64 - 1.0);
                    max_t = max_t.max(t);
                }
            }
            dip_u = dip_u.max(max_t);
        }
        dip = dip.max(dip_l.max(dip_u));
        if low == gcm[ig] && high == lcm[ih] {
            break;
        }
        low = gcm[ig];
        high = lcm[ih];
    }
    dip / (2.0 * n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DipTest {
    pub dip: f64,
    /// Fraction of uniform samples of the same size with a dip at least as large.
    pub p_value: f64,
    pub replicates: usize,
}

/// Dip test with a Monte-Carlo p-value from `replicates` uniform samples.
pub fn dip_test(sample: &[f64], replicates: usize, seed: u64) -> Result<DipTest> {
    if sample.len() < 4 {
        return Err(Error::invalid("sample", "need at least four observations"));
    }
    if replicates == 0 {
        return Err(Error::invalid("replicates", "need at least one replicate"));
    }
    let dip = dip_statistic(sample)?;
    let n = sample.len();
    let mut exceed = 0;
    let mut buf = vec![0.0; n];
    for r in 0..replicates {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        buf.iter_mut().for_each(|v| *v = rng.random::<f64>());
        buf.sort_by(f64::total_cmp);
        if dip_sorted(&buf) >= dip {
            exceed += 1;
        }
    }
    Ok(DipTest {
        dip,
        p_value: exceed as f64 / replicates as f64,
        replicates,
    })
}
