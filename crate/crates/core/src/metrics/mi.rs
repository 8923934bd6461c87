use crate::distributions::{DiagGaussian, NoiseSource, HALF_LN_2PI};
use crate::error::{Error, Result};

/// Number of delete-a-group jackknife blocks.
pub const JACKKNIFE_GROUPS: usize = 20;

/// Mutual information estimate in nats with its jackknife standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiEstimate {
    pub value: f64,
    pub se: f64,
}

/// Mixture-of-posteriors estimate of `I(y; z)`.
///
/// Row `i` of `posteriors` is the inference Gaussian `q(z | x_i)`. Each point
/// is scored at `n_mc` draws `z ~ q(z | x_i)` (or at its mean when `n_mc` is
/// 0) by `log q(z | y_i) - log q(z)`, where both densities are equal-weight
/// mixtures of the other points' posteriors, restricted to class `y_i` and
/// taken over all data respectively. Leaving out the point's own component
/// keeps the estimate from rewarding posteriors that merely memorize `x`.
pub fn mi_estimate(
    posteriors: &DiagGaussian,
    labels: &[usize],
    n_mc: usize,
    seed: u64,
) -> Result<MiEstimate> {
    let means = posteriors.mean();
    let stds = posteriors.std();
    let n = means.rows();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} posteriors but {} labels", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::invalid("mutual information needs at least two classes"));
    }
    if let Some(k) = counts.iter().position(|&c| c == 1) {
        return Err(Error::invalid(format!("class {k} has a single sample")));
    }
    if !means.is_finite() || !stds.is_finite() {
        return Err(Error::non_finite("posterior parameters"));
    }

    let d = means.cols();
    let groups = JACKKNIFE_GROUPS.min(n);
    let group_of = |j: usize| j % groups;
    let mut group_counts = vec![vec![0usize; classes]; groups];
    for (j, &l) in labels.iter().enumerate() {
        group_counts[group_of(j)][l] += 1;
    }
    // log normalizer of each posterior
    let log_norm: Vec<f64> = (0..n)
        .map(|j| -stds.row(j).iter().map(|s| s.ln()).sum::<f64>() - d as f64 * HALF_LN_2PI)
        .collect();

    let mut noise = NoiseSource::new(seed);
    let draws = n_mc.max(1);
    let mut z = vec![0.0; d];
    let mut kernel = vec![0.0; n];
    // Per point: contribution to the full estimate and to each deleted-group estimate.
    let mut full = vec![0.0; n];
    let mut deleted = vec![vec![f64::NAN; groups]; n];
    let mut valid = vec![vec![true; groups]; n];

    for i in 0..n {
        let yi = labels[i];
        let gi = group_of(i);
        let mut acc_full = 0.0;
        let mut acc_del = vec![0.0; groups];
        for _ in 0..draws {
            for (k, zk) in z.iter_mut().enumerate() {
                let (m, s) = (means.row(i)[k], stds.row(i)[k]);
                *zk = if n_mc == 0 { m } else { m + s * noise.standard_normal() };
            }
            for j in 0..n {
                let (mj, sj) = (means.row(j), stds.row(j));
                let mut q = 0.0;
                for k in 0..d {
                    let r = (z[k] - mj[k]) / sj[k];
                    q += r * r;
                }
                kernel[j] = log_norm[j] - 0.5 * q;
            }
            // Per-group log-sum-exp over others, all classes and class y_i only.
            let mut lse_all = vec![f64::NEG_INFINITY; groups];
            let mut lse_cls = vec![f64::NEG_INFINITY; groups];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let g = group_of(j);
                lse_all[g] = log_add(lse_all[g], kernel[j]);
                if labels[j] == yi {
                    lse_cls[g] = log_add(lse_cls[g], kernel[j]);
                }
            }
            let all = lse_all.iter().fold(f64::NEG_INFINITY, |a, &b| log_add(a, b));
            let cls = lse_cls.iter().fold(f64::NEG_INFINITY, |a, &b| log_add(a, b));
            acc_full += (cls - ((counts[yi] - 1) as f64).ln()) - (all - ((n - 1) as f64).ln());

            for g in 0..groups {
                if g == gi {
                    continue;
                }
                let n_all = n - 1 - group_counts[g].iter().sum::<usize>();
                let n_cls = counts[yi] - 1 - group_counts[g][yi];
                if n_cls == 0 || n_all == 0 {
                    valid[i][g] = false;
                    continue;
                }
                let all_g = lse_excluding(&lse_all, g);
                let cls_g = lse_excluding(&lse_cls, g);
                acc_del[g] += (cls_g - (n_cls as f64).ln()) - (all_g - (n_all as f64).ln());
            }
        }
        full[i] = acc_full / draws as f64;
        for g in 0..groups {
            if g != gi {
                deleted[i][g] = acc_del[g] / draws as f64;
            }
        }
    }

    let value = full.iter().sum::<f64>() / n as f64;
    let mut replicates = Vec::with_capacity(groups);
    for g in 0..groups {
        let (mut sum, mut cnt) = (0.0, 0usize);
        for i in 0..n {
            if group_of(i) != g && valid[i][g] {
                sum += deleted[i][g];
                cnt += 1;
            }
        }
        if cnt > 0 {
            replicates.push(sum / cnt as f64);
        }
    }
    let se = if replicates.len() < 2 {
        f64::NAN
    } else {
        let gcount = replicates.len() as f64;
        let mean = replicates.iter().sum::<f64>() / gcount;
        let ss: f64 = replicates.iter().map(|r| (r - mean) * (r - mean)).sum();
        ((gcount - 1.0) / gcount * ss).sqrt()
    };
    Ok(MiEstimate { value, se })
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse_excluding(parts: &[f64], skip: usize) -> f64 {
    parts
        .iter()
        .enumerate()
        .filter(|&(g, _)| g != skip)
        .fold(f64::NEG_INFINITY, |a, (_, &b)| log_add(a, b))
}
