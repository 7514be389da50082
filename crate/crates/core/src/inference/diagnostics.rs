//! Convergence diagnostics: split R̂ and multi-chain effective sample size.

/// Split-R̂ of draws arranged as `chains` consecutive runs of equal length.
pub fn split_rhat(values: &[f64], chains: usize) -> f64 {
    let halves = split(values, chains);
    let m = halves.len() as f64;
    let n = halves[0].len() as f64;
    if halves[0].len() < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Effective sample size pooling split chains, with Geyer's initial
/// monotone sequence truncation of the autocorrelation sum.
pub fn effective_sample_size(values: &[f64], chains: usize) -> f64 {
    let halves = split(values, chains);
    let m = halves.len();
    let n = halves[0].len();
    if n < 4 {
        return f64::NAN;
    }
    let nf = n as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / nf).collect();
    let autocov = |h: &[f64], mu: f64, lag: usize| -> f64 {
        (0..n - lag).map(|i| (h[i] - mu) * (h[i + lag] - mu)).sum::<f64>() / nf
    };
    let var0: Vec<f64> = halves.iter().zip(&means).map(|(h, &mu)| autocov(h, mu, 0)).collect();
    let w = var0.iter().map(|v| v * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = if m > 1 {
        nf / (m as f64 - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>()
    } else {
        0.0
    };
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    if var_plus <= 0.0 {
        return f64::NAN;
    }
    let rho = |lag: usize| -> f64 {
        let mean_acov = halves
            .iter()
            .zip(&means)
            .map(|(h, &mu)| autocov(h, mu, lag))
            .sum::<f64>()
            / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let mut pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        pair = pair.min(prev);
        sum += pair;
        prev = pair;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum).max(1.0 / (m as f64 * nf).log10());
    m as f64 * nf / tau
}

fn split(values: &[f64], chains: usize) -> Vec<&[f64]> {
    let per = values.len() / chains;
    let half = per / 2;
    let mut out = Vec::with_capacity(2 * chains);
    for c in 0..chains {
        let run = &values[c * per..(c + 1) * per];
        out.push(&run[..half]);
        out.push(&run[per - half..]);
    }
    out
}
