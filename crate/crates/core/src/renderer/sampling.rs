//! Sample placement along rays and view-direction encoding.

use rand::Rng;

/// `sin`/`cos` of `2^l pi u` for `l < degree`, grouped by frequency.
pub fn posenc(u: &[f64; 3], degree: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * degree);
    for l in 0..degree {
        let freq = std::f64::consts::PI * (1u64 << l) as f64;
        out.extend(u.iter().map(|x| (freq * x).sin()));
        out.extend(u.iter().map(|x| (freq * x).cos()));
    }
    out
}

/// One sample per equal segment of `[t0, t1]`: jittered uniformly inside the
/// segment with an rng, at its midpoint without.
pub fn stratified<R: Rng>(t0: f64, t1: f64, n: usize, rng: Option<&mut R>) -> Vec<f64> {
    let step = (t1 - t0) / n as f64;
    match rng {
        Some(rng) => (0..n)
            .map(|i| t0 + (i as f64 + rng.random::<f64>()) * step)
            .collect(),
        None => (0..n).map(|i| t0 + (i as f64 + 0.5) * step).collect(),
    }
}

/// Draws `n` points from the piecewise-constant density over the bins
/// `edges[i]..edges[i + 1]` with mass proportional to `weights[i]`, by
/// inverting the CDF at stratified quantiles. Output is sorted.
pub fn importance<R: Rng>(edges: &[f64], weights: &[f64], n: usize, rng: Option<&mut R>) -> Vec<f64> {
    debug_assert_eq!(edges.len(), weights.len() + 1);
    // A small floor keeps empty regions reachable and the CDF strictly increasing.
    let w: Vec<f64> = weights.iter().map(|w| w.max(0.0) + 1e-5).collect();
    let total: f64 = w.iter().sum();
    let mut cdf = Vec::with_capacity(w.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for x in &w {
        acc += x / total;
        cdf.push(acc);
    }
    let qs = stratified(0.0, 1.0, n, rng);
    let mut bin = 0;
    qs.into_iter()
        .map(|q| {
            while bin + 1 < w.len() && cdf[bin + 1] < q {
                bin += 1;
            }
            let span = cdf[bin + 1] - cdf[bin];
            let frac = ((q - cdf[bin]) / span).clamp(0.0, 1.0);
            edges[bin] + frac * (edges[bin + 1] - edges[bin])
        })
        .collect()
}

/// Segment lengths of sorted samples; the last segment runs to `t_end`.
pub fn deltas(ts: &[f64], t_end: f64) -> Vec<f64> {
    ts.iter()
        .enumerate()
        .map(|(i, &t)| {
            let next = ts.get(i + 1).copied().unwrap_or(t_end);
            (next - t).max(0.0)
        })
        .collect()
}
