//! Brute-force metric oracles shared by the integration tests.

/// Qini recomputed from scratch for every prefix, ranking by repeated selection.
pub fn qini_oracle(score: &[f64], treated: &[bool], y: &[f64]) -> f64 {
    let n = score.len();
    let mut used = vec![false; n];
    let mut order = Vec::new();
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if used[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if score[i] > score[b] => Some(i),
                keep => keep,
            };
        }
        let b = best.unwrap();
        used[b] = true;
        order.push(b);
    }
    let q = |p: usize| -> f64 {
        let prefix = &order[..p];
        let yt: f64 = prefix.iter().filter(|&&i| treated[i]).map(|&i| y[i]).sum();
        let yc: f64 = prefix.iter().filter(|&&i| !treated[i]).map(|&i| y[i]).sum();
        let nt = prefix.iter().filter(|&&i| treated[i]).count() as f64;
        let nc = prefix.iter().filter(|&&i| !treated[i]).count() as f64;
        if nc == 0.0 {
            yt
        } else {
            yt - yc * nt / nc
        }
    };
    let mut area = 0.0;
    for p in 1..=n {
        area += (q(p - 1) + q(p)) / 2.0;
    }
    let diagonal = q(n) * n as f64 / 2.0;
    (area - diagonal) / n as f64
}

pub fn policy_risk_oracle(policy: &[bool], mu1: &[f64], mu0: &[f64]) -> f64 {
    let mut scale = f64::MIN;
    for i in 0..mu1.len() {
        scale = scale.max(mu1[i]).max(mu0[i]);
    }
    let mut total = 0.0;
    for i in 0..policy.len() {
        total += if policy[i] { mu1[i] } else { mu0[i] };
    }
    1.0 - total / policy.len() as f64 / scale
}

pub fn bits(mask: u32, n: usize) -> Vec<bool> {
    (0..n).map(|i| mask >> i & 1 == 1).collect()
}
