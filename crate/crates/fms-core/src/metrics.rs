//! Evaluation metrics: tie-corrected Kendall rank correlation and regret
//! curves against a benchmark optimum.

/// Kendall's τ-b between two equally-long score lists.
///
/// Pairwise O(n²) enumeration with the tie correction
/// `τ_b = (C − D) / √((n₀ − n₁)(n₀ − n₂))`. Returns `None` when either side
/// is all-tied (the coefficient is undefined) or fewer than two items are
/// given.
pub fn kendall_tau(pred: &[f64], truth: &[f64]) -> Option<f64> {
    assert_eq!(pred.len(), truth.len(), "score lists differ in length");
    let n = pred.len();
    if n < 2 {
        return None;
    }
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_x = 0i64;
    let mut ties_y = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let dx = pred[i] - pred[j];
            let dy = truth[i] - truth[j];
            if dx == 0.0 && dy == 0.0 {
                ties_x += 1;
                ties_y += 1;
            } else if dx == 0.0 {
                ties_x += 1;
            } else if dy == 0.0 {
                ties_y += 1;
            } else if dx * dy > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = ((n0 - ties_x) as f64) * ((n0 - ties_y) as f64);
    if denom <= 0.0 {
        return None;
    }
    Some((concordant - discordant) as f64 / denom.sqrt())
}

/// Regret series from an incumbent series: `regret(t) = y_opt − incumbent(t)`.
/// `incumbents` must be indexed by budget tick.
pub fn regret_series(incumbents: &[f64], y_opt: f64) -> Vec<f64> {
    incumbents.iter().map(|&inc| y_opt - inc).collect()
}
