//! Small descriptive statistics shared across modules.

/// Lower median: the element of rank `(n - 1) / 2` after sorting.
/// `None` for an empty slice or when any value is NaN.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut sorted = values.to_vec();
    let mid = (sorted.len() - 1) / 2;
    let (_, m, _) = sorted.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    Some(*m)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance (divide by `n`).
pub fn population_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (divide by `n - 1`).
pub fn sample_std(values: &[f64]) -> f64 {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() as f64 - 1.0)).sqrt()
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Average ranks (ties share the mean rank), 0-based.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = 0.5 * (i + j) as f64;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lower_median_conventions() {
        assert_eq!(lower_median(&[40.0, 60.0, 80.0]), Some(60.0));
        assert_eq!(lower_median(&[1.0, 100.0]), Some(1.0));
        assert_eq!(lower_median(&[4.0, 3.0, 2.0, 1.0]), Some(2.0));
        assert_eq!(lower_median(&[]), None);
        assert_eq!(lower_median(&[1.0, f64::NAN]), None);
    }

    #[test]
    fn spearman_of_monotone_pair_is_one() {
        let x = [1.0, 2.0, 5.0, 9.0];
        let y = [0.1, 0.4, 0.5, 7.0];
        assert!((spearman(&x, &y) - 1.0).abs() < 1e-12);
    }
}
