use super::EvalError;
use crate::synthgen::SizeClass;

pub const DEFAULT_BINS: usize = 16;
const MIN_SAMPLES: usize = 100;

/// Plug-in mutual information (bits) between a feature discretized into
/// `n_bins` equal-frequency bins and the binary label.
///
/// Bins are assigned from ranks: a run of tied values goes to the bin of its
/// first rank, so a constant feature lands in one bin and scores 0.
pub fn mutual_information(
    values: &[f64],
    labels: &[SizeClass],
    n_bins: usize,
) -> Result<f64, EvalError> {
    if values.len() != labels.len() {
        return Err(EvalError::LengthMismatch(labels.len(), values.len()));
    }
    if values.len() < MIN_SAMPLES {
        return Err(EvalError::Config(format!(
            "{} samples, need at least {MIN_SAMPLES}",
            values.len()
        )));
    }
    if n_bins < 2 {
        return Err(EvalError::Config(format!("{n_bins} bins, need at least 2")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(EvalError::Undefined("NaN feature value"));
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut joint = vec![[0u64; 2]; n_bins];
    let mut start = 0;
    for (rank, &i) in order.iter().enumerate() {
        if values[i] != values[order[start]] {
            start = rank;
        }
        let bin = start * n_bins / n;
        joint[bin][labels[i].index()] += 1;
    }

    let nf = n as f64;
    let py = [0, 1].map(|y| joint.iter().map(|b| b[y]).sum::<u64>() as f64 / nf);
    let mut mi = 0.0;
    for cell in &joint {
        let pb = (cell[0] + cell[1]) as f64 / nf;
        for y in 0..2 {
            if cell[y] > 0 {
                let pby = cell[y] as f64 / nf;
                mi += pby * (pby / (pb * py[y])).log2();
            }
        }
    }
    Ok(mi.max(0.0))
}
