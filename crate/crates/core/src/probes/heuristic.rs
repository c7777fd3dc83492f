use super::{class_weights, ProbeError};
use crate::evaluation::{macro_f1, Confusion};
use crate::synthgen::SizeClass;

/// Cut point maximizing training Macro-F1 for the rule "Large iff value ≥ θ".
///
/// Candidates are the midpoints between consecutive distinct values plus one
/// point below the minimum and one above the maximum. Among equal scores the
/// smallest candidate wins, except that `preferred` is taken whenever it
/// scores as well as the best candidate.
pub fn fit_threshold(
    values: &[f64],
    labels: &[SizeClass],
    preferred: Option<f64>,
) -> Result<f64, ProbeError> {
    class_weights(labels)?;
    if values.len() != labels.len() {
        return Err(ProbeError::Config(
            "values and labels differ in length".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite { epoch: 0 });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    // Start with everything predicted Large, then flip one run of equal values
    // at a time to Small.
    let mut c = Confusion::default();
    for &l in labels {
        c.add(l, SizeClass::Large);
    }
    let lo = values[order[0]];
    let hi = values[order[order.len() - 1]];
    let mut best = (macro_f1(&c), lo - 1.0f64.max(lo.abs()));
    let mut i = 0;
    while i < order.len() {
        let v = values[order[i]];
        while i < order.len() && values[order[i]] == v {
            let t = labels[order[i]].index();
            c.counts[t][1] -= 1;
            c.counts[t][0] += 1;
            i += 1;
        }
        let theta = if i < order.len() {
            0.5 * (v + values[order[i]])
        } else {
            hi + 1.0f64.max(hi.abs())
        };
        let score = macro_f1(&c);
        if score > best.0 {
            best = (score, theta);
        }
    }
    if let Some(p) = preferred {
        let mut c = Confusion::default();
        for (&v, &l) in values.iter().zip(labels) {
            c.add(
                l,
                if v >= p {
                    SizeClass::Large
                } else {
                    SizeClass::Small
                },
            );
        }
        if macro_f1(&c) >= best.0 {
            return Ok(p);
        }
    }
    Ok(best.1)
}
