//! Inputs built without any scale regime must not depend on the unknown
//! per-frame normalizer of the relative depth map.

use polyp_audit::audit::prepare_inputs;
use polyp_audit::interventions::{InterventionPlan, ScaleRegime};
use polyp_audit::probes::{ProbeInput, ProbeKind};
use polyp_audit::synthgen::{generate_dataset, Dataset, DatasetConfig, MaskSource};

fn dataset() -> Dataset {
    let mut cfg = DatasetConfig::default();
    cfg.cohort.n_patients = 6;
    cfg.cohort.n_polyps = 8;
    cfg.confound.frames_per_polyp = 4;
    generate_dataset(&cfg, 9).unwrap()
}

/// Each frame's map times its own factor, as an unknown normalizer would be.
fn rescaled(data: &Dataset, factor: impl Fn(usize) -> f32) -> Dataset {
    let mut out = data.clone();
    for (i, f) in out.frames.iter_mut().enumerate() {
        let k = factor(i);
        f.relative_depth = f.relative_depth.map(|v| v * k);
    }
    out
}

fn max_rel_diff(a: &[ProbeInput], b: &[ProbeInput]) -> f64 {
    let mut worst = 0.0f64;
    let mut note = |x: f64, y: f64| {
        let d = (x - y).abs() / x.abs().max(1e-12);
        worst = worst.max(d);
    };
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (ProbeInput::Features(u), ProbeInput::Features(v)) => {
                u.iter().zip(v).for_each(|(p, q)| note(*p, *q))
            }
            (ProbeInput::Map(_, u), ProbeInput::Map(_, v)) => u
                .iter()
                .zip(v)
                .for_each(|(p, q)| note(f64::from(*p), f64::from(*q))),
            (
                ProbeInput::Cue {
                    apparent_diameter_px: a1,
                    depth_anchor: d1,
                    ..
                },
                ProbeInput::Cue {
                    apparent_diameter_px: a2,
                    depth_anchor: d2,
                    ..
                },
            ) => {
                note(*a1, *a2);
                note(*d1, *d2);
            }
            _ => panic!("input kinds differ"),
        }
    }
    worst
}

#[test]
fn unscaled_inputs_ignore_the_depth_normalizer() {
    let data = dataset();
    let train: Vec<bool> = (0..data.frames.len()).map(|i| i % 2 == 0).collect();
    let plan = InterventionPlan::new(ScaleRegime::None, MaskSource::GroundTruth);
    for kind in [
        ProbeKind::FeatureMlp,
        ProbeKind::DepthCnn3,
        ProbeKind::HeuristicPhysics,
    ] {
        let base = prepare_inputs(kind, &plan, &data, &train, 0, 16).unwrap();
        // Powers of two rescale exactly.
        let pow2 = rescaled(&data, |i| [0.25, 4.0, 8.0][i % 3]);
        let exact = prepare_inputs(kind, &plan, &pow2, &train, 0, 16).unwrap();
        assert!(
            base.inputs == exact.inputs,
            "{kind:?}: {}",
            max_rel_diff(&base.inputs, &exact.inputs)
        );
        let arbitrary = rescaled(&data, |i| 2.7 * (1.0 + (i % 3) as f32));
        let other = prepare_inputs(kind, &plan, &arbitrary, &train, 0, 16).unwrap();
        let d = max_rel_diff(&base.inputs, &other.inputs);
        assert!(d <= 1e-5, "{kind:?}: {d}");
    }
}

#[test]
fn oracle_inputs_ignore_the_depth_normalizer() {
    // Oracle factors are computed from the relative map, so they absorb it.
    let data = dataset();
    let train: Vec<bool> = (0..data.frames.len()).map(|i| i % 2 == 0).collect();
    let plan = InterventionPlan::new(ScaleRegime::OracleFrame, MaskSource::GroundTruth);
    let base = prepare_inputs(ProbeKind::HeuristicPhysics, &plan, &data, &train, 0, 16).unwrap();
    let other = prepare_inputs(
        ProbeKind::HeuristicPhysics,
        &plan,
        &rescaled(&data, |i| 0.3 + i as f32),
        &train,
        0,
        16,
    )
    .unwrap();
    let d = max_rel_diff(&base.inputs, &other.inputs);
    assert!(d <= 1e-5, "{d}");
}
