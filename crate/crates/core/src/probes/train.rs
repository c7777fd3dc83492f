use rand::seq::SliceRandom;

use super::nn::{cross_entropy, softmax2, Cnn3, Mlp, Network};
use super::optim::{cosine_lr, AdamW};
use super::{
    cue_value, fit_threshold, standardize, InputSchema, Model, ProbeError, ProbeInput, ProbeKind,
    Provenance, TrainConfig, TrainedProbe,
};
use crate::rng::{domain, keyed};
use crate::stats::{mean, population_variance};
use crate::synthgen::SizeClass;

/// A training split: inputs, labels and the environment of every sample.
#[derive(Debug, Clone, Copy)]
pub struct TrainSet<'a> {
    pub inputs: &'a [ProbeInput],
    pub labels: &'a [SizeClass],
    pub envs: &'a [u32],
}

/// `w_c = N / (2 n_c)`, indexed by class. Errors when a class is missing.
pub fn class_weights(labels: &[SizeClass]) -> Result<[f64; 2], ProbeError> {
    if labels.is_empty() {
        return Err(ProbeError::EmptySplit);
    }
    let mut n = [0usize; 2];
    for l in labels {
        n[l.index()] += 1;
    }
    if n.contains(&0) {
        return Err(ProbeError::SingleClass);
    }
    let total = labels.len() as f64;
    Ok(n.map(|c| total / (2.0 * c as f64)))
}

/// Mean risk plus `beta` times the population variance of the risks.
pub fn vrex_loss(env_risks: &[f64], beta: f64) -> f64 {
    mean(env_risks) + beta * population_variance(env_risks)
}

pub fn train_probe(
    kind: ProbeKind,
    schema: InputSchema,
    set: TrainSet<'_>,
    cfg: &TrainConfig,
    provenance: Provenance,
) -> Result<TrainedProbe, ProbeError> {
    cfg.validate()?;
    if set.inputs.len() != set.labels.len() || set.inputs.len() != set.envs.len() {
        return Err(ProbeError::Config(format!(
            "{} inputs, {} labels, {} environments",
            set.inputs.len(),
            set.labels.len(),
            set.envs.len()
        )));
    }
    let expected = InputSchema::for_kind(
        kind,
        match &schema {
            InputSchema::Features { names } => names,
            _ => &[],
        },
        match &schema {
            InputSchema::Map { side, .. } => *side,
            _ => cfg.cnn_side,
        },
    );
    if expected != schema {
        return Err(ProbeError::SchemaMismatch {
            expected: format!("{expected:?}"),
            found: format!("{schema:?}"),
        });
    }
    if let InputSchema::Features { names } = &schema {
        if names.is_empty() {
            return Err(ProbeError::Config("empty feature schema".into()));
        }
    }
    let weights = class_weights(set.labels)?;
    let mut probe = TrainedProbe {
        kind,
        schema,
        train_config: cfg.clone(),
        provenance,
        model: Model::Threshold { theta: 0.0 },
        loss_history: Vec::new(),
    };
    for x in set.inputs {
        probe.check_input(x)?;
    }
    let stream = provenance.fold.map_or(u64::MAX, |f| f as u64);

    match kind {
        ProbeKind::FeatureMlp => {
            let n_in = match &probe.schema {
                InputSchema::Features { names } => names.len(),
                _ => unreachable!(),
            };
            let rows: Vec<&[f64]> = set
                .inputs
                .iter()
                .map(|x| match x {
                    ProbeInput::Features(v) => v.as_slice(),
                    _ => unreachable!("schema checked"),
                })
                .collect();
            let (mu, sd) = column_stats(&rows, n_in);
            let xs: Vec<Vec<f32>> = rows.iter().map(|r| standardize(r, &mu, &sd)).collect();
            let mut net = Mlp::<f32>::init(
                n_in,
                cfg.mlp_hidden,
                &mut keyed(cfg.seed, domain::INIT, stream),
            );
            probe.loss_history = fit(&mut net, &xs, set.labels, set.envs, weights, cfg, stream)?;
            probe.model = Model::Mlp {
                hidden: cfg.mlp_hidden,
                params: net.params().to_vec(),
                mean: mu,
                std: sd,
            };
        }
        ProbeKind::DepthCnn3 | ProbeKind::AppearanceCnn => {
            let side = match &probe.schema {
                InputSchema::Map { side, .. } => *side,
                _ => unreachable!(),
            };
            let xs: Vec<Vec<f32>> = set
                .inputs
                .iter()
                .map(|x| match x {
                    ProbeInput::Map(_, v) => v.clone(),
                    _ => unreachable!("schema checked"),
                })
                .collect();
            let mut net = Cnn3::<f32>::init(
                side,
                cfg.cnn_widths,
                &mut keyed(cfg.seed, domain::INIT, stream),
            );
            probe.loss_history = fit(&mut net, &xs, set.labels, set.envs, weights, cfg, stream)?;
            probe.model = Model::Cnn {
                side,
                widths: cfg.cnn_widths,
                params: net.params().to_vec(),
            };
        }
        ProbeKind::HeuristicApparent | ProbeKind::HeuristicPhysics => {
            let values: Vec<f64> = set
                .inputs
                .iter()
                .map(|x| cue_value(kind, x).expect("schema checked"))
                .collect();
            let preferred =
                (kind == ProbeKind::HeuristicPhysics).then_some(SizeClass::THRESHOLD_MM);
            probe.model = Model::Threshold {
                theta: fit_threshold(&values, set.labels, preferred)?,
            };
        }
    }
    Ok(probe)
}

/// Per-column mean and standard deviation; constant columns get std 1.
fn column_stats(rows: &[&[f64]], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; n];
    let mut sd = vec![0.0; n];
    for j in 0..n {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        mu[j] = mean(&col);
        let s = population_variance(&col).sqrt();
        sd[j] = if s > 1e-12 { s } else { 1.0 };
    }
    (mu, sd)
}

/// Logit gradients below this are skipped in the backward pass.
const NEGLIGIBLE_GRAD: f32 = 1e-12;

/// Mini-batch AdamW over `cfg.epochs` epochs. Returns the mean batch
/// objective of every epoch.
fn fit<N: Network<f32>>(
    net: &mut N,
    xs: &[Vec<f32>],
    labels: &[SizeClass],
    envs: &[u32],
    class_w: [f64; 2],
    cfg: &TrainConfig,
    stream: u64,
) -> Result<Vec<f64>, ProbeError> {
    let n = xs.len();
    let n_params = net.params().len();
    let mut opt = AdamW::<f32>::new(n_params, cfg.weight_decay);
    let mut grad = vec![0.0f32; n_params];
    let mut caches: Vec<N::Cache> = (0..cfg.batch_size.min(n))
        .map(|_| net.new_cache())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut logits = Vec::with_capacity(cfg.batch_size);
    let mut coef = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut keyed(
            cfg.seed,
            domain::TRAIN,
            (stream << 16) ^ epoch as u64,
        ));
        let lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            logits.clear();
            for (slot, &i) in batch.iter().enumerate() {
                logits.push(net.forward(&xs[i], &mut caches[slot]));
            }
            let ce: Vec<f64> = batch
                .iter()
                .zip(&logits)
                .map(|(&i, z)| f64::from(cross_entropy(*z, labels[i].index())))
                .collect();
            let w: Vec<f64> = batch.iter().map(|&i| class_w[labels[i].index()]).collect();
            let env: Vec<u32> = batch.iter().map(|&i| envs[i]).collect();
            let loss = objective_coefficients(&ce, &w, &env, cfg.vrex_beta, &mut coef);
            if !loss.is_finite() {
                return Err(ProbeError::NonFinite { epoch });
            }
            total += loss;
            batches += 1;

            grad.iter_mut().for_each(|g| *g = 0.0);
            for (slot, (&i, z)) in batch.iter().zip(&logits).enumerate() {
                let p = softmax2(*z);
                let y = labels[i].index();
                let c = coef[slot] as f32;
                let d = [
                    c * (p[0] - if y == 0 { 1.0 } else { 0.0 }),
                    c * (p[1] - if y == 1 { 1.0 } else { 0.0 }),
                ];
                // Saturated samples would only feed subnormal values
                // through the backward pass, which is slow and changes nothing.
                if d[0].abs() < NEGLIGIBLE_GRAD && d[1].abs() < NEGLIGIBLE_GRAD {
                    continue;
                }
                net.backward(&mut caches[slot], d, &mut grad);
            }
            opt.step(net.params_mut(), &grad, lr);
        }
        history.push(total / batches as f64);
    }
    Ok(history)
}

/// Batch objective and `∂objective/∂CE_i` for every sample.
///
/// ERM: `Σ w_i CE_i / Σ w_i`. V-REx: per-environment weighted risks `R_e`,
/// objective `mean(R) + β·var(R)`, so sample `i` in environment `e` gets
/// `(1/E + 2β(R_e − R̄)/E) · w_i / W_e`.
pub(crate) fn objective_coefficients(
    ce: &[f64],
    w: &[f64],
    env: &[u32],
    vrex_beta: Option<f64>,
    coef: &mut Vec<f64>,
) -> f64 {
    coef.clear();
    match vrex_beta {
        None => {
            let wsum: f64 = w.iter().sum();
            let loss = ce.iter().zip(w).map(|(c, wi)| c * wi).sum::<f64>() / wsum;
            coef.extend(w.iter().map(|wi| wi / wsum));
            loss
        }
        Some(beta) => {
            let mut ids: Vec<u32> = env.to_vec();
            ids.sort_unstable();
            ids.dedup();
            let mut num = vec![0.0; ids.len()];
            let mut den = vec![0.0; ids.len()];
            let slot: Vec<usize> = env
                .iter()
                .map(|e| ids.binary_search(e).expect("present"))
                .collect();
            for ((c, wi), &s) in ce.iter().zip(w).zip(&slot) {
                num[s] += c * wi;
                den[s] += wi;
            }
            let risks: Vec<f64> = num.iter().zip(&den).map(|(a, b)| a / b).collect();
            let e = risks.len() as f64;
            let r_bar = mean(&risks);
            let d_risk: Vec<f64> = risks
                .iter()
                .map(|r| (1.0 + 2.0 * beta * (r - r_bar)) / e)
                .collect();
            coef.extend(w.iter().zip(&slot).map(|(wi, &s)| d_risk[s] * wi / den[s]));
            vrex_loss(&risks, beta)
        }
    }
}
