//! Evaluation: numeral decoding, ln-RMSE, held-out masked-LM loss, and
//! parameter-space point sets for t-SNE.

pub mod report;
pub mod tsne;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{ArithInstance, ArithOp};
use crate::error::{Error, Result};
use crate::model::vocab::{self, MINUS, PLUS};
use crate::model::{batch_loss_value, predict_masked, ModelParams, TokenSeq};
use crate::training::{aggregate, AggregateMetric};

pub use tsne::{tsne, TsneConfig, TsneResult};

/// Floor applied to the RMSE before taking its logarithm.
pub const RMSE_FLOOR: f64 = 1e-8;

/// Signed integer from a sign token followed by zero-padded digit tokens.
pub fn decode_numeral(ids: &[usize]) -> Result<i64> {
    let (&sign, digits) = ids
        .split_first()
        .ok_or_else(|| Error::Decode("empty numeral".into()))?;
    let negative = match sign {
        PLUS => false,
        MINUS => true,
        other => return Err(Error::Decode(format!("expected sign token, got {}", describe(other)))),
    };
    if digits.is_empty() {
        return Err(Error::Decode("numeral has no digits".into()));
    }
    let mut value: i64 = 0;
    for &id in digits {
        let d = vocab::digit_value(id).ok_or_else(|| Error::Decode(format!("non-digit token {}", describe(id))))?;
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add(d as i64))
            .ok_or_else(|| Error::Decode("numeral overflows".into()))?;
    }
    Ok(if negative { -value } else { value })
}

fn describe(id: usize) -> String {
    match vocab::surface(id) {
        Some(s) => format!("{s:?} ({id})"),
        None => format!("#{id}"),
    }
}

/// How predictions and truths are compared on a log scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnRmseMode {
    /// `ln(max(RMSE, 1e-8))`.
    #[default]
    LogOfRmse,
    /// RMSE between `sign(x)·ln(1+|x|)` transforms.
    RmseOfLogs,
}

pub fn ln_rmse(preds: &[i64], truths: &[i64]) -> Result<f64> {
    ln_rmse_with(preds, truths, LnRmseMode::LogOfRmse)
}

pub fn ln_rmse_with(preds: &[i64], truths: &[i64], mode: LnRmseMode) -> Result<f64> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let rmse = |f: &dyn Fn(i64) -> f64| {
        let mse = preds
            .iter()
            .zip(truths)
            .map(|(&p, &t)| (f(p) - f(t)).powi(2))
            .sum::<f64>()
            / preds.len() as f64;
        mse.sqrt()
    };
    Ok(match mode {
        LnRmseMode::LogOfRmse => rmse(&|x| x as f64).max(RMSE_FLOOR).ln(),
        LnRmseMode::RmseOfLogs => rmse(&|x| (x as f64).signum() * (x.unsigned_abs() as f64).ln_1p()),
    })
}

/// Mean masked-LM loss over `corpus`, without gradients.
pub fn heldout_mlm_loss(params: &ModelParams, corpus: &[TokenSeq]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("held-out corpus is empty".into()));
    }
    let mut total = 0.0;
    for chunk in corpus.chunks(64) {
        let refs: Vec<&TokenSeq> = chunk.iter().collect();
        total += batch_loss_value(params, &refs)? * chunk.len() as f64;
    }
    Ok(total / corpus.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedSample {
    pub a: i64,
    pub op: ArithOp,
    pub b: i64,
    pub truth: i64,
    pub prediction: i64,
}

/// Predict each instance's result with the numeric tokens only.
pub fn decode_predictions(params: &ModelParams, data: &[ArithInstance]) -> Result<Vec<DecodedSample>> {
    let allowed = vocab::numeric_ids();
    data.iter()
        .map(|x| {
            let ids = predict_masked(params, &x.seq, Some(&allowed))?;
            // the sign slot may only hold a sign, digit slots only digits
            let ids = constrain_numeral(params, &x.seq, ids)?;
            Ok(DecodedSample {
                a: x.a,
                op: x.op,
                b: x.b,
                truth: x.result,
                prediction: decode_numeral(&ids)?,
            })
        })
        .collect()
}

fn constrain_numeral(params: &ModelParams, seq: &TokenSeq, ids: Vec<usize>) -> Result<Vec<usize>> {
    let sign_ok = matches!(ids.first(), Some(&PLUS) | Some(&MINUS));
    let digits_ok = ids.iter().skip(1).all(|&id| vocab::digit_value(id).is_some());
    if sign_ok && digits_ok {
        return Ok(ids);
    }
    let signs = predict_masked(params, seq, Some(&[PLUS, MINUS]))?;
    let digits: Vec<usize> = (0..10).map(vocab::digit_id).collect();
    let numbers = predict_masked(params, seq, Some(&digits))?;
    Ok(std::iter::once(signs[0]).chain(numbers.into_iter().skip(1)).collect())
}

/// One model's evaluation on the arithmetic set and held-out corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEval {
    pub ln_rmse: f64,
    pub heldout: BTreeMap<String, f64>,
    pub samples: Vec<DecodedSample>,
}

pub fn evaluate(
    params: &ModelParams,
    arith: &[ArithInstance],
    corpora: &[(&str, &[TokenSeq])],
    mode: LnRmseMode,
) -> Result<RunEval> {
    let samples = decode_predictions(params, arith)?;
    let preds: Vec<i64> = samples.iter().map(|s| s.prediction).collect();
    let truths: Vec<i64> = samples.iter().map(|s| s.truth).collect();
    let mut heldout = BTreeMap::new();
    for (name, corpus) in corpora {
        heldout.insert(name.to_string(), heldout_mlm_loss(params, corpus)?);
    }
    Ok(RunEval {
        ln_rmse: ln_rmse_with(&preds, &truths, mode)?,
        heldout,
        samples,
    })
}

/// μ_σ summary over seeds, with the decoded samples of the first run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ln_rmse: AggregateMetric,
    pub heldout_mlm_loss: BTreeMap<String, AggregateMetric>,
    pub samples: Vec<DecodedSample>,
}

impl EvalReport {
    pub fn from_runs(runs: &[RunEval]) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::InvalidInput("report over no runs".into()))?;
        let ln = aggregate(&runs.iter().map(|r| r.ln_rmse).collect::<Vec<_>>())?;
        let mut heldout = BTreeMap::new();
        for task in first.heldout.keys() {
            let values = runs
                .iter()
                .map(|r| {
                    r.heldout
                        .get(task)
                        .copied()
                        .ok_or_else(|| Error::InvalidInput(format!("run missing task {task}")))
                })
                .collect::<Result<Vec<_>>>()?;
            heldout.insert(task.clone(), aggregate(&values)?);
        }
        Ok(EvalReport {
            ln_rmse: ln,
            heldout_mlm_loss: heldout,
            samples: first.samples.clone(),
        })
    }
}

/// Neuron weight vectors of one encoder block across task checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPointSet {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<String>,
    pub layer: usize,
}

impl ParamPointSet {
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Weight matrices of a block whose input width is `d_model`; each of
/// their output neurons contributes its incoming-weight vector.
pub fn layer_matrices(layer: usize) -> Vec<String> {
    let mut names: Vec<String> = ["attn.k.weight", "attn.o.weight", "attn.q.weight", "attn.v.weight", "ffn.in.weight"]
        .iter()
        .map(|m| format!("layer{layer}.{m}"))
        .collect();
    names.sort();
    names
}

/// Points ordered by task name, then matrix name, then neuron index.
pub fn collect_layer_points(checkpoints: &BTreeMap<String, ModelParams>, layer: usize) -> Result<ParamPointSet> {
    let mut iter = checkpoints.values();
    let first = iter
        .next()
        .ok_or_else(|| Error::InvalidInput("no checkpoints".into()))?;
    if iter.any(|p| p.config() != first.config()) {
        return Err(Error::InvalidInput("checkpoints were built with different configs".into()));
    }
    if layer >= first.config().n_layers {
        return Err(Error::InvalidInput(format!("layer {layer} out of range")));
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (task, params) in checkpoints {
        for name in layer_matrices(layer) {
            let w = params
                .get(&name)
                .ok_or_else(|| Error::InvalidInput(format!("missing tensor {name}")))?;
            let (rows, cols) = w.dims2()?;
            for neuron in 0..cols {
                points.push((0..rows).map(|r| w.data()[r * cols + neuron]).collect());
                labels.push(task.clone());
            }
        }
    }
    Ok(ParamPointSet { points, labels, layer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::numeral_tokens;
    use crate::model::{build_model, ModelConfig};

    fn ids(sign: usize, digits: &[u8]) -> Vec<usize> {
        std::iter::once(sign)
            .chain(digits.iter().map(|&d| vocab::digit_id(d)))
            .collect()
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_numeral(&ids(PLUS, &[0, 0, 0, 0, 1, 9])).unwrap(), 19);
        assert_eq!(decode_numeral(&ids(MINUS, &[0, 0, 0, 0, 0, 4])).unwrap(), -4);
        assert_eq!(decode_numeral(&ids(PLUS, &[0, 0, 0, 0, 0, 0])).unwrap(), 0);
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(decode_numeral(&[]), Err(Error::Decode(_))));
        assert!(matches!(decode_numeral(&[vocab::digit_id(1), vocab::digit_id(2)]), Err(Error::Decode(_))));
        assert!(matches!(decode_numeral(&[PLUS, vocab::FIRST_WORD]), Err(Error::Decode(_))));
        assert!(matches!(decode_numeral(&[MINUS]), Err(Error::Decode(_))));
    }

    #[test]
    fn decode_inverts_rendering() {
        for v in -12_345..=12_345 {
            assert_eq!(decode_numeral(&numeral_tokens(v, 6).unwrap()).unwrap(), v);
        }
    }

    #[test]
    fn ln_rmse_examples() {
        let truths = [3, -7, 100, 0];
        let off_by_one = [4, -8, 101, -1];
        assert_eq!(ln_rmse(&off_by_one, &truths).unwrap(), 0.0);
        let perfect = ln_rmse(&truths, &truths).unwrap();
        assert!((perfect - 1e-8f64.ln()).abs() < 1e-12);
        assert!((perfect + 18.42).abs() < 0.01);
        assert!(ln_rmse(&[1], &[1, 2]).is_err());
        assert!(ln_rmse(&[], &[]).is_err());
    }

    #[test]
    fn log_transform_mode() {
        let v = ln_rmse_with(&[0], &[0], LnRmseMode::RmseOfLogs).unwrap();
        assert_eq!(v, 0.0);
        let w = ln_rmse_with(&[-9], &[9], LnRmseMode::RmseOfLogs).unwrap();
        assert!((w - 2.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn report_aggregates_runs() {
        let run = |ln: f64, a: f64| RunEval {
            ln_rmse: ln,
            heldout: BTreeMap::from([("grammar_a".to_string(), a)]),
            samples: vec![],
        };
        let r = EvalReport::from_runs(&[run(0.4, 1.0), run(0.6, 3.0)]).unwrap();
        assert!((r.ln_rmse.mean - 0.5).abs() < 1e-15);
        assert!((r.ln_rmse.std - 0.1).abs() < 1e-15);
        assert_eq!(r.heldout_mlm_loss["grammar_a"].mean, 2.0);
    }

    #[test]
    fn point_counts() {
        let p = build_model(&ModelConfig::default()).unwrap();
        let ck = BTreeMap::from([("a".to_string(), p.clone()), ("b".to_string(), p.clone())]);
        let set = collect_layer_points(&ck, 1).unwrap();
        // four d×d attention projections plus the d×f FFN input, per task
        let per_task = 4 * 64 + 128;
        assert_eq!(set.len(), 2 * per_task);
        assert_eq!(set.dim(), 64);
        assert_eq!(&set.points[..per_task], &set.points[per_task..]);
        assert!(set.labels[..per_task].iter().all(|l| l == "a"));
        assert!(set.labels[per_task..].iter().all(|l| l == "b"));

        let other = build_model(&ModelConfig {
            d_model: 32,
            ..Default::default()
        })
        .unwrap();
        let mixed = BTreeMap::from([("a".to_string(), p), ("b".to_string(), other)]);
        assert!(collect_layer_points(&mixed, 0).is_err());
    }
}
