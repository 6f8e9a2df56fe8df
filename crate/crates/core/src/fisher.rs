//! Diagonal empirical Fisher information.
//!
//! `F_i = (1/N) Σ_n (∂ log f(y_n; θ) / ∂θ_i)²`, with per-sample gradients
//! taken at the observed targets. Samples are drawn with replacement and
//! processed in fixed-size shards whose partial sums are reduced in shard
//! order, so the estimate is bit-identical for any worker count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{forward_batch, ModelParams, TokenSeq};
use crate::util::{par_map, rng_for};
use rand::Rng;

const SHARD: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherVector {
    pub values: Vec<f64>,
    pub n_samples: usize,
    pub task_label: String,
}

impl FisherVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Coordinate-wise mean of several estimates over the same parameters.
    pub fn mean_of(parts: &[&FisherVector], task_label: &str) -> Result<FisherVector> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("mean of no fisher vectors".into()))?;
        if parts.iter().any(|p| p.len() != first.len()) {
            return Err(Error::InvalidInput("fisher vectors differ in length".into()));
        }
        let mut values = vec![0.0; first.len()];
        for p in parts {
            for (v, x) in values.iter_mut().zip(&p.values) {
                *v += x / parts.len() as f64;
            }
        }
        Ok(FisherVector {
            values,
            n_samples: parts.iter().map(|p| p.n_samples).sum(),
            task_label: task_label.to_string(),
        })
    }

    /// Min-max scaled copy, for plotting only.
    pub fn normalized(&self) -> Vec<f64> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        self.values
            .iter()
            .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect()
    }
}

/// A parametric likelihood whose per-sample score can be evaluated.
pub trait ScoreModel: Sync {
    type Sample: Sync;

    fn num_params(&self) -> usize;

    /// `∂ log f(sample; θ) / ∂θ` over the flat parameter vector.
    fn score(&self, sample: &Self::Sample) -> Result<Vec<f64>>;
}

/// Masked-LM likelihood: the joint probability of the target tokens at
/// every mask position.
pub struct MlmLikelihood<'a> {
    pub params: &'a ModelParams,
}

impl ScoreModel for MlmLikelihood<'_> {
    type Sample = TokenSeq;

    fn num_params(&self) -> usize {
        self.params.flat_len()
    }

    fn score(&self, seq: &TokenSeq) -> Result<Vec<f64>> {
        if seq.mask_positions.is_empty() {
            return Err(Error::InvalidInput("sample has no mask positions".into()));
        }
        let mut graph = Graph::new();
        let bound = self.params.bind(&mut graph, true);
        let logits = forward_batch(&mut graph, &bound, self.params.config(), &[seq])?
            .expect("sample has masks");
        // the weighted sum with unit weights is the negative log-likelihood
        let weights = vec![1.0; seq.target_ids.len()];
        let nll = graph.cross_entropy_weighted(logits, &seq.target_ids, &weights)?;
        let loglik = graph.scale(nll, -1.0);
        graph.backward(loglik)?;
        Ok(bound.flat_grad(&graph))
    }
}

/// Empirical diagonal Fisher of any [`ScoreModel`].
pub fn estimate_diag_fisher_with<M: ScoreModel>(
    model: &M,
    data: &[M::Sample],
    n_samples: usize,
    seed: u64,
    task_label: &str,
) -> Result<FisherVector> {
    if data.is_empty() {
        return Err(Error::InvalidInput("fisher estimation needs data".into()));
    }
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be at least 1".into()));
    }
    let mut rng = rng_for(seed, 0xF15E);
    let picks: Vec<usize> = (0..n_samples).map(|_| rng.gen_range(0..data.len())).collect();
    let shards: Vec<&[usize]> = picks.chunks(SHARD).collect();
    let dim = model.num_params();

    let partials = par_map(&shards, |_, shard| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; dim];
        for &i in shard.iter() {
            let s = model.score(&data[i])?;
            if s.len() != dim {
                return Err(Error::InvalidShape(format!("score of length {} for {dim} params", s.len())));
            }
            for (a, g) in acc.iter_mut().zip(&s) {
                *a += g * g;
            }
        }
        Ok(acc)
    });

    let mut values = vec![0.0; dim];
    for part in partials {
        for (v, p) in values.iter_mut().zip(part?) {
            *v += p;
        }
    }
    let n = n_samples as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Ok(FisherVector {
        values,
        n_samples,
        task_label: task_label.to_string(),
    })
}

/// Fisher of the masked-LM likelihood over `data`. `params` is not modified.
pub fn estimate_diag_fisher(
    params: &ModelParams,
    data: &[TokenSeq],
    n_samples: usize,
    seed: u64,
    task_label: &str,
) -> Result<FisherVector> {
    estimate_diag_fisher_with(&MlmLikelihood { params }, data, n_samples, seed, task_label)
}

/// The highest-scoring parameters of one encoder block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitalSet {
    pub layer: usize,
    /// Flat parameter indices, by descending score.
    pub indices: Vec<usize>,
    pub source_task: String,
}

/// The `n` largest Fisher scores within encoder block `layer`; ties go to
/// the lower index.
pub fn top_n_vital(fisher: &FisherVector, params: &ModelParams, layer: usize, n: usize) -> Result<VitalSet> {
    if fisher.len() != params.flat_len() {
        return Err(Error::InvalidInput(format!(
            "fisher of length {} for {} parameters",
            fisher.len(),
            params.flat_len()
        )));
    }
    let range = params.layer_range(layer)?;
    if n > range.len() {
        return Err(Error::InvalidInput(format!(
            "requested {n} vital parameters from a layer of {}",
            range.len()
        )));
    }
    let mut indices: Vec<usize> = range.collect();
    indices.sort_by(|&a, &b| fisher.values[b].total_cmp(&fisher.values[a]).then(a.cmp(&b)));
    indices.truncate(n);
    Ok(VitalSet {
        layer,
        indices,
        source_task: fisher.task_label.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub layer: usize,
    pub tasks: Vec<String>,
    /// `(flat index, score per task)`, ordered as the vital set.
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl SensitivityTable {
    /// Fraction of rows where task `a` scores strictly above task `b`.
    pub fn fraction_greater(&self, a: usize, b: usize) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let wins = self.rows.iter().filter(|(_, s)| s[a] > s[b]).count();
        wins as f64 / self.rows.len() as f64
    }

    pub fn column_mean(&self, task: usize) -> f64 {
        self.rows.iter().map(|(_, s)| s[task]).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

/// Scores of the vital parameters under each task's Fisher.
pub fn sensitivity_compare(vital: &VitalSet, fisher_by_task: &[(&str, &FisherVector)]) -> Result<SensitivityTable> {
    let first = fisher_by_task
        .first()
        .ok_or_else(|| Error::InvalidInput("no task fisher vectors".into()))?;
    let len = first.1.len();
    if fisher_by_task.iter().any(|(_, f)| f.len() != len) {
        return Err(Error::InvalidInput("task fisher vectors differ in length".into()));
    }
    if let Some(&i) = vital.indices.iter().find(|&&i| i >= len) {
        return Err(Error::InvalidInput(format!("vital index {i} outside fisher of length {len}")));
    }
    let rows = vital
        .indices
        .iter()
        .map(|&i| (i, fisher_by_task.iter().map(|(_, f)| f.values[i]).collect()))
        .collect();
    Ok(SensitivityTable {
        layer: vital.layer,
        tasks: fisher_by_task.iter().map(|(t, _)| t.to_string()).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_arith_dataset, ExponentDist};
    use crate::model::{build_model, ModelConfig};

    fn tiny() -> ModelParams {
        build_model(&ModelConfig {
            d_model: 8,
            d_ffn: 16,
            n_layers: 2,
            ..Default::default()
        })
        .unwrap()
    }

    fn data(n: usize) -> Vec<TokenSeq> {
        gen_arith_dataset(n, &ExponentDist::new(vec![0.5, 0.5]).unwrap(), 1)
            .unwrap()
            .into_iter()
            .map(|x| x.seq)
            .collect()
    }

    fn synthetic(values: Vec<f64>) -> FisherVector {
        FisherVector {
            values,
            n_samples: 1,
            task_label: "t".into(),
        }
    }

    #[test]
    fn unused_parameters_have_zero_fisher() {
        let p = tiny();
        // sequences never reach positions beyond their length, nor [PAD]
        let f = estimate_diag_fisher(&p, &data(20), 40, 0, "arith").unwrap();
        assert!(f.values.iter().all(|&v| v >= 0.0));
        let (_, off, _) = p.segments()[1];
        let d = p.config().d_model;
        let last_position = off + (p.config().max_seq - 1) * d;
        assert!(f.values[last_position..last_position + d].iter().all(|&v| v == 0.0));
        let (_, tok, _) = p.segments()[0];
        assert!(f.values[tok..tok + d].iter().all(|&v| v == 0.0), "[PAD] row");
    }

    #[test]
    fn params_untouched() {
        let p = tiny();
        let before = p.flatten();
        estimate_diag_fisher(&p, &data(5), 8, 1, "arith").unwrap();
        assert_eq!(p.flatten(), before);
    }

    #[test]
    fn empty_data_rejected() {
        assert!(matches!(
            estimate_diag_fisher(&tiny(), &[], 4, 0, "x"),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn independent_of_thread_count() {
        let p = tiny();
        let d = data(30);
        std::env::set_var("EWCLAB_THREADS", "1");
        let a = estimate_diag_fisher(&p, &d, 150, 4, "arith").unwrap();
        std::env::set_var("EWCLAB_THREADS", "3");
        let b = estimate_diag_fisher(&p, &d, 150, 4, "arith").unwrap();
        std::env::remove_var("EWCLAB_THREADS");
        assert_eq!(a, b);
    }

    #[test]
    fn vital_set_rules() {
        let p = tiny();
        let range = p.layer_range(1).unwrap();
        let values: Vec<f64> = (0..p.flat_len()).map(|i| ((i * 7919) % 1000) as f64).collect();
        let f = synthetic(values);
        let all = top_n_vital(&f, &p, 1, range.len()).unwrap();
        assert_eq!(all.indices.len(), range.len());
        assert!(all.indices.iter().all(|i| range.contains(i)));
        assert!(all.indices.windows(2).all(|w| f.values[w[0]] >= f.values[w[1]]));

        let flat = synthetic(vec![2.0; p.flat_len()]);
        let v = top_n_vital(&flat, &p, 1, 5).unwrap();
        assert_eq!(v.indices, (range.start..range.start + 5).collect::<Vec<_>>());

        assert!(top_n_vital(&flat, &p, 1, range.len() + 1).is_err());
    }

    #[test]
    fn default_model_has_room_for_800() {
        let p = build_model(&ModelConfig::default()).unwrap();
        let values: Vec<f64> = (0..p.flat_len()).map(|i| (i % 977) as f64).collect();
        let v = top_n_vital(&synthetic(values.clone()), &p, 0, 800).unwrap();
        assert_eq!(v.indices.len(), 800);
        assert!(v.indices.windows(2).all(|w| values[w[0]] >= values[w[1]]));
    }

    #[test]
    fn compare_against_self() {
        let p = tiny();
        let f = synthetic((0..p.flat_len()).map(|i| i as f64).collect());
        let vital = top_n_vital(&f, &p, 0, 10).unwrap();
        let t = sensitivity_compare(&vital, &[("a", &f), ("a2", &f)]).unwrap();
        assert!(t.rows.iter().all(|(_, s)| s[0] == s[1]));
        assert_eq!(t.fraction_greater(0, 1), 0.0);
        let short = synthetic(vec![1.0; 3]);
        assert!(sensitivity_compare(&vital, &[("a", &f), ("b", &short)]).is_err());
    }

    #[test]
    fn normalized_is_unit_range() {
        let f = synthetic(vec![2.0, 4.0, 3.0]);
        assert_eq!(f.normalized(), vec![0.0, 1.0, 0.5]);
    }
}
