//! Top-1 verb/noun/action accuracy and joint-pair Recall@5.

use crate::error::{CoreError, Result};
use crate::model::{predict_action, ActionScores};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopOneMetrics {
    pub verb_acc: f64,
    pub noun_acc: f64,
    /// Correct only when both the verb and the noun argmax match.
    pub action_acc: f64,
}

pub fn top1_metrics(scores: &ActionScores, verbs: &[usize], nouns: &[usize]) -> TopOneMetrics {
    let preds = predict_action(scores);
    let n = preds.len();
    let mut vc = 0usize;
    let mut nc = 0usize;
    let mut ac = 0usize;
    for (i, (pv, pn)) in preds.into_iter().enumerate() {
        let v_ok = pv == verbs[i];
        let n_ok = pn == nouns[i];
        vc += v_ok as usize;
        nc += n_ok as usize;
        ac += (v_ok && n_ok) as usize;
    }
    TopOneMetrics {
        verb_acc: vc as f64 / n as f64,
        noun_acc: nc as f64 / n as f64,
        action_acc: ac as f64 / n as f64,
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

/// Joint ordering used for Recall@5: higher score first, exact ties broken
/// by ascending (verb index, noun index).
fn ranks_before(a: (f64, usize, usize), b: (f64, usize, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2))
}

/// Fraction of rows whose true (verb, noun) pair lies among the five
/// highest-scoring pairs, with pair score = log-softmax(verb) +
/// log-softmax(noun).
pub fn recall_at_5(scores: &ActionScores, verbs: &[usize], nouns: &[usize]) -> Result<f64> {
    let vv = scores.verb_logits.shape()[1];
    let vn = scores.noun_logits.shape()[1];
    if vv * vn < 5 {
        return Err(CoreError::Configuration(format!(
            "recall@5 needs at least 5 verb-noun pairs, got {}x{}",
            vv, vn
        )));
    }
    let b = scores.batch();
    let mut hits = 0usize;
    for ri in 0..b {
        let lv = log_softmax_row(&scores.verb_logits.data()[ri * vv..(ri + 1) * vv]);
        let ln = log_softmax_row(&scores.noun_logits.data()[ri * vn..(ri + 1) * vn]);
        // top-5 by insertion into a small sorted buffer
        let mut top: Vec<(f64, usize, usize)> = Vec::with_capacity(6);
        for vi in 0..vv {
            for ni in 0..vn {
                let cand = (lv[vi] + ln[ni], vi, ni);
                if top.len() < 5 || ranks_before(cand, *top.last().unwrap()) {
                    let pos = top
                        .iter()
                        .position(|&t| ranks_before(cand, t))
                        .unwrap_or(top.len());
                    top.insert(pos, cand);
                    top.truncate(5);
                }
            }
        }
        if top.iter().any(|&(_, vi, ni)| vi == verbs[ri] && ni == nouns[ri]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / b as f64)
}

/// One row of the metrics history CSV.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub verb_acc: f64,
    pub noun_acc: f64,
    pub action_acc: f64,
    pub recall5: f64,
    pub lr_default: f64,
    pub lr_fusion: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "epoch,split,loss,verb_acc,noun_acc,action_acc,recall5,lr_default,lr_fusion";

impl MetricsRow {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.loss,
            self.verb_acc,
            self.noun_acc,
            self.action_acc,
            self.recall5,
            self.lr_default,
            self.lr_fusion
        )
    }
}

pub fn history_to_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot_scores(verbs: &[usize], nouns: &[usize], vv: usize, vn: usize) -> ActionScores {
        let b = verbs.len();
        let mut v = vec![0.0; b * vv];
        let mut n = vec![0.0; b * vn];
        for i in 0..b {
            v[i * vv + verbs[i]] = 5.0;
            n[i * vn + nouns[i]] = 5.0;
        }
        ActionScores {
            verb_logits: Tensor::new(vec![b, vv], v).unwrap(),
            noun_logits: Tensor::new(vec![b, vn], n).unwrap(),
        }
    }

    #[test]
    fn perfect_scores_hit_every_metric() {
        let verbs = vec![1, 0, 2];
        let nouns = vec![3, 1, 0];
        let s = one_hot_scores(&verbs, &nouns, 3, 4);
        let m = top1_metrics(&s, &verbs, &nouns);
        assert_eq!(
            m,
            TopOneMetrics {
                verb_acc: 1.0,
                noun_acc: 1.0,
                action_acc: 1.0
            }
        );
        assert_eq!(recall_at_5(&s, &verbs, &nouns).unwrap(), 1.0);
    }

    #[test]
    fn right_verb_wrong_noun_zeroes_action() {
        let verbs = vec![0, 1];
        let wrong_nouns = vec![1, 2];
        let s = one_hot_scores(&verbs, &wrong_nouns, 3, 4);
        let m = top1_metrics(&s, &verbs, &[0, 0]);
        assert_eq!(m.verb_acc, 1.0);
        assert_eq!(m.noun_acc, 0.0);
        assert_eq!(m.action_acc, 0.0);
    }

    #[test]
    fn top1_matches_brute_force_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, vv, vn) = (200, 6, 7);
        let s = ActionScores {
            verb_logits: Tensor::randn(&[b, vv], 1.0, &mut rng),
            noun_logits: Tensor::randn(&[b, vn], 1.0, &mut rng),
        };
        let verbs: Vec<usize> = (0..b).map(|i| i % vv).collect();
        let nouns: Vec<usize> = (0..b).map(|i| (i * 3) % vn).collect();
        let m = top1_metrics(&s, &verbs, &nouns);
        let mut vc = 0;
        let mut nc = 0;
        let mut ac = 0;
        for i in 0..b {
            let vrow = &s.verb_logits.data()[i * vv..(i + 1) * vv];
            let nrow = &s.noun_logits.data()[i * vn..(i + 1) * vn];
            let pv = (0..vv).fold(0, |best, j| if vrow[j] > vrow[best] { j } else { best });
            let pn = (0..vn).fold(0, |best, j| if nrow[j] > nrow[best] { j } else { best });
            if pv == verbs[i] {
                vc += 1;
            }
            if pn == nouns[i] {
                nc += 1;
            }
            if pv == verbs[i] && pn == nouns[i] {
                ac += 1;
            }
        }
        assert_eq!(m.verb_acc, vc as f64 / b as f64);
        assert_eq!(m.noun_acc, nc as f64 / b as f64);
        assert_eq!(m.action_acc, ac as f64 / b as f64);
    }

    #[test]
    fn action_bounded_by_component_accuracies() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..20u64 {
            let _ = seed;
            let (b, vv, vn) = (50, 4, 5);
            let s = ActionScores {
                verb_logits: Tensor::randn(&[b, vv], 1.0, &mut rng),
                noun_logits: Tensor::randn(&[b, vn], 1.0, &mut rng),
            };
            let verbs: Vec<usize> = (0..b).map(|i| i % vv).collect();
            let nouns: Vec<usize> = (0..b).map(|i| i % vn).collect();
            let m = top1_metrics(&s, &verbs, &nouns);
            assert!(m.action_acc <= m.verb_acc.min(m.noun_acc) + 1e-15);
        }
    }

    #[test]
    fn five_total_pairs_always_recalled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = ActionScores {
            verb_logits: Tensor::randn(&[30, 5], 1.0, &mut rng),
            noun_logits: Tensor::randn(&[30, 1], 1.0, &mut rng),
        };
        let verbs: Vec<usize> = (0..30).map(|i| i % 5).collect();
        let nouns = vec![0; 30];
        assert_eq!(recall_at_5(&s, &verbs, &nouns).unwrap(), 1.0);
    }

    #[test]
    fn too_few_pairs_is_a_configuration_error() {
        let s = one_hot_scores(&[0], &[0], 2, 2);
        assert!(matches!(
            recall_at_5(&s, &[0], &[0]),
            Err(CoreError::Configuration(_))
        ));
    }

    #[test]
    fn top_scoring_true_pair_is_counted() {
        let s = one_hot_scores(&[2], &[3], 4, 5);
        assert_eq!(recall_at_5(&s, &[2], &[3]).unwrap(), 1.0);
        assert_eq!(recall_at_5(&s, &[0], &[0]).unwrap(), 0.0);
    }

    /// Exhaustive oracle: sort all pairs by (score desc, verb, noun) and
    /// take the first five.
    pub fn recall_at_5_exhaustive(
        scores: &ActionScores,
        verbs: &[usize],
        nouns: &[usize],
    ) -> f64 {
        let vv = scores.verb_logits.shape()[1];
        let vn = scores.noun_logits.shape()[1];
        let b = scores.batch();
        let mut hits = 0;
        for ri in 0..b {
            let lv = log_softmax_row(&scores.verb_logits.data()[ri * vv..(ri + 1) * vv]);
            let ln = log_softmax_row(&scores.noun_logits.data()[ri * vn..(ri + 1) * vn]);
            let mut pairs: Vec<(f64, usize, usize)> = (0..vv)
                .flat_map(|vi| (0..vn).map(move |ni| (vi, ni)))
                .map(|(vi, ni)| (lv[vi] + ln[ni], vi, ni))
                .collect();
            pairs.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then((a.1, a.2).cmp(&(b.1, b.2)))
            });
            if pairs[..5]
                .iter()
                .any(|&(_, vi, ni)| vi == verbs[ri] && ni == nouns[ri])
            {
                hits += 1;
            }
        }
        hits as f64 / b as f64
    }

    #[test]
    fn recall_matches_exhaustive_oracle_on_random_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, vv, vn) = (100, 8, 12);
        let s = ActionScores {
            verb_logits: Tensor::randn(&[b, vv], 2.0, &mut rng),
            noun_logits: Tensor::randn(&[b, vn], 2.0, &mut rng),
        };
        let verbs: Vec<usize> = (0..b).map(|i| (i * 5) % vv).collect();
        let nouns: Vec<usize> = (0..b).map(|i| (i * 7) % vn).collect();
        let fast = recall_at_5(&s, &verbs, &nouns).unwrap();
        let slow = recall_at_5_exhaustive(&s, &verbs, &nouns);
        assert_eq!(fast, slow);
    }

    #[test]
    fn recall_tie_break_prefers_low_indices() {
        // all-equal logits: every pair ties; the five kept must be
        // (0,0) (0,1) (0,2) (1,0) (1,1) under (verb, noun) ascending order
        // for vn = 3.
        let s = ActionScores {
            verb_logits: Tensor::zeros(&[1, 3]),
            noun_logits: Tensor::zeros(&[1, 3]),
        };
        assert_eq!(recall_at_5(&s, &[0], &[0]).unwrap(), 1.0);
        assert_eq!(recall_at_5(&s, &[1], &[1]).unwrap(), 1.0);
        assert_eq!(recall_at_5(&s, &[1], &[2]).unwrap(), 0.0);
        assert_eq!(recall_at_5(&s, &[2], &[2]).unwrap(), 0.0);
    }
}
