use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{CiderScorer, ImageAttributes, ImageSide, Scorer};

/// Reward terms of one beam candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub p_tar: f64,
    pub p_rec: f64,
    pub cider: f64,
    pub r: f64,
}

/// Rewards of one beam plus its mean-reward baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    pub rows: Vec<RewardRow>,
    pub baseline: f64,
}

impl RewardBundle {
    pub fn new(rows: Vec<RewardRow>) -> Self {
        let r: Vec<f64> = rows.iter().map(|row| row.r).collect();
        Self {
            baseline: baseline(&r),
            rows,
        }
    }

    /// Bundle with bare rewards (other terms zero).
    pub fn from_rewards(rewards: &[f64]) -> Self {
        Self::new(
            rewards
                .iter()
                .map(|&r| RewardRow {
                    p_tar: 0.0,
                    p_rec: 0.0,
                    cider: 0.0,
                    r,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `r_i - b` per candidate.
    pub fn advantages(&self) -> Vec<f64> {
        self.rows.iter().map(|row| row.r - self.baseline).collect()
    }

    pub fn mean_reward(&self) -> f64 {
        self.rows.iter().map(|row| row.r).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

/// Beam mean, computed as an offset from the first reward so that a beam of
/// identical rewards yields a baseline equal to them bit for bit.
fn baseline(r: &[f64]) -> f64 {
    match r.first() {
        None => 0.0,
        Some(&r0) => r0 + r.iter().map(|x| x - r0).sum::<f64>() / r.len() as f64,
    }
}

/// `r = λ1·P_tar + λ2·P_rec + λ3·CIDEr-D`, with CIDEr-D document frequencies
/// fixed by the scorer's corpus.
pub struct RewardFunction<'a> {
    pub scorer: &'a dyn Scorer,
    pub cider: &'a CiderScorer,
    pub lambdas: [f64; 3],
}

impl RewardFunction<'_> {
    pub fn compute_reward(
        &self,
        candidate: &str,
        references: &[String],
        target: &ImageAttributes,
        receptacle: &ImageAttributes,
    ) -> Result<RewardRow> {
        let p_tar = self.scorer.score(candidate, references, ImageSide::Target, target)?;
        let p_rec = self.scorer.score(candidate, references, ImageSide::Receptacle, receptacle)?;
        let cider = self.cider.score(candidate, references)?;
        Ok(combine(self.lambdas, p_tar, p_rec, cider))
    }
}

pub fn combine(lambdas: [f64; 3], p_tar: f64, p_rec: f64, cider: f64) -> RewardRow {
    RewardRow {
        p_tar,
        p_rec,
        cider,
        r: lambdas[0] * p_tar + lambdas[1] * p_rec + lambdas[2] * cider,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{tokenize_for_metrics, StubPolosScorer};
    use proptest::prelude::*;

    #[test]
    fn direct_substitution() {
        assert_eq!(combine([0.25, 0.25, 0.5], 1.0, 1.0, 10.0).r, 5.5);
        assert_eq!(combine([0.0, 0.0, 1.0], 0.3, 0.7, 2.375).r, 2.375);
    }

    #[test]
    fn stub_and_cider_toy_case_matches_hand_arithmetic() {
        // Corpus of two reference sets; the candidate is a reference of the
        // first sample and shares nothing with the second.
        let refs_a = vec!["put the red cup on the table".to_string(), "move the red cup".to_string()];
        let refs_b = vec!["bring a blue plate".to_string()];
        let corpus: Vec<Vec<String>> = vec![refs_a.clone(), refs_b];
        let cider = CiderScorer::new(&corpus);
        let target = ImageAttributes {
            image_id: "t".into(),
            words: vec!["red".into(), "cup".into(), "kitchen".into()],
        };
        let receptacle = ImageAttributes {
            image_id: "r".into(),
            words: vec!["wooden".into(), "table".into(), "kitchen".into()],
        };
        let f = RewardFunction {
            scorer: &StubPolosScorer,
            cider: &cider,
            lambdas: [0.25, 0.25, 0.5],
        };
        let cand = "move the red cup";
        let row = f.compute_reward(cand, &refs_a, &target, &receptacle).unwrap();
        // Stub: F1 = 1 against the second reference; coverage 2/3 and 0/3.
        assert!((row.p_tar - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!((row.p_rec - 0.5).abs() < 1e-12);

        // CIDEr-D by hand over M = 2 documents from explicit tf-idf vectors.
        let grams = |s: &str, n: usize| -> Vec<Vec<String>> {
            let t = tokenize_for_metrics(s);
            if t.len() < n {
                return vec![];
            }
            (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
        };
        let df = |g: &Vec<String>| -> f64 {
            let in_b = corpus[1].iter().any(|r| grams(r, g.len()).contains(g));
            let in_a = corpus[0].iter().any(|r| grams(r, g.len()).contains(g));
            (in_a as u8 + in_b as u8) as f64
        };
        let mut total = 0.0;
        for reference in &refs_a {
            let len_diff = tokenize_for_metrics(cand).len() as f64 - tokenize_for_metrics(reference).len() as f64;
            let penalty = (-(len_diff * len_diff) / (2.0 * 36.0)).exp();
            let mut per_n = 0.0;
            for n in 1..=4 {
                let vec_of = |s: &str| {
                    let mut m = std::collections::BTreeMap::<Vec<String>, f64>::new();
                    for g in grams(s, n) {
                        let w = 2f64.ln() - df(&g).max(1.0).ln();
                        *m.entry(g).or_insert(0.0) += w;
                    }
                    m
                };
                let (c, r) = (vec_of(cand), vec_of(reference));
                let dot: f64 = c.iter().map(|(g, &w)| w.min(*r.get(g).unwrap_or(&0.0)) * r.get(g).unwrap_or(&0.0)).sum();
                let nc = c.values().map(|w| w * w).sum::<f64>().sqrt();
                let nr = r.values().map(|w| w * w).sum::<f64>().sqrt();
                if nc > 0.0 && nr > 0.0 {
                    per_n += penalty * dot / (nc * nr);
                }
            }
            total += per_n / 4.0;
        }
        let want = 10.0 * total / refs_a.len() as f64;
        assert!((row.cider - want).abs() < 1e-9, "{} vs {}", row.cider, want);
        assert!((row.r - (0.25 * row.p_tar + 0.25 * row.p_rec + 0.5 * want)).abs() < 1e-12);
    }

    #[test]
    fn missing_scorer_data_propagates() {
        let cider = CiderScorer::new(&[vec!["a b".to_string()]]);
        let f = RewardFunction {
            scorer: &StubPolosScorer,
            cider: &cider,
            lambdas: [1.0, 1.0, 1.0],
        };
        let empty = ImageAttributes::default();
        assert!(f.compute_reward("a b", &["a b".into()], &empty, &empty).is_err());
    }

    proptest! {
        #[test]
        fn advantages_sum_to_zero(r in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let b = RewardBundle::from_rewards(&r);
            let s: f64 = b.advantages().iter().sum();
            prop_assert!(s.abs() < 1e-9);
        }

        #[test]
        fn constant_beams_have_exactly_zero_advantage(c in -1e3f64..1e3, k in 1usize..10) {
            let b = RewardBundle::from_rewards(&vec![c; k]);
            prop_assert!(b.advantages().iter().all(|&a| a == 0.0));
        }
    }
}
