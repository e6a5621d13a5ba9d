//! Synthetic click logs with a planted order-dependent signal.
//!
//! Items are split into categories. Browsing follows a first-order Markov
//! chain over categories: the next category is the fixed successor of the
//! current one with probability `follow_prob`, otherwise uniform. The target
//! is either drawn from the successor category of the last event or
//! uniformly at random. The click logit is
//!
//! ```text
//! Σ_k decay^(k-1) * compat(e_k, target) + group + item - beta
//! compat(e, t) = alpha * [cat(t) == succ(cat(e))] + u[cat(e)]
//! ```
//!
//! where `e_1` is the most recent event, so both recency and order matter,
//! and `u` is a fixed per-category offset. `beta` is solved numerically to
//! hit `click_prior`.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, InteractionEvent, TargetItem};
use crate::error::{Error, Result};
use crate::rng::stream;

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const GROUP_COLUMN: &str = "user_group";
pub const HOUR_COLUMN: &str = "hour";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub num_examples: usize,
    pub num_items: usize,
    pub num_categories: usize,
    pub days: usize,
    pub max_history: usize,
    /// Probability that the next browsed category is the successor.
    pub follow_prob: f64,
    /// Probability that the target comes from the successor of the last
    /// event's category.
    pub successor_target_prob: f64,
    pub signal_strength: f64,
    /// Half-width of the uniform per-category term added to every browsed
    /// event's compatibility, independent of the target.
    pub category_effect: f64,
    pub recency_decay: f64,
    pub user_groups: usize,
    /// Half-width of the uniform per-group logit offset.
    pub group_effect: f64,
    /// Half-width of the uniform per-item logit offset.
    pub item_effect: f64,
    pub click_prior: f64,
    /// Day-aligned epoch second of the first day.
    pub start_time: i64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            num_examples: 60_000,
            num_items: 1000,
            num_categories: 20,
            days: 8,
            max_history: 30,
            follow_prob: 0.9,
            successor_target_prob: 0.3,
            signal_strength: 2.0,
            category_effect: 6.0,
            recency_decay: 0.8,
            user_groups: 8,
            group_effect: 0.0,
            item_effect: 0.0,
            click_prior: 0.3,
            start_time: 17_361 * SECONDS_PER_DAY,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_examples == 0 {
            return bad("synth: num_examples must be positive".into());
        }
        if self.num_categories == 0 || self.num_items < self.num_categories {
            return bad(format!(
                "synth: need at least one item per category ({} items, {} categories)",
                self.num_items, self.num_categories
            ));
        }
        if self.days == 0 || self.user_groups == 0 {
            return bad("synth: days and user_groups must be positive".into());
        }
        for (name, p) in [
            ("follow_prob", self.follow_prob),
            ("successor_target_prob", self.successor_target_prob),
            ("recency_decay", self.recency_decay),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("synth: {name} = {p} outside [0, 1]"));
            }
        }
        if !(self.click_prior > 0.0 && self.click_prior < 1.0) {
            return bad(format!("synth: click_prior {} outside (0, 1)", self.click_prior));
        }
        for (name, v) in [
            ("signal_strength", self.signal_strength),
            ("category_effect", self.category_effect),
            ("group_effect", self.group_effect),
            ("item_effect", self.item_effect),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("synth: {name} = {v} must be finite and non-negative"));
            }
        }
        if self.start_time < 0 {
            return bad("synth: start_time must be non-negative".into());
        }
        Ok(())
    }

    /// First second of day `day` (0-based).
    pub fn day_start(&self, day: usize) -> i64 {
        self.start_time + day as i64 * SECONDS_PER_DAY
    }
}

/// A generated example with the generator's own scores attached.
#[derive(Clone, Debug)]
pub struct SynthExample {
    pub example: Example,
    /// True click probability (the Bayes-optimal score).
    pub probability: f64,
    /// Probability from the same logit with the recency weights replaced by
    /// their mean, i.e. a function of the unordered history only.
    pub order_blind_score: f64,
}

/// The fixed latent structure behind one seed.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    params: SynthParams,
    successor: Vec<usize>,
    category_bias: Vec<f64>,
    group_bias: Vec<f64>,
    item_bias: Vec<f64>,
    beta: f64,
}

struct Draw {
    history: Vec<(usize, i64)>,
    target: usize,
    group: usize,
    recommend_time: i64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn unit(rng: &mut impl RngCore) -> f64 {
    f64::from(rng.next_u32()) / 4_294_967_296.0
}

impl SynthWorld {
    pub fn new(params: &SynthParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut rng = stream(seed, "synth/world", 0);
        let c = params.num_categories;
        let mut successor: Vec<usize> = (0..c).collect();
        // Fisher-Yates with integer draws
        for i in (1..c).rev() {
            successor.swap(i, rng.gen_range(0..=i));
        }
        let group_bias = (0..params.user_groups)
            .map(|_| params.group_effect * (2.0 * unit(&mut rng) - 1.0))
            .collect();
        let item_bias = (0..params.num_items)
            .map(|_| params.item_effect * (2.0 * unit(&mut rng) - 1.0))
            .collect();
        let category_bias = (0..c)
            .map(|_| params.category_effect * (2.0 * unit(&mut rng) - 1.0))
            .collect();
        let mut world = SynthWorld {
            params: params.clone(),
            successor,
            category_bias,
            group_bias,
            item_bias,
            beta: 0.0,
        };
        world.beta = world.calibrate(seed);
        Ok(world)
    }

    pub fn params(&self) -> &SynthParams {
        &self.params
    }

    pub fn category_of(&self, item: usize) -> usize {
        item % self.params.num_categories
    }

    pub fn successor(&self, category: usize) -> usize {
        self.successor[category]
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    fn item_in(&self, category: usize, rng: &mut ChaCha8Rng) -> usize {
        let c = self.params.num_categories;
        let per = (self.params.num_items - category).div_ceil(c);
        category + c * rng.gen_range(0..per)
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Draw {
        let p = &self.params;
        let day = rng.gen_range(0..p.days);
        let recommend_time = p.day_start(day) + rng.gen_range(0..SECONDS_PER_DAY);
        let group = rng.gen_range(0..p.user_groups);
        let n = rng.gen_range(0..=p.max_history);

        let mut cats = Vec::with_capacity(n);
        for k in 0..n {
            let cat = if k > 0 && unit(rng) < p.follow_prob {
                self.successor[cats[k - 1]]
            } else {
                rng.gen_range(0..p.num_categories)
            };
            cats.push(cat);
        }
        // timestamps walk backwards from the recommend time
        let mut t = recommend_time;
        let mut times = vec![0; n];
        for slot in times.iter_mut().rev() {
            let gap = match rng.gen_range(0..4u32) {
                0 => rng.gen_range(1..=120),
                1 => rng.gen_range(60..=1_800),
                2 => rng.gen_range(600..=21_600),
                _ => rng.gen_range(3_600..=172_800),
            };
            t = (t - gap).max(0);
            *slot = t;
        }
        let history: Vec<(usize, i64)> = cats
            .iter()
            .zip(times)
            .map(|(&c, ts)| (self.item_in(c, rng), ts))
            .collect();

        let target = match cats.last() {
            Some(&last) if unit(rng) < p.successor_target_prob => {
                self.item_in(self.successor[last], rng)
            }
            _ => rng.gen_range(0..p.num_items),
        };
        Draw {
            history,
            target,
            group,
            recommend_time,
        }
    }

    /// (ordered signal, order-blind signal) before `beta` and offsets.
    fn signals(&self, d: &Draw) -> (f64, f64) {
        let tc = self.category_of(d.target);
        let a = self.params.signal_strength;
        let mut weight = 1.0;
        let mut ordered = 0.0;
        let mut weight_total = 0.0;
        let mut compat_total = 0.0;
        for &(item, _) in d.history.iter().rev() {
            let c = self.category_of(item);
            let hit = if self.successor[c] == tc { a } else { 0.0 };
            let compat = hit + self.category_bias[c];
            ordered += weight * compat;
            compat_total += compat;
            weight_total += weight;
            weight *= self.params.recency_decay;
        }
        let blind = if d.history.is_empty() {
            0.0
        } else {
            compat_total * weight_total / d.history.len() as f64
        };
        (ordered, blind)
    }

    fn offset(&self, d: &Draw) -> f64 {
        self.group_bias[d.group] + self.item_bias[d.target]
    }

    /// Solves for the intercept giving the configured base rate on a
    /// seed-derived calibration sample.
    fn calibrate(&self, seed: u64) -> f64 {
        let mut rng = stream(seed, "synth/calibrate", 0);
        let logits: Vec<f64> = (0..20_000)
            .map(|_| {
                let d = self.draw(&mut rng);
                self.signals(&d).0 + self.offset(&d)
            })
            .collect();
        let rate = |beta: f64| logits.iter().map(|&s| sigmoid(s - beta)).sum::<f64>() / logits.len() as f64;
        let (mut lo, mut hi) = (-50.0, 50.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if rate(mid) > self.params.click_prior {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn materialize(&self, d: Draw, rng: &mut ChaCha8Rng) -> SynthExample {
        let (ordered, blind) = self.signals(&d);
        let off = self.offset(&d) - self.beta;
        let probability = sigmoid(ordered + off);
        let label = u8::from(unit(rng) < probability);
        let hour = (d.recommend_time % SECONDS_PER_DAY) / 3600;
        let mut other_features = BTreeMap::new();
        other_features.insert(GROUP_COLUMN.to_string(), format!("g{}", d.group));
        other_features.insert(HOUR_COLUMN.to_string(), format!("h{hour}"));
        let example = Example {
            sequence: d
                .history
                .iter()
                .map(|&(item, ts)| InteractionEvent {
                    item: format!("i{item}"),
                    cat: format!("c{}", self.category_of(item)),
                    ts,
                })
                .collect(),
            target: TargetItem {
                item: format!("i{}", d.target),
                cat: format!("c{}", self.category_of(d.target)),
            },
            recommend_time: d.recommend_time,
            other_features,
            label,
        };
        SynthExample {
            example,
            probability,
            order_blind_score: sigmoid(blind + off),
        }
    }

    /// Generates `num_examples` examples sorted by recommend time.
    pub fn generate(&self, seed: u64) -> Vec<SynthExample> {
        let mut rng = stream(seed, "synth/examples", 0);
        let mut out: Vec<SynthExample> = (0..self.params.num_examples)
            .map(|_| {
                let d = self.draw(&mut rng);
                self.materialize(d, &mut rng)
            })
            .collect();
        out.sort_by_key(|s| s.example.recommend_time);
        out
    }
}

/// Deterministic synthetic dataset for `seed`.
pub fn synth_generate(params: &SynthParams, seed: u64) -> Result<Vec<Example>> {
    Ok(synth_generate_with_oracle(params, seed)?
        .into_iter()
        .map(|s| s.example)
        .collect())
}

pub fn synth_generate_with_oracle(params: &SynthParams, seed: u64) -> Result<Vec<SynthExample>> {
    Ok(SynthWorld::new(params, seed)?.generate(seed))
}

/// AUC a scorer is expected to reach when labels are Bernoulli draws from
/// `probs`: the probability-weighted fraction of (positive, negative) pairs
/// it orders correctly, ties counting one half.
pub fn expected_auc(scores: &[f64], probs: &[f64]) -> f64 {
    assert_eq!(scores.len(), probs.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut neg_below = 0.0;
    let mut numer = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_neg: f64 = order[i..j].iter().map(|&k| 1.0 - probs[k]).sum();
        for &k in &order[i..j] {
            let p = probs[k];
            numer += p * (neg_below + 0.5 * (group_neg - (1.0 - p)));
        }
        neg_below += group_neg;
        i = j;
    }
    let pos: f64 = probs.iter().sum();
    let neg: f64 = probs.iter().map(|p| 1.0 - p).sum();
    let self_pairs: f64 = probs.iter().map(|p| p * (1.0 - p)).sum();
    numer / (pos * neg - self_pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthParams {
        SynthParams {
            num_examples: 2000,
            ..SynthParams::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(&small(), 5).unwrap();
        let b = synth_generate(&small(), 5).unwrap();
        let c = synth_generate(&small(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn examples_are_valid() {
        let p = small();
        for e in synth_generate(&p, 1).unwrap() {
            e.validate().unwrap();
            assert!(e.sequence.len() <= p.max_history);
            assert!(e.recommend_time >= p.day_start(0) && e.recommend_time < p.day_start(p.days));
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = small();
        p.click_prior = 1.0;
        assert!(matches!(synth_generate(&p, 0), Err(Error::Config(_))));
        let mut p = small();
        p.num_items = 3;
        assert!(synth_generate(&p, 0).is_err());
    }

    #[test]
    fn expected_auc_matches_pair_enumeration() {
        let scores = [0.1, 0.4, 0.4, 0.9, 0.2, 0.7];
        let probs = [0.2, 0.5, 0.1, 0.8, 0.3, 0.6];
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if i == j {
                    continue;
                }
                let w = probs[i] * (1.0 - probs[j]);
                den += w;
                if scores[i] > scores[j] {
                    num += w;
                } else if scores[i] == scores[j] {
                    num += 0.5 * w;
                }
            }
        }
        assert!((expected_auc(&scores, &probs) - num / den).abs() < 1e-12);
    }
}
