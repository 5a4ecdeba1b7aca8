//! Presentation-attack detection error rates.
//!
//! Higher scores mean "more live". A sample is accepted as live when its
//! score is at least the threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One scored sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub live: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_type: Option<String>,
}

impl ScoredSample {
    pub fn new(score: f64, live: bool) -> Self {
        ScoredSample {
            score,
            live,
            attack_type: None,
        }
    }
}

/// Rates at one threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// `null` in JSON stands for +∞ (everything rejected).
    #[serde(with = "inf_as_null")]
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

fn counts(samples: &[ScoredSample]) -> (usize, usize) {
    let live = samples.iter().filter(|s| s.live).count();
    (live, samples.len() - live)
}

/// Fraction of attacks accepted (`score ≥ t`); `NaN` without attacks.
pub fn apcer(samples: &[ScoredSample], t: f64) -> f64 {
    let attacks: Vec<_> = samples.iter().filter(|s| !s.live).collect();
    attacks.iter().filter(|s| s.score >= t).count() as f64 / attacks.len() as f64
}

/// Fraction of live samples rejected (`score < t`); `NaN` without live ones.
pub fn bpcer(samples: &[ScoredSample], t: f64) -> f64 {
    let live: Vec<_> = samples.iter().filter(|s| s.live).collect();
    live.iter().filter(|s| s.score < t).count() as f64 / live.len() as f64
}

pub fn rates_at(samples: &[ScoredSample], t: f64) -> SweepPoint {
    let (a, b) = (apcer(samples, t), bpcer(samples, t));
    SweepPoint {
        threshold: t,
        apcer: a,
        bpcer: b,
        acer: (a + b) / 2.0,
    }
}

/// Rates at every distinct score plus +∞, ascending. These thresholds reach
/// every achievable (APCER, BPCER) pair.
pub fn sweep(samples: &[ScoredSample]) -> Vec<SweepPoint> {
    let (n_live, n_attack) = counts(samples);
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut out = Vec::new();
    // below the threshold so far
    let (mut live_below, mut attack_below) = (0usize, 0usize);
    let mut i = 0;
    while i <= sorted.len() {
        let t = sorted.get(i).map_or(f64::INFINITY, |s| s.score);
        let a = (n_attack - attack_below) as f64 / n_attack as f64;
        let b = live_below as f64 / n_live as f64;
        out.push(SweepPoint {
            threshold: t,
            apcer: a,
            bpcer: b,
            acer: (a + b) / 2.0,
        });
        if i == sorted.len() {
            break;
        }
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].live {
                live_below += 1;
            } else {
                attack_below += 1;
            }
            i += 1;
        }
    }
    out
}

/// The sweep point minimising `|APCER − BPCER|`; ties go to the smaller
/// ACER, then the lower threshold.
pub fn eer_point(points: &[SweepPoint]) -> Option<SweepPoint> {
    points
        .iter()
        .filter(|p| p.apcer.is_finite() && p.bpcer.is_finite())
        .min_by(|x, y| {
            let dx = (x.apcer - x.bpcer).abs();
            let dy = (y.apcer - y.bpcer).abs();
            dx.total_cmp(&dy)
                .then(x.acer.total_cmp(&y.acer))
                .then(x.threshold.total_cmp(&y.threshold))
        })
        .copied()
}

/// Probability that a live sample outscores an attack, ties counted half.
/// `None` when either class is absent.
pub fn auc(samples: &[ScoredSample]) -> Option<f64> {
    let (n_live, n_attack) = counts(samples);
    if n_live == 0 || n_attack == 0 {
        return None;
    }
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // twice the Mann-Whitney count, to stay in integers
    let mut twice_u: u64 = 0;
    let mut attacks_below = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut live_here, mut attack_here) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            if sorted[j].live {
                live_here += 1;
            } else {
                attack_here += 1;
            }
            j += 1;
        }
        twice_u += live_here * (2 * attacks_below + attack_here);
        attacks_below += attack_here;
        i = j;
    }
    Some(twice_u as f64 / (2 * n_live as u64 * n_attack as u64) as f64)
}

/// How the operating threshold was chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// EER threshold of a separate development split.
    DevEer,
    /// EER threshold of the evaluated set itself (optimistic).
    TestEer,
    Fixed { threshold: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub policy: ThresholdPolicy,
    #[serde(with = "inf_as_null")]
    pub threshold: f64,
    /// Set when the threshold was tuned on the evaluated samples.
    pub tuned_on_test: bool,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_live: usize,
    pub n_attack: usize,
    pub threshold_policy: PolicyRecord,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    /// EER of the evaluated set; `None` when a class is missing.
    pub eer: Option<f64>,
    pub auc: Option<f64>,
    /// Half total error at a threshold fixed on the development split.
    pub hter: Option<f64>,
    /// APCER per attack type tag.
    pub apcer_by_attack: BTreeMap<String, f64>,
    /// Worst per-type APCER.
    pub apcer_max_over_types: Option<f64>,
    pub sweep: Vec<SweepPoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn eer_value(p: &SweepPoint) -> f64 {
    (p.apcer + p.bpcer) / 2.0
}

/// Full report. With a dev split the threshold is its EER threshold and HTER
/// is reported; without one the test EER threshold is used and flagged.
pub fn evaluate_scores(test: &[ScoredSample], dev: Option<&[ScoredSample]>, policy: Option<ThresholdPolicy>) -> EvalReport {
    let (n_live, n_attack) = counts(test);
    let mut warnings = Vec::new();
    if n_live == 0 || n_attack == 0 {
        warnings.push("only one class present: EER and AUC are undefined".to_string());
    }
    let points = sweep(test);
    let test_eer = if n_live > 0 && n_attack > 0 { eer_point(&points) } else { None };

    let policy = policy.unwrap_or(if dev.is_some() {
        ThresholdPolicy::DevEer
    } else {
        ThresholdPolicy::TestEer
    });
    let record = match (&policy, dev) {
        (ThresholdPolicy::Fixed { threshold }, _) => PolicyRecord {
            policy: policy.clone(),
            threshold: *threshold,
            tuned_on_test: false,
            note: "fixed threshold".into(),
        },
        (ThresholdPolicy::DevEer, Some(dev)) => {
            let (dl, da) = counts(dev);
            let p = if dl > 0 && da > 0 { eer_point(&sweep(dev)) } else { None };
            match p {
                Some(p) => PolicyRecord {
                    policy: policy.clone(),
                    threshold: p.threshold,
                    tuned_on_test: false,
                    note: "EER threshold of the development split".into(),
                },
                None => {
                    warnings.push("development split lacks a class; fell back to the test EER threshold".into());
                    test_policy(test_eer)
                }
            }
        }
        (ThresholdPolicy::DevEer, None) => {
            warnings.push("no development split given; fell back to the test EER threshold".into());
            test_policy(test_eer)
        }
        (ThresholdPolicy::TestEer, _) => test_policy(test_eer),
    };
    let at = rates_at(test, record.threshold);
    let hter = (dev.is_some() && !record.tuned_on_test && n_live > 0 && n_attack > 0).then_some(at.acer);

    let mut apcer_by_attack = BTreeMap::new();
    let mut tags: Vec<&str> = test
        .iter()
        .filter(|s| !s.live)
        .filter_map(|s| s.attack_type.as_deref())
        .collect();
    tags.sort_unstable();
    tags.dedup();
    for tag in tags {
        let subset: Vec<ScoredSample> = test
            .iter()
            .filter(|s| !s.live && s.attack_type.as_deref() == Some(tag))
            .cloned()
            .collect();
        apcer_by_attack.insert(tag.to_string(), apcer(&subset, record.threshold));
    }
    let apcer_max_over_types = apcer_by_attack.values().copied().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));

    EvalReport {
        n_live,
        n_attack,
        threshold_policy: record,
        apcer: at.apcer,
        bpcer: at.bpcer,
        acer: at.acer,
        eer: test_eer.as_ref().map(eer_value),
        auc: auc(test),
        hter,
        apcer_by_attack,
        apcer_max_over_types,
        sweep: points,
        warnings,
    }
}

fn test_policy(p: Option<SweepPoint>) -> PolicyRecord {
    PolicyRecord {
        policy: ThresholdPolicy::TestEer,
        threshold: p.map_or(f64::INFINITY, |p| p.threshold),
        tuned_on_test: true,
        note: "EER threshold of the evaluated set (no development split)".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn samples(live: &[f64], attack: &[f64]) -> Vec<ScoredSample> {
        live.iter()
            .map(|&s| ScoredSample::new(s, true))
            .chain(attack.iter().map(|&s| ScoredSample::new(s, false)))
            .collect()
    }

    /// Every score, every midpoint and both infinities; same tie rule.
    fn brute_eer(s: &[ScoredSample]) -> f64 {
        let mut cands = vec![f64::NEG_INFINITY, f64::INFINITY];
        for a in s {
            cands.push(a.score);
            for b in s {
                cands.push((a.score + b.score) / 2.0);
            }
        }
        let mut best = (f64::INFINITY, f64::INFINITY);
        for t in cands {
            let a = s.iter().filter(|x| !x.live && x.score >= t).count() as f64
                / s.iter().filter(|x| !x.live).count() as f64;
            let b = s.iter().filter(|x| x.live && x.score < t).count() as f64
                / s.iter().filter(|x| x.live).count() as f64;
            let key = ((a - b).abs(), (a + b) / 2.0);
            if key < best {
                best = key;
            }
        }
        best.1
    }

    fn brute_auc(s: &[ScoredSample]) -> f64 {
        let mut acc = 0.0;
        let mut pairs = 0.0;
        for l in s.iter().filter(|x| x.live) {
            for a in s.iter().filter(|x| !x.live) {
                pairs += 1.0;
                if l.score > a.score {
                    acc += 1.0;
                } else if l.score == a.score {
                    acc += 0.5;
                }
            }
        }
        acc / pairs
    }

    #[test]
    fn definitional_rates() {
        let live: Vec<f64> = (0..10).map(|i| if i == 0 { 0.1 } else { 0.9 }).collect();
        let attack: Vec<f64> = (0..10).map(|i| if i < 2 { 0.8 } else { 0.2 }).collect();
        let p = rates_at(&samples(&live, &attack), 0.5);
        assert_eq!((p.apcer, p.bpcer), (0.2, 0.1));
        assert!((p.acer - 0.15).abs() < 1e-15);
    }

    #[test]
    fn perfect_separation() {
        let s = samples(&[2.0, 2.5, 3.0], &[0.0, 0.5, 1.0]);
        let r = evaluate_scores(&s, None, None);
        assert_eq!(r.eer, Some(0.0));
        assert_eq!(r.auc, Some(1.0));
        assert_eq!(r.acer, 0.0);
        assert!(r.threshold_policy.tuned_on_test);
    }

    #[test]
    fn random_lists_match_sweep_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let s: Vec<ScoredSample> = (0..20)
                .map(|i| ScoredSample::new((rng.random_range(0..8) as f64) * 0.25, i % 3 != 0))
                .collect();
            let r = evaluate_scores(&s, None, None);
            assert!((r.eer.unwrap() - brute_eer(&s)).abs() < 1e-9);
            assert!((r.auc.unwrap() - brute_auc(&s)).abs() < 1e-9);
        }
    }

    #[test]
    fn one_class_reports_undefined() {
        let s = samples(&[1.0, 2.0], &[]);
        let r = evaluate_scores(&s, None, None);
        assert_eq!(r.eer, None);
        assert_eq!(r.auc, None);
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn dev_threshold_gives_hter_and_per_type_apcer() {
        let dev = samples(&[0.6, 0.7, 0.9], &[0.1, 0.2, 0.4]);
        let mut test = samples(&[0.5, 0.8, 0.95, 0.3], &[]);
        for (s, tag) in [(0.45, "print"), (0.1, "print"), (0.7, "replay"), (0.2, "replay")] {
            test.push(ScoredSample {
                score: s,
                live: false,
                attack_type: Some(tag.into()),
            });
        }
        let r = evaluate_scores(&test, Some(&dev), None);
        // dev EER threshold is its lowest live score
        assert_eq!(r.threshold_policy.threshold, 0.6);
        assert!(!r.threshold_policy.tuned_on_test);
        assert_eq!((r.apcer, r.bpcer), (0.25, 0.5));
        assert_eq!(r.hter, Some(0.375));
        assert_eq!(r.apcer_by_attack["print"], 0.0);
        assert_eq!(r.apcer_by_attack["replay"], 0.5);
        assert_eq!(r.apcer_max_over_types, Some(0.5));
    }

    #[test]
    fn report_json_round_trip_keeps_infinity() {
        let s = samples(&[1.0], &[0.0]);
        let r = evaluate_scores(&s, None, None);
        let text = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.sweep.last().unwrap().threshold, f64::INFINITY);
        assert_eq!(back, r);
    }

    fn arb_samples() -> impl Strategy<Value = Vec<ScoredSample>> {
        prop::collection::vec((0u8..12, any::<bool>()), 2..40).prop_map(|v| {
            let mut s: Vec<ScoredSample> = v.into_iter().map(|(x, l)| ScoredSample::new(x as f64 / 4.0, l)).collect();
            s[0].live = true;
            s[1].live = false;
            s
        })
    }

    proptest! {
        #[test]
        fn acer_is_mean_and_rates_monotone(s in arb_samples()) {
            let pts = sweep(&s);
            for w in pts.windows(2) {
                prop_assert!(w[1].apcer <= w[0].apcer);
                prop_assert!(w[1].bpcer >= w[0].bpcer);
            }
            for p in &pts {
                prop_assert_eq!(p.acer, (p.apcer + p.bpcer) / 2.0);
                prop_assert!((0.0..=1.0).contains(&p.apcer) && (0.0..=1.0).contains(&p.bpcer));
                let direct = rates_at(&s, p.threshold);
                prop_assert_eq!(direct, *p);
            }
        }

        #[test]
        fn auc_invariant_under_monotone_maps(s in arb_samples()) {
            let mapped: Vec<ScoredSample> = s
                .iter()
                .map(|x| ScoredSample::new((3.0 * x.score).exp() - 7.0, x.live))
                .collect();
            prop_assert_eq!(auc(&s), auc(&mapped));
            prop_assert!((auc(&s).unwrap() - brute_auc(&s)).abs() < 1e-12);
        }
    }
}
