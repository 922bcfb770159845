//! Trial lists, score files, detection metrics (EER, minimum DCF, DET),
//! score fusion and randomized trial construction.
//!
//! Throughout, a trial is accepted at threshold `t` iff its score is strictly
//! greater than `t`, so a score sitting exactly on the threshold is a
//! rejection. The threshold sweep visits minus infinity followed by every
//! distinct score in ascending order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::{index, IndexedRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{SpeakerModel, TrainedBackend};
use crate::error::{Error, Result};

/// One verification attempt: a claimed speaker and a test segment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn new(trials: Vec<Trial>) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::InvalidArgument("empty trial set".into()));
        }
        Ok(TrialSet { trials })
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }

    pub fn n_nontargets(&self) -> usize {
        self.len() - self.n_targets()
    }

    /// Parses `<enroll> <test> target|nontarget` lines.
    pub fn parse(text: &str, what: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse {
                what: what.to_string(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [enroll, test, label] = fields[..] else {
                return Err(parse_err("expected three fields"));
            };
            let target = match label {
                "target" => true,
                "nontarget" => false,
                _ => return Err(parse_err("label must be `target` or `nontarget`")),
            };
            trials.push(Trial {
                enroll: enroll.to_string(),
                test: test.to_string(),
                target,
            });
        }
        TrialSet::new(trials)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.trials {
            let label = if t.target { "target" } else { "nontarget" };
            let _ = writeln!(out, "{} {} {label}", t.enroll, t.test);
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Scores aligned with a trial set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrials {
    pub trials: TrialSet,
    pub scores: Vec<f64>,
}

impl ScoredTrials {
    pub fn new(trials: TrialSet, scores: Vec<f64>) -> Result<Self> {
        if trials.len() != scores.len() {
            return Err(Error::DimensionMismatch {
                context: "scores vs. trials",
                expected: trials.len(),
                got: scores.len(),
            });
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite { row: i, col: 0 });
        }
        Ok(ScoredTrials { trials, scores })
    }

    /// Builds anonymous trials (`e<i>`/`t<i>`) from `(score, is_target)`
    /// pairs, for metric computations that need nothing but the labels.
    pub fn from_labeled(pairs: &[(f64, bool)]) -> Result<Self> {
        let trials = pairs
            .iter()
            .enumerate()
            .map(|(i, &(_, target))| Trial {
                enroll: format!("e{i}"),
                test: format!("t{i}"),
                target,
            })
            .collect();
        let scores = pairs.iter().map(|p| p.0).collect();
        ScoredTrials::new(TrialSet::new(trials)?, scores)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn labeled(&self) -> impl Iterator<Item = (f64, bool)> + '_ {
        self.scores.iter().zip(&self.trials.trials).map(|(&s, t)| (s, t.target))
    }

    fn class_scores(&self) -> (Vec<f64>, Vec<f64>) {
        let mut tar = Vec::new();
        let mut non = Vec::new();
        for (s, target) in self.labeled() {
            if target {
                tar.push(s);
            } else {
                non.push(s);
            }
        }
        (tar, non)
    }

    /// `<enroll> <test> <score>` lines, scores to six decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, s) in self.trials.trials.iter().zip(&self.scores) {
            let _ = writeln!(out, "{} {} {s:.6}", t.enroll, t.test);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }

    /// Reads a score file and attaches labels from `trials`; the file must
    /// list the same trials in the same order.
    pub fn read(path: &Path, trials: &TrialSet) -> Result<Self> {
        let what = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut scores = Vec::with_capacity(trials.len());
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        for trial in &trials.trials {
            let (i, line) = lines.next().ok_or(Error::TrialMismatch)?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [enroll, test, score] = fields[..] else {
                return Err(Error::Parse {
                    what,
                    line: i + 1,
                    msg: "expected three fields".into(),
                });
            };
            if enroll != trial.enroll || test != trial.test {
                return Err(Error::TrialMismatch);
            }
            scores.push(score.parse::<f64>().map_err(|e| Error::Parse {
                what: what.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        if lines.next().is_some() {
            return Err(Error::TrialMismatch);
        }
        ScoredTrials::new(trials.clone(), scores)
    }
}

/// Miss and false-alarm rates at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Every operating point of the sweep, thresholds ascending; the first point
/// (threshold minus infinity) accepts everything.
pub fn operating_points(scored: &ScoredTrials) -> Result<Vec<OperatingPoint>> {
    let mut pairs: Vec<(f64, bool)> = scored.labeled().collect();
    let n_tar = pairs.iter().filter(|p| p.1).count();
    let n_non = pairs.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::SingleClass);
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (n_tar as f64, n_non as f64);
    let mut points = Vec::with_capacity(pairs.len() + 1);
    points.push(OperatingPoint {
        threshold: f64::NEG_INFINITY,
        p_miss: 0.0,
        p_fa: 1.0,
    });
    let (mut misses, mut rejected_non) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                misses += 1;
            } else {
                rejected_non += 1;
            }
            i += 1;
        }
        points.push(OperatingPoint {
            threshold: t,
            p_miss: misses as f64 / nt,
            p_fa: (n_non - rejected_non) as f64 / nn,
        });
    }
    Ok(points)
}

/// Linear interpolation at the crossing of two adjacent operating points,
/// where `p_fa - p_miss` changes sign.
pub(crate) fn crossing(p0: (f64, f64), p1: (f64, f64)) -> f64 {
    let (pm0, pf0) = p0;
    let (pm1, pf1) = p1;
    let d0 = pf0 - pm0;
    let d1 = pf1 - pm1;
    let alpha = d0 / (d0 - d1);
    pm0 + alpha * (pm1 - pm0)
}

/// Equal error rate as a fraction in `[0, 1]`.
pub fn eer(scored: &ScoredTrials) -> Result<f64> {
    let points = operating_points(scored)?;
    // the first point has p_miss = 0 < p_fa = 1 and the last has p_fa = 0,
    // so a crossing always exists after index 0
    let k = points
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("sweep ends with p_fa = 0");
    let (a, b) = (&points[k - 1], &points[k]);
    if b.p_miss == b.p_fa {
        return Ok(b.p_miss);
    }
    Ok(crossing((a.p_miss, a.p_fa), (b.p_miss, b.p_fa)))
}

/// Detection cost parameters and reporting convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcfParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
    /// Divide by the cost of the better trivial system.
    pub normalize: bool,
    pub report_scale: f64,
}

impl DcfParams {
    /// SRE'08 costs, reported unnormalized and multiplied by 100.
    pub const DCF08: DcfParams = DcfParams {
        c_miss: 10.0,
        c_fa: 1.0,
        p_target: 0.01,
        normalize: false,
        report_scale: 100.0,
    };

    /// SRE'10 costs, reported normalized.
    pub const DCF10: DcfParams = DcfParams {
        c_miss: 1.0,
        c_fa: 1.0,
        p_target: 0.001,
        normalize: true,
        report_scale: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let positive = self.c_miss > 0.0 && self.c_fa > 0.0 && self.report_scale > 0.0;
        if !positive || !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::InvalidArgument(format!("invalid DCF parameters {self:?}")));
        }
        Ok(())
    }

    pub fn cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        self.c_miss * self.p_target * p_miss + self.c_fa * (1.0 - self.p_target) * p_fa
    }

    /// Cost of always accepting or always rejecting, whichever is lower.
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    /// Applies normalization and scaling to a raw cost.
    pub fn report(&self, raw: f64) -> f64 {
        let v = if self.normalize { raw / self.default_cost() } else { raw };
        v * self.report_scale
    }
}

/// Unnormalized, unscaled minimum detection cost over the sweep.
pub fn min_dcf_raw(scored: &ScoredTrials, params: &DcfParams) -> Result<f64> {
    params.validate()?;
    Ok(operating_points(scored)?
        .iter()
        .map(|p| params.cost(p.p_miss, p.p_fa))
        .fold(f64::INFINITY, f64::min))
}

/// Minimum detection cost in the reporting convention of `params`.
pub fn min_dcf(scored: &ScoredTrials, params: &DcfParams) -> Result<f64> {
    Ok(params.report(min_dcf_raw(scored, params)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetPoint {
    pub p_fa: f64,
    pub p_miss: f64,
}

/// DET curve points in threshold order (`p_fa` falling, `p_miss` rising).
pub fn det_curve(scored: &ScoredTrials) -> Result<Vec<DetPoint>> {
    Ok(operating_points(scored)?
        .into_iter()
        .map(|p| DetPoint {
            p_fa: p.p_fa,
            p_miss: p.p_miss,
        })
        .collect())
}

pub fn det_csv(points: &[DetPoint]) -> String {
    let mut out = String::from("p_fa,p_miss\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.p_fa, p.p_miss);
    }
    out
}

/// Per-trial mean of several systems' scores on the same trial set.
pub fn fuse_scores(systems: &[ScoredTrials]) -> Result<ScoredTrials> {
    let first = systems
        .first()
        .ok_or_else(|| Error::InvalidArgument("no systems to fuse".into()))?;
    if systems.iter().any(|s| s.trials != first.trials) {
        return Err(Error::TrialMismatch);
    }
    let k = systems.len() as f64;
    let scores = (0..first.len())
        .map(|i| systems.iter().map(|s| s.scores[i]).sum::<f64>() / k)
        .collect();
    ScoredTrials::new(first.trials.clone(), scores)
}

/// `(eer_lr - eer_best) / eer_best`; negative when the LR system is better.
pub fn relative_improvement(eer_lr: f64, eer_best: f64) -> Result<f64> {
    if eer_best.is_nan() || eer_best <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "relative improvement needs a positive baseline EER, got {eer_best}"
        )));
    }
    Ok((eer_lr - eer_best) / eer_best)
}

/// Affine rescaling that puts the nontarget mean at 0 and the target mean at 1.
pub fn normalize_for_histogram(scored: &ScoredTrials) -> Result<ScoredTrials> {
    let (tar, non) = scored.class_scores();
    if tar.is_empty() || non.is_empty() {
        return Err(Error::SingleClass);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mt, mn) = (mean(&tar), mean(&non));
    if mt == mn {
        return Err(Error::Degenerate("target and nontarget score means are equal".into()));
    }
    let scores = scored.scores.iter().map(|s| (s - mn) / (mt - mn)).collect();
    ScoredTrials::new(scored.trials.clone(), scores)
}

/// Scores every trial: the enrolled speaker's model against the transformed
/// test embedding.
pub fn score_trials(
    backend: &TrainedBackend,
    enroll: &BTreeMap<String, SpeakerModel>,
    tests: &BTreeMap<String, DVector<f64>>,
    trials: &TrialSet,
) -> Result<ScoredTrials> {
    let mut test_models: BTreeMap<&str, SpeakerModel> = BTreeMap::new();
    let mut scores = Vec::with_capacity(trials.len());
    for t in &trials.trials {
        let model = enroll
            .get(&t.enroll)
            .ok_or_else(|| Error::UnresolvedId(t.enroll.clone()))?;
        if !test_models.contains_key(t.test.as_str()) {
            let x = tests.get(&t.test).ok_or_else(|| Error::UnresolvedId(t.test.clone()))?;
            test_models.insert(t.test.as_str(), backend.model(std::slice::from_ref(x))?);
        }
        scores.push(backend.score(model, &test_models[t.test.as_str()])?);
    }
    ScoredTrials::new(trials.clone(), scores)
}

/// Segment ids of one speaker, grouped by the conversation they were cut from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SegmentInventory {
    /// speaker -> conversation -> segment ids in order
    pub speakers: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

impl SegmentInventory {
    pub fn insert(&mut self, speaker: &str, conversation: &str, segment: String) {
        self.speakers
            .entry(speaker.to_string())
            .or_default()
            .entry(conversation.to_string())
            .or_default()
            .push(segment);
    }
}

/// Enrollment length and number of test segments per speaker, in segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub name: String,
    pub enroll_segments: usize,
    #[serde(default = "default_test_segments")]
    pub test_segments: usize,
}

fn default_test_segments() -> usize {
    2
}

impl Condition {
    pub fn new(name: impl Into<String>, enroll_segments: usize) -> Self {
        Condition {
            name: name.into(),
            enroll_segments,
            test_segments: default_test_segments(),
        }
    }
}

/// Enrollment segments per claimant plus the full claimant x test trial list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialDesign {
    pub enrollment: BTreeMap<String, Vec<String>>,
    pub trials: TrialSet,
}

/// Randomized trial construction: for each speaker, `test_segments` segments
/// from one randomly chosen conversation become tests, and
/// `enroll_segments` segments drawn from the other conversations form the
/// enrollment. Every speaker is then tried against every test segment.
pub fn build_trials(inventory: &SegmentInventory, condition: &Condition, seed: u64) -> Result<TrialDesign> {
    if condition.enroll_segments == 0 || condition.test_segments == 0 {
        return Err(Error::InvalidArgument(format!(
            "condition `{}` needs at least one enrollment and one test segment",
            condition.name
        )));
    }
    if inventory.speakers.len() < 2 {
        return Err(Error::InvalidArgument("trials need at least two speakers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enrollment = BTreeMap::new();
    let mut tests: Vec<(String, String)> = Vec::new();
    for (speaker, convs) in &inventory.speakers {
        let candidates: Vec<&String> = convs
            .iter()
            .filter(|(_, segs)| segs.len() >= condition.test_segments)
            .map(|(c, _)| c)
            .collect();
        let insufficient = || {
            Error::InvalidArgument(format!(
                "speaker {speaker} has too few segments for condition `{}`",
                condition.name
            ))
        };
        let test_conv = *candidates.choose(&mut rng).ok_or_else(insufficient)?;
        let segs = &convs[test_conv];
        let mut picked = index::sample(&mut rng, segs.len(), condition.test_segments).into_vec();
        picked.sort_unstable();
        tests.extend(picked.into_iter().map(|i| (speaker.clone(), segs[i].clone())));

        let pool: Vec<&String> = convs
            .iter()
            .filter(|(c, _)| *c != test_conv)
            .flat_map(|(_, s)| s)
            .collect();
        if pool.len() < condition.enroll_segments {
            return Err(insufficient());
        }
        let mut picked = index::sample(&mut rng, pool.len(), condition.enroll_segments).into_vec();
        picked.sort_unstable();
        enrollment.insert(speaker.clone(), picked.into_iter().map(|i| pool[i].clone()).collect());
    }
    let mut trials = Vec::with_capacity(enrollment.len() * tests.len());
    for claimant in enrollment.keys() {
        for (owner, seg) in &tests {
            trials.push(Trial {
                enroll: claimant.clone(),
                test: seg.clone(),
                target: owner == claimant,
            });
        }
    }
    Ok(TrialDesign {
        enrollment,
        trials: TrialSet::new(trials)?,
    })
}

/// `<speaker> <segment> <segment> ...` lines, speakers in order.
pub fn enrollment_to_text(enrollment: &BTreeMap<String, Vec<String>>) -> String {
    let mut out = String::new();
    for (speaker, segs) in enrollment {
        let _ = writeln!(out, "{speaker} {}", segs.join(" "));
    }
    out
}

pub fn parse_enrollment(text: &str, what: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(speaker) = fields.next() else {
            continue;
        };
        let segs: Vec<String> = fields.map(str::to_string).collect();
        if segs.is_empty() || out.insert(speaker.to_string(), segs).is_some() {
            return Err(Error::Parse {
                what: what.to_string(),
                line: i + 1,
                msg: "expected a new speaker followed by at least one segment".into(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn labeled(tar: &[f64], non: &[f64]) -> ScoredTrials {
        let pairs: Vec<(f64, bool)> = tar
            .iter()
            .map(|&s| (s, true))
            .chain(non.iter().map(|&s| (s, false)))
            .collect();
        ScoredTrials::from_labeled(&pairs).unwrap()
    }

    /// Counts misses and false alarms at every candidate threshold directly.
    fn brute_rates(pairs: &[(f64, bool)]) -> Vec<(f64, f64)> {
        let nt = pairs.iter().filter(|p| p.1).count() as f64;
        let nn = pairs.len() as f64 - nt;
        let mut thresholds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        thresholds.push(f64::NEG_INFINITY);
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        thresholds
            .iter()
            .map(|&t| {
                let miss = pairs.iter().filter(|p| p.1 && p.0 <= t).count() as f64;
                let fa = pairs.iter().filter(|p| !p.1 && p.0 > t).count() as f64;
                (miss / nt, fa / nn)
            })
            .collect()
    }

    fn brute_eer(pairs: &[(f64, bool)]) -> f64 {
        let rates = brute_rates(pairs);
        for k in 1..rates.len() {
            let (pm, pf) = rates[k];
            if pm >= pf {
                if pm == pf {
                    return pm;
                }
                return crossing(rates[k - 1], rates[k]);
            }
        }
        unreachable!()
    }

    fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, bool)> {
        let mut pairs: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let target = rng.random_bool(0.3);
                // coarse grid so ties occur
                let s = (rng.random_range(0..12) as f64) / 4.0 + if target { 0.75 } else { 0.0 };
                (s, target)
            })
            .collect();
        pairs[0].1 = true;
        pairs[1].1 = false;
        pairs
    }

    #[test]
    fn perfect_separation() {
        let s = labeled(&[2.0, 3.0], &[0.0, 1.0]);
        assert_eq!(eer(&s).unwrap(), 0.0);
        assert_eq!(min_dcf(&s, &DcfParams::DCF08).unwrap(), 0.0);
        assert!(det_curve(&s).unwrap().contains(&DetPoint { p_fa: 0.0, p_miss: 0.0 }));
    }

    #[test]
    fn identical_classes_give_chance() {
        let s = labeled(&[0.5, 0.5], &[0.5, 0.5, 0.5]);
        assert_eq!(eer(&s).unwrap(), 0.5);
    }

    #[test]
    fn hand_fixture_matches_sweep() {
        let s = labeled(&[0.8, 0.6, 0.4], &[0.7, 0.3, 0.2]);
        let pairs: Vec<_> = s.labeled().collect();
        assert_eq!(eer(&s).unwrap(), brute_eer(&pairs));
        // at t = 0.4: P_miss = 1/3, P_fa = 1/3
        assert!((eer(&s).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_rejected() {
        let s = labeled(&[1.0, 2.0], &[]);
        assert!(matches!(eer(&s), Err(Error::SingleClass)));
        assert!(matches!(min_dcf(&s, &DcfParams::DCF10), Err(Error::SingleClass)));
        assert!(matches!(det_curve(&s), Err(Error::SingleClass)));
    }

    #[test]
    fn equal_scores_cost_the_trivial_system() {
        let s = labeled(&[1.0; 3], &[1.0; 5]);
        for p in [DcfParams::DCF08, DcfParams::DCF10] {
            assert_eq!(min_dcf_raw(&s, &p).unwrap(), p.default_cost());
        }
        assert_eq!(min_dcf(&s, &DcfParams::DCF10).unwrap(), 1.0);
    }

    #[test]
    fn min_dcf_matches_sweep_on_random_fixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<(f64, bool)> = (0..20).map(|i| (rng.random::<f64>(), i % 3 == 0)).collect();
        let s = ScoredTrials::from_labeled(&pairs).unwrap();
        for p in [DcfParams::DCF08, DcfParams::DCF10] {
            let brute = brute_rates(&pairs)
                .iter()
                .map(|&(pm, pf)| p.cost(pm, pf))
                .fold(f64::INFINITY, f64::min);
            assert!((min_dcf_raw(&s, &p).unwrap() - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn det_of_two_trials() {
        let s = labeled(&[1.0], &[0.0]);
        let pts: Vec<(f64, f64)> = det_curve(&s).unwrap().iter().map(|p| (p.p_fa, p.p_miss)).collect();
        assert_eq!(pts, vec![(1.0, 0.0), (0.0, 0.0), (0.0, 1.0)]);
    }

    #[test]
    fn det_passes_near_eer() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pairs = random_pairs(&mut rng, 40);
        let s = ScoredTrials::from_labeled(&pairs).unwrap();
        let e = eer(&s).unwrap();
        let nt = pairs.iter().filter(|p| p.1).count() as f64;
        let nn = pairs.len() as f64 - nt;
        let quantum = 1.0 / nt.min(nn);
        let closest = det_curve(&s)
            .unwrap()
            .iter()
            .map(|p| (p.p_fa - e).abs().max((p.p_miss - e).abs()))
            .fold(f64::INFINITY, f64::min);
        assert!(closest <= quantum, "{closest} > {quantum}");
    }

    #[test]
    fn fusion_cases() {
        let a = labeled(&[0.9, 0.2], &[0.1]);
        assert_eq!(fuse_scores(std::slice::from_ref(&a)).unwrap(), a);
        let neg = ScoredTrials::new(a.trials.clone(), a.scores.iter().map(|s| -s).collect()).unwrap();
        assert!(fuse_scores(&[a.clone(), neg]).unwrap().scores.iter().all(|&s| s == 0.0));
        let b = ScoredTrials::new(a.trials.clone(), vec![0.3, -0.4, 1.5]).unwrap();
        let c = ScoredTrials::new(a.trials.clone(), vec![2.0, 0.25, -1.0]).unwrap();
        let fused = fuse_scores(&[a.clone(), b.clone(), c.clone()]).unwrap();
        for i in 0..3 {
            let want = (a.scores[i] + b.scores[i] + c.scores[i]) / 3.0;
            assert!((fused.scores[i] - want).abs() < 1e-12);
        }
        let other = labeled(&[0.9], &[0.1, 0.2]);
        assert!(matches!(fuse_scores(&[a, other]), Err(Error::TrialMismatch)));
    }

    #[test]
    fn relative_improvement_cases() {
        assert!((relative_improvement(0.69, 1.24).unwrap() + 0.4435).abs() < 5e-4);
        assert_eq!(relative_improvement(0.8, 0.8).unwrap(), 0.0);
        assert_eq!(relative_improvement(0.0, 0.3).unwrap(), -1.0);
        assert!(relative_improvement(0.1, 0.0).is_err());
    }

    #[test]
    fn histogram_normalization() {
        let s = labeled(&[4.0, 4.0], &[2.0, 2.0]);
        let n = normalize_for_histogram(&s).unwrap();
        assert_eq!(n.scores, vec![1.0, 1.0, 0.0, 0.0]);
        let id = labeled(&[0.5, 1.5], &[-1.0, 1.0]);
        assert_eq!(normalize_for_histogram(&id).unwrap(), id);
        assert!(matches!(
            normalize_for_histogram(&labeled(&[1.0], &[1.0])),
            Err(Error::Degenerate(_))
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs: Vec<(f64, bool)> = (0..30).map(|i| (rng.random_range(-3.0..3.0), i % 4 == 0)).collect();
        let n = normalize_for_histogram(&ScoredTrials::from_labeled(&pairs).unwrap()).unwrap();
        let (t, nt) = n.class_scores();
        assert!((t.iter().sum::<f64>() / t.len() as f64 - 1.0).abs() < 1e-10);
        assert!((nt.iter().sum::<f64>() / nt.len() as f64).abs() < 1e-10);
    }

    #[test]
    fn trial_and_score_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = ScoredTrials::new(
            TrialSet::parse("a x target\nb x nontarget\n", "t").unwrap(),
            vec![0.25, -0.5],
        )
        .unwrap();
        s.trials.write(&dir.path().join("trials.txt")).unwrap();
        s.write(&dir.path().join("scores.txt")).unwrap();
        let t = TrialSet::read(&dir.path().join("trials.txt")).unwrap();
        assert_eq!(t, s.trials);
        assert_eq!(ScoredTrials::read(&dir.path().join("scores.txt"), &t).unwrap(), s);
        assert_eq!(s.to_text(), "a x 0.250000\nb x -0.500000\n");
        assert!(matches!(
            TrialSet::parse("a x maybe\n", "t"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    fn inventory(speakers: usize, convs: usize, segs: usize) -> SegmentInventory {
        let mut inv = SegmentInventory::default();
        for s in 0..speakers {
            for c in 0..convs {
                for k in 0..segs {
                    inv.insert(&format!("s{s}"), &format!("s{s}_c{c}"), format!("s{s}_c{c}#{k}"));
                }
            }
        }
        inv
    }

    #[test]
    fn trial_counts() {
        let d = build_trials(&inventory(3, 4, 3), &Condition::new("c", 2), 1).unwrap();
        assert_eq!(d.trials.n_targets(), 6);
        assert_eq!(d.trials.n_nontargets(), 12);
        for (spk, segs) in &d.enrollment {
            assert_eq!(segs.len(), 2);
            assert!(segs.iter().all(|s| s.starts_with(&format!("{spk}_"))));
        }
    }

    #[test]
    fn enrollment_avoids_test_conversation() {
        let d = build_trials(&inventory(4, 3, 2), &Condition::new("c", 4), 5).unwrap();
        for t in d.trials.trials.iter().filter(|t| t.target) {
            let conv = t.test.split('#').next().unwrap();
            assert!(d.enrollment[&t.enroll]
                .iter()
                .all(|s| !s.starts_with(&format!("{conv}#"))));
        }
    }

    #[test]
    fn trials_deterministic_per_seed() {
        let inv = inventory(5, 4, 4);
        let c = Condition::new("c", 3);
        assert_eq!(build_trials(&inv, &c, 11).unwrap(), build_trials(&inv, &c, 11).unwrap());
        assert_ne!(build_trials(&inv, &c, 11).unwrap(), build_trials(&inv, &c, 12).unwrap());
    }

    #[test]
    fn insufficient_segments_rejected() {
        assert!(build_trials(&inventory(3, 2, 2), &Condition::new("c", 3), 0).is_err());
        assert!(build_trials(&inventory(3, 2, 1), &Condition::new("c", 1), 0).is_err());
    }

    #[test]
    fn full_scale_counts() {
        let d = build_trials(&inventory(395, 2, 2), &Condition::new("c", 1), 2).unwrap();
        assert_eq!(d.trials.n_targets(), 790);
        assert_eq!(d.trials.n_nontargets(), 311_260);
    }

    #[test]
    fn scoring_resolves_ids() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let trials = TrialSet::parse("a u target\n", "t").unwrap();
        let mut enroll = BTreeMap::new();
        let tests = BTreeMap::from([("u".to_string(), x.clone())]);
        assert!(matches!(
            score_trials(&TrainedBackend::Cosine, &enroll, &tests, &trials),
            Err(Error::UnresolvedId(_))
        ));
        enroll.insert("a".to_string(), TrainedBackend::Cosine.model(&[x]).unwrap());
        let s = score_trials(&TrainedBackend::Cosine, &enroll, &tests, &trials).unwrap();
        assert!((s.scores[0] - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn eer_matches_brute_force(seed in 0u64..1000, n in 2usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs = random_pairs(&mut rng, n);
            let s = ScoredTrials::from_labeled(&pairs).unwrap();
            prop_assert_eq!(eer(&s).unwrap(), brute_eer(&pairs));
        }

        #[test]
        fn metrics_rank_invariant(seed in 0u64..1000, n in 2usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs = random_pairs(&mut rng, n);
            let s = ScoredTrials::from_labeled(&pairs).unwrap();
            for f in [|v: f64| 2.0 * v + 1.0, |v: f64| v.tanh()] {
                let mapped: Vec<(f64, bool)> = pairs.iter().map(|&(v, t)| (f(v), t)).collect();
                let m = ScoredTrials::from_labeled(&mapped).unwrap();
                prop_assert_eq!(eer(&m).unwrap(), eer(&s).unwrap());
                prop_assert_eq!(det_curve(&m).unwrap(), det_curve(&s).unwrap());
                for p in [DcfParams::DCF08, DcfParams::DCF10] {
                    prop_assert_eq!(min_dcf(&m, &p).unwrap(), min_dcf(&s, &p).unwrap());
                }
            }
        }

        #[test]
        fn min_dcf_is_minimal(seed in 0u64..1000, n in 2usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs = random_pairs(&mut rng, n);
            let s = ScoredTrials::from_labeled(&pairs).unwrap();
            let p = DcfParams::DCF08;
            let m = min_dcf_raw(&s, &p).unwrap();
            for (pm, pf) in brute_rates(&pairs) {
                prop_assert!(m <= p.cost(pm, pf));
            }
        }

        #[test]
        fn fusion_order_free(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = ScoredTrials::from_labeled(&random_pairs(&mut rng, 8)).unwrap();
            let systems: Vec<ScoredTrials> = (0..3)
                .map(|_| ScoredTrials::new(base.trials.clone(), (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
                .collect();
            let fwd = fuse_scores(&systems).unwrap();
            let rev: Vec<ScoredTrials> = systems.iter().rev().cloned().collect();
            let back = fuse_scores(&rev).unwrap();
            for (a, b) in fwd.scores.iter().zip(&back.scores) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
