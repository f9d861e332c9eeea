//! Detection metrics over scored trials: EER, minDCF and CLLR.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Key {
    Bonafide,
    Spoof,
}

impl Key {
    pub fn as_str(self) -> &'static str {
        match self {
            Key::Bonafide => "bonafide",
            Key::Spoof => "spoof",
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Key {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Key::Bonafide),
            "spoof" => Ok(Key::Spoof),
            _ => Err(Error::invalid(format!("unknown key {s:?}"))),
        }
    }
}

/// One scored utterance. Higher scores mean "more bona fide".
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub utt_id: String,
    /// Attack tag, `-` for bona fide trials.
    pub attack: String,
    pub key: Key,
    pub score: f64,
}

impl Trial {
    pub fn new(utt_id: impl Into<String>, attack: impl Into<String>, key: Key, score: f64) -> Self {
        Self { utt_id: utt_id.into(), attack: attack.into(), key, score }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    trials: Vec<Trial>,
}

impl ScoreSet {
    /// Checks that ids are unique and scores finite.
    pub fn new(trials: Vec<Trial>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(trials.len());
        for t in &trials {
            if !seen.insert(t.utt_id.as_str()) {
                return Err(Error::Metric(format!("duplicate utt_id {:?}", t.utt_id)));
            }
            validate_trial(t)?;
        }
        Ok(Self { trials })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn count(&self, key: Key) -> usize {
        self.trials.iter().filter(|t| t.key == key).count()
    }

    /// Distinct attack tags of spoof trials, sorted.
    pub fn attacks(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&str> = self
            .trials
            .iter()
            .filter(|t| t.key == Key::Spoof)
            .map(|t| t.attack.as_str())
            .collect();
        set.into_iter().map(str::to_string).collect()
    }

    fn scores(&self, key: Key) -> Vec<f64> {
        self.trials.iter().filter(|t| t.key == key).map(|t| t.score).collect()
    }
}

fn validate_trial(t: &Trial) -> Result<()> {
    if !t.score.is_finite() {
        return Err(Error::Metric(format!("non-finite score for {:?}", t.utt_id)));
    }
    for (what, s) in [("utt_id", &t.utt_id), ("attack tag", &t.attack)] {
        if s.is_empty() || s.chars().any(char::is_whitespace) {
            return Err(Error::Metric(format!("invalid {what} {s:?}")));
        }
    }
    if t.utt_id.starts_with('#') {
        return Err(Error::Metric(format!("utt_id {:?} would read as a comment", t.utt_id)));
    }
    Ok(())
}

/// Operating points of the threshold sweep.
///
/// Point `k` rejects every trial scoring at or below the `k`-th smallest
/// distinct score (point 0 accepts everything). Its threshold is the midpoint
/// to the next distinct score; the end points sit one unit beyond the extremes.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    /// Fraction of bona fide trials rejected.
    pub frr: f64,
    /// Fraction of spoof trials accepted.
    pub far: f64,
}

pub fn operating_points(set: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    let mut bona = set.scores(Key::Bonafide);
    let mut spoof = set.scores(Key::Spoof);
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::Metric(format!(
            "need both classes (bonafide {}, spoof {})",
            bona.len(),
            spoof.len()
        )));
    }
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let mut distinct: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();

    let (nb, ns) = (bona.len() as f64, spoof.len() as f64);
    let m = distinct.len();
    let mut points = Vec::with_capacity(m + 1);
    points.push(OperatingPoint { threshold: distinct[0] - 1.0, frr: 0.0, far: 1.0 });
    let (mut ib, mut is) = (0, 0);
    for (k, &u) in distinct.iter().enumerate() {
        while ib < bona.len() && bona[ib] <= u {
            ib += 1;
        }
        while is < spoof.len() && spoof[is] <= u {
            is += 1;
        }
        let threshold = if k + 1 < m { 0.5 * (u + distinct[k + 1]) } else { u + 1.0 };
        points.push(OperatingPoint {
            threshold,
            frr: ib as f64 / nb,
            far: (spoof.len() - is) as f64 / ns,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate from the sweep, linearly interpolated between the two
/// operating points that bracket the first `FRR ≥ FAR` crossing.
pub fn compute_eer(set: &ScoreSet) -> Result<Eer> {
    Ok(eer_from_points(&operating_points(set)?))
}

pub fn eer_from_points(points: &[OperatingPoint]) -> Eer {
    let k = points
        .iter()
        .position(|p| p.frr >= p.far)
        .expect("last operating point has FRR = 1 ≥ FAR = 0");
    let p1 = &points[k];
    if p1.frr == p1.far || k == 0 {
        return Eer { eer: p1.frr, threshold: p1.threshold };
    }
    let p0 = &points[k - 1];
    let gap0 = p0.far - p0.frr;
    let gap1 = p1.frr - p1.far;
    let t = gap0 / (gap0 + gap1);
    Eer {
        eer: p0.frr + t * (p1.frr - p0.frr),
        threshold: p0.threshold + t * (p1.threshold - p0.threshold),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackEers {
    pub per_attack: BTreeMap<String, Eer>,
    pub pooled: Eer,
}

/// EER of each attack against all bona fide trials, plus the pooled EER.
pub fn per_attack_eer(set: &ScoreSet) -> Result<AttackEers> {
    let pooled = compute_eer(set)?;
    let bona: Vec<Trial> = set.trials.iter().filter(|t| t.key == Key::Bonafide).cloned().collect();
    let mut per_attack = BTreeMap::new();
    for attack in set.attacks() {
        let mut subset = bona.clone();
        subset.extend(
            set.trials
                .iter()
                .filter(|t| t.key == Key::Spoof && t.attack == attack)
                .cloned(),
        );
        let eer = compute_eer(&ScoreSet { trials: subset })?;
        per_attack.insert(attack, eer);
    }
    Ok(AttackEers { per_attack, pooled })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self { p_target: 0.05, c_miss: 1.0, c_fa: 10.0 }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::invalid(format!("p_target {} outside (0, 1)", self.p_target)));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::invalid("detection costs must be positive"));
        }
        Ok(())
    }

    /// Cost of the better trivial system.
    pub fn normaliser(&self) -> f64 {
        (self.p_target * self.c_miss).min((1.0 - self.p_target) * self.c_fa)
    }
}

/// Normalised empirical minimum detection cost (no ROC convex hull).
pub fn compute_min_dcf(set: &ScoreSet, params: DcfParams) -> Result<f64> {
    params.validate()?;
    let points = operating_points(set)?;
    let min = points
        .iter()
        .map(|p| params.p_target * params.c_miss * p.frr + (1.0 - params.p_target) * params.c_fa * p.far)
        .fold(f64::INFINITY, f64::min);
    Ok(min / params.normaliser())
}

/// `log₂(1 + eˣ)`, exact at 0 and stable for large `|x|`.
fn softplus_bits(x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    (x.max(0.0) + (-x.abs()).exp().ln_1p()) / std::f64::consts::LN_2
}

/// Cost of log-likelihood ratio in bits, scores read as natural-log LLRs.
pub fn compute_cllr(set: &ScoreSet) -> Result<f64> {
    let (nb, ns) = (set.count(Key::Bonafide), set.count(Key::Spoof));
    if nb == 0 || ns == 0 {
        return Err(Error::Metric(format!("need both classes (bonafide {nb}, spoof {ns})")));
    }
    let (mut sb, mut ss) = (0.0, 0.0);
    for t in &set.trials {
        match t.key {
            Key::Bonafide => sb += softplus_bits(-t.score),
            Key::Spoof => ss += softplus_bits(t.score),
        }
    }
    Ok(0.5 * (sb / nb as f64 + ss / ns as f64))
}

/// Formats with 9 significant digits, trimming trailing zeros.
pub fn format_score(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    // The exponent is taken after rounding, so 9.9999999999 becomes 10.
    let s = format!("{x:.8e}");
    let (mant, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mant))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Text form: one `utt_id attack_tag key score` line per trial.
pub fn format_scores(set: &ScoreSet) -> String {
    let mut out = String::new();
    for t in &set.trials {
        let _ = writeln!(out, "{} {} {} {}", t.utt_id, t.attack, t.key, format_score(t.score));
    }
    out
}

pub fn parse_scores(text: &str, origin: &Path) -> Result<ScoreSet> {
    let mut trials = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let bad = |msg: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, msg };
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let key: Key = fields[2].parse().map_err(|e: Error| bad(e.to_string()))?;
        let score: f64 = fields[3]
            .parse()
            .map_err(|_| bad(format!("invalid score {:?}", fields[3])))?;
        let trial = Trial::new(fields[0], fields[1], key, score);
        validate_trial(&trial).map_err(|e| bad(e.to_string()))?;
        if !seen.insert(fields[0].to_string()) {
            return Err(bad(format!("duplicate utt_id {:?}", fields[0])));
        }
        trials.push(trial);
    }
    Ok(ScoreSet { trials })
}

pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    parse_scores(&std::fs::read_to_string(path)?, path)
}

pub fn write_scores(set: &ScoreSet, path: &Path) -> Result<()> {
    std::fs::write(path, format_scores(set))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(bona: &[f64], spoof: &[f64]) -> ScoreSet {
        let mut t: Vec<Trial> = bona
            .iter()
            .enumerate()
            .map(|(i, &s)| Trial::new(format!("b{i}"), "-", Key::Bonafide, s))
            .collect();
        t.extend(spoof.iter().enumerate().map(|(i, &s)| Trial::new(format!("s{i}"), "A01", Key::Spoof, s)));
        ScoreSet::new(t).unwrap()
    }

    #[test]
    fn perfect_separation() {
        let s = set(&[0.9, 0.8], &[0.2, 0.1]);
        let e = compute_eer(&s).unwrap();
        assert_eq!(e.eer, 0.0);
        assert_eq!(e.threshold, 0.5);
        assert_eq!(compute_min_dcf(&s, DcfParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn identical_scores() {
        let s = set(&[0.3; 4], &[0.3; 7]);
        let e = compute_eer(&s).unwrap();
        assert_eq!(e.eer, 0.5);
        assert!((e.threshold - 0.3).abs() < 1e-15);
        assert_eq!(compute_min_dcf(&s, DcfParams::default()).unwrap(), 1.0);
    }

    #[test]
    fn inverted_polarity_gives_full_error() {
        let e = compute_eer(&set(&[0.1], &[0.9])).unwrap();
        assert_eq!(e.eer, 1.0);
    }

    #[test]
    fn cllr_of_zero_scores_is_one() {
        assert_eq!(compute_cllr(&set(&[0.0; 3], &[0.0; 5])).unwrap(), 1.0);
        let big = compute_cllr(&set(&[800.0], &[-800.0])).unwrap();
        assert!(big < 1e-300);
    }

    #[test]
    fn single_class_is_an_error() {
        let s = ScoreSet::new(vec![Trial::new("a", "-", Key::Bonafide, 1.0)]).unwrap();
        assert!(compute_eer(&s).is_err());
        assert!(compute_min_dcf(&s, DcfParams::default()).is_err());
        assert!(compute_cllr(&s).is_err());
    }

    #[test]
    fn dcf_params_checked() {
        let s = set(&[1.0], &[0.0]);
        let bad = DcfParams { p_target: 1.0, ..DcfParams::default() };
        assert!(compute_min_dcf(&s, bad).is_err());
        let bad = DcfParams { c_fa: 0.0, ..DcfParams::default() };
        assert!(compute_min_dcf(&s, bad).is_err());
    }

    #[test]
    fn score_formatting() {
        for (x, s) in [
            (0.0, "0"),
            (1.5, "1.5"),
            (-2.0, "-2"),
            (0.123456789123, "0.123456789"),
            (123456789.4, "123456789"),
            (1234567894.0, "1.23456789e9"),
            (1.0e-7, "1e-7"),
            (9.9999999999, "10"),
        ] {
            assert_eq!(format_score(x), s, "{x}");
        }
        for x in [f32::MAX, f32::MIN_POSITIVE, 0.1f32, -3.3e-8f32, 7.0e12f32] {
            let back: f64 = format_score(x as f64).parse().unwrap();
            assert_eq!(back as f32, x);
        }
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = parse_scores("a - bonafide 1.0\nb A01 spoof\n", Path::new("x.txt")).unwrap_err();
        assert!(err.to_string().contains("x.txt:2"), "{err}");
        let err = parse_scores("a - bonafide 1\na - bonafide 2\n", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
        assert!(parse_scores("a - maybe 1\n", Path::new("x")).is_err());
        assert!(parse_scores("a - spoof nan\n", Path::new("x")).is_err());
    }

    #[test]
    fn crlf_and_comments() {
        let lf = "# header\na - bonafide 1.25\nb A01 spoof -0.5\n";
        let crlf = lf.replace('\n', "\r\n");
        let p = Path::new("x");
        assert_eq!(parse_scores(lf, p).unwrap(), parse_scores(&crlf, p).unwrap());
        assert_eq!(parse_scores(lf, p).unwrap().len(), 2);
    }
}
