//! Verifiable rules over human-set transcripts.
//!
//! A rule is a binary predicate `R(y, H_1..H_N, r)` deciding whether, had `y`
//! been the correct label, the AI was obliged to include `y` at round `r`.
//! Rules see only human sets. Their online activation evaluates the rule on
//! the prefix `H_1..H_r` as if round `r` were the last one, which is all the
//! AI can know while the day is still running.
//!
//! The calibration guarantee needs `R(y, H_1..H_N, r) <= R(y, H_1..H_r, r)`
//! for every transcript. [`check_dominance`] verifies this by exhaustive
//! enumeration on small label spaces.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::protocol::{LabelSpace, PredictionSet};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("round {round} is outside 1..={len}")]
    RoundOutOfRange { round: usize, len: usize },
    #[error("online activation needs a nonempty prefix")]
    EmptyPrefix,
    #[error("unknown rule `{0}`")]
    UnknownRule(String),
    #[error("invalid rule parameter in `{0}`")]
    BadParameter(String),
    #[error("enumeration of about {estimate} transcripts exceeds the cap of {cap}")]
    EnumerationTooLarge { estimate: u128, cap: u128 },
}

/// Signature of a user-supplied rule: `(label, human_sets, round)` with
/// 1-based `round` and `N = human_sets.len()`.
pub type Predicate = dyn Fn(usize, &[PredictionSet], usize) -> bool + Send + Sync;

#[derive(Clone)]
pub struct CustomRule {
    name: String,
    predicate: Arc<Predicate>,
}

impl CustomRule {
    pub fn new<F>(name: impl Into<String>, predicate: F) -> Self
    where
        F: Fn(usize, &[PredictionSet], usize) -> bool + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            predicate: Arc::new(predicate),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Debug for CustomRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomRule({})", self.name)
    }
}

#[derive(Debug, Clone)]
pub enum Rule {
    /// `1{y in H_r}`.
    ChCurrentRound,
    /// `1{y not in H_r} * 1{r = N}`.
    CompFinalRound,
    /// `y` present in every one of the last `min(k, r)` human sets up to `r`.
    ChIntersectionWindow(usize),
    /// `y` proposed at some round `r' <= r`.
    ChEverProposed,
    Custom(CustomRule),
}

impl Rule {
    /// Canonical name, parseable by [`RuleRegistry::parse`].
    pub fn name(&self) -> String {
        match self {
            Rule::ChCurrentRound => "ch_current_round".into(),
            Rule::CompFinalRound => "comp_final_round".into(),
            Rule::ChIntersectionWindow(k) => format!("ch_intersection_window({k})"),
            Rule::ChEverProposed => "ch_ever_proposed".into(),
            Rule::Custom(c) => c.name.clone(),
        }
    }

    /// Evaluates the rule at round `round` (1-based) of the full transcript.
    pub fn evaluate(
        &self,
        label: usize,
        human_sets: &[PredictionSet],
        round: usize,
    ) -> Result<bool, RuleError> {
        if round == 0 || round > human_sets.len() {
            return Err(RuleError::RoundOutOfRange {
                round,
                len: human_sets.len(),
            });
        }
        Ok(self.eval_unchecked(label, human_sets, round))
    }

    /// Online activation: the rule on `prefix` with its last round as terminal.
    pub fn activation(&self, label: usize, prefix: &[PredictionSet]) -> Result<bool, RuleError> {
        if prefix.is_empty() {
            return Err(RuleError::EmptyPrefix);
        }
        Ok(self.eval_unchecked(label, prefix, prefix.len()))
    }

    fn eval_unchecked(&self, label: usize, sets: &[PredictionSet], round: usize) -> bool {
        let n = sets.len();
        let at = |r: usize| sets[r - 1].contains(label);
        match self {
            Rule::ChCurrentRound => at(round),
            Rule::CompFinalRound => round == n && !at(round),
            Rule::ChIntersectionWindow(k) => {
                let start = round.saturating_sub(*k) + 1;
                (start..=round).all(at)
            }
            Rule::ChEverProposed => (1..=round).any(at),
            Rule::Custom(c) => (c.predicate)(label, sets, round),
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Name → rule resolution for configuration files and logs.
///
/// Built-in rules are always available; custom rules are registered by name.
#[derive(Debug, Clone)]
pub struct RuleRegistry {
    custom: BTreeMap<String, CustomRule>,
}

/// Name of the stock rule that violates the dominance condition:
/// "label absent at round r and r is not the last round".
pub const ABSENT_BEFORE_FINAL: &str = "absent_before_final";

impl Default for RuleRegistry {
    fn default() -> Self {
        let mut registry = Self::empty();
        registry.register(CustomRule::new(ABSENT_BEFORE_FINAL, |y, sets, r| {
            !sets[r - 1].contains(y) && r < sets.len()
        }));
        registry
    }
}

impl RuleRegistry {
    /// Registry with only the built-in rules.
    pub fn empty() -> Self {
        Self {
            custom: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, rule: CustomRule) {
        self.custom.insert(rule.name.clone(), rule);
    }

    pub fn custom_names(&self) -> impl Iterator<Item = &str> {
        self.custom.keys().map(String::as_str)
    }

    /// Parses `name` or `name(k)`; also accepts `name:k`.
    pub fn parse(&self, spec: &str) -> Result<Rule, RuleError> {
        let spec = spec.trim();
        let (name, param) = split_param(spec)?;
        let param_k = || -> Result<usize, RuleError> {
            let k: usize = param
                .ok_or_else(|| RuleError::BadParameter(spec.into()))?
                .trim()
                .parse()
                .map_err(|_| RuleError::BadParameter(spec.into()))?;
            if k == 0 {
                return Err(RuleError::BadParameter(spec.into()));
            }
            Ok(k)
        };
        let no_param = |rule: Rule| match param {
            None => Ok(rule),
            Some(_) => Err(RuleError::BadParameter(spec.into())),
        };
        match name {
            "ch_current_round" => no_param(Rule::ChCurrentRound),
            "comp_final_round" => no_param(Rule::CompFinalRound),
            "ch_ever_proposed" => no_param(Rule::ChEverProposed),
            "ch_intersection_window" => Ok(Rule::ChIntersectionWindow(param_k()?)),
            other => match self.custom.get(other) {
                Some(rule) if param.is_none() => Ok(Rule::Custom(rule.clone())),
                Some(_) => Err(RuleError::BadParameter(spec.into())),
                None => Err(RuleError::UnknownRule(other.into())),
            },
        }
    }
}

fn split_param(spec: &str) -> Result<(&str, Option<&str>), RuleError> {
    if let Some(open) = spec.find('(') {
        let inner = spec[open + 1..]
            .strip_suffix(')')
            .ok_or_else(|| RuleError::BadParameter(spec.into()))?;
        return Ok((&spec[..open], Some(inner)));
    }
    if let Some((name, param)) = spec.split_once(':') {
        return Ok((name, Some(param)));
    }
    Ok((spec, None))
}

/// One transcript on which `R > R̄`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Counterexample {
    pub label: String,
    pub transcript: Vec<Vec<String>>,
    pub round: usize,
    pub rule_value: bool,
    pub activation_value: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DominanceReport {
    pub rule: String,
    pub holds: bool,
    pub transcripts_checked: u128,
    pub counterexamples: Vec<Counterexample>,
}

/// Default cap on enumerated transcripts.
pub const DEFAULT_ENUMERATION_CAP: u128 = 5_000_000;

/// Number of human-set transcripts with `1..=max_rounds` rounds whose sets
/// have at most `max_set_size` members out of `labels`.
pub fn transcript_count(labels: usize, max_rounds: usize, max_set_size: usize) -> u128 {
    let subsets: u128 = (0..=max_set_size.min(labels))
        .map(|k| binomial(labels as u128, k as u128))
        .sum();
    (1..=max_rounds)
        .map(|n| subsets.saturating_pow(n as u32))
        .fold(0u128, u128::saturating_add)
}

fn binomial(n: u128, k: u128) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Exhaustively checks `R(y, H_1..H_N, r) <= R̄(y, H_1..H_r)`.
///
/// Enumerates every transcript with `1..=max_rounds` rounds over all subsets
/// (including the empty set) of size at most `max_set_size`, and every label
/// and round.
pub fn check_dominance(
    rule: &Rule,
    label_space: &LabelSpace,
    max_rounds: usize,
    max_set_size: usize,
    cap: u128,
) -> Result<DominanceReport, RuleError> {
    let k = label_space.len();
    let estimate = transcript_count(k, max_rounds, max_set_size);
    if estimate > cap {
        return Err(RuleError::EnumerationTooLarge { estimate, cap });
    }
    let subsets = subsets_up_to(k, max_set_size);

    let mut counterexamples = Vec::new();
    let mut checked = 0u128;
    let mut transcript: Vec<PredictionSet> = Vec::with_capacity(max_rounds);
    for n in 1..=max_rounds {
        let mut odometer = vec![0usize; n];
        loop {
            transcript.clear();
            transcript.extend(odometer.iter().map(|&i| subsets[i].clone()));
            checked += 1;
            for y in 0..k {
                for r in 1..=n {
                    let full = rule.eval_unchecked(y, &transcript, r);
                    if !full {
                        continue;
                    }
                    let online = rule.eval_unchecked(y, &transcript[..r], r);
                    if !online {
                        counterexamples.push(Counterexample {
                            label: label_space.label(y).unwrap_or_default().to_string(),
                            transcript: transcript.iter().map(|h| label_space.names(h)).collect(),
                            round: r,
                            rule_value: full,
                            activation_value: online,
                        });
                    }
                }
            }
            if !advance(&mut odometer, subsets.len()) {
                break;
            }
        }
    }
    Ok(DominanceReport {
        rule: rule.name(),
        holds: counterexamples.is_empty(),
        transcripts_checked: checked,
        counterexamples,
    })
}

fn subsets_up_to(k: usize, max_size: usize) -> Vec<PredictionSet> {
    fn extend(
        start: usize,
        k: usize,
        left: usize,
        cur: &mut Vec<usize>,
        out: &mut Vec<PredictionSet>,
    ) {
        out.push(cur.iter().copied().collect());
        if left == 0 {
            return;
        }
        for i in start..k {
            cur.push(i);
            extend(i + 1, k, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    extend(0, k, max_size.min(k), &mut Vec::new(), &mut out);
    out
}

fn advance(odometer: &mut [usize], base: usize) -> bool {
    for digit in odometer.iter_mut().rev() {
        *digit += 1;
        if *digit < base {
            return true;
        }
        *digit = 0;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ints(space: &LabelSpace, xs: &[i64]) -> PredictionSet {
        space.set_of(xs.iter().map(|x| x.to_string())).unwrap()
    }

    fn space(hi: i64) -> LabelSpace {
        LabelSpace::integer_range(1, hi).unwrap()
    }

    #[test]
    fn ch_current_round_fires_on_latest_set() {
        let s = space(7);
        let h = vec![ints(&s, &[2, 3, 4])];
        let y = s.index_of("3").unwrap();
        assert!(Rule::ChCurrentRound.evaluate(y, &h, 1).unwrap());
    }

    #[test]
    fn comp_final_round_silent_before_last_round() {
        let s = space(7);
        let h = vec![ints(&s, &[1, 2]), ints(&s, &[1, 2])];
        let y = s.index_of("3").unwrap();
        assert!(!Rule::CompFinalRound.evaluate(y, &h, 1).unwrap());
        assert!(Rule::CompFinalRound.evaluate(y, &h, 2).unwrap());
    }

    #[test]
    fn ch_ever_proposed_remembers_round_one() {
        let s = space(7);
        let h = vec![ints(&s, &[7, 1]), ints(&s, &[2, 3]), ints(&s, &[4, 5])];
        let y = s.index_of("7").unwrap();
        assert!(Rule::ChEverProposed.evaluate(y, &h, 3).unwrap());
    }

    #[test]
    fn intersection_window_truncates_at_start() {
        let s = space(5);
        let h = vec![ints(&s, &[1]), ints(&s, &[1, 2]), ints(&s, &[2])];
        let one = s.index_of("1").unwrap();
        let two = s.index_of("2").unwrap();
        let w2 = Rule::ChIntersectionWindow(2);
        assert!(w2.evaluate(one, &h, 1).unwrap());
        assert!(w2.evaluate(one, &h, 2).unwrap());
        assert!(!w2.evaluate(one, &h, 3).unwrap());
        assert!(w2.evaluate(two, &h, 3).unwrap());
        assert!(!w2.evaluate(two, &h, 2).unwrap());
    }

    #[test]
    fn round_out_of_range() {
        let h = vec![PredictionSet::empty()];
        assert_eq!(
            Rule::ChCurrentRound.evaluate(0, &h, 2).unwrap_err(),
            RuleError::RoundOutOfRange { round: 2, len: 1 }
        );
        assert!(Rule::ChCurrentRound.evaluate(0, &h, 0).is_err());
    }

    #[test]
    fn online_activation_treats_prefix_end_as_terminal() {
        let s = space(3);
        let h1 = vec![ints(&s, &[1])];
        let y = s.index_of("2").unwrap();
        assert!(Rule::CompFinalRound.activation(y, &h1).unwrap());
        assert_eq!(
            Rule::CompFinalRound.activation(y, &[]).unwrap_err(),
            RuleError::EmptyPrefix
        );
    }

    #[test]
    fn ch_current_round_activation_matches_rule_at_every_prefix() {
        let s = space(4);
        let h = vec![ints(&s, &[1, 2]), ints(&s, &[2]), ints(&s, &[3, 4])];
        for y in 0..4 {
            for r in 1..=3 {
                assert_eq!(
                    Rule::ChCurrentRound.activation(y, &h[..r]).unwrap(),
                    Rule::ChCurrentRound.evaluate(y, &h, r).unwrap()
                );
            }
        }
    }

    #[test]
    fn label_in_every_set_activates_ch() {
        let s = space(3);
        let h = vec![ints(&s, &[2]), ints(&s, &[2, 3])];
        let y = s.index_of("2").unwrap();
        assert!(Rule::ChCurrentRound.activation(y, &h).unwrap());
    }

    #[test]
    fn registry_parses_names_and_parameters() {
        let reg = RuleRegistry::default();
        assert!(matches!(
            reg.parse("ch_current_round").unwrap(),
            Rule::ChCurrentRound
        ));
        assert!(matches!(
            reg.parse("ch_intersection_window(3)").unwrap(),
            Rule::ChIntersectionWindow(3)
        ));
        assert!(matches!(
            reg.parse("ch_intersection_window:2").unwrap(),
            Rule::ChIntersectionWindow(2)
        ));
        assert!(matches!(
            reg.parse(ABSENT_BEFORE_FINAL).unwrap(),
            Rule::Custom(_)
        ));
        assert!(matches!(
            reg.parse("ch_intersection_window(0)"),
            Err(RuleError::BadParameter(_))
        ));
        assert!(matches!(
            reg.parse("ch_current_round(2)"),
            Err(RuleError::BadParameter(_))
        ));
        assert_eq!(
            reg.parse("nope").unwrap_err(),
            RuleError::UnknownRule("nope".into())
        );
        for rule in [
            Rule::ChCurrentRound,
            Rule::CompFinalRound,
            Rule::ChIntersectionWindow(4),
            Rule::ChEverProposed,
        ] {
            assert_eq!(reg.parse(&rule.name()).unwrap().name(), rule.name());
        }
    }

    #[test]
    fn transcript_count_matches_enumeration() {
        // 3 labels, all 8 subsets, up to 3 rounds: 8 + 64 + 512.
        assert_eq!(transcript_count(3, 3, 3), 584);
        // subsets of size <= 1 over 3 labels: 4.
        assert_eq!(transcript_count(3, 2, 1), 4 + 16);
        let report = check_dominance(&Rule::ChCurrentRound, &space(3), 3, 3, u128::MAX).unwrap();
        assert_eq!(report.transcripts_checked, 584);
    }

    #[test]
    fn dominance_holds_for_stock_rules() {
        for rule in [Rule::ChCurrentRound, Rule::CompFinalRound] {
            let report = check_dominance(&rule, &space(3), 3, 3, u128::MAX).unwrap();
            assert!(report.holds, "{}", rule);
            assert!(report.counterexamples.is_empty());
        }
    }

    #[test]
    fn dominance_fails_for_absent_before_final() {
        let rule = RuleRegistry::default().parse(ABSENT_BEFORE_FINAL).unwrap();
        let report = check_dominance(&rule, &space(3), 3, 3, u128::MAX).unwrap();
        assert!(!report.holds);
        let cx = &report.counterexamples[0];
        assert!(cx.rule_value && !cx.activation_value);
        assert!(cx.round < cx.transcript.len());
        assert!(!cx.transcript[cx.round - 1].contains(&cx.label));
    }

    #[test]
    fn enumeration_cap_rejects_large_bounds() {
        let err =
            check_dominance(&Rule::ChCurrentRound, &space(10), 20, 10, 1_000_000).unwrap_err();
        assert!(matches!(err, RuleError::EnumerationTooLarge { .. }));
    }
}
