use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BodyStep, Rule, RuleSet};

/// How "body A is a strict subset of body B" is read.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    /// Strict sub-multiset of steps, order ignored.
    #[default]
    Multiset,
    /// Strictly shorter ordered subsequence.
    Subsequence,
}

/// Conflict resolution followed by redundancy elimination.
///
/// 1. Rules sharing an identical body collapse to the single most
///    confident one (ties keep the lowest head id).
/// 2. Among rules with the same head, `B` is dropped when some `A` has a
///    strict-subset body and strictly higher confidence.
pub fn postprocess(rules: &RuleSet, mode: SubsetMode) -> RuleSet {
    let mut by_body: BTreeMap<&[BodyStep], &Rule> = BTreeMap::new();
    for rule in rules.rules() {
        by_body
            .entry(&rule.body)
            .and_modify(|kept| {
                let better = rule.confidence > kept.confidence
                    || (rule.confidence == kept.confidence && rule.head < kept.head);
                if better {
                    *kept = rule;
                }
            })
            .or_insert(rule);
    }
    let resolved: Vec<&Rule> = by_body.into_values().collect();

    let kept = resolved
        .iter()
        .filter(|b| {
            !resolved.iter().any(|a| {
                a.head == b.head && a.confidence > b.confidence && strict_subset(&a.body, &b.body, mode)
            })
        })
        .map(|r| (*r).clone())
        .collect();
    RuleSet::new(kept)
}

fn strict_subset(a: &[BodyStep], b: &[BodyStep], mode: SubsetMode) -> bool {
    if a.len() >= b.len() {
        return false;
    }
    match mode {
        SubsetMode::Multiset => {
            let mut counts: BTreeMap<BodyStep, isize> = BTreeMap::new();
            for s in b {
                *counts.entry(*s).or_default() += 1;
            }
            a.iter().all(|s| {
                let c = counts.entry(*s).or_default();
                *c -= 1;
                *c >= 0
            })
        }
        SubsetMode::Subsequence => {
            let mut it = b.iter();
            a.iter().all(|s| it.any(|x| x == s))
        }
    }
}
