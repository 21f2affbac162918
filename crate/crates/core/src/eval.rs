//! Routing-quality metrics over decision records.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decision::SignalVector;
use crate::state::Action;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("no records to evaluate")]
    Empty,
    #[error("ANSWER records without a correctness flag: {}", .0.join(", "))]
    MissingCorrectness(Vec<String>),
    #[error("records without a gold action: {}", .0.join(", "))]
    MissingGold(Vec<String>),
}

/// Per-record routing flags.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecordFlags {
    /// The planner output failed the grammar and a fallback was used.
    pub malformed: bool,
    /// The decision token was accepted only after case folding.
    pub non_strict: bool,
    /// The agent replaced the model's reply with a template.
    pub fallback: bool,
    /// Gate rule that fired, when the gate routed the record.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule: Option<u8>,
}

/// One routed query as written by `route --batch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub id: String,
    #[serde(default)]
    pub gold_action: Option<Action>,
    pub predicted_action: Action,
    #[serde(default)]
    pub response: String,
    #[serde(default)]
    pub signals: Option<SignalVector>,
    #[serde(default)]
    pub flags: RecordFlags,
    /// Whether a committed answer was judged correct.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

/// Gold rows by predicted columns, in ANSWER / ASK / ABSTAIN order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn add(&mut self, gold: Action, predicted: Action) {
        self.counts[gold.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    fn merge(mut self, other: Self) -> Self {
        for i in 0..3 {
            for j in 0..3 {
                self.counts[i][j] += other.counts[i][j];
            }
        }
        self
    }
}

/// Counts gold against predicted. Records without gold are an error.
pub fn confusion(records: &[DecisionRecord]) -> Result<ConfusionMatrix, EvalError> {
    let unlabeled: Vec<String> = records
        .iter()
        .filter(|r| r.gold_action.is_none())
        .map(|r| r.id.clone())
        .collect();
    if !unlabeled.is_empty() {
        return Err(EvalError::MissingGold(unlabeled));
    }
    Ok(records
        .par_iter()
        .fold(ConfusionMatrix::default, |mut cm, r| {
            cm.add(r.gold_action.expect("checked"), r.predicted_action);
            cm
        })
        .reduce(ConfusionMatrix::default, ConfusionMatrix::merge))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreMetrics {
    pub decision_accuracy: f64,
    pub macro_f1: f64,
    pub per_action: BTreeMap<String, ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<CoreMetrics, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let mut per_action = BTreeMap::new();
    let mut f1_sum = 0.0;
    for a in Action::ALL {
        let i = a.index();
        let tp = cm.counts[i][i];
        let predicted: u64 = (0..3).map(|g| cm.counts[g][i]).sum();
        let support: u64 = cm.counts[i].iter().sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
        per_action.insert(
            a.as_str().to_string(),
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            },
        );
    }
    Ok(CoreMetrics {
        decision_accuracy: ratio(cm.trace(), total),
        macro_f1: f1_sum / 3.0,
        per_action,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hallucination {
    pub rate: f64,
    /// No ANSWER predictions, so the rate is reported as 0.
    pub undefined: bool,
}

/// Incorrect committed answers over all committed answers.
pub fn hallucination_rate(records: &[DecisionRecord]) -> Result<Hallucination, EvalError> {
    let answers: Vec<&DecisionRecord> = records
        .iter()
        .filter(|r| r.predicted_action == Action::Answer)
        .collect();
    let unjudged: Vec<String> = answers
        .iter()
        .filter(|r| r.correct.is_none())
        .map(|r| r.id.clone())
        .collect();
    if !unjudged.is_empty() {
        return Err(EvalError::MissingCorrectness(unjudged));
    }
    if answers.is_empty() {
        return Ok(Hallucination {
            rate: 0.0,
            undefined: true,
        });
    }
    let wrong = answers.iter().filter(|r| r.correct == Some(false)).count();
    Ok(Hallucination {
        rate: wrong as f64 / answers.len() as f64,
        undefined: false,
    })
}

/// Share of records the system tried to answer.
pub fn coverage_fraction(records: &[DecisionRecord]) -> f64 {
    ratio(
        records
            .iter()
            .filter(|r| r.predicted_action == Action::Answer)
            .count() as u64,
        records.len() as u64,
    )
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagSummary {
    pub non_strict: usize,
    pub malformed: usize,
    pub fallback: usize,
    pub hallucination_undefined: bool,
    pub judged_from_file: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub decision_accuracy: f64,
    pub macro_f1: f64,
    pub per_action: BTreeMap<String, ClassMetrics>,
    pub abstain_recall: f64,
    pub ask_recall: f64,
    pub hallucination_rate: f64,
    pub coverage_fraction: f64,
    pub compliance_rate: f64,
    pub confusion: ConfusionMatrix,
    pub flags: FlagSummary,
}

/// Correctness verdicts keyed by record id, one `{"id", "correct"}` object
/// per line.
pub fn parse_judge_file(content: &str) -> Result<HashMap<String, bool>, String> {
    #[derive(Deserialize)]
    struct Verdict {
        id: String,
        correct: bool,
    }
    let mut out = HashMap::new();
    for (n, line) in content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let v: Verdict =
            serde_json::from_str(line).map_err(|e| format!("judge file line {}: {e}", n + 1))?;
        out.insert(v.id, v.correct);
    }
    Ok(out)
}

pub fn evaluate(
    records: &[DecisionRecord],
    judge: Option<&HashMap<String, bool>>,
) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut flags = FlagSummary::default();
    let records: Vec<DecisionRecord> = records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if let Some(&c) = judge.and_then(|j| j.get(&r.id)) {
                r.correct = Some(c);
                flags.judged_from_file += 1;
            }
            r
        })
        .collect();
    let cm = confusion(&records)?;
    let core = metrics(&cm)?;
    let hall = hallucination_rate(&records)?;
    flags.non_strict = records.iter().filter(|r| r.flags.non_strict).count();
    flags.malformed = records.iter().filter(|r| r.flags.malformed).count();
    flags.fallback = records.iter().filter(|r| r.flags.fallback).count();
    flags.hallucination_undefined = hall.undefined;
    Ok(EvalReport {
        records: records.len(),
        decision_accuracy: core.decision_accuracy,
        macro_f1: core.macro_f1,
        abstain_recall: core.per_action["ABSTAIN"].recall,
        ask_recall: core.per_action["ASK"].recall,
        per_action: core.per_action,
        hallucination_rate: hall.rate,
        coverage_fraction: coverage_fraction(&records),
        compliance_rate: ratio(
            (records.len() - flags.malformed) as u64,
            records.len() as u64,
        ),
        confusion: cm,
        flags,
    })
}

impl EvalReport {
    /// Plain-text table with one metric per row.
    pub fn table(&self) -> String {
        let pct = |x: f64| format!("{:.1}%", x * 100.0);
        let hall = if self.flags.hallucination_undefined {
            "n/a".to_string()
        } else {
            pct(self.hallucination_rate)
        };
        let rows = [
            ("Decision Accuracy", pct(self.decision_accuracy)),
            ("Macro F1", pct(self.macro_f1)),
            ("Hallucination Rate", hall),
            ("Ask Recall", pct(self.ask_recall)),
            ("Abstain Recall", pct(self.abstain_recall)),
            ("Coverage", pct(self.coverage_fraction)),
            ("Compliance", pct(self.compliance_rate)),
        ];
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>8}", "Metric", "Value");
        for (name, value) in rows {
            let _ = writeln!(out, "{name:<20} {value:>8}");
        }
        let _ = writeln!(
            out,
            "\n{:<10} {:>8} {:>8} {:>8}",
            "gold\\pred", "ANSWER", "ASK", "ABSTAIN"
        );
        for a in Action::ALL {
            let c = self.confusion.counts[a.index()];
            let _ = writeln!(
                out,
                "{:<10} {:>8} {:>8} {:>8}",
                a.as_str(),
                c[0],
                c[1],
                c[2]
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, gold: Action, predicted: Action, correct: Option<bool>) -> DecisionRecord {
        DecisionRecord {
            id: id.into(),
            gold_action: Some(gold),
            predicted_action: predicted,
            response: String::new(),
            signals: None,
            flags: RecordFlags::default(),
            correct,
        }
    }

    fn from_counts(c: [[u64; 3]; 3]) -> ConfusionMatrix {
        ConfusionMatrix { counts: c }
    }

    /// Per-class metrics computed by listing every (gold, predicted) pair.
    fn brute_force(c: &[[u64; 3]; 3]) -> (f64, f64) {
        let mut pairs = Vec::new();
        for g in 0..3 {
            for p in 0..3 {
                for _ in 0..c[g][p] {
                    pairs.push((g, p));
                }
            }
        }
        let n = pairs.len() as f64;
        let acc = pairs.iter().filter(|(g, p)| g == p).count() as f64 / n;
        let mut f1s = 0.0;
        for k in 0..3 {
            let tp = pairs.iter().filter(|&&(g, p)| g == k && p == k).count() as f64;
            let fp = pairs.iter().filter(|&&(g, p)| g != k && p == k).count() as f64;
            let fneg = pairs.iter().filter(|&&(g, p)| g == k && p != k).count() as f64;
            let f1 = if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fneg)
            };
            f1s += f1;
        }
        (acc, f1s / 3.0)
    }

    #[test]
    fn confusion_cells() {
        let rs = vec![
            rec("a", Action::Answer, Action::Answer, Some(true)),
            rec("b", Action::Abstain, Action::Answer, Some(false)),
            rec("c", Action::Ask, Action::Ask, None),
        ];
        let cm = confusion(&rs).unwrap();
        assert_eq!(cm.counts[2][0], 1);
        assert_eq!(cm.trace(), 2);
        assert_eq!(cm.total(), 3);
    }

    #[test]
    fn all_answer_on_balanced_set() {
        let m = metrics(&from_counts([[300, 0, 0], [300, 0, 0], [300, 0, 0]])).unwrap();
        assert!((m.decision_accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.per_action["ANSWER"].f1 - 0.5).abs() < 1e-12);
        assert!((m.macro_f1 - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_and_perfect() {
        let m = metrics(&from_counts([[0, 0, 0], [0, 12, 0], [0, 0, 0]])).unwrap();
        assert_eq!(m.per_action["ASK"].f1, 1.0);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        let m = metrics(&from_counts([[4, 0, 0], [0, 5, 0], [0, 0, 6]])).unwrap();
        assert_eq!((m.decision_accuracy, m.macro_f1), (1.0, 1.0));
        assert_eq!(metrics(&ConfusionMatrix::default()), Err(EvalError::Empty));
    }

    #[test]
    fn hallucination_and_coverage() {
        let mut rs: Vec<DecisionRecord> = (0..10)
            .map(|i| {
                rec(
                    &format!("r{i}"),
                    Action::Answer,
                    Action::Answer,
                    Some(i >= 4),
                )
            })
            .collect();
        assert_eq!(
            hallucination_rate(&rs).unwrap(),
            Hallucination {
                rate: 0.4,
                undefined: false
            }
        );
        rs.push(rec("x", Action::Ask, Action::Answer, None));
        assert_eq!(
            hallucination_rate(&rs),
            Err(EvalError::MissingCorrectness(vec!["x".into()]))
        );
        let none = vec![rec("n", Action::Ask, Action::Abstain, None)];
        assert_eq!(
            hallucination_rate(&none).unwrap(),
            Hallucination {
                rate: 0.0,
                undefined: true
            }
        );
        assert_eq!(coverage_fraction(&none), 0.0);
        let cov: Vec<DecisionRecord> = (0..100)
            .map(|i| {
                rec(
                    &format!("c{i}"),
                    Action::Ask,
                    if i < 54 { Action::Answer } else { Action::Ask },
                    Some(true),
                )
            })
            .collect();
        assert!((coverage_fraction(&cov) - 0.54).abs() < 1e-12);
    }

    #[test]
    fn hallucination_matches_count_on_fixture() {
        let rs: Vec<DecisionRecord> = (0..30)
            .map(|i| {
                let p = Action::ALL[(i * 7) % 3];
                rec(&format!("f{i}"), Action::ALL[i % 3], p, Some(i % 5 != 0))
            })
            .collect();
        let answers = rs
            .iter()
            .filter(|r| r.predicted_action == Action::Answer)
            .count();
        let wrong = rs
            .iter()
            .filter(|r| r.predicted_action == Action::Answer && r.correct == Some(false))
            .count();
        assert_eq!(
            hallucination_rate(&rs).unwrap().rate,
            wrong as f64 / answers as f64
        );
    }

    #[test]
    fn judge_file_overrides() {
        let rs = vec![
            rec("a", Action::Answer, Action::Answer, None),
            rec("b", Action::Ask, Action::Ask, None),
        ];
        assert!(evaluate(&rs, None).is_err());
        let judge = parse_judge_file("{\"id\": \"a\", \"correct\": false}\n").unwrap();
        let report = evaluate(&rs, Some(&judge)).unwrap();
        assert_eq!(report.hallucination_rate, 1.0);
        assert_eq!(report.flags.judged_from_file, 1);
        assert!(report.table().contains("Macro F1"));
        assert!(parse_judge_file("{\"id\": 3}").is_err());
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force(c in proptest::array::uniform3(proptest::array::uniform3(0u64..40))) {
            prop_assume!(c.iter().flatten().sum::<u64>() > 0);
            let m = metrics(&from_counts(c)).unwrap();
            let (acc, macro_f1) = brute_force(&c);
            prop_assert!((m.decision_accuracy - acc).abs() < 1e-9);
            prop_assert!((m.macro_f1 - macro_f1).abs() < 1e-9);
            for cls in m.per_action.values() {
                prop_assert!((0.0..=1.0).contains(&cls.precision) && (0.0..=1.0).contains(&cls.recall));
            }
        }

        #[test]
        fn macro_f1_is_permutation_invariant(c in proptest::array::uniform3(proptest::array::uniform3(0u64..40)), perm in 0usize..6) {
            prop_assume!(c.iter().flatten().sum::<u64>() > 0);
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let p = perms[perm];
            let mut d = [[0u64; 3]; 3];
            for g in 0..3 {
                for q in 0..3 {
                    d[p[g]][p[q]] = c[g][q];
                }
            }
            let a = metrics(&from_counts(c)).unwrap().macro_f1;
            let b = metrics(&from_counts(d)).unwrap().macro_f1;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn accuracy_lower_bound(c in proptest::array::uniform3(proptest::array::uniform3(0u64..40))) {
            let cm = from_counts(c);
            prop_assume!(cm.total() > 0);
            let m = metrics(&cm).unwrap();
            for a in Action::ALL {
                let share = c[a.index()].iter().sum::<u64>() as f64 / cm.total() as f64;
                prop_assert!(m.decision_accuracy + 1e-12 >= m.per_action[a.as_str()].recall * share);
            }
        }

        #[test]
        fn confusion_total_is_order_free(n in 1usize..60, rot in 0usize..60) {
            let mut rs: Vec<DecisionRecord> = (0..n).map(|i| rec(&i.to_string(), Action::ALL[i % 3], Action::ALL[(i / 3) % 3], None)).collect();
            let a = confusion(&rs).unwrap();
            rs.rotate_left(rot % n);
            prop_assert_eq!(a, confusion(&rs).unwrap());
            prop_assert_eq!(a.total(), n as u64);
        }
    }
}
