//! Training-free evaluation: after `s=`, which literal completes a template
//! so that the right-hand side has the value of `s`?

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{Token, Variant};
use crate::neural::{Arch, Checkpoint};
use crate::semantics::{eval, TruthValue};
use crate::grammar::SynTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    pub pattern: &'static str,
    /// The template negates its slot, so the fill must be the opposite value.
    pub negated: bool,
}

const TEMPLATES: [Template; 5] = [
    Template {
        name: "and_true",
        pattern: "(T&_)",
        negated: false,
    },
    Template {
        name: "or_false",
        pattern: "(F|_)",
        negated: false,
    },
    Template {
        name: "true_and",
        pattern: "(_&T)",
        negated: false,
    },
    Template {
        name: "false_or",
        pattern: "(_|F)",
        negated: false,
    },
    Template {
        name: "not",
        pattern: "(!_)",
        negated: true,
    },
];

pub fn templates() -> &'static [Template; 5] {
    &TEMPLATES
}

impl Template {
    pub fn tokens(&self) -> Vec<Token> {
        self.pattern
            .chars()
            .map(|c| Token::from_char(c).expect("template alphabet"))
            .collect()
    }

    pub fn expected_fill(&self, v: TruthValue) -> TruthValue {
        if self.negated {
            !v
        } else {
            v
        }
    }

    pub fn fill(&self, v: TruthValue) -> Vec<Token> {
        self.tokens()
            .into_iter()
            .map(|t| if t == Token::Mask { v.token() } else { t })
            .collect()
    }

    /// `s = template`, with the slot left as MASK or filled.
    pub fn query(&self, sentence: &[Token], fill: Option<TruthValue>) -> Vec<Token> {
        let mut out = sentence.to_vec();
        out.push(Token::Eq);
        out.extend(match fill {
            Some(v) => self.fill(v),
            None => self.tokens(),
        });
        out
    }
}

/// Decides a fill for each `(sentence, template)` query; `None` is a tie.
pub trait FillJudge {
    /// Longest query (without specials) the judge accepts.
    fn max_query_tokens(&self) -> usize;

    fn judge(&self, queries: &[(&[Token], &Template)]) -> Result<Vec<Option<TruthValue>>>;
}

fn pick(t: f64, f: f64) -> Option<TruthValue> {
    if t > f {
        Some(TruthValue::T)
    } else if f > t {
        Some(TruthValue::F)
    } else {
        None
    }
}

/// Compares total sequence log-probabilities of the two filled sequences.
pub struct AlmJudge<'a>(pub &'a Checkpoint);

impl FillJudge for AlmJudge<'_> {
    fn max_query_tokens(&self) -> usize {
        self.0.config().max_positions.saturating_sub(2)
    }

    fn judge(&self, queries: &[(&[Token], &Template)]) -> Result<Vec<Option<TruthValue>>> {
        let mut seqs = Vec::with_capacity(2 * queries.len());
        for (s, tpl) in queries {
            seqs.push(tpl.query(s, Some(TruthValue::T)));
            seqs.push(tpl.query(s, Some(TruthValue::F)));
        }
        let scores = self.0.score_batch(&seqs)?;
        Ok(scores.chunks_exact(2).map(|p| pick(p[0], p[1])).collect())
    }
}

/// Compares the masked-position probabilities of `T` and `F`.
pub struct MlmJudge<'a>(pub &'a Checkpoint);

impl FillJudge for MlmJudge<'_> {
    fn max_query_tokens(&self) -> usize {
        self.0.config().max_positions.saturating_sub(2)
    }

    fn judge(&self, queries: &[(&[Token], &Template)]) -> Result<Vec<Option<TruthValue>>> {
        let seqs: Vec<Vec<Token>> = queries.iter().map(|(s, tpl)| tpl.query(s, None)).collect();
        let dists = self.0.mlm_fill_batch(&seqs)?;
        let (t, f) = (Token::True.index(), Token::False.index());
        Ok(dists.iter().map(|p| pick(p[t], p[f])).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateAccuracy {
    pub name: String,
    pub pattern: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectEvalReport {
    pub arch: Option<Arch>,
    pub variant: Variant,
    pub sentences: usize,
    pub skipped: usize,
    pub per_template: Vec<TemplateAccuracy>,
    /// Mean of the per-template accuracies.
    pub mean: f64,
    /// Population standard deviation of the per-template accuracies.
    pub std: f64,
}

impl DirectEvalReport {
    pub fn summary(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

const QUERY_CHUNK: usize = 256;

/// Evaluates every sentence under every template with `judge`. Ties count
/// as wrong; sentences too long for the judge are skipped and counted.
pub fn direct_eval(
    judge: &dyn FillJudge,
    sentences: &[SynTree],
    variant: Variant,
) -> Result<DirectEvalReport> {
    let limit = judge.max_query_tokens();
    let kept: Vec<(Vec<Token>, TruthValue)> = sentences
        .iter()
        .filter(|t| t.token_len() + 6 <= limit)
        .map(|t| (t.tokens(), eval(t, variant)))
        .collect();
    let skipped = sentences.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::EmptyDataset("no sentence fits the evaluation length".into()));
    }
    let mut per_template = Vec::with_capacity(TEMPLATES.len());
    for tpl in templates() {
        let mut correct = 0;
        for chunk in kept.chunks(QUERY_CHUNK) {
            let queries: Vec<(&[Token], &Template)> = chunk.iter().map(|(s, _)| (s.as_slice(), tpl)).collect();
            let picks = judge.judge(&queries)?;
            correct += picks
                .iter()
                .zip(chunk)
                .filter(|(p, (_, v))| **p == Some(tpl.expected_fill(*v)))
                .count();
        }
        per_template.push(TemplateAccuracy {
            name: tpl.name.to_string(),
            pattern: tpl.pattern.to_string(),
            correct,
            total: kept.len(),
            accuracy: correct as f64 / kept.len() as f64,
        });
    }
    let accs: Vec<f64> = per_template.iter().map(|t| t.accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64).sqrt();
    Ok(DirectEvalReport {
        arch: None,
        variant,
        sentences: sentences.len(),
        skipped,
        per_template,
        mean,
        std,
    })
}

pub fn direct_eval_alm(ckpt: &Checkpoint, sentences: &[SynTree], variant: Variant) -> Result<DirectEvalReport> {
    if ckpt.arch() != Arch::Alm {
        return Err(Error::config("direct_eval_alm needs an alm checkpoint"));
    }
    let mut r = direct_eval(&AlmJudge(ckpt), sentences, variant)?;
    r.arch = Some(Arch::Alm);
    Ok(r)
}

pub fn direct_eval_mlm(ckpt: &Checkpoint, sentences: &[SynTree], variant: Variant) -> Result<DirectEvalReport> {
    if ckpt.arch() != Arch::Mlm {
        return Err(Error::config("direct_eval_mlm needs an mlm checkpoint"));
    }
    let mut r = direct_eval(&MlmJudge(ckpt), sentences, variant)?;
    r.arch = Some(Arch::Mlm);
    Ok(r)
}

pub fn direct_eval_checkpoint(ckpt: &Checkpoint, sentences: &[SynTree], variant: Variant) -> Result<DirectEvalReport> {
    match ckpt.arch() {
        Arch::Alm => direct_eval_alm(ckpt, sentences, variant),
        Arch::Mlm => direct_eval_mlm(ckpt, sentences, variant),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{parse, sample_sentence, Pcfg};
    use crate::semantics::mark_binders;

    /// Fills by evaluating both completed right-hand sides with the
    /// semantics module and preferring the one that matches `s`.
    struct OracleJudge(Variant);

    impl FillJudge for OracleJudge {
        fn max_query_tokens(&self) -> usize {
            usize::MAX
        }

        fn judge(&self, queries: &[(&[Token], &Template)]) -> Result<Vec<Option<TruthValue>>> {
            Ok(queries
                .iter()
                .map(|(s, tpl)| {
                    let v = eval(&parse(s).unwrap(), self.0);
                    [TruthValue::T, TruthValue::F]
                        .into_iter()
                        .find(|&f| eval(&parse(&tpl.fill(f)).unwrap(), self.0) == v)
                })
                .collect())
        }
    }

    struct ConstJudge(Option<TruthValue>);

    impl FillJudge for ConstJudge {
        fn max_query_tokens(&self) -> usize {
            40
        }

        fn judge(&self, q: &[(&[Token], &Template)]) -> Result<Vec<Option<TruthValue>>> {
            Ok(vec![self.0; q.len()])
        }
    }

    fn sentences(variant: Variant, n: usize) -> Vec<SynTree> {
        let pcfg = Pcfg::default_for(variant);
        let mut rng = crate::rng::seeded(3);
        (0..n).map(|_| sample_sentence(&pcfg, &mut rng, 60).unwrap()).collect()
    }

    #[test]
    fn template_table() {
        assert_eq!(templates().len(), 5);
        let not = &templates()[4];
        assert_eq!(not.expected_fill(TruthValue::T), TruthValue::F);
        assert_eq!(templates()[0].expected_fill(TruthValue::F), TruthValue::F);
        for variant in [Variant::Lt, Variant::Ln] {
            for tpl in templates() {
                assert_eq!(tpl.tokens().iter().filter(|&&t| t == Token::Mask).count(), 1);
                for v in [TruthValue::T, TruthValue::F] {
                    let filled = parse(&tpl.fill(tpl.expected_fill(v))).unwrap();
                    assert_eq!(eval(&filled, variant), v);
                    assert!(mark_binders(&filled).is_empty());
                }
            }
        }
    }

    #[test]
    fn oracle_judge_is_perfect() {
        for variant in [Variant::Lt, Variant::Ln] {
            let r = direct_eval(&OracleJudge(variant), &sentences(variant, 300), variant).unwrap();
            assert_eq!(r.mean, 1.0);
            assert_eq!(r.std, 0.0);
        }
    }

    #[test]
    fn ties_are_wrong_and_long_sentences_skipped() {
        let s = sentences(Variant::Lt, 200);
        let r = direct_eval(&ConstJudge(None), &s, Variant::Lt).unwrap();
        assert_eq!(r.mean, 0.0);
        let long = s.iter().filter(|t| t.token_len() + 6 > 40).count();
        assert_eq!(r.skipped, long);
        let r = direct_eval(&ConstJudge(Some(TruthValue::T)), &s, Variant::Lt).unwrap();
        assert!(r.per_template.iter().all(|t| t.total == s.len() - long));
    }
}
