//! Denotations under the transparent and the binder-perturbed semantics,
//! the assertion oracle, and an empirical strong-transparency check.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Not;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grammar::{Label, Nonterminal, NodeId, Pcfg, Sampler, SynTree, Token, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TruthValue {
    T,
    F,
}

impl TruthValue {
    pub fn as_bool(self) -> bool {
        self == TruthValue::T
    }

    pub fn token(self) -> Token {
        match self {
            TruthValue::T => Token::True,
            TruthValue::F => Token::False,
        }
    }

    pub fn from_token(t: Token) -> Option<TruthValue> {
        match t {
            Token::True => Some(TruthValue::T),
            Token::False => Some(TruthValue::F),
            _ => None,
        }
    }
}

impl From<bool> for TruthValue {
    fn from(b: bool) -> Self {
        if b {
            TruthValue::T
        } else {
            TruthValue::F
        }
    }
}

impl Not for TruthValue {
    type Output = TruthValue;

    fn not(self) -> TruthValue {
        TruthValue::from(!self.as_bool())
    }
}

impl fmt::Display for TruthValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TruthValue::T => "T",
            TruthValue::F => "F",
        })
    }
}

/// Per-node values indexed by node id. Literal leaves and nonterminals carry
/// a value; punctuation and connective leaves do not.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Denotations(Vec<Option<TruthValue>>);

impl Denotations {
    pub fn get(&self, id: NodeId) -> Option<TruthValue> {
        self.0.get(id.0).copied().flatten()
    }

    pub fn root(&self) -> TruthValue {
        self.0[0].expect("root always has a value")
    }

    pub fn as_slice(&self) -> &[Option<TruthValue>] {
        &self.0
    }
}

/// Bottom-up evaluation with a caller-supplied literal interpretation.
fn evaluate(tree: &SynTree, literal: impl Fn(NodeId, TruthValue) -> TruthValue) -> Denotations {
    let nodes = tree.nodes();
    let mut values = vec![None; nodes.len()];
    // Children always have larger preorder ids than their parent.
    for i in (0..nodes.len()).rev() {
        let node = &nodes[i];
        values[i] = match node.label {
            Label::Leaf(t) => TruthValue::from_token(t).map(|v| literal(NodeId(i), v)),
            Label::Nonterminal(_) => {
                let kids = &node.children;
                let value = |k: usize| values[kids[k].0].expect("operand has a value");
                let v = match kids.len() {
                    1 => value(0),
                    4 => !value(2),
                    5 => {
                        let (l, r) = (value(1).as_bool(), value(3).as_bool());
                        match nodes[kids[2].0].token() {
                            Some(Token::And) => TruthValue::from(l && r),
                            Some(Token::Or) => TruthValue::from(l || r),
                            other => unreachable!("connective slot holds {other:?}"),
                        }
                    }
                    n => unreachable!("nonterminal with {n} children"),
                };
                Some(v)
            }
        };
    }
    Denotations(values)
}

pub fn denotations_lt(tree: &SynTree) -> Denotations {
    evaluate(tree, |_, v| v)
}

/// Conventional propositional-logic value.
pub fn eval_lt(tree: &SynTree) -> TruthValue {
    denotations_lt(tree).root()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binder {
    pub node: NodeId,
    pub polarity: TruthValue,
    /// Root of a sibling subtree the binder c-commands.
    pub scope: NodeId,
    /// Literals inside `scope` whose kind matches `polarity`.
    pub bound: Vec<NodeId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinderMarking {
    pub inverted_literals: BTreeSet<NodeId>,
    /// One entry per (binder node, sibling scope). Binders without a
    /// sibling scope bind nothing and are not listed.
    pub binders: Vec<Binder>,
}

impl BinderMarking {
    pub fn is_empty(&self) -> bool {
        self.inverted_literals.is_empty()
    }

    pub fn is_inverted(&self, id: NodeId) -> bool {
        self.inverted_literals.contains(&id)
    }

    /// Binders that invert at least one literal.
    pub fn effective_binders(&self) -> impl Iterator<Item = &Binder> {
        self.binders.iter().filter(|b| !b.bound.is_empty())
    }
}

/// If `id` expands syntactically to `(!T)` or `(!F)`, the literal's polarity.
pub fn binder_polarity(tree: &SynTree, id: NodeId) -> Option<TruthValue> {
    let nodes = tree.nodes();
    let node = &nodes[id.0];
    if node.nonterminal().is_none() || node.children.len() != 4 {
        return None;
    }
    let operand = &nodes[node.children[2].0];
    if operand.children.len() != 1 {
        return None;
    }
    nodes[operand.children[0].0].token().and_then(TruthValue::from_token)
}

/// Finds every syntactic `(!T)`/`(!F)` binder and the literals of matching
/// kind inside its sibling subtrees. Binder identity ignores whether the
/// binder's own literal is itself inverted, and a literal covered by several
/// binders is inverted once.
pub fn mark_binders(tree: &SynTree) -> BinderMarking {
    let mut marking = BinderMarking::default();
    for id in tree.ids() {
        let Some(polarity) = binder_polarity(tree, id) else {
            continue;
        };
        let want = polarity.token();
        for scope in tree.sibling_subtrees(id) {
            let bound: Vec<NodeId> = tree
                .descendants(scope)
                .filter(|&d| tree.nodes()[d.0].token() == Some(want))
                .collect();
            marking.inverted_literals.extend(bound.iter().copied());
            marking.binders.push(Binder {
                node: id,
                polarity,
                scope,
                bound,
            });
        }
    }
    marking
}

pub fn denotations_ln(tree: &SynTree) -> Denotations {
    let marking = mark_binders(tree);
    evaluate(tree, |id, v| if marking.is_inverted(id) { !v } else { v })
}

pub fn eval_ln(tree: &SynTree) -> TruthValue {
    denotations_ln(tree).root()
}

pub fn denotations(tree: &SynTree, variant: Variant) -> Denotations {
    match variant {
        Variant::Lt => denotations_lt(tree),
        Variant::Ln => denotations_ln(tree),
    }
}

pub fn eval(tree: &SynTree, variant: Variant) -> TruthValue {
    denotations(tree, variant).root()
}

/// Whether `a` and `b` share a denotation in the empty context.
pub fn assertion_oracle(a: &SynTree, b: &SynTree, variant: Variant) -> bool {
    eval(a, variant) == eval(b, variant)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub sentence: String,
    pub node_id: NodeId,
    /// Surface form of the offending subexpression.
    pub expression: String,
    pub in_situ_value: TruthValue,
    pub standalone_value: TruthValue,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransparencyReport {
    pub variant: Option<Variant>,
    pub sentences_checked: usize,
    pub nodes_checked: usize,
    pub violations: Vec<Violation>,
}

impl TransparencyReport {
    pub fn is_transparent(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn extend(&mut self, other: TransparencyReport) {
        self.sentences_checked += other.sentences_checked;
        self.nodes_checked += other.nodes_checked;
        self.violations.extend(other.violations);
    }
}

/// Compares each non-root nonterminal's in-situ value with the value of the
/// same subexpression evaluated on its own.
pub fn check_tree_transparency(tree: &SynTree, variant: Variant) -> Result<TransparencyReport> {
    let in_situ = denotations(tree, variant);
    let mut report = TransparencyReport {
        variant: Some(variant),
        sentences_checked: 1,
        ..Default::default()
    };
    let sentence = tree.surface();
    for id in tree.ids().skip(1) {
        if tree.nodes()[id.0].nonterminal() != Some(Nonterminal::E) {
            continue;
        }
        let standalone = eval(&tree.subtree(id)?, variant);
        let here = in_situ.get(id).expect("nonterminals carry values");
        report.nodes_checked += 1;
        if here != standalone {
            report.violations.push(Violation {
                sentence: sentence.clone(),
                node_id: id,
                expression: tree.subtree(id)?.surface(),
                in_situ_value: here,
                standalone_value: standalone,
            });
        }
    }
    Ok(report)
}

pub fn transparency_check<R: Rng + ?Sized>(
    variant: Variant,
    pcfg: &Pcfg,
    n_samples: usize,
    max_tokens: usize,
    rng: &mut R,
) -> Result<TransparencyReport> {
    let sampler = Sampler::new(pcfg, max_tokens)?;
    let mut report = TransparencyReport {
        variant: Some(variant),
        ..Default::default()
    };
    for _ in 0..n_samples {
        let tree = sampler.sample(rng)?;
        report.extend(check_tree_transparency(&tree, variant)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse_str;

    fn t(s: &str) -> SynTree {
        parse_str(s).unwrap()
    }

    #[test]
    fn lt_values() {
        assert_eq!(eval_lt(&t("(((!T)|F)|(!T))")), TruthValue::F);
        assert_eq!(eval_lt(&t("(T&(!F))")), TruthValue::T);
        assert_eq!(eval_lt(&t("(!T)")), TruthValue::F);
        assert_eq!(eval_lt(&t("(T|F)")), TruthValue::T);
        assert_eq!(eval_lt(&t("(T&F)")), TruthValue::F);
    }

    #[test]
    fn ln_values() {
        assert_eq!(eval_ln(&t("(((!T)|F)|(!T))")), TruthValue::T);
        // No binder: semantics coincide.
        for s in ["(T&F)", "(!(T&F))", "((T|F)&(F|T))"] {
            assert!(mark_binders(&t(s)).is_empty());
            assert_eq!(eval_ln(&t(s)), eval_lt(&t(s)));
        }
    }

    #[test]
    fn mutual_binders() {
        let tree = t("((!T)&(!T))");
        let m = mark_binders(&tree);
        assert_eq!(m.inverted_literals.len(), 2);
        assert_eq!(m.binders.len(), 2);
        // (!F) & (!F) = T & T
        assert_eq!(eval_ln(&tree), TruthValue::T);
        assert_eq!(eval_lt(&tree), TruthValue::F);
    }

    #[test]
    fn literal_inverted_once() {
        // Two binders both scope the same T.
        let tree = t("((!T)&((!T)|T))");
        let m = mark_binders(&tree);
        let last_t = tree
            .ids()
            .filter(|&i| tree.nodes()[i.0].token() == Some(Token::True))
            .last()
            .unwrap();
        let covering = m.binders.iter().filter(|b| b.bound.contains(&last_t)).count();
        assert_eq!(covering, 2);
        assert!(m.is_inverted(last_t));
        assert_eq!(m, mark_binders(&tree));
    }

    #[test]
    fn golden_marking() {
        let tree = t("(((!T)|F)|(!T))");
        let m = mark_binders(&tree);
        let inverted: Vec<_> = m.inverted_literals.iter().collect();
        assert_eq!(inverted.len(), 1);
        assert_eq!(tree.nodes()[inverted[0].0].span, 4..5);
        let effective: Vec<_> = m.effective_binders().collect();
        assert_eq!(effective.len(), 1);
        assert_eq!(tree.nodes()[effective[0].node.0].span, 10..14);
        assert_eq!(tree.nodes()[effective[0].scope.0].span, 1..9);
    }

    #[test]
    fn oracle() {
        assert!(assertion_oracle(&t("(T&F)"), &t("(F|F)"), Variant::Lt));
        assert!(!assertion_oracle(&t("(!T)"), &t("(!F)"), Variant::Lt));
        let s = t("((!T)&(T|F))");
        assert!(assertion_oracle(&s, &s, Variant::Ln));
    }

    #[test]
    fn golden_violations() {
        let tree = t("(((!T)|F)|(!T))");
        assert!(check_tree_transparency(&tree, Variant::Lt).unwrap().is_transparent());
        let report = check_tree_transparency(&tree, Variant::Ln).unwrap();
        let inverted = report
            .violations
            .iter()
            .find(|v| tree.nodes()[v.node_id.0].span == (4..5))
            .expect("violation at the bound literal");
        assert_eq!(inverted.in_situ_value, TruthValue::F);
        assert_eq!(inverted.standalone_value, TruthValue::T);
        assert_eq!(inverted.expression, "T");
    }

    #[test]
    fn literal_without_binder_is_fine() {
        let report = check_tree_transparency(&t("(T|(F&T))"), Variant::Ln).unwrap();
        assert!(report.is_transparent());
        assert_eq!(report.nodes_checked, 4);
    }
}
