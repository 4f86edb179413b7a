//! The propositional-logic alphabet, its weighted grammar, a top-down
//! sampler, a recursive-descent parser and the c-command relation.
//!
//! The grammar is fixed:
//!
//! ```text
//! S -> (e&e) | (e|e) | (!e)
//! e -> (e&e) | (e|e) | (!e) | T | F
//! ```
//!
//! Every compound expression is fully parenthesized, so a token string has
//! at most one derivation and the parser never backtracks.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rejection budget used by [`sample_sentence`].
pub const DEFAULT_MAX_ATTEMPTS: usize = 10_000;

/// Length cap from the reference data-generation setup.
pub const DEFAULT_MAX_TOKENS: usize = 248;

/// Shortest sentence, `(!T)`.
pub const MIN_SENTENCE_TOKENS: usize = 4;

/// One surface symbol. Each kind maps to exactly one ASCII byte on disk.
///
/// | kind   | ASCII | glyph |
/// |--------|-------|-------|
/// | LParen | `(`   | (     |
/// | RParen | `)`   | )     |
/// | And    | `&`   | ∧     |
/// | Or     | `\|`  | ∨     |
/// | Not    | `!`   | ¬     |
/// | True   | `T`   | T     |
/// | False  | `F`   | F     |
/// | Eq     | `=`   | =     |
/// | Mask   | `_`   | [MASK]|
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    LParen,
    RParen,
    And,
    Or,
    Not,
    True,
    False,
    Eq,
    Mask,
}

impl Token {
    pub const ALL: [Token; 9] = [
        Token::LParen,
        Token::RParen,
        Token::And,
        Token::Or,
        Token::Not,
        Token::True,
        Token::False,
        Token::Eq,
        Token::Mask,
    ];

    pub fn to_char(self) -> char {
        match self {
            Token::LParen => '(',
            Token::RParen => ')',
            Token::And => '&',
            Token::Or => '|',
            Token::Not => '!',
            Token::True => 'T',
            Token::False => 'F',
            Token::Eq => '=',
            Token::Mask => '_',
        }
    }

    /// Accepts the ASCII forms and, on input only, the logical glyphs.
    pub fn from_char(c: char) -> Option<Token> {
        Some(match c {
            '(' => Token::LParen,
            ')' => Token::RParen,
            '&' | '∧' => Token::And,
            '|' | '∨' => Token::Or,
            '!' | '¬' => Token::Not,
            'T' => Token::True,
            'F' => Token::False,
            '=' => Token::Eq,
            '_' => Token::Mask,
            _ => return None,
        })
    }

    pub fn is_literal(self) -> bool {
        matches!(self, Token::True | Token::False)
    }

    pub fn is_connective(self) -> bool {
        matches!(self, Token::And | Token::Or)
    }

    /// Dense index in [`Token::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_char())
    }
}

pub fn tokenize(s: &str) -> Result<Vec<Token>> {
    s.chars()
        .map(|c| Token::from_char(c).ok_or(Error::UnknownSymbol(c)))
        .collect()
}

pub fn detokenize(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.to_char()).collect()
}

/// Which semantics a corpus or evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Conventional propositional logic; strongly transparent.
    Lt,
    /// Same syntax, but `(!T)` / `(!F)` invert matching literals they c-command.
    Ln,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Lt => "lt",
            Variant::Ln => "ln",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lt" => Ok(Variant::Lt),
            "ln" => Ok(Variant::Ln),
            other => Err(Error::config(format!("unknown variant {other:?} (expected lt|ln)"))),
        }
    }
}

/// Right-hand side of a production, identified by its head symbol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    And,
    Or,
    Not,
    True,
    False,
}

impl Rule {
    pub const E_RULES: [Rule; 5] = [Rule::And, Rule::Or, Rule::Not, Rule::True, Rule::False];
    pub const S_RULES: [Rule; 3] = [Rule::And, Rule::Or, Rule::Not];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Weighted productions for `S` and `e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pcfg {
    pub variant: Variant,
    s_rules: Vec<(Rule, f64)>,
    e_rules: Vec<(Rule, f64)>,
}

impl Pcfg {
    pub fn new(variant: Variant, s_rules: Vec<(Rule, f64)>, e_rules: Vec<(Rule, f64)>) -> Result<Self> {
        check_rules("S", &s_rules, &Rule::S_RULES)?;
        check_rules("e", &e_rules, &Rule::E_RULES)?;
        Ok(Pcfg {
            variant,
            s_rules,
            e_rules,
        })
    }

    /// Hand-designed weights: two binary rules at a fixed mass each, the
    /// rest split between `!` and the literals with `P(T) = P(F) = P(!)/2`.
    /// `S` keeps the `e` proportions of its three rules.
    pub fn default_for(variant: Variant) -> Pcfg {
        let binary = match variant {
            Variant::Lt => 0.06,
            Variant::Ln => 0.03,
        };
        let not = (1.0 - 2.0 * binary) / 2.0;
        let literal = not / 2.0;
        let s_mass = 2.0 * binary + not;
        Pcfg {
            variant,
            s_rules: vec![
                (Rule::And, binary / s_mass),
                (Rule::Or, binary / s_mass),
                (Rule::Not, not / s_mass),
            ],
            e_rules: vec![
                (Rule::And, binary),
                (Rule::Or, binary),
                (Rule::Not, not),
                (Rule::True, literal),
                (Rule::False, literal),
            ],
        }
    }

    pub fn s_rules(&self) -> &[(Rule, f64)] {
        &self.s_rules
    }

    pub fn e_rules(&self) -> &[(Rule, f64)] {
        &self.e_rules
    }

    pub fn prob(&self, nt: Nonterminal, rule: Rule) -> f64 {
        let rules = match nt {
            Nonterminal::S => &self.s_rules,
            Nonterminal::E => &self.e_rules,
        };
        rules
            .iter()
            .find(|(r, _)| *r == rule)
            .map_or(0.0, |(_, p)| *p)
    }

    fn draw<R: Rng + ?Sized>(&self, nt: Nonterminal, rng: &mut R) -> Rule {
        let rules = match nt {
            Nonterminal::S => &self.s_rules,
            Nonterminal::E => &self.e_rules,
        };
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(rule, p) in rules {
            acc += p;
            if u < acc {
                return rule;
            }
        }
        // Rounding slack: fall back to the last rule with positive mass.
        rules
            .iter()
            .rev()
            .find(|(_, p)| *p > 0.0)
            .map(|(r, _)| *r)
            .unwrap_or(rules[0].0)
    }
}

fn check_rules(name: &str, rules: &[(Rule, f64)], expected: &[Rule]) -> Result<()> {
    if rules.len() != expected.len() || !expected.iter().all(|r| rules.iter().any(|(x, _)| x == r)) {
        return Err(Error::InvalidGrammar(format!(
            "{name} must have exactly the productions {expected:?}"
        )));
    }
    if let Some((r, p)) = rules.iter().find(|(_, p)| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidGrammar(format!("{name} -> {r:?} has probability {p}")));
    }
    let total: f64 = rules.iter().map(|(_, p)| p).sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidGrammar(format!("{name} probabilities sum to {total}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Nonterminal {
    S,
    E,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Nonterminal(Nonterminal),
    Leaf(Token),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub label: Label,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Half-open token interval covered by this node.
    pub span: Range<usize>,
    /// One past the last preorder id inside this node's subtree.
    subtree_end: usize,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        matches!(self.label, Label::Leaf(_))
    }

    pub fn token(&self) -> Option<Token> {
        match self.label {
            Label::Leaf(t) => Some(t),
            Label::Nonterminal(_) => None,
        }
    }

    pub fn nonterminal(&self) -> Option<Nonterminal> {
        match self.label {
            Label::Nonterminal(nt) => Some(nt),
            Label::Leaf(_) => None,
        }
    }
}

/// A derivation tree. Node ids are dense and assigned in preorder, so the
/// root is always `NodeId(0)` and domination is an interval test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynTree {
    nodes: Vec<Node>,
}

impl SynTree {
    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Leaf sequence, left to right.
    pub fn tokens(&self) -> Vec<Token> {
        self.nodes.iter().filter_map(Node::token).collect()
    }

    pub fn token_len(&self) -> usize {
        self.nodes[0].span.end
    }

    pub fn surface(&self) -> String {
        detokenize(&self.tokens())
    }

    /// Reflexive: every node dominates itself.
    pub fn dominates(&self, a: NodeId, b: NodeId) -> bool {
        a.0 <= b.0 && b.0 < self.nodes[a.0].subtree_end
    }

    pub fn siblings(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        let children: &[NodeId] = match self.nodes[id.0].parent {
            Some(p) => &self.nodes[p.0].children,
            None => &[],
        };
        children.iter().copied().filter(move |&c| c != id)
    }

    /// Nonterminal siblings only; punctuation and connectives are skipped.
    pub fn sibling_subtrees(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.siblings(id).filter(move |c| !self.nodes[c.0].is_leaf())
    }

    /// `a` c-commands `b` iff they are distinct, neither dominates the other,
    /// and some sibling of `a` dominates `b`.
    pub fn c_commands(&self, a: NodeId, b: NodeId) -> Result<bool> {
        self.node(a)?;
        self.node(b)?;
        if a == b || self.dominates(a, b) || self.dominates(b, a) {
            return Ok(false);
        }
        Ok(self.siblings(a).any(|s| self.dominates(s, b)))
    }

    /// Ids in the subtree rooted at `id`, in preorder.
    pub fn descendants(&self, id: NodeId) -> impl Iterator<Item = NodeId> {
        (id.0..self.nodes[id.0].subtree_end).map(NodeId)
    }

    /// Copy of the subtree rooted at `id` as a standalone tree.
    pub fn subtree(&self, id: NodeId) -> Result<SynTree> {
        let root = self.node(id)?;
        let offset = id.0;
        let shift = root.span.start;
        let nodes = self.nodes[offset..root.subtree_end]
            .iter()
            .enumerate()
            .map(|(i, n)| Node {
                label: n.label,
                parent: if i == 0 { None } else { n.parent.map(|p| NodeId(p.0 - offset)) },
                children: n.children.iter().map(|c| NodeId(c.0 - offset)).collect(),
                span: (n.span.start - shift)..(n.span.end - shift),
                subtree_end: n.subtree_end - offset,
            })
            .collect();
        Ok(SynTree { nodes })
    }

    /// Nesting depth counted in nonterminals along the longest root path.
    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        let mut best = 0;
        for (i, n) in self.nodes.iter().enumerate() {
            let d = n.parent.map_or(0, |p| depth[p.0]) + usize::from(!n.is_leaf());
            depth[i] = d;
            best = best.max(d);
        }
        best
    }
}

impl fmt::Display for SynTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in self.nodes.iter().filter_map(Node::token) {
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for SynTree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(parse(&tokenize(s)?)?)
    }
}

struct TreeBuilder {
    nodes: Vec<Node>,
    pos: usize,
}

impl TreeBuilder {
    fn new() -> Self {
        TreeBuilder {
            nodes: Vec::new(),
            pos: 0,
        }
    }

    fn push(&mut self, label: Label, parent: Option<NodeId>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            label,
            parent,
            children: Vec::new(),
            span: self.pos..self.pos,
            subtree_end: id.0 + 1,
        });
        if let Some(p) = parent {
            self.nodes[p.0].children.push(id);
        }
        id
    }

    fn open(&mut self, nt: Nonterminal, parent: Option<NodeId>) -> NodeId {
        self.push(Label::Nonterminal(nt), parent)
    }

    fn leaf(&mut self, token: Token, parent: NodeId) -> NodeId {
        let id = self.push(Label::Leaf(token), Some(parent));
        self.pos += 1;
        self.nodes[id.0].span.end = self.pos;
        id
    }

    fn finish(mut self) -> SynTree {
        for i in (0..self.nodes.len()).rev() {
            if let (Some(first), Some(last)) = (
                self.nodes[i].children.first().copied(),
                self.nodes[i].children.last().copied(),
            ) {
                let start = self.nodes[first.0].span.start;
                let end = self.nodes[last.0].span.end;
                let subtree_end = self.nodes[last.0].subtree_end;
                let node = &mut self.nodes[i];
                node.span = start..end;
                node.subtree_end = subtree_end;
            }
        }
        SynTree { nodes: self.nodes }
    }
}

/// Counts of rule draws, including draws inside rejected attempts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionCounts {
    pub s: [u64; 3],
    pub e: [u64; 5],
}

impl ExpansionCounts {
    pub fn e_total(&self) -> u64 {
        self.e.iter().sum()
    }

    /// Empirical `e` rule frequencies in [`Rule::E_RULES`] order.
    pub fn e_frequencies(&self) -> [f64; 5] {
        let total = self.e_total().max(1) as f64;
        self.e.map(|c| c as f64 / total)
    }
}

/// Top-down ancestral sampler with whole-sentence rejection above a cap.
#[derive(Clone, Debug)]
pub struct Sampler<'a> {
    pcfg: &'a Pcfg,
    max_tokens: usize,
    max_attempts: usize,
}

enum Pending {
    Expand(Nonterminal, Option<NodeId>),
    Emit(Token, NodeId),
}

impl<'a> Sampler<'a> {
    pub fn new(pcfg: &'a Pcfg, max_tokens: usize) -> Result<Self> {
        if max_tokens < MIN_SENTENCE_TOKENS {
            return Err(Error::config(format!(
                "max_tokens must be at least {MIN_SENTENCE_TOKENS}, got {max_tokens}"
            )));
        }
        Ok(Sampler {
            pcfg,
            max_tokens,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        })
    }

    pub fn with_max_attempts(mut self, attempts: usize) -> Self {
        self.max_attempts = attempts.max(1);
        self
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SynTree> {
        self.sample_counted(rng, None)
    }

    pub fn sample_counted<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        mut counts: Option<&mut ExpansionCounts>,
    ) -> Result<SynTree> {
        for _ in 0..self.max_attempts {
            if let Some(tree) = self.attempt(rng, counts.as_deref_mut()) {
                return Ok(tree);
            }
        }
        Err(Error::RejectionBudget {
            attempts: self.max_attempts,
            what: format!("sentence of at most {} tokens", self.max_tokens),
        })
    }

    fn attempt<R: Rng + ?Sized>(&self, rng: &mut R, mut counts: Option<&mut ExpansionCounts>) -> Option<SynTree> {
        let mut builder = TreeBuilder::new();
        let mut stack = vec![Pending::Expand(Nonterminal::S, None)];
        while let Some(item) = stack.pop() {
            match item {
                Pending::Emit(token, parent) => {
                    builder.leaf(token, parent);
                }
                Pending::Expand(nt, parent) => {
                    let id = builder.open(nt, parent);
                    let rule = self.pcfg.draw(nt, rng);
                    if let Some(c) = counts.as_deref_mut() {
                        match nt {
                            Nonterminal::S => c.s[rule.index()] += 1,
                            Nonterminal::E => c.e[rule.index()] += 1,
                        }
                    }
                    match rule {
                        Rule::True => {
                            builder.leaf(Token::True, id);
                        }
                        Rule::False => {
                            builder.leaf(Token::False, id);
                        }
                        Rule::Not => {
                            stack.push(Pending::Emit(Token::RParen, id));
                            stack.push(Pending::Expand(Nonterminal::E, Some(id)));
                            stack.push(Pending::Emit(Token::Not, id));
                            stack.push(Pending::Emit(Token::LParen, id));
                        }
                        Rule::And | Rule::Or => {
                            let op = if rule == Rule::And { Token::And } else { Token::Or };
                            stack.push(Pending::Emit(Token::RParen, id));
                            stack.push(Pending::Expand(Nonterminal::E, Some(id)));
                            stack.push(Pending::Emit(op, id));
                            stack.push(Pending::Expand(Nonterminal::E, Some(id)));
                            stack.push(Pending::Emit(Token::LParen, id));
                        }
                    }
                }
            }
            // Every pending item yields at least one token.
            if builder.pos + stack.len() > self.max_tokens {
                return None;
            }
        }
        Some(builder.finish())
    }
}

/// Samples one sentence with the default rejection budget.
pub fn sample_sentence<R: Rng + ?Sized>(pcfg: &Pcfg, rng: &mut R, max_tokens: usize) -> Result<SynTree> {
    Sampler::new(pcfg, max_tokens)?.sample(rng)
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("parse error at token {index}: {kind}")]
pub struct ParseError {
    pub index: usize,
    pub kind: ParseErrorKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    Unexpected { expected: &'static str, found: Option<Token> },
    /// A parenthesized operand with no connective, e.g. `(T)`.
    MissingConnective,
    TrailingInput,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::Unexpected { expected, found: Some(t) } => {
                write!(f, "expected {expected}, found '{t}'")
            }
            ParseErrorKind::Unexpected { expected, found: None } => {
                write!(f, "expected {expected}, found end of input")
            }
            ParseErrorKind::MissingConnective => {
                f.write_str("parenthesized operand without a connective")
            }
            ParseErrorKind::TrailingInput => f.write_str("trailing tokens after a complete sentence"),
        }
    }
}

/// Parses a sentence (derivation from `S`).
pub fn parse(tokens: &[Token]) -> Result<SynTree, ParseError> {
    Parser::new(tokens).run(Nonterminal::S)
}

/// Parses an expression (derivation from `e`), e.g. a bare literal.
pub fn parse_expression(tokens: &[Token]) -> Result<SynTree, ParseError> {
    Parser::new(tokens).run(Nonterminal::E)
}

pub fn parse_str(s: &str) -> Result<SynTree> {
    s.parse()
}

struct Parser<'t> {
    tokens: &'t [Token],
    pos: usize,
    builder: TreeBuilder,
}

impl<'t> Parser<'t> {
    fn new(tokens: &'t [Token]) -> Self {
        Parser {
            tokens,
            pos: 0,
            builder: TreeBuilder::new(),
        }
    }

    fn run(mut self, start: Nonterminal) -> Result<SynTree, ParseError> {
        self.nonterminal(start, None)?;
        if self.pos != self.tokens.len() {
            return Err(self.error(ParseErrorKind::TrailingInput));
        }
        Ok(self.builder.finish())
    }

    fn peek(&self) -> Option<Token> {
        self.tokens.get(self.pos).copied()
    }

    fn error(&self, kind: ParseErrorKind) -> ParseError {
        ParseError { index: self.pos, kind }
    }

    fn unexpected(&self, expected: &'static str) -> ParseError {
        self.error(ParseErrorKind::Unexpected {
            expected,
            found: self.peek(),
        })
    }

    fn shift(&mut self, parent: NodeId) {
        let t = self.tokens[self.pos];
        self.builder.leaf(t, parent);
        self.pos += 1;
    }

    fn expect(&mut self, want: Token, expected: &'static str, parent: NodeId) -> Result<(), ParseError> {
        if self.peek() == Some(want) {
            self.shift(parent);
            Ok(())
        } else {
            Err(self.unexpected(expected))
        }
    }

    fn nonterminal(&mut self, nt: Nonterminal, parent: Option<NodeId>) -> Result<NodeId, ParseError> {
        match self.peek() {
            Some(t) if t.is_literal() && nt == Nonterminal::E => {
                let id = self.builder.open(nt, parent);
                self.shift(id);
                Ok(id)
            }
            Some(Token::LParen) => {
                let id = self.builder.open(nt, parent);
                self.shift(id);
                if self.peek() == Some(Token::Not) {
                    self.shift(id);
                    self.nonterminal(Nonterminal::E, Some(id))?;
                } else {
                    let operand = self.pos;
                    self.nonterminal(Nonterminal::E, Some(id))?;
                    match self.peek() {
                        Some(t) if t.is_connective() => self.shift(id),
                        Some(Token::RParen) => {
                            return Err(ParseError {
                                index: operand,
                                kind: ParseErrorKind::MissingConnective,
                            })
                        }
                        _ => return Err(self.unexpected("'&' or '|'")),
                    }
                    self.nonterminal(Nonterminal::E, Some(id))?;
                }
                self.expect(Token::RParen, "')'", id)?;
                Ok(id)
            }
            _ => Err(self.unexpected(match nt {
                Nonterminal::S => "'('",
                Nonterminal::E => "'(' or a literal",
            })),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const GOLDEN: &str = "(((!T)|F)|(!T))";

    fn id_of(tree: &SynTree, span: Range<usize>, nt: bool) -> NodeId {
        tree.ids()
            .find(|&i| {
                let n = tree.node(i).unwrap();
                n.span == span && n.is_leaf() != nt
            })
            .unwrap()
    }

    #[test]
    fn default_weights() {
        let lt = Pcfg::default_for(Variant::Lt);
        assert_eq!(lt.prob(Nonterminal::E, Rule::And), 0.06);
        assert_eq!(lt.prob(Nonterminal::E, Rule::Or), 0.06);
        assert!((lt.prob(Nonterminal::E, Rule::Not) - 0.44).abs() < 1e-15);
        assert!((lt.prob(Nonterminal::E, Rule::True) - 0.22).abs() < 1e-15);
        assert!((lt.prob(Nonterminal::E, Rule::False) - 0.22).abs() < 1e-15);
        assert!((lt.prob(Nonterminal::S, Rule::Not) - 0.44 / 0.56).abs() < 1e-15);
        assert_eq!(lt.prob(Nonterminal::S, Rule::True), 0.0);

        let ln = Pcfg::default_for(Variant::Ln);
        assert_eq!(ln.prob(Nonterminal::E, Rule::And), 0.03);
        assert!((ln.prob(Nonterminal::E, Rule::Not) - 0.47).abs() < 1e-15);
        assert!((ln.prob(Nonterminal::E, Rule::True) - 0.235).abs() < 1e-15);
        assert!((ln.prob(Nonterminal::S, Rule::And) - 0.03 / 0.53).abs() < 1e-15);

        for g in [&lt, &ln] {
            Pcfg::new(g.variant, g.s_rules().to_vec(), g.e_rules().to_vec()).unwrap();
        }
    }

    #[test]
    fn rejects_bad_weights() {
        let bad_sum = Pcfg::new(
            Variant::Lt,
            vec![(Rule::And, 0.5), (Rule::Or, 0.5), (Rule::Not, 0.1)],
            Pcfg::default_for(Variant::Lt).e_rules().to_vec(),
        );
        assert!(matches!(bad_sum, Err(Error::InvalidGrammar(_))));
        let literal_s = Pcfg::new(
            Variant::Lt,
            vec![(Rule::And, 0.5), (Rule::Or, 0.25), (Rule::True, 0.25)],
            Pcfg::default_for(Variant::Lt).e_rules().to_vec(),
        );
        assert!(literal_s.is_err());
        let negative = Pcfg::new(
            Variant::Lt,
            vec![(Rule::And, 1.1), (Rule::Or, -0.1), (Rule::Not, 0.0)],
            Pcfg::default_for(Variant::Lt).e_rules().to_vec(),
        );
        assert!(negative.is_err());
    }

    #[test]
    fn codec_is_bijective() {
        for t in Token::ALL {
            assert_eq!(Token::from_char(t.to_char()), Some(t));
        }
        assert_eq!(tokenize("(T∧(¬F))").unwrap(), tokenize("(T&(!F))").unwrap());
        assert!(matches!(tokenize("(T x)"), Err(Error::UnknownSymbol(' '))));
    }

    #[test]
    fn parses_golden_sentence() {
        let tree: SynTree = GOLDEN.parse().unwrap();
        assert_eq!(tree.surface(), GOLDEN);
        let root = tree.node(tree.root()).unwrap();
        assert_eq!(root.label, Label::Nonterminal(Nonterminal::S));
        assert_eq!(root.children.len(), 5);
        let kids: Vec<_> = root.children.iter().map(|c| tree.node(*c).unwrap().label).collect();
        assert_eq!(kids[0], Label::Leaf(Token::LParen));
        assert_eq!(kids[1], Label::Nonterminal(Nonterminal::E));
        assert_eq!(kids[2], Label::Leaf(Token::Or));
        assert_eq!(kids[3], Label::Nonterminal(Nonterminal::E));
        assert_eq!(kids[4], Label::Leaf(Token::RParen));
        // 7 nonterminals, 15 leaves
        assert_eq!(tree.nodes().iter().filter(|n| !n.is_leaf()).count(), 7);
        assert_eq!(tree.token_len(), 15);
        assert_eq!(tree.depth(), 4);
    }

    #[test]
    fn parse_errors() {
        let err = parse(&tokenize("(T)").unwrap()).unwrap_err();
        assert_eq!(err.index, 1);
        assert_eq!(err.kind, ParseErrorKind::MissingConnective);
        assert_eq!(parse(&tokenize("T").unwrap()).unwrap_err().index, 0);
        assert_eq!(parse(&tokenize("((!T)&F").unwrap()).unwrap_err().index, 7);
        assert_eq!(
            parse(&tokenize("(!T))").unwrap()).unwrap_err().kind,
            ParseErrorKind::TrailingInput
        );
        assert!(parse(&[]).is_err());
        assert!(parse(&tokenize("(T=F)").unwrap()).is_err());
        assert!(parse_expression(&tokenize("T").unwrap()).is_ok());
    }

    #[test]
    fn c_command_on_golden() {
        let tree: SynTree = GOLDEN.parse().unwrap();
        let blue = id_of(&tree, 10..14, true);
        let red_t = id_of(&tree, 4..5, false);
        let other_t = id_of(&tree, 12..13, false);
        let inner_neg = id_of(&tree, 2..6, true);
        assert!(tree.c_commands(blue, red_t).unwrap());
        assert!(!tree.c_commands(inner_neg, other_t).unwrap());
        for id in tree.ids() {
            assert!(!tree.c_commands(id, id).unwrap());
        }
        assert!(matches!(tree.c_commands(NodeId(99), blue), Err(Error::UnknownNode(99))));
    }

    #[test]
    fn sampling_is_deterministic_and_capped() {
        let pcfg = Pcfg::default_for(Variant::Lt);
        for seed in 0..20 {
            let a = sample_sentence(&pcfg, &mut ChaCha8Rng::seed_from_u64(seed), 248).unwrap();
            let b = sample_sentence(&pcfg, &mut ChaCha8Rng::seed_from_u64(seed), 248).unwrap();
            assert_eq!(a, b);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sampler = Sampler::new(&pcfg, 12).unwrap();
        for _ in 0..2000 {
            assert!(sampler.sample(&mut rng).unwrap().token_len() <= 12);
        }
    }

    #[test]
    fn infeasible_cap() {
        let pcfg = Pcfg::default_for(Variant::Lt);
        assert!(Sampler::new(&pcfg, 3).is_err());
        // Only binary S rules: shortest is (T&T), 5 tokens.
        let binary_only = Pcfg::new(
            Variant::Lt,
            vec![(Rule::And, 0.5), (Rule::Or, 0.5), (Rule::Not, 0.0)],
            pcfg.e_rules().to_vec(),
        )
        .unwrap();
        let sampler = Sampler::new(&binary_only, 4).unwrap().with_max_attempts(50);
        let err = sampler.sample(&mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::RejectionBudget { attempts: 50, .. }));
    }

    #[test]
    fn subtree_is_standalone() {
        let tree: SynTree = GOLDEN.parse().unwrap();
        let left = id_of(&tree, 1..9, true);
        let sub = tree.subtree(left).unwrap();
        assert_eq!(sub.surface(), "((!T)|F)");
        assert_eq!(sub, parse_expression(&tokenize("((!T)|F)").unwrap()).unwrap());
    }
}
