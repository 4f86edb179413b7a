//! Reference implementations that share no code with the library's
//! evaluators. They work on raw ASCII strings and parent pointers only.

#![allow(dead_code)]

use emulab::grammar::SynTree;

/// Reduces innermost redexes with the connective truth tables until one
/// literal remains. Returns `None` for strings that never reduce.
pub fn rewrite_eval(s: &str) -> Option<char> {
    let mut cur: Vec<u8> = s.bytes().collect();
    loop {
        if cur.len() == 1 && matches!(cur[0], b'T' | b'F') {
            return Some(cur[0] as char);
        }
        let mut next = Vec::with_capacity(cur.len());
        let mut i = 0;
        let mut changed = false;
        while i < cur.len() {
            let w = &cur[i..];
            if w.len() >= 4 && w[0] == b'(' && w[1] == b'!' && is_lit(w[2]) && w[3] == b')' {
                next.push(if w[2] == b'T' { b'F' } else { b'T' });
                i += 4;
                changed = true;
            } else if w.len() >= 5 && w[0] == b'(' && is_lit(w[1]) && is_lit(w[3]) && w[4] == b')' && matches!(w[2], b'&' | b'|')
            {
                let (a, b) = (w[1] == b'T', w[3] == b'T');
                let v = if w[2] == b'&' { a && b } else { a || b };
                next.push(if v { b'T' } else { b'F' });
                i += 5;
                changed = true;
            } else {
                next.push(w[0]);
                i += 1;
            }
        }
        if !changed {
            return None;
        }
        cur = next;
    }
}

fn is_lit(b: u8) -> bool {
    b == b'T' || b == b'F'
}

/// Every expression string derivable from `e` with at most `max` tokens,
/// grouped by exact length.
pub fn expressions_by_len(max: usize) -> Vec<Vec<String>> {
    let mut by_len: Vec<Vec<String>> = vec![Vec::new(); max + 1];
    if max >= 1 {
        by_len[1] = vec!["T".into(), "F".into()];
    }
    for n in 2..=max {
        let mut out = Vec::new();
        if n >= 4 {
            for e in &by_len[n - 3] {
                out.push(format!("(!{e})"));
            }
        }
        if n >= 5 {
            for l in 1..=n - 4 {
                let r = n - 3 - l;
                for a in &by_len[l] {
                    for b in &by_len[r] {
                        out.push(format!("({a}&{b})"));
                        out.push(format!("({a}|{b})"));
                    }
                }
            }
        }
        by_len[n] = out;
    }
    by_len
}

/// Every sentence (derivation from `S`) of at most `max` tokens.
pub fn all_sentences(max: usize) -> Vec<String> {
    expressions_by_len(max)
        .into_iter()
        .flatten()
        .filter(|s| s.len() > 1)
        .collect()
}

fn ancestors(tree: &SynTree, mut id: usize) -> Vec<usize> {
    let nodes = tree.nodes();
    let mut out = vec![id];
    while let Some(p) = nodes[id].parent {
        id = p.0;
        out.push(id);
    }
    out
}

/// Reflexive domination by walking parent pointers.
pub fn dominates_ref(tree: &SynTree, a: usize, b: usize) -> bool {
    ancestors(tree, b).contains(&a)
}

/// C-command as sibling domination: distinct, neither dominates the other,
/// and some other child of `a`'s parent dominates `b`.
pub fn c_commands_ref(tree: &SynTree, a: usize, b: usize) -> bool {
    if a == b || dominates_ref(tree, a, b) || dominates_ref(tree, b, a) {
        return false;
    }
    let nodes = tree.nodes();
    let Some(p) = nodes[a].parent else {
        return false;
    };
    nodes[p.0]
        .children
        .iter()
        .any(|s| s.0 != a && dominates_ref(tree, s.0, b))
}

/// Reference value under the non-transparent semantics: find `(!T)`/`(!F)`
/// nodes by their surface text, invert every matching literal token they
/// c-command (once), then evaluate the rewritten string conventionally.
/// Quadratic in the number of nodes.
pub fn ln_reference(tree: &SynTree) -> char {
    let text: Vec<u8> = tree.surface().into_bytes();
    let nodes = tree.nodes();
    let binders: Vec<(usize, u8)> = (0..nodes.len())
        .filter(|&i| !nodes[i].is_leaf())
        .filter_map(|i| {
            let s = &text[nodes[i].span.clone()];
            (s.len() == 4 && s[0] == b'(' && s[1] == b'!' && is_lit(s[2]) && s[3] == b')').then(|| (i, s[2]))
        })
        .collect();
    let mut flipped = text.clone();
    for (j, node) in nodes.iter().enumerate() {
        if !node.is_leaf() {
            continue;
        }
        let pos = node.span.start;
        let lit = text[pos];
        if !is_lit(lit) {
            continue;
        }
        if binders.iter().any(|&(b, pol)| pol == lit && c_commands_ref(tree, b, j)) {
            flipped[pos] = if lit == b'T' { b'F' } else { b'T' };
        }
    }
    rewrite_eval(std::str::from_utf8(&flipped).unwrap()).expect("well-formed")
}

/// Number of derivations of `s` from `S` under the grammar, by CYK-style
/// span counting.
pub fn count_derivations(s: &str) -> u64 {
    let t: Vec<u8> = s.bytes().collect();
    let n = t.len();
    if n == 0 {
        return 0;
    }
    // e[i][j]: derivations of t[i..j] from e; s_count likewise from S.
    let mut e = vec![vec![0u64; n + 1]; n + 1];
    let mut s_count = vec![vec![0u64; n + 1]; n + 1];
    for len in 1..=n {
        for i in 0..=n - len {
            let j = i + len;
            let mut compound = 0u64;
            if len >= 4 && t[i] == b'(' && t[i + 1] == b'!' && t[j - 1] == b')' {
                compound += e[i + 2][j - 1];
            }
            if len >= 5 && t[i] == b'(' && t[j - 1] == b')' {
                for k in i + 2..j - 2 {
                    if matches!(t[k], b'&' | b'|') {
                        compound += e[i + 1][k] * e[k + 1][j - 1];
                    }
                }
            }
            s_count[i][j] = compound;
            e[i][j] = compound + u64::from(len == 1 && is_lit(t[i]));
        }
    }
    s_count[0][n]
}
