use std::collections::BTreeSet;

use super::{PhyloError, PhyloTree};

struct Parser<'a> {
    text: &'a str,
    pos: usize,
    tree: PhyloTree,
    seen: BTreeSet<String>,
}

impl Parser<'_> {
    fn err(&self, reason: impl Into<String>) -> PhyloError {
        PhyloError::Parse {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn label(&mut self) -> Result<Option<String>, PhyloError> {
        self.skip_ws();
        if self.peek() == Some('\'') {
            let start = self.pos;
            self.pos += 1;
            let mut out = String::new();
            loop {
                match self.peek() {
                    None => {
                        self.pos = start;
                        return Err(self.err("unterminated quoted label"));
                    }
                    Some('\'') if self.text[self.pos + 1..].starts_with('\'') => {
                        out.push('\'');
                        self.pos += 2;
                    }
                    Some('\'') => {
                        self.pos += 1;
                        return Ok(Some(out));
                    }
                    Some(c) => {
                        out.push(c);
                        self.pos += c.len_utf8();
                    }
                }
            }
        }
        let start = self.pos;
        while let Some(c) = self.peek() {
            if "(),:;[]'".contains(c) || c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
        Ok((self.pos > start).then(|| self.text[start..self.pos].to_string()))
    }

    fn length(&mut self) -> Result<Option<f64>, PhyloError> {
        self.skip_ws();
        if self.peek() != Some(':') {
            return Ok(None);
        }
        self.pos += 1;
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if !(c.is_ascii_digit() || "+-.eE".contains(c)) {
                break;
            }
            self.pos += 1;
        }
        let raw = &self.text[start..self.pos];
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            _ => {
                self.pos = start;
                Err(self.err(format!("bad branch length {raw:?}")))
            }
        }
    }

    /// Parses one subtree and returns its node with the length of the
    /// edge above it.
    fn subtree(&mut self) -> Result<(usize, Option<f64>), PhyloError> {
        self.skip_ws();
        if self.peek() == Some('(') {
            self.pos += 1;
            let node = self.tree.add_internal();
            loop {
                let (child, len) = self.subtree()?;
                self.tree.connect(node, child, len);
                self.skip_ws();
                match self.peek() {
                    Some(',') => self.pos += 1,
                    Some(')') => {
                        self.pos += 1;
                        break;
                    }
                    _ => return Err(self.err("expected ',' or ')'")),
                }
            }
            // internal labels (e.g. support values) carry no topology
            self.label()?;
            let len = self.length()?;
            return Ok((node, len));
        }
        let at = self.pos;
        let Some(label) = self.label()? else {
            return Err(self.err("expected a leaf label or '('"));
        };
        if !self.seen.insert(label.clone()) {
            return Err(PhyloError::DuplicateLabel { label, offset: at });
        }
        let node = self.tree.add_leaf(&label);
        let len = self.length()?;
        Ok((node, len))
    }
}

/// Parses one Newick tree terminated by `;`. Rooted input is unrooted by
/// suppressing degree-2 internal nodes; internal labels are dropped.
pub fn parse_newick(text: &str) -> Result<PhyloTree, PhyloError> {
    let mut p = Parser {
        text,
        pos: 0,
        tree: PhyloTree::new(),
        seen: BTreeSet::new(),
    };
    p.subtree()?;
    p.skip_ws();
    if p.peek() != Some(';') {
        return Err(p.err("expected ';'"));
    }
    p.pos += 1;
    p.skip_ws();
    if p.pos != text.len() {
        return Err(p.err("trailing text after ';'"));
    }
    let mut tree = p.tree;
    tree.suppress_unary();
    Ok(tree)
}

fn quote(label: &str) -> String {
    if label.is_empty() || label.chars().any(|c| "(),:;[]'".contains(c) || c.is_whitespace()) {
        format!("'{}'", label.replace('\'', "''"))
    } else {
        label.to_string()
    }
}

/// Smallest leaf label in the subtree hanging off `from → node`.
fn min_label(tree: &PhyloTree, node: usize, from: usize) -> String {
    let mut best: Option<String> = None;
    let mut stack = vec![(node, from)];
    while let Some((u, parent)) = stack.pop() {
        if let Some(l) = tree.label(u) {
            if best.as_deref().is_none_or(|b| l < b) {
                best = Some(l.to_string());
            }
        }
        stack.extend(tree.neighbors(u).filter(|&(v, _)| v != parent).map(|(v, _)| (v, u)));
    }
    best.unwrap_or_default()
}

fn write_subtree(tree: &PhyloTree, node: usize, from: usize, len: Option<f64>, out: &mut String) {
    let mut children: Vec<(usize, Option<f64>)> = tree.neighbors(node).filter(|&(v, _)| v != from).collect();
    if children.is_empty() {
        out.push_str(&quote(tree.label(node).unwrap_or("")));
    } else {
        children.sort_by_cached_key(|&(c, _)| min_label(tree, c, node));
        out.push('(');
        for (i, &(c, l)) in children.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write_subtree(tree, c, node, l, out);
        }
        out.push(')');
    }
    if let Some(l) = len {
        out.push(':');
        out.push_str(&l.to_string());
    }
}

/// Canonical Newick text: rooted at the node next to the smallest leaf
/// label, children ordered by their smallest leaf label.
pub fn emit_newick(tree: &PhyloTree) -> String {
    let leaves = tree.sorted_leaves();
    let mut out = String::new();
    match leaves.first() {
        None => {}
        Some(&first) if tree.degree(first) == 0 => out.push_str(&quote(tree.label(first).unwrap_or(""))),
        Some(&first) => {
            let (root, _) = tree.neighbors(first).next().expect("connected leaf");
            if tree.label(root).is_some() {
                // two-leaf tree
                let (_, l) = tree.neighbors(first).next().expect("edge");
                out.push('(');
                write_subtree(tree, first, root, l, &mut out);
                out.push(',');
                write_subtree(tree, root, first, None, &mut out);
                out.push(')');
            } else {
                write_subtree(tree, root, usize::MAX, None, &mut out);
            }
        }
    }
    out.push(';');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use std::collections::BTreeSet;

    fn split(labels: &[&str]) -> BTreeSet<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn one_internal_edge() {
        let t = parse_newick("(A,B,(C,D));").unwrap();
        assert_eq!(t.leaves().len(), 4);
        assert_eq!(t.splits(), BTreeSet::from([split(&["C", "D"])]));
    }

    #[test]
    fn rooted_input_is_unrooted() {
        let a = parse_newick("((A,B),(C,D));").unwrap();
        let b = parse_newick("(A,B,(C,D));").unwrap();
        assert!(a.same_topology(&b));
        assert_eq!(a.internal_degrees(), b.internal_degrees());
    }

    #[test]
    fn lengths_quotes_and_internal_labels() {
        let t = parse_newick(" ( 'Old Church':0.5 , B:1e-1 ,(C:2,'it''s':3)90:0.25 ) ; ").unwrap();
        assert!(t.leaf("Old Church").is_some());
        assert!(t.leaf("it's").is_some());
        let text = emit_newick(&t);
        assert_eq!(text, "(B:0.1,(C:2,'it''s':3):0.25,'Old Church':0.5);");
        let back = parse_newick(&text).unwrap();
        assert!(back.same_topology(&t));
        let d1 = t.path_length_matrix();
        let d2 = back.path_length_matrix();
        for i in 0..4 {
            for j in 0..4 {
                assert!((d1.get(i, j) - d2.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parse_errors_carry_offsets() {
        assert_eq!(
            parse_newick("(A,(B);").unwrap_err(),
            PhyloError::Parse {
                offset: 6,
                reason: "expected ',' or ')'".into()
            }
        );
        assert!(matches!(
            parse_newick("(A,B,A);"),
            Err(PhyloError::DuplicateLabel { offset: 5, .. })
        ));
        assert!(matches!(parse_newick("(A,B)"), Err(PhyloError::Parse { offset: 5, .. })));
        assert!(matches!(parse_newick("(A,,B);"), Err(PhyloError::Parse { offset: 3, .. })));
        assert!(matches!(parse_newick("(A:x,B);"), Err(PhyloError::Parse { offset: 3, .. })));
    }

    #[test]
    fn random_round_trips() {
        let mut rng = seeded_rng(21);
        for i in 0..100 {
            let n = 3 + i % 10;
            let labels: Vec<String> = (0..n).map(|k| format!("L{k}")).collect();
            let t = super::super::PhyloTree::random_binary(&labels, i % 2 == 0, &mut rng).unwrap();
            let text = emit_newick(&t);
            let back = parse_newick(&text).unwrap();
            assert!(back.same_topology(&t), "{text}");
            assert_eq!(emit_newick(&back), text);
        }
    }

    #[test]
    fn tiny_trees() {
        assert_eq!(emit_newick(&parse_newick("A;").unwrap()), "A;");
        assert_eq!(emit_newick(&parse_newick("(B:1,A:2);").unwrap()), "(A:3,B);");
    }
}
