//! Semantic vulnerability graph over a token stream.
//!
//! Four edge families are derived lexically: sequential order, control
//! transfer, def-use chains, and a "poacher" family linking risky sources to
//! sinks. The poacher rules here are a lexical surrogate (allocation/copy
//! call arguments, subscripts, dereferences), not a reconstruction of any
//! published definition.
//!
//! The operator handed to the GCN is `D⁻¹ (max(A, Aᵀ) + I)` restricted to the
//! non-PAD block, where `A` counts directed edges with multiplicity.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lexer::{TokenKind, TokenStream, MAX_TOKENS};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    Sequential,
    Control,
    Data,
    Poacher,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Sequential => "sequential",
            EdgeKind::Control => "control",
            EdgeKind::Data => "data",
            EdgeKind::Poacher => "poacher",
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypedEdge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

impl TypedEdge {
    fn new(src: usize, dst: usize, kind: EdgeKind) -> Self {
        TypedEdge { src, dst, kind }
    }
}

/// Which edge families participate in [`build_graph_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeFamilies {
    pub sequential: bool,
    pub control: bool,
    pub data: bool,
    pub poacher: bool,
}

impl Default for EdgeFamilies {
    fn default() -> Self {
        EdgeFamilies {
            sequential: true,
            control: true,
            data: true,
            poacher: true,
        }
    }
}

const CONTROL_KEYWORDS: &[&str] = &[
    "if", "else", "for", "while", "do", "switch", "case", "goto", "return", "break", "continue",
];

const RISKY_CALLS: &[&str] = &[
    "malloc", "calloc", "realloc", "free", "memcpy", "memmove", "strcpy", "strncpy", "strcat", "sprintf",
];

pub fn sequential_edges(stream: &TokenStream) -> Vec<TypedEdge> {
    (1..stream.content_len())
        .map(|i| TypedEdge::new(i - 1, i, EdgeKind::Sequential))
        .collect()
}

/// Position of the `)` matching the `(` at `open`, within the non-PAD block.
fn matching_paren(stream: &TokenStream, open: usize) -> Option<usize> {
    let content = stream.content();
    let mut depth = 0usize;
    for (j, tok) in content.iter().enumerate().skip(open) {
        if tok.is("(") {
            depth += 1;
        } else if tok.is(")") {
            depth -= 1;
            if depth == 0 {
                return Some(j);
            }
        }
    }
    None
}

fn check_paren_balance(stream: &TokenStream) -> Result<()> {
    let mut depth = 0i64;
    for tok in stream.content() {
        if tok.is("(") {
            depth += 1;
        } else if tok.is(")") {
            depth -= 1;
            if depth < 0 {
                return Err(Error::Graph(format!("unbalanced ')' at line {}", tok.line)));
            }
        }
    }
    if depth != 0 && !stream.truncated() {
        return Err(Error::Graph(format!("{depth} unclosed '('")));
    }
    Ok(())
}

/// Control-transfer edges from each control keyword to the first token of
/// the statement it governs, plus `if`–`else` pairing edges.
///
/// Unbalanced parentheses are an error unless the stream was truncated, in
/// which case sites whose condition runs past the cut are skipped.
pub fn control_edges(stream: &TokenStream) -> Result<Vec<TypedEdge>> {
    check_paren_balance(stream)?;
    let content = stream.content();
    let n = content.len();
    let mut edges = Vec::new();
    let mut brace_depth = 0usize;
    // unpaired `if` positions, one stack per brace depth
    let mut open_ifs: Vec<Vec<usize>> = vec![Vec::new()];
    let after = |j: usize| (j + 1 < n).then_some(j + 1);

    for i in 0..n {
        let tok = &content[i];
        if tok.is("{") {
            brace_depth += 1;
            if open_ifs.len() <= brace_depth {
                open_ifs.push(Vec::new());
            }
            open_ifs[brace_depth].clear();
            continue;
        }
        if tok.is("}") {
            brace_depth = brace_depth.saturating_sub(1);
            continue;
        }
        if tok.kind != TokenKind::Keyword || !CONTROL_KEYWORDS.contains(&tok.text.as_str()) {
            continue;
        }
        let target = match tok.text.as_str() {
            "if" | "for" | "while" | "switch" => {
                if tok.text == "if" {
                    open_ifs[brace_depth].push(i);
                }
                match content.get(i + 1) {
                    Some(next) if next.is("(") => matching_paren(stream, i + 1).and_then(after),
                    _ => None,
                }
            }
            "else" => {
                if let Some(if_pos) = open_ifs[brace_depth].pop() {
                    edges.push(TypedEdge::new(if_pos, i, EdgeKind::Control));
                }
                after(i)
            }
            "do" => after(i),
            "case" => {
                let mut depth = 0usize;
                let mut found = None;
                for (j, t) in content.iter().enumerate().skip(i + 1) {
                    if t.is("(") {
                        depth += 1;
                    } else if t.is(")") {
                        depth = depth.saturating_sub(1);
                    } else if depth == 0 && t.is(":") {
                        found = Some(j);
                        break;
                    }
                }
                found.and_then(after)
            }
            // return, break, continue, goto
            _ => content
                .iter()
                .enumerate()
                .skip(i + 1)
                .find(|(_, t)| t.is(";"))
                .and_then(|(j, _)| after(j)),
        };
        if let Some(dst) = target {
            edges.push(TypedEdge::new(i, dst, EdgeKind::Control));
        }
    }
    Ok(edges)
}

/// Def-use chain: every identifier occurrence links to the previous
/// occurrence of the same name.
pub fn data_edges(stream: &TokenStream) -> Vec<TypedEdge> {
    let mut last_seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut edges = Vec::new();
    for (i, tok) in stream.content().iter().enumerate() {
        if tok.kind != TokenKind::Identifier {
            continue;
        }
        if let Some(prev) = last_seen.insert(tok.text.as_str(), i) {
            edges.push(TypedEdge::new(prev, i, EdgeKind::Data));
        }
    }
    edges
}

fn is_operand_end(kind: TokenKind, text: &str) -> bool {
    matches!(
        kind,
        TokenKind::Identifier | TokenKind::Number | TokenKind::StringLit | TokenKind::CharLit
    ) || text == ")"
        || text == "]"
}

/// Risk-source to sink links (lexical surrogate):
/// allocation/copy call → identifiers in its argument list,
/// `[` → the subscripted identifier,
/// unary `*` / `->` → the dereferenced identifier.
pub fn poacher_edges(stream: &TokenStream) -> Vec<TypedEdge> {
    let content = stream.content();
    let n = content.len();
    let mut edges = Vec::new();
    for i in 0..n {
        let tok = &content[i];
        match (tok.kind, tok.text.as_str()) {
            (TokenKind::Identifier, name) if RISKY_CALLS.contains(&name) => {
                if !content.get(i + 1).is_some_and(|t| t.is("(")) {
                    continue;
                }
                let close = matching_paren(stream, i + 1).unwrap_or(n);
                for (j, arg) in content.iter().enumerate().take(close).skip(i + 2) {
                    if arg.kind == TokenKind::Identifier {
                        edges.push(TypedEdge::new(i, j, EdgeKind::Poacher));
                    }
                }
            }
            (TokenKind::Punctuation, "[") | (TokenKind::Operator, "->") => {
                if i > 0 && content[i - 1].kind == TokenKind::Identifier {
                    edges.push(TypedEdge::new(i, i - 1, EdgeKind::Poacher));
                }
            }
            (TokenKind::Operator, "*") => {
                let unary = i == 0 || {
                    let prev = &content[i - 1];
                    prev.is_special() || !is_operand_end(prev.kind, &prev.text)
                };
                if unary && content.get(i + 1).is_some_and(|t| t.kind == TokenKind::Identifier) {
                    edges.push(TypedEdge::new(i, i + 1, EdgeKind::Poacher));
                }
            }
            _ => {}
        }
    }
    edges
}

/// Row-compressed square operator over the non-PAD block.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseAdjacency {
    fn from_rows(rows: Vec<BTreeMap<usize, f64>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        SparseAdjacency { n, row_ptr, cols, vals }
    }

    /// Identity over an `n`-node block.
    pub fn identity(n: usize) -> Self {
        Self::from_rows((0..n).map(|i| BTreeMap::from([(i, 1.0)])).collect())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    /// `self · m` where `m` has `dim()` rows.
    pub fn matmul(&self, m: &Matrix) -> Result<Matrix> {
        if m.rows() != self.n {
            return Err(Error::Shape {
                op: "spmm",
                left: (self.n, self.n),
                right: m.shape(),
            });
        }
        let mut out = Matrix::zeros(self.n, m.cols());
        for i in 0..self.n {
            let dst = out.row_mut(i);
            for (j, v) in self.row(i) {
                for (d, s) in dst.iter_mut().zip(m.row(j)) {
                    *d += v * s;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · g`, used by the backward pass.
    pub fn transpose_matmul(&self, g: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.n, g.cols());
        for i in 0..self.n {
            let src = g.row(i);
            for (j, v) in self.row(i) {
                for (d, s) in out.row_mut(j).iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }

    /// Dense embedding into a `size × size` matrix (zero outside the block).
    pub fn to_dense(&self, size: usize) -> Matrix {
        let mut m = Matrix::zeros(size, size);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m.set(i, j, v);
            }
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct SemanticGraph {
    stream: TokenStream,
    edges: Vec<TypedEdge>,
    counts: SparseAdjacency,
    adjacency: Arc<SparseAdjacency>,
}

impl SemanticGraph {
    pub fn stream(&self) -> &TokenStream {
        &self.stream
    }

    pub fn edges(&self) -> &[TypedEdge] {
        &self.edges
    }

    pub fn edges_of(&self, kind: EdgeKind) -> impl Iterator<Item = &TypedEdge> {
        self.edges.iter().filter(move |e| e.kind == kind)
    }

    /// Symmetrized edge counts with self-loops, before row normalization.
    pub fn counts(&self) -> &SparseAdjacency {
        &self.counts
    }

    /// Row-normalized operator over the non-PAD block.
    pub fn adjacency(&self) -> &SparseAdjacency {
        &self.adjacency
    }

    /// Shared handle to the operator, for recording on a tape.
    pub fn shared_adjacency(&self) -> Arc<SparseAdjacency> {
        Arc::clone(&self.adjacency)
    }

    /// The full 512×512 operator; PAD rows and columns are zero.
    pub fn dense_adjacency(&self) -> Matrix {
        self.adjacency.to_dense(MAX_TOKENS)
    }

    pub fn dense_counts(&self) -> Matrix {
        self.counts.to_dense(MAX_TOKENS)
    }

    /// Debug dump, one `kind src dst` line per edge.
    pub fn edge_list_text(&self) -> String {
        let mut out = String::new();
        for e in &self.edges {
            let _ = writeln!(out, "{} {} {}", e.kind, e.src, e.dst);
        }
        out
    }

    /// Debug dump of the dense operator as CSV.
    pub fn adjacency_csv(&self) -> String {
        let dense = self.dense_adjacency();
        let mut out = String::new();
        for i in 0..dense.rows() {
            let line: Vec<String> = dense.row(i).iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn build_graph(stream: &TokenStream) -> Result<SemanticGraph> {
    build_graph_with(stream, EdgeFamilies::default())
}

pub fn build_graph_with(stream: &TokenStream, families: EdgeFamilies) -> Result<SemanticGraph> {
    let mut edges = Vec::new();
    if families.sequential {
        edges.extend(sequential_edges(stream));
    }
    if families.control {
        edges.extend(control_edges(stream)?);
    }
    if families.data {
        edges.extend(data_edges(stream));
    }
    if families.poacher {
        edges.extend(poacher_edges(stream));
    }

    let n = stream.content_len();
    let mut directed: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    for e in &edges {
        debug_assert!(e.src != e.dst && e.src < n && e.dst < n);
        *directed[e.src].entry(e.dst).or_default() += 1.0;
    }
    let mut sym: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    for (i, row) in directed.iter().enumerate() {
        for (&j, &c) in row {
            let back = directed[j].get(&i).copied().unwrap_or(0.0);
            let v = c.max(back);
            sym[i].insert(j, v);
            sym[j].insert(i, v);
        }
    }
    for (i, row) in sym.iter_mut().enumerate() {
        *row.entry(i).or_default() += 1.0;
    }
    let normalized = sym
        .iter()
        .map(|row| {
            let total: f64 = row.values().sum();
            row.iter().map(|(&j, &v)| (j, v / total)).collect()
        })
        .collect();

    Ok(SemanticGraph {
        stream: stream.clone(),
        edges,
        counts: SparseAdjacency::from_rows(sym),
        adjacency: Arc::new(SparseAdjacency::from_rows(normalized)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexer::tokenize;

    fn stream(src: &str) -> TokenStream {
        tokenize(src).unwrap()
    }

    fn text_at(s: &TokenStream, i: usize) -> &str {
        &s.tokens()[i].text
    }

    fn pairs(s: &TokenStream, edges: &[TypedEdge]) -> Vec<(String, String)> {
        edges
            .iter()
            .map(|e| (text_at(s, e.src).to_string(), text_at(s, e.dst).to_string()))
            .collect()
    }

    #[test]
    fn sequential_chain_counts() {
        assert_eq!(sequential_edges(&stream("/* */")).len(), 1);
        let s = stream("int f(){return 0;}");
        assert_eq!(s.content_len(), 11);
        assert_eq!(sequential_edges(&s).len(), 10);
    }

    #[test]
    fn if_points_at_block() {
        let s = stream("if(x){y=1;}");
        let e = control_edges(&s).unwrap();
        assert_eq!(pairs(&s, &e), [("if".into(), "{".into())]);
    }

    #[test]
    fn while_points_at_body_statement_only() {
        let s = stream("while(a) b=1; c=2;");
        let e = control_edges(&s).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(pairs(&s, &e), [("while".into(), "b".into())]);
    }

    #[test]
    fn no_control_keywords_no_edges() {
        assert!(control_edges(&stream("int a = b + c;")).unwrap().is_empty());
    }

    #[test]
    fn return_points_past_semicolon() {
        let s = stream("{ return x; y = 2; }");
        let e = control_edges(&s).unwrap();
        assert_eq!(pairs(&s, &e), [("return".into(), "y".into())]);
    }

    #[test]
    fn if_else_chain_pairs() {
        let s = stream("if (a) { x(); } else if (b) { y(); } else { z(); }");
        let e = control_edges(&s).unwrap();
        let ifs: Vec<usize> = s
            .content()
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is("if"))
            .map(|(i, _)| i)
            .collect();
        let elses: Vec<usize> = s
            .content()
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is("else"))
            .map(|(i, _)| i)
            .collect();
        assert!(e.contains(&TypedEdge::new(ifs[0], elses[0], EdgeKind::Control)));
        assert!(e.contains(&TypedEdge::new(ifs[1], elses[1], EdgeKind::Control)));
        assert!(!e.contains(&TypedEdge::new(ifs[0], elses[1], EdgeKind::Control)));
    }

    #[test]
    fn nested_if_in_braces_does_not_steal_else() {
        let s = stream("if (a) { if (b) { x(); } } else { z(); }");
        let e = control_edges(&s).unwrap();
        let else_pos = s.content().iter().position(|t| t.is("else")).unwrap();
        let first_if = s.content().iter().position(|t| t.is("if")).unwrap();
        assert!(e.contains(&TypedEdge::new(first_if, else_pos, EdgeKind::Control)));
    }

    #[test]
    fn case_points_after_colon() {
        let s = stream("switch (k) { case 1: a = 2; break; }");
        let e = control_edges(&s).unwrap();
        let p = pairs(&s, &e);
        assert!(p.contains(&("case".into(), "a".into())));
        assert!(p.contains(&("switch".into(), "{".into())));
        assert!(p.contains(&("break".into(), "}".into())));
    }

    #[test]
    fn unbalanced_parens_rejected() {
        assert!(matches!(control_edges(&stream("if ((a) { }")), Err(Error::Graph(_))));
        assert!(matches!(control_edges(&stream("a ) (")), Err(Error::Graph(_))));
        assert!(build_graph(&stream("f((x)")).is_err());
    }

    #[test]
    fn truncated_open_paren_tolerated() {
        let mut src = String::from("if (");
        src.push_str(&vec!["a +"; 400].join(" "));
        let s = stream(&src);
        assert!(s.truncated());
        assert!(control_edges(&s).unwrap().is_empty());
    }

    #[test]
    fn data_edges_chain_consecutively() {
        let s = stream("x=1; y=x+2;");
        assert_eq!(pairs(&s, &data_edges(&s)), [("x".into(), "x".into())]);
        assert!(data_edges(&stream("a = b + c;")).is_empty());
        let s = stream("v; v; v;");
        let e = data_edges(&s);
        assert_eq!(e.iter().map(|e| (e.src, e.dst)).collect::<Vec<_>>(), [(1, 3), (3, 5)]);
    }

    #[test]
    fn keywords_are_not_data_nodes() {
        assert!(data_edges(&stream("int a; int b;")).is_empty());
    }

    #[test]
    fn poacher_copy_call_links_arguments() {
        let s = stream("strcpy(dst,src);");
        assert_eq!(
            pairs(&s, &poacher_edges(&s)),
            [("strcpy".into(), "dst".into()), ("strcpy".into(), "src".into())]
        );
    }

    #[test]
    fn poacher_subscript_and_deref() {
        let s = stream("a[i]=0;");
        assert_eq!(pairs(&s, &poacher_edges(&s)), [("[".into(), "a".into())]);
        let s = stream("*p = q->n * k;");
        let p = pairs(&s, &poacher_edges(&s));
        assert_eq!(p, [("*".into(), "p".into()), ("->".into(), "q".into())]);
        assert!(poacher_edges(&stream("int f(int a){ return a + 2 * a; }")).is_empty());
    }

    fn assert_row_stochastic(g: &SemanticGraph) {
        let a = g.adjacency();
        for i in 0..a.dim() {
            let s: f64 = a.row(i).map(|(_, v)| v).sum();
            assert!((s - 1.0).abs() <= 1e-12, "row {i} sums to {s}");
            assert!(a.get(i, i) > 0.0);
        }
    }

    #[test]
    fn two_token_graph() {
        let g = build_graph(&stream("/**/")).unwrap();
        assert_eq!(g.adjacency().dim(), 2);
        assert_row_stochastic(&g);
        let d = g.dense_adjacency();
        assert_eq!(d.shape(), (512, 512));
        assert_eq!(d.get(0, 0), 0.5);
        assert_eq!(d.get(0, 1), 0.5);
        assert!(d.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_function_is_row_stochastic() {
        let g = build_graph(&stream("int f(){return 0;}")).unwrap();
        assert_row_stochastic(&g);
        let c = g.dense_counts();
        for i in 0..512 {
            for j in 0..512 {
                assert_eq!(c.get(i, j), c.get(j, i));
            }
        }
    }

    #[test]
    fn overlapping_families_add_multiplicity() {
        // "x x": sequential and data both connect positions 1 and 2
        let g = build_graph(&stream("x x")).unwrap();
        assert_eq!(g.counts().get(1, 2), 2.0);
        assert_eq!(g.counts().get(0, 1), 1.0);
    }

    #[test]
    fn disabling_families_removes_their_edges() {
        let s = stream("if (p) { free(p); }");
        let only_seq = build_graph_with(
            &s,
            EdgeFamilies {
                control: false,
                data: false,
                poacher: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(only_seq.edges().iter().all(|e| e.kind == EdgeKind::Sequential));
        let full = build_graph(&s).unwrap();
        for kind in [EdgeKind::Control, EdgeKind::Data, EdgeKind::Poacher] {
            assert!(full.edges_of(kind).count() > 0, "{kind}");
        }
    }

    #[test]
    fn debug_dumps() {
        let g = build_graph(&stream("a[i]")).unwrap();
        let text = g.edge_list_text();
        assert!(text.contains("sequential 0 1\n"));
        assert!(text.contains("poacher 2 1\n"));
        let csv = g.adjacency_csv();
        assert_eq!(csv.lines().count(), 512);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 512);
    }
}
