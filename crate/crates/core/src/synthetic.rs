//! Small generated corpus with known vulnerable lines and root causes.
//!
//! Every template comes as a benign/vulnerable pair that shares its
//! signature and sink statement. Only the assignment feeding the sink
//! differs, so that line is the root cause by construction and the sink is
//! the labeled vulnerable line. Neutral filler statements shift positions
//! between functions; statements placed before the sink come from a
//! different pool than those after it, so the sink's position is
//! recoverable from which statements a function contains, not only from
//! their order.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{FunctionRecord, Language};
use crate::tensor::init;

struct Template {
    cwe: &'static str,
    signature: &'static str,
    vulnerable: &'static str,
    benign: &'static str,
    sink: &'static str,
    tail: &'static str,
}

const TEMPLATES: [Template; 4] = [
    Template {
        cwe: "CWE-119",
        signature: "void copy_name(char *buf, const char *input, size_t n) {",
        vulnerable: "n = strlen(input);",
        benign: "n = sizeof(buf) - 1;",
        sink: "memcpy(buf, input, n);",
        tail: "}",
    },
    Template {
        cwe: "CWE-476",
        signature: "int reset_entry(struct table *t, struct entry *p, int key) {",
        vulnerable: "p = lookup(t, key);",
        benign: "p = &t->fallback;",
        sink: "p->count = 0;",
        tail: "}",
    },
    Template {
        cwe: "CWE-416",
        signature: "void drop_node(struct list *l, struct node *node) {",
        vulnerable: "free(node);",
        benign: "retain(node);",
        sink: "node->next = NULL;",
        tail: "}",
    },
    Template {
        cwe: "CWE-190",
        signature: "int alloc_block(struct pool_ref pool, size_t count, size_t size, size_t total) {",
        vulnerable: "total = count * size + HEADER_LEN;",
        benign: "total = checked_mul(count, size);",
        sink: "pool.base = malloc(total);",
        tail: "}",
    },
];

const FILLER_BEFORE: [&str; 4] = [
    "trace(LOG_ENTER);",
    "counter += 1;",
    "if (verbose) report(state);",
    "flags |= FLAG_SEEN;",
];

const FILLER_AFTER: [&str; 4] = ["stats.calls++;", "tick();", "level = level - 1;", "audit(id);"];

#[derive(Debug, Clone)]
pub struct SyntheticFunction {
    pub record: FunctionRecord,
    /// Line of the assignment feeding the sink (benign variants too).
    pub root_cause_line: usize,
    pub sink_line: usize,
}

/// CWE labels used by the generator, in template order.
pub fn cwes() -> Vec<&'static str> {
    TEMPLATES.iter().map(|t| t.cwe).collect()
}

/// `per_variant` benign and `per_variant` vulnerable functions per
/// template; `generate(seed, 4)` yields the 32-function corpus.
pub fn generate(seed: u64, per_variant: usize) -> Vec<SyntheticFunction> {
    let mut rng = init::rng(seed);
    let mut out = Vec::new();
    for t in &TEMPLATES {
        for vulnerable in [false, true] {
            for k in 0..per_variant {
                out.push(build(&mut rng, t, vulnerable, k));
            }
        }
    }
    out
}

fn build(rng: &mut impl Rng, t: &Template, vulnerable: bool, k: usize) -> SyntheticFunction {
    let mut before = FILLER_BEFORE.to_vec();
    let mut after = FILLER_AFTER.to_vec();
    before.shuffle(rng);
    after.shuffle(rng);
    let counts: [usize; 3] = [
        rng.random_range(0..=2),
        rng.random_range(0..=2),
        rng.random_range(0..=2),
    ];
    let mut before = before.into_iter();
    let indent = |s: &str| format!("  {s}");
    let mut lines = vec![t.signature.to_string()];
    lines.extend(before.by_ref().take(counts[0]).map(indent));
    lines.push(indent(if vulnerable { t.vulnerable } else { t.benign }));
    let root_cause_line = lines.len();
    lines.extend(before.take(counts[1]).map(indent));
    lines.push(indent(t.sink));
    let sink_line = lines.len();
    lines.extend(after.into_iter().take(counts[2]).map(indent));
    lines.push(t.tail.to_string());
    let source = lines.join("\n") + "\n";

    let tag = t.cwe.trim_start_matches("CWE-");
    let record = if vulnerable {
        FunctionRecord::vulnerable(
            format!("syn-{tag}-vul-{k}"),
            source,
            Language::C,
            t.cwe,
            (sink_line, sink_line),
        )
    } else {
        FunctionRecord::benign(format!("syn-{tag}-ok-{k}"), source, Language::C)
    };
    SyntheticFunction {
        record,
        root_cause_line,
        sink_line,
    }
}
