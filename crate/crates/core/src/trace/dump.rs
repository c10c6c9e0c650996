//! Indented tree rendering for structural debugging.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::Expr;

/// One line per node in pre-order, indented two spaces per level:
/// `#k <label> [n]` with `n` the child count. A node reached a second time
/// (shared after CSE) is printed as `^#k` and not expanded again.
pub fn dump_tree(root: &Expr) -> String {
    let mut out = String::new();
    let mut seen: HashMap<u64, usize> = HashMap::new();
    let mut stack: Vec<(Expr, usize)> = vec![(root.clone(), 0)];
    while let Some((n, depth)) = stack.pop() {
        let pad = "  ".repeat(depth);
        if let Some(k) = seen.get(&n.id()) {
            let _ = writeln!(out, "{pad}^#{k}");
            continue;
        }
        let k = seen.len();
        seen.insert(n.id(), k);
        let _ = writeln!(out, "{pad}#{k} {} [{}]", n.label(), n.children().len());
        for c in n.children().iter().rev() {
            stack.push((c.clone(), depth + 1));
        }
    }
    out
}
