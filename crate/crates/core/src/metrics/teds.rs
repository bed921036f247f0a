//! Tree-edit-distance based structure similarity (TEDS-Struct).
//!
//! Tables become ordered trees (root -> rows -> cells with span
//! attributes, no content nodes). Edit distance uses unit insert/delete
//! and 0/1 substitution on labels, computed with the Zhang-Shasha
//! keyroot dynamic program.

use crate::geometry::TableGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeLabel {
    Table,
    Row,
    Cell { row_span: usize, col_span: usize },
}

#[derive(Clone, Debug)]
pub struct TreeNode {
    pub label: NodeLabel,
    pub children: Vec<usize>,
}

/// Ordered labeled tree; node 0 is the root (when non-empty).
#[derive(Clone, Debug, Default)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn empty() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn size(&self) -> usize {
        self.nodes.len()
    }

    pub fn add(&mut self, label: NodeLabel, parent: Option<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode { label, children: Vec::new() });
        if let Some(p) = parent {
            self.nodes[p].children.push(id);
        }
        id
    }
}

/// Structure tree of a resolved grid: one row node per grid row, with the
/// final cells anchored in that row as children, ordered by column.
pub fn table_tree(grid: &TableGrid) -> Tree {
    let mut t = Tree::empty();
    let root = t.add(NodeLabel::Table, None);
    for r in 0..grid.n_rows {
        let row = t.add(NodeLabel::Row, Some(root));
        let mut cells: Vec<&crate::geometry::FinalCell> =
            grid.final_cells.iter().filter(|c| c.row == r).collect();
        cells.sort_by_key(|c| c.col);
        for c in cells {
            t.add(NodeLabel::Cell { row_span: c.row_span, col_span: c.col_span }, Some(row));
        }
    }
    t
}

fn subst_cost(a: &NodeLabel, b: &NodeLabel) -> f64 {
    if a == b {
        0.0
    } else {
        1.0
    }
}

/// Postorder traversal order and leftmost-leaf indices (postorder-based),
/// the ingredients of the Zhang-Shasha algorithm.
struct PostOrder {
    labels: Vec<NodeLabel>,
    lml: Vec<usize>,
    keyroots: Vec<usize>,
}

fn postorder(tree: &Tree) -> PostOrder {
    fn walk(tree: &Tree, node: usize, labels: &mut Vec<NodeLabel>, lml: &mut Vec<usize>) -> usize {
        let mut first_leaf = None;
        for &c in &tree.nodes[node].children {
            let leaf = walk(tree, c, labels, lml);
            first_leaf.get_or_insert(leaf);
        }
        labels.push(tree.nodes[node].label);
        let own = labels.len() - 1;
        let leaf = first_leaf.unwrap_or(own);
        lml.push(leaf);
        leaf
    }
    let mut labels = Vec::with_capacity(tree.size());
    let mut lml = Vec::with_capacity(tree.size());
    if !tree.nodes.is_empty() {
        walk(tree, 0, &mut labels, &mut lml);
    }
    let n = labels.len();
    let mut keyroots = Vec::new();
    for i in 0..n {
        if !(i + 1..n).any(|j| lml[j] == lml[i]) {
            keyroots.push(i);
        }
    }
    PostOrder { labels, lml, keyroots }
}

/// Minimal edit cost between two ordered labeled trees (unit insert and
/// delete, 0/1 substitution).
pub fn tree_edit_distance(a: &Tree, b: &Tree) -> f64 {
    if a.nodes.is_empty() || b.nodes.is_empty() {
        return (a.size() + b.size()) as f64;
    }
    let pa = postorder(a);
    let pb = postorder(b);
    let (m, n) = (pa.labels.len(), pb.labels.len());
    let mut td = vec![vec![0.0f64; n]; m];

    for &i in &pa.keyroots {
        for &j in &pb.keyroots {
            // forest distance over postorder windows [l(i)..=i] x [l(j)..=j]
            let (li, lj) = (pa.lml[i], pb.lml[j]);
            let w = i - li + 2;
            let h = j - lj + 2;
            let mut fd = vec![vec![0.0f64; h]; w];
            for x in 1..w {
                fd[x][0] = fd[x - 1][0] + 1.0;
            }
            for y in 1..h {
                fd[0][y] = fd[0][y - 1] + 1.0;
            }
            for x in 1..w {
                for y in 1..h {
                    let (ai, bj) = (li + x - 1, lj + y - 1);
                    if pa.lml[ai] == li && pb.lml[bj] == lj {
                        let sub = fd[x - 1][y - 1] + subst_cost(&pa.labels[ai], &pb.labels[bj]);
                        fd[x][y] = (fd[x - 1][y] + 1.0).min(fd[x][y - 1] + 1.0).min(sub);
                        td[ai][bj] = fd[x][y];
                    } else {
                        let (xa, yb) = (pa.lml[ai] - li, pb.lml[bj] - lj);
                        let sub = fd[xa][yb] + td[ai][bj];
                        fd[x][y] = (fd[x - 1][y] + 1.0).min(fd[x][y - 1] + 1.0).min(sub);
                    }
                }
            }
        }
    }
    td[m - 1][n - 1]
}

/// 1 - TED / max(|a|, |b|); both empty -> 1, one empty -> 0.
pub fn teds_struct(pred: &Tree, gt: &Tree) -> f64 {
    if pred.nodes.is_empty() && gt.nodes.is_empty() {
        return 1.0;
    }
    if pred.nodes.is_empty() || gt.nodes.is_empty() {
        return 0.0;
    }
    let d = tree_edit_distance(pred, gt);
    1.0 - d / (pred.size().max(gt.size()) as f64)
}
