//! Binary decomposition trees over state components.
//!
//! Every node owns a contiguous, ascending range of global component indices,
//! so a parent's components are its left child's followed by its right
//! child's. Both builders split odd counts left-heavy (`ceil(n/2)` on the left).

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    /// First global component index (inclusive).
    pub lo: usize,
    /// One past the last global component index.
    pub hi: usize,
    pub parent: Option<NodeId>,
    pub children: Option<(NodeId, NodeId)>,
    /// Distance from the root.
    pub depth: usize,
    /// Distance to the deepest leaf below; leaves have height 0.
    pub height: usize,
}

impl TreeNode {
    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi == self.lo
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecompositionTree {
    nodes: Vec<TreeNode>,
    leaves: Vec<NodeId>,
    levels: Vec<Vec<NodeId>>,
}

enum Block {
    Chain(usize, usize),
    Rows { r0: usize, r1: usize, cols: usize },
    Cols { row: usize, c0: usize, c1: usize, cols: usize },
}

impl Block {
    fn range(&self) -> (usize, usize) {
        match *self {
            Block::Chain(lo, hi) => (lo, hi),
            Block::Rows { r0, r1, cols } => (r0 * cols, r1 * cols),
            Block::Cols { row, c0, c1, cols } => (row * cols + c0, row * cols + c1),
        }
    }

    fn split(&self) -> Option<(Block, Block)> {
        let half = |a: usize, b: usize| a + (b - a).div_ceil(2);
        match *self {
            Block::Chain(lo, hi) if hi - lo > 1 => {
                let m = half(lo, hi);
                Some((Block::Chain(lo, m), Block::Chain(m, hi)))
            }
            Block::Rows { r0, r1, cols } if r1 - r0 > 1 => {
                let m = half(r0, r1);
                Some((Block::Rows { r0, r1: m, cols }, Block::Rows { r0: m, r1, cols }))
            }
            Block::Rows { r0, cols, .. } => {
                Block::Cols { row: r0, c0: 0, c1: cols, cols }.split()
            }
            Block::Cols { row, c0, c1, cols } if c1 - c0 > 1 => {
                let m = half(c0, c1);
                Some((
                    Block::Cols { row, c0, c1: m, cols },
                    Block::Cols { row, c0: m, c1, cols },
                ))
            }
            _ => None,
        }
    }
}

impl DecompositionTree {
    /// Chain tree over `d` components.
    pub fn chain(d: usize) -> Self {
        assert!(d >= 1, "a tree needs at least one component");
        Self::build(Block::Chain(0, d))
    }

    /// Lattice tree over a `rows x cols` grid with row-major component
    /// indices: each row is merged horizontally into one block, then row
    /// blocks are merged vertically.
    pub fn lattice(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "a lattice needs at least one vertex");
        Self::build(Block::Rows { r0: 0, r1: rows, cols })
    }

    fn build(root: Block) -> Self {
        let mut nodes = Vec::new();
        Self::grow(root, None, 0, &mut nodes);
        let mut leaves: Vec<NodeId> = (0..nodes.len()).filter(|&i| nodes[i].is_leaf()).collect();
        leaves.sort_by_key(|&i| nodes[i].lo);
        let top = nodes[0].height;
        let mut levels = vec![Vec::new(); top + 1];
        for (id, node) in nodes.iter().enumerate() {
            levels[node.height].push(id);
        }
        for level in &mut levels {
            level.sort_by_key(|&i| nodes[i].lo);
        }
        DecompositionTree { nodes, leaves, levels }
    }

    fn grow(block: Block, parent: Option<NodeId>, depth: usize, nodes: &mut Vec<TreeNode>) -> NodeId {
        let (lo, hi) = block.range();
        let id = nodes.len();
        nodes.push(TreeNode { lo, hi, parent, children: None, depth, height: 0 });
        if let Some((l, r)) = block.split() {
            let li = Self::grow(l, Some(id), depth + 1, nodes);
            let ri = Self::grow(r, Some(id), depth + 1, nodes);
            nodes[id].children = Some((li, ri));
            nodes[id].height = 1 + nodes[li].height.max(nodes[ri].height);
        }
        id
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].hi
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Leaves ordered by component index.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id].is_leaf()
    }

    pub fn children(&self, id: NodeId) -> Option<(NodeId, NodeId)> {
        self.nodes[id].children
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id].parent
    }

    pub fn depth_of(&self, id: NodeId) -> usize {
        self.nodes[id].depth
    }

    pub fn level_of(&self, id: NodeId) -> usize {
        self.nodes[id].height
    }

    pub fn components_of(&self, id: NodeId) -> std::ops::Range<usize> {
        self.nodes[id].lo..self.nodes[id].hi
    }

    /// Nodes grouped by height: leaves first, `[root]` last. Within a level
    /// nodes are ordered by their smallest component.
    pub fn bottom_up_levels(&self) -> &[Vec<NodeId>] {
        &self.levels
    }

    /// Blocks that partition the state once every merge up to `level` is
    /// done: the nodes at that level plus lower nodes still waiting for
    /// their sibling.
    pub fn active_blocks(&self, level: usize) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = (0..self.nodes.len())
            .filter(|&i| {
                let n = &self.nodes[i];
                n.height <= level && n.parent.is_none_or(|p| self.nodes[p].height > level)
            })
            .collect();
        out.sort_by_key(|&i| self.nodes[i].lo);
        out
    }
}
