//! Intermediate trace representation: one tree holding a transaction's call
//! frames with its storage accesses and emitted logs attached as leaves.
//!
//! For the language model the tree is binarized (first child becomes the left
//! child, next sibling the right child) and read out level by level. Each node
//! keeps the left/right action path that reaches it in the binary tree; that
//! path, not the linear position, is what the position embedding sees.

use std::collections::VecDeque;
use std::fmt;

use crate::error::{Error, Result};
use crate::trace_ingest::{CallKind, RawLogEvent, RawStateAccess, RawTrace};

pub const DEFAULT_MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Call,
    State,
    Log,
}

/// Call frame payload without its children.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallPayload {
    pub kind: CallKind,
    pub from: String,
    pub to: String,
    pub input: String,
    pub output: String,
    pub gas: u64,
    pub value: u128,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodePayload {
    Call(CallPayload),
    State(RawStateAccess),
    Log(RawLogEvent),
}

impl NodePayload {
    pub fn kind(&self) -> NodeKind {
        match self {
            NodePayload::Call(_) => NodeKind::Call,
            NodePayload::State(_) => NodeKind::State,
            NodePayload::Log(_) => NodeKind::Log,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItrNode {
    pub payload: NodePayload,
    pub children: Vec<ItrNode>,
}

impl ItrNode {
    pub fn leaf(payload: NodePayload) -> Self {
        ItrNode {
            payload,
            children: Vec::new(),
        }
    }

    pub fn kind(&self) -> NodeKind {
        self.payload.kind()
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(ItrNode::node_count).sum::<usize>()
    }

    pub fn edge_count(&self) -> usize {
        self.children.len() + self.children.iter().map(ItrNode::edge_count).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(ItrNode::depth).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItrTree {
    pub tx_hash: String,
    pub root: ItrNode,
}

impl ItrTree {
    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    pub fn edge_count(&self) -> usize {
        self.root.edge_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Step {
    L,
    R,
}

/// Root-to-node action sequence in the binarized tree. Empty for the root.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TreePath(pub Vec<Step>);

impl TreePath {
    pub fn root() -> Self {
        TreePath(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn steps(&self) -> &[Step] {
        &self.0
    }

    pub fn child(&self, step: Step) -> TreePath {
        let mut v = self.0.clone();
        v.push(step);
        TreePath(v)
    }
}

impl fmt::Display for TreePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.0 {
            f.write_str(match s {
                Step::L => "L",
                Step::R => "R",
            })?;
        }
        Ok(())
    }
}

/// Merges the call, state and log traces into one tree.
///
/// Each state/log record becomes a leaf child of its owner frame. A record
/// with `position = p` goes after the frame's first `p` call children;
/// records without one go after all call children. At equal positions
/// storage accesses precede logs, each in recorded order.
pub fn build_itr(trace: &RawTrace) -> Result<ItrTree> {
    let frames = trace.root.preorder();
    let n = frames.len();

    // (position, sequence rank, payload) per owner frame
    let mut leaves: Vec<Vec<(usize, usize, NodePayload)>> = vec![Vec::new(); n];
    for (i, s) in trace.state.iter().enumerate() {
        let slot = leaves
            .get_mut(s.owner_frame)
            .ok_or(Error::DanglingFrame {
                index: s.owner_frame,
                frames: n,
            })?;
        slot.push((s.position.unwrap_or(usize::MAX), i, NodePayload::State(s.clone())));
    }
    let offset = trace.state.len();
    for (i, l) in trace.logs.iter().enumerate() {
        let slot = leaves
            .get_mut(l.owner_frame)
            .ok_or(Error::DanglingFrame {
                index: l.owner_frame,
                frames: n,
            })?;
        slot.push((l.position.unwrap_or(usize::MAX), offset + i, NodePayload::Log(l.clone())));
    }
    for slot in &mut leaves {
        slot.sort_by_key(|(pos, rank, _)| (*pos, *rank));
    }

    let mut counter = 0usize;
    let root = attach(&trace.root, &mut counter, &mut leaves);
    Ok(ItrTree {
        tx_hash: trace.tx_hash.clone(),
        root,
    })
}

fn attach(
    frame: &crate::trace_ingest::RawCallFrame,
    counter: &mut usize,
    leaves: &mut [Vec<(usize, usize, NodePayload)>],
) -> ItrNode {
    let index = *counter;
    *counter += 1;
    let mut mine = std::mem::take(&mut leaves[index]).into_iter().peekable();
    let mut children = Vec::with_capacity(frame.children.len() + mine.len());
    for (k, child) in frame.children.iter().enumerate() {
        while let Some((pos, _, _)) = mine.peek() {
            if *pos > k {
                break;
            }
            children.push(ItrNode::leaf(mine.next().unwrap().2));
        }
        children.push(attach(child, counter, leaves));
    }
    children.extend(mine.map(|(_, _, p)| ItrNode::leaf(p)));
    ItrNode {
        payload: NodePayload::Call(CallPayload {
            kind: frame.kind,
            from: frame.from.clone(),
            to: frame.to.clone(),
            input: frame.input.clone(),
            output: frame.output.clone(),
            gas: frame.gas,
            value: frame.value,
        }),
        children,
    }
}

/// Left-child/right-sibling form of an [`ItrNode`] tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryNode {
    pub payload: NodePayload,
    pub left: Option<Box<BinaryNode>>,
    pub right: Option<Box<BinaryNode>>,
}

impl BinaryNode {
    pub fn node_count(&self) -> usize {
        1 + self.left.as_ref().map_or(0, |n| n.node_count())
            + self.right.as_ref().map_or(0, |n| n.node_count())
    }

    /// Number of actions on the longest root-to-node path.
    pub fn depth(&self) -> usize {
        let l = self.left.as_ref().map_or(0, |n| 1 + n.depth());
        let r = self.right.as_ref().map_or(0, |n| 1 + n.depth());
        l.max(r)
    }
}

pub fn binarize(tree: &ItrTree) -> BinaryNode {
    binarize_node(&tree.root, &[])
}

fn binarize_node(node: &ItrNode, next_siblings: &[ItrNode]) -> BinaryNode {
    let left = node
        .children
        .split_first()
        .map(|(first, rest)| Box::new(binarize_node(first, rest)));
    let right = next_siblings
        .split_first()
        .map(|(first, rest)| Box::new(binarize_node(first, rest)));
    BinaryNode {
        payload: node.payload.clone(),
        left,
        right,
    }
}

/// Inverse of [`binarize`]. The root of a binarized tree never has a right child.
pub fn debinarize(root: &BinaryNode, tx_hash: &str) -> ItrTree {
    ItrTree {
        tx_hash: tx_hash.to_string(),
        root: ItrNode {
            payload: root.payload.clone(),
            children: sibling_chain(root.left.as_deref()),
        },
    }
}

fn sibling_chain(mut cur: Option<&BinaryNode>) -> Vec<ItrNode> {
    let mut out = Vec::new();
    while let Some(n) = cur {
        out.push(ItrNode {
            payload: n.payload.clone(),
            children: sibling_chain(n.left.as_deref()),
        });
        cur = n.right.as_deref();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearNode<'a> {
    pub payload: &'a NodePayload,
    pub path: TreePath,
}

/// Level-order readout of a binarized tree with each node's action path.
pub fn bfs_linearize(root: &BinaryNode, max_depth: usize) -> Result<Vec<LinearNode<'_>>> {
    bfs_linearize_budget(root, max_depth, usize::MAX, |_| 0)
}

/// Like [`bfs_linearize`], but stops once the summed `cost` of the emitted
/// nodes reaches `budget`. Nodes past the budget are never visited, so only
/// the depth of nodes that are actually emitted is checked.
pub fn bfs_linearize_budget<'a>(
    root: &'a BinaryNode,
    max_depth: usize,
    budget: usize,
    cost: impl Fn(&NodePayload) -> usize,
) -> Result<Vec<LinearNode<'a>>> {
    let mut out = Vec::new();
    let mut spent = 0usize;
    let mut queue = VecDeque::new();
    queue.push_back((root, TreePath::root()));
    while let Some((node, path)) = queue.pop_front() {
        if spent >= budget {
            break;
        }
        if path.len() > max_depth {
            return Err(Error::DepthExceeded {
                depth: path.len(),
                max: max_depth,
            });
        }
        spent = spent.saturating_add(cost(&node.payload));
        if let Some(l) = &node.left {
            queue.push_back((l.as_ref(), path.child(Step::L)));
        }
        if let Some(r) = &node.right {
            queue.push_back((r.as_ref(), path.child(Step::R)));
        }
        out.push(LinearNode {
            payload: &node.payload,
            path,
        });
    }
    Ok(out)
}
