//! Federation trees.
//!
//! Trees are declared by node name in TOML. The loader assigns dense ids in
//! breadth-first order with siblings sorted by name, so the root is always 0
//! and ids do not depend on the order nodes appear in the file.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TrainerConfig;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub name: String,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Key into the dataset assignment.
    pub dataset: String,
    pub trainer: TrainerConfig,
    pub dp_enabled: bool,
    /// Highest ancestor (or the node itself) this node's residuals may reach.
    pub residual_ceiling: NodeId,
    pub trains_locally: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationTree {
    nodes: BTreeMap<NodeId, NodeSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub kind: &'static str,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.node {
            Some(id) => write!(f, "{} at node {id}: {}", self.kind, self.detail),
            None => write!(f, "{}: {}", self.kind, self.detail),
        }
    }
}

impl FederationTree {
    /// Builds a tree without checking it; see [`validate`].
    pub fn from_nodes(nodes: impl IntoIterator<Item = NodeSpec>) -> Self {
        Self { nodes: nodes.into_iter().map(|n| (n.id, n)).collect() }
    }

    /// Builds and validates.
    pub fn new(nodes: impl IntoIterator<Item = NodeSpec>) -> Result<Self> {
        let tree = Self::from_nodes(nodes);
        let violations = validate(&tree);
        if violations.is_empty() {
            Ok(tree)
        } else {
            Err(Error::Topology(
                violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
            ))
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &NodeSpec {
        &self.nodes[&id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut NodeSpec {
        self.nodes.get_mut(&id).expect("node id")
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn id_of(&self, name: &str) -> Option<NodeId> {
        self.nodes.values().find(|n| n.name == name).map(|n| n.id)
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[&id].children
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[&id].parent
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[&id].children.is_empty()
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.children.is_empty()).map(|n| n.id).collect()
    }

    /// True when `ancestor` lies on the path from `node` to the root.
    pub fn is_ancestor_or_self(&self, ancestor: NodeId, node: NodeId) -> bool {
        let mut cur = Some(node);
        let mut hops = 0;
        while let Some(c) = cur {
            if c == ancestor {
                return true;
            }
            hops += 1;
            if hops > self.nodes.len() {
                return false;
            }
            cur = self.nodes.get(&c).and_then(|n| n.parent);
        }
        false
    }

    pub fn depth_of(&self, id: NodeId) -> usize {
        let mut d = 0;
        let mut cur = self.nodes[&id].parent;
        while let Some(p) = cur {
            d += 1;
            cur = self.nodes[&p].parent;
        }
        d
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        self.ids().map(|id| self.depth_of(id)).max().unwrap_or(0)
    }

    /// Nodes grouped by depth, each level sorted by id.
    pub fn levels(&self) -> Vec<Vec<NodeId>> {
        let mut levels: Vec<Vec<NodeId>> = vec![Vec::new(); self.depth() + 1];
        for id in self.ids() {
            levels[self.depth_of(id)].push(id);
        }
        levels
    }

    /// Leaves below `id` (or `id` itself when it is a leaf), in id order.
    pub fn leaves_under(&self, id: NodeId) -> Vec<NodeId> {
        let mut out: Vec<NodeId> =
            self.leaves().into_iter().filter(|&l| self.is_ancestor_or_self(id, l)).collect();
        out.sort_unstable();
        out
    }
}

/// Checks every structural invariant and names the offending node.
pub fn validate(tree: &FederationTree) -> Vec<Violation> {
    let mut out = Vec::new();
    let v = |node: Option<NodeId>, kind: &'static str, detail: String| Violation { node, kind, detail };
    if tree.nodes.is_empty() {
        out.push(v(None, "empty", "tree has no nodes".into()));
        return out;
    }
    let roots: Vec<NodeId> = tree.nodes.values().filter(|n| n.parent.is_none()).map(|n| n.id).collect();
    if roots.len() != 1 {
        out.push(v(None, "root uniqueness", format!("expected exactly one root, found {roots:?}")));
    } else if roots[0] != 0 {
        out.push(v(Some(roots[0]), "root uniqueness", "the root must have id 0".into()));
    }
    let mut names = BTreeSet::new();
    for n in tree.nodes.values() {
        if !names.insert(n.name.as_str()) {
            out.push(v(Some(n.id), "duplicate name", format!("`{}` is used twice", n.name)));
        }
        if let Some(p) = n.parent {
            match tree.nodes.get(&p) {
                None => out.push(v(Some(n.id), "parent/child consistency", format!("unknown parent {p}"))),
                Some(ps) if !ps.children.contains(&n.id) => out.push(v(
                    Some(n.id),
                    "parent/child consistency",
                    format!("parent {p} does not list it as a child"),
                )),
                _ => {}
            }
        }
        let mut seen = BTreeSet::new();
        for &c in &n.children {
            if !seen.insert(c) {
                out.push(v(Some(n.id), "parent/child consistency", format!("child {c} listed twice")));
            }
            match tree.nodes.get(&c) {
                None => out.push(v(Some(n.id), "parent/child consistency", format!("unknown child {c}"))),
                Some(cs) if cs.parent != Some(n.id) => out.push(v(
                    Some(n.id),
                    "parent/child consistency",
                    format!("child {c} names a different parent"),
                )),
                _ => {}
            }
        }
        if n.children.windows(2).any(|w| w[0] >= w[1]) {
            out.push(v(Some(n.id), "child order", "children must be sorted by id".into()));
        }
    }
    let mut in_cycle = BTreeSet::new();
    for &start in tree.nodes.keys() {
        let mut visited = BTreeSet::new();
        let mut cur = Some(start);
        while let Some(c) = cur {
            if !visited.insert(c) {
                if in_cycle.insert(c) {
                    out.push(v(Some(c), "cycle", "parent chain revisits this node".into()));
                }
                break;
            }
            cur = tree.nodes.get(&c).and_then(|n| n.parent);
        }
    }
    if let [root] = roots[..] {
        let mut reached = BTreeSet::new();
        let mut queue = VecDeque::from([root]);
        while let Some(c) = queue.pop_front() {
            if !reached.insert(c) {
                continue;
            }
            if let Some(n) = tree.nodes.get(&c) {
                queue.extend(n.children.iter().copied());
            }
        }
        for &id in tree.nodes.keys() {
            if !reached.contains(&id) && !in_cycle.contains(&id) {
                out.push(v(Some(id), "connectivity", "not reachable from the root".into()));
            }
        }
    }
    if out.is_empty() {
        for n in tree.nodes.values() {
            if !tree.is_ancestor_or_self(n.residual_ceiling, n.id) {
                out.push(v(
                    Some(n.id),
                    "residual ceiling",
                    format!("{} is not an ancestor", n.residual_ceiling),
                ));
            }
        }
        for (depth, level) in tree.levels().iter().enumerate() {
            if level.is_empty() {
                out.push(v(None, "levels", format!("depth {depth} has no nodes")));
            }
        }
    }
    out
}

/// One `[[node]]` block of a tree file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    #[serde(default)]
    pub parent: Option<String>,
    /// Defaults to the node name.
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub dp: bool,
    /// Node name; defaults to the root.
    #[serde(default)]
    pub residual_ceiling: Option<String>,
    #[serde(default = "default_trains")]
    pub trains_locally: bool,
    #[serde(default)]
    pub local_steps: Option<usize>,
}

fn default_trains() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    #[serde(rename = "node")]
    pub nodes: Vec<NodeConfig>,
}

impl TreeConfig {
    /// Resolves names to BFS ids and validates the result.
    pub fn build(&self, trainer: &TrainerConfig) -> Result<FederationTree> {
        let mut by_name: BTreeMap<&str, &NodeConfig> = BTreeMap::new();
        for n in &self.nodes {
            if by_name.insert(n.name.as_str(), n).is_some() {
                return Err(Error::Topology(format!("duplicate node name `{}`", n.name)));
            }
        }
        for n in &self.nodes {
            if let Some(p) = &n.parent {
                if !by_name.contains_key(p.as_str()) {
                    return Err(Error::Topology(format!("node `{}` names unknown parent `{p}`", n.name)));
                }
            }
        }
        let roots: Vec<&str> =
            self.nodes.iter().filter(|n| n.parent.is_none()).map(|n| n.name.as_str()).collect();
        let [root] = roots[..] else {
            return Err(Error::Topology(format!("root uniqueness: expected one root, found {roots:?}")));
        };
        let mut kids: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for n in &self.nodes {
            if let Some(p) = &n.parent {
                kids.entry(p.as_str()).or_default().push(n.name.as_str());
            }
        }
        let mut order: Vec<&str> = Vec::new();
        let mut queue = VecDeque::from([root]);
        while let Some(name) = queue.pop_front() {
            order.push(name);
            if let Some(cs) = kids.get(name) {
                // child lists follow file order until sorted
                let mut cs = cs.clone();
                cs.sort_unstable();
                queue.extend(cs);
            }
        }
        if order.len() != self.nodes.len() {
            let missing: Vec<&str> = self
                .nodes
                .iter()
                .map(|n| n.name.as_str())
                .filter(|n| !order.contains(n))
                .collect();
            return Err(Error::Topology(format!("cycle or disconnected nodes: {missing:?}")));
        }
        let id: BTreeMap<&str, NodeId> = order.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let mut specs = Vec::with_capacity(order.len());
        for name in &order {
            let n = by_name[name];
            let ceiling = match &n.residual_ceiling {
                None => 0,
                Some(c) => *id
                    .get(c.as_str())
                    .ok_or_else(|| Error::Topology(format!("node `{name}`: unknown ceiling `{c}`")))?,
            };
            let mut children: Vec<NodeId> =
                kids.get(name).map(|cs| cs.iter().map(|c| id[c]).collect()).unwrap_or_default();
            children.sort_unstable();
            let mut t = trainer.clone();
            if let Some(steps) = n.local_steps {
                t.local_steps = steps;
            }
            specs.push(NodeSpec {
                id: id[name],
                name: name.to_string(),
                parent: n.parent.as_ref().map(|p| id[p.as_str()]),
                children,
                dataset: n.dataset.clone().unwrap_or_else(|| name.to_string()),
                trainer: t,
                dp_enabled: n.dp,
                residual_ceiling: ceiling,
                trains_locally: n.trains_locally,
            });
        }
        FederationTree::new(specs)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::aggregation::{ScheduleConfig, ScheduleShape};
    use crate::model::OptimizerKind;

    pub(crate) fn trainer() -> TrainerConfig {
        TrainerConfig {
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.95,
            local_steps: 2,
            batch_size: 4,
            schedule: ScheduleConfig {
                alpha: 0.1,
                eta_max: 1e-2,
                total_steps: 100,
                shape: ScheduleShape::WarmupCosine,
            },
        }
    }

    fn spec(id: NodeId, parent: Option<NodeId>, children: Vec<NodeId>) -> NodeSpec {
        NodeSpec {
            id,
            name: format!("n{id}"),
            parent,
            children,
            dataset: format!("n{id}"),
            trainer: trainer(),
            dp_enabled: false,
            residual_ceiling: 0,
            trains_locally: true,
        }
    }

    /// Root 0 with leaves `1..=k`.
    pub(crate) fn star(k: usize) -> FederationTree {
        let mut nodes = vec![spec(0, None, (1..=k).collect())];
        nodes.extend((1..=k).map(|i| spec(i, Some(0), vec![])));
        FederationTree::new(nodes).unwrap()
    }

    const FIG2: &str = r#"
        [[node]]
        name = "root"
        [[node]]
        name = "web"
        parent = "root"
        [[node]]
        name = "med"
        parent = "root"
        [[node]]
        name = "cc"
        parent = "web"
        [[node]]
        name = "wk"
        parent = "web"
        [[node]]
        name = "pbc"
        parent = "med"
        [[node]]
        name = "pba"
        parent = "med"
    "#;

    fn parse(s: &str) -> TreeConfig {
        toml::from_str(s).unwrap()
    }

    #[test]
    fn three_level_tree_validates_and_stages() {
        let tree = parse(FIG2).build(&trainer()).unwrap();
        assert!(validate(&tree).is_empty());
        assert_eq!(tree.levels(), vec![vec![0], vec![1, 2], vec![3, 4, 5, 6]]);
        assert_eq!(tree.depth(), 2);
        // siblings are sorted by name: "med" < "web"
        assert_eq!(tree.node(1).name, "med");
        assert_eq!(tree.children(1), &[3, 4]);
        assert_eq!(tree.node(3).name, "pba");
        assert_eq!(tree.leaves_under(2), vec![5, 6]);
    }

    #[test]
    fn config_order_does_not_change_ids() {
        let cfg = parse(FIG2);
        let base = cfg.build(&trainer()).unwrap();
        let mut nodes = cfg.nodes.clone();
        for rot in 1..nodes.len() {
            nodes.rotate_left(1);
            let mut rev = nodes.clone();
            rev.reverse();
            for order in [nodes.clone(), rev] {
                let t = TreeConfig { nodes: order }.build(&trainer()).unwrap();
                assert_eq!(t, base, "rotation {rot}");
                assert_eq!(t.levels(), base.levels());
            }
        }
    }

    #[test]
    fn star_has_two_stages() {
        let t = star(3);
        assert_eq!(t.levels(), vec![vec![0], vec![1, 2, 3]]);
        assert!(t.is_leaf(2));
        assert!(t.is_ancestor_or_self(0, 2));
        assert!(!t.is_ancestor_or_self(2, 0));
    }

    #[test]
    fn cycle_is_reported() {
        let tree = FederationTree::from_nodes(vec![
            spec(0, None, vec![]),
            spec(1, Some(2), vec![2]),
            spec(2, Some(1), vec![1]),
        ]);
        let v = validate(&tree);
        assert!(v.iter().any(|x| x.kind == "cycle"), "{v:?}");
    }

    #[test]
    fn two_roots_are_reported() {
        let tree = FederationTree::from_nodes(vec![spec(0, None, vec![]), spec(1, None, vec![])]);
        let v = validate(&tree);
        assert!(v.iter().any(|x| x.kind == "root uniqueness"), "{v:?}");
        let cfg = parse("[[node]]\nname = \"a\"\n[[node]]\nname = \"b\"\n");
        assert!(matches!(cfg.build(&trainer()), Err(Error::Topology(m)) if m.contains("root uniqueness")));
    }

    #[test]
    fn inconsistent_links_and_bad_ceiling() {
        let mut nodes = vec![spec(0, None, vec![1]), spec(1, Some(0), vec![]), spec(2, Some(0), vec![])];
        let v = validate(&FederationTree::from_nodes(nodes.clone()));
        assert!(v.iter().any(|x| x.kind == "parent/child consistency" && x.node == Some(2)));
        nodes[0].children = vec![1, 2];
        nodes[1].residual_ceiling = 2;
        let v = validate(&FederationTree::from_nodes(nodes));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, "residual ceiling");
        assert_eq!(v[0].node, Some(1));
    }

    #[test]
    fn unknown_parent_and_ceiling() {
        let cfg = parse("[[node]]\nname = \"a\"\n[[node]]\nname = \"b\"\nparent = \"zz\"\n");
        assert!(cfg.build(&trainer()).is_err());
        let cfg = parse("[[node]]\nname = \"a\"\n[[node]]\nname = \"b\"\nparent = \"a\"\nresidual_ceiling = \"q\"\n");
        assert!(cfg.build(&trainer()).is_err());
    }

    #[test]
    fn serialization_round_trips() {
        let tree = parse(FIG2).build(&trainer()).unwrap();
        let json = serde_json::to_string(&tree).unwrap();
        let back: FederationTree = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tree);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        let toml_text = toml::to_string(&parse(FIG2)).unwrap();
        assert_eq!(parse(&toml_text), parse(FIG2));
    }

    #[test]
    fn valid_trees_partition_ids_into_levels() {
        for k in 1..6 {
            let t = star(k);
            let mut all: Vec<NodeId> = t.levels().concat();
            all.sort_unstable();
            assert_eq!(all, (0..=k).collect::<Vec<_>>());
        }
    }
}
