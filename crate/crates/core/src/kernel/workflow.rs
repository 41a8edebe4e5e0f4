//! Workflow graphs over agents.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::bus::TopicPattern;
use super::AgentId;
use crate::domain::Payload;

/// Insights of `producer` published on a topic matching `topic` trigger `consumer`.
/// The consumer input is the producer payload projected onto the consumer's input schema,
/// overlaid with `defaults`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowEdge {
    pub producer: AgentId,
    pub topic: TopicPattern,
    pub consumer: AgentId,
    #[serde(default)]
    pub defaults: Payload,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WorkflowSpec {
    pub nodes: Vec<AgentId>,
    pub edges: Vec<WorkflowEdge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WorkflowId(pub u64);

/// Returns the first cycle found by depth-first search (nodes visited in sorted order),
/// listed from its entry node along the edges.
pub fn find_cycle<'a>(edges: impl IntoIterator<Item = (&'a AgentId, &'a AgentId)>) -> Option<Vec<AgentId>> {
    let mut adj: BTreeMap<&AgentId, BTreeSet<&AgentId>> = BTreeMap::new();
    for (a, b) in edges {
        adj.entry(a).or_default().insert(b);
        adj.entry(b).or_default();
    }
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Unvisited,
        OnStack,
        Done,
    }
    let mut mark: BTreeMap<&AgentId, Mark> = adj.keys().map(|k| (*k, Mark::Unvisited)).collect();
    let roots: Vec<&AgentId> = adj.keys().copied().collect();
    for root in roots {
        if mark[root] != Mark::Unvisited {
            continue;
        }
        // Iterative DFS: stack of (node, remaining successors).
        let mut stack: Vec<(&AgentId, Vec<&AgentId>)> = vec![(root, adj[root].iter().rev().copied().collect())];
        mark.insert(root, Mark::OnStack);
        while let Some((node, pending)) = stack.last_mut() {
            let node = *node;
            match pending.pop() {
                Some(next) => match mark[next] {
                    Mark::Unvisited => {
                        mark.insert(next, Mark::OnStack);
                        stack.push((next, adj[next].iter().rev().copied().collect()));
                    }
                    Mark::OnStack => {
                        let start = stack.iter().position(|(n, _)| *n == next).expect("on-stack node");
                        return Some(stack[start..].iter().map(|(n, _)| (*n).clone()).collect());
                    }
                    Mark::Done => {}
                },
                None => {
                    mark.insert(node, Mark::Done);
                    stack.pop();
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Version;

    fn id(name: &str) -> AgentId {
        AgentId::new(name, Version::new(1, 0))
    }

    #[test]
    fn two_cycle_listed() {
        let (a, b) = (id("a"), id("b"));
        assert_eq!(find_cycle([(&a, &b), (&b, &a)]), Some(vec![a.clone(), b.clone()]));
    }

    #[test]
    fn self_loop() {
        let a = id("a");
        assert_eq!(find_cycle([(&a, &a)]), Some(vec![a.clone()]));
    }

    #[test]
    fn diamond_is_acyclic() {
        let (a, b, c, d) = (id("a"), id("b"), id("c"), id("d"));
        assert_eq!(find_cycle([(&a, &b), (&a, &c), (&b, &d), (&c, &d)]), None);
    }

    #[test]
    fn longer_cycle_behind_tail() {
        let (a, b, c, d) = (id("a"), id("b"), id("c"), id("d"));
        let cycle = find_cycle([(&a, &b), (&b, &c), (&c, &d), (&d, &b)]).unwrap();
        assert_eq!(cycle, vec![b.clone(), c.clone(), d.clone()]);
    }
}
