use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dot, LatentIndex, Node};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(super) struct Scored {
    pub sim: f32,
    pub id: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Fixed-size visited set over node ids.
struct Visited(Vec<u64>);

impl Visited {
    fn new(n: usize) -> Self {
        Self(vec![0; n.div_ceil(64)])
    }

    fn contains(&self, id: u32) -> bool {
        self.0[id as usize / 64] & (1u64 << (id % 64)) != 0
    }

    /// Marks `id`, returning true if it was not marked before.
    fn insert(&mut self, id: u32) -> bool {
        let (w, bit) = (id as usize / 64, 1u64 << (id % 64));
        let fresh = self.0[w] & bit == 0;
        self.0[w] |= bit;
        fresh
    }
}

impl LatentIndex {
    fn sim_to(&self, q: &[f32], id: u32) -> f32 {
        dot(q, &self.nodes[id as usize].vector)
    }

    /// Level of node `id`, a pure function of the seed and the id.
    fn sample_level(&self, id: u32) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.params.seed);
        rng.set_stream(id as u64);
        let u: f64 = 1.0 - rng.random::<f64>();
        (-u.ln() * self.params.level_lambda).floor() as usize
    }

    fn max_level(&self) -> usize {
        self.entry.map_or(0, |e| self.nodes[e as usize].level())
    }

    /// Beam search on one layer. Returns up to `ef` nodes, best first.
    fn search_layer(&self, q: &[f32], entry: &[Scored], ef: usize, layer: usize) -> Vec<Scored> {
        let mut visited = Visited::new(self.nodes.len());
        for s in entry {
            visited.insert(s.id);
        }
        let mut candidates: BinaryHeap<Scored> = entry.iter().copied().collect();
        // min-heap of the current best `ef`
        let mut best: BinaryHeap<std::cmp::Reverse<Scored>> =
            entry.iter().map(|s| std::cmp::Reverse(*s)).collect();
        while best.len() > ef {
            best.pop();
        }
        while let Some(c) = candidates.pop() {
            let worst = best.peek().map(|r| r.0);
            if let Some(w) = worst {
                if best.len() >= ef && c < w {
                    break;
                }
            }
            for &n in &self.nodes[c.id as usize].links[layer] {
                if !visited.insert(n) {
                    continue;
                }
                let s = Scored {
                    sim: self.sim_to(q, n),
                    id: n,
                };
                let worst = best.peek().map(|r| r.0);
                if best.len() < ef || worst.is_some_and(|w| s > w) {
                    candidates.push(s);
                    best.push(std::cmp::Reverse(s));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = best.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the
    /// base than to every already kept neighbour, then top up with the best
    /// of the rejected ones. `candidates` must be sorted best first.
    fn select_neighbors(&self, candidates: &[Scored], m: usize) -> Vec<Scored> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        let mut rejected = Vec::new();
        for &c in candidates {
            if kept.len() >= m {
                break;
            }
            let cv = &self.nodes[c.id as usize].vector;
            let diverse = kept
                .iter()
                .all(|k| dot(cv, &self.nodes[k.id as usize].vector) < c.sim);
            if diverse {
                kept.push(c);
            } else {
                rejected.push(c);
            }
        }
        for r in rejected {
            if kept.len() >= m {
                break;
            }
            kept.push(r);
        }
        kept
    }

    fn link(&mut self, a: u32, b: u32, layer: usize) {
        let links = &mut self.nodes[a as usize].links[layer];
        if !links.contains(&b) {
            links.push(b);
        }
    }

    fn unlink(&mut self, a: u32, b: u32, layer: usize) {
        self.nodes[a as usize].links[layer].retain(|&x| x != b);
        self.nodes[b as usize].links[layer].retain(|&x| x != a);
    }

    /// True when `a` and `b` stay connected on `layer` without their direct
    /// edge. A shared neighbour settles it at once; otherwise a
    /// breadth-first search from `a` looks for `b`.
    fn has_detour(&self, a: u32, b: u32, layer: usize) -> bool {
        let la = &self.nodes[a as usize].links[layer];
        let lb = &self.nodes[b as usize].links[layer];
        if la.iter().any(|x| lb.contains(x)) {
            return true;
        }
        let mut seen = Visited::new(self.nodes.len());
        seen.insert(a);
        let mut queue = VecDeque::from([a]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.nodes[u as usize].links[layer] {
                if u == a && v == b {
                    continue;
                }
                if v == b {
                    return true;
                }
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        false
    }

    /// Links `x` to the node closest to `from` (in hops) that still has
    /// room on `layer`. Returns false when there is no such node.
    fn reattach(&mut self, x: u32, from: u32, layer: usize) -> bool {
        let m = self.params.m;
        let mut seen = Visited::new(self.nodes.len());
        seen.insert(from);
        seen.insert(x);
        let mut queue = VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            let links = &self.nodes[u as usize].links[layer];
            if u != from && links.len() < m && !links.contains(&x) {
                self.link(u, x, layer);
                self.link(x, u, layer);
                return true;
            }
            for &v in links {
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        false
    }

    /// Trims `node`'s links on `layer` back to `m`, removing both directions
    /// of every dropped link. The least preferred link whose removal keeps
    /// the layer connected goes first; if every link is a bridge, the worst
    /// one is cut and its far side reattached elsewhere.
    fn shrink(&mut self, node: u32, layer: usize) {
        let m = self.params.m;
        while self.nodes[node as usize].links[layer].len() > m {
            let base = self.nodes[node as usize].vector.clone();
            let mut scored: Vec<Scored> = self.nodes[node as usize].links[layer]
                .iter()
                .map(|&n| Scored {
                    sim: self.sim_to(&base, n),
                    id: n,
                })
                .collect();
            scored.sort_by(|a, b| b.cmp(a));
            let order = self.select_neighbors(&scored, scored.len());
            if let Some(x) = order.iter().rev().find(|x| self.has_detour(node, x.id, layer)) {
                self.unlink(node, x.id, layer);
                continue;
            }
            let x = order.last().expect("over-full node has links").id;
            self.unlink(node, x, layer);
            if !self.reattach(x, node, layer) {
                // nowhere else to go; keep the edge rather than split the layer
                self.link(node, x, layer);
                self.link(x, node, layer);
                return;
            }
        }
    }

    pub(super) fn insert_node(&mut self, key: String, vector: Vec<f32>) -> u32 {
        let id = self.nodes.len() as u32;
        let level = self.sample_level(id);
        self.nodes.push(Node {
            key,
            vector,
            links: vec![Vec::new(); level + 1],
        });
        let Some(entry) = self.entry else {
            self.entry = Some(id);
            return id;
        };
        let q = self.nodes[id as usize].vector.clone();
        let top = self.max_level();
        let mut eps = vec![Scored {
            sim: self.sim_to(&q, entry),
            id: entry,
        }];
        for layer in (level + 1..=top).rev() {
            eps = self.search_layer(&q, &eps, 1, layer);
        }
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&q, &eps, self.params.ef_construction, layer);
            let neighbors = self.select_neighbors(&found, self.params.m);
            for n in &neighbors {
                self.link(id, n.id, layer);
                self.link(n.id, id, layer);
            }
            for n in &neighbors {
                self.shrink(n.id, layer);
            }
            eps = found;
        }
        if level > top {
            self.entry = Some(id);
        }
        id
    }

    pub(super) fn search_graph(&self, q: &[f32], ef: usize) -> Vec<Scored> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        let mut eps = vec![Scored {
            sim: self.sim_to(q, entry),
            id: entry,
        }];
        for layer in (1..=self.max_level()).rev() {
            eps = self.search_layer(q, &eps, 1, layer);
        }
        self.search_layer(q, &eps, ef, 0)
    }
}

pub(super) fn check_integrity(index: &LatentIndex) -> Result<(), String> {
    let n = index.nodes.len();
    let Some(entry) = index.entry else {
        return if n == 0 {
            Ok(())
        } else {
            Err("non-empty index without entry point".into())
        };
    };
    let top = index.nodes[entry as usize].level();
    for (i, node) in index.nodes.iter().enumerate() {
        let norm: f64 = node.vector.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(format!("node {i} has norm {norm}"));
        }
        if node.level() > top {
            return Err(format!("node {i} is above the entry point"));
        }
        for (layer, links) in node.links.iter().enumerate() {
            if links.len() > index.params.m {
                return Err(format!("node {i} has {} links on layer {layer}", links.len()));
            }
            if links.iter().enumerate().any(|(k, l)| links[..k].contains(l)) {
                return Err(format!("node {i} has duplicate links on layer {layer}"));
            }
            for &l in links {
                if l as usize == i || l as usize >= n {
                    return Err(format!("node {i} has invalid link {l}"));
                }
                let other = &index.nodes[l as usize];
                if other.level() < layer || !other.links[layer].contains(&(i as u32)) {
                    return Err(format!("link {i}->{l} on layer {layer} is one-way"));
                }
            }
        }
    }
    for layer in 0..=top {
        let mut seen = Visited::new(n);
        seen.insert(entry);
        let mut queue = VecDeque::from([entry]);
        while let Some(u) = queue.pop_front() {
            for &v in &index.nodes[u as usize].links[layer] {
                if seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        if let Some(i) = (0..n).find(|&i| index.nodes[i].level() >= layer && !seen.contains(i as u32)) {
            return Err(format!("node {i} unreachable on layer {layer}"));
        }
    }
    Ok(())
}
