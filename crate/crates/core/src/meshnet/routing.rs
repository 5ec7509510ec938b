//! Per-node forwarding tables and the on-demand path request flood.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteEntry {
    pub next_hop: usize,
    /// Path cost from this node to the destination, seconds.
    pub metric: f64,
    pub seqnum: u64,
    pub expires_at: f64,
    pub hops: u32,
    pub valid: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RoutingTable {
    entries: BTreeMap<usize, RouteEntry>,
}

impl RoutingTable {
    /// A usable entry: valid and not expired.
    pub fn lookup(&self, dest: usize, now: f64) -> Option<&RouteEntry> {
        self.entries.get(&dest).filter(|e| e.valid && e.expires_at > now)
    }

    pub fn get(&self, dest: usize) -> Option<&RouteEntry> {
        self.entries.get(&dest)
    }

    /// Installs `offer` if it is fresher, or equally fresh with a strictly
    /// better metric. Unusable entries yield to any offer that is not older.
    pub fn offer(&mut self, dest: usize, offer: RouteEntry, now: f64) -> bool {
        let accept = match self.entries.get(&dest) {
            None => true,
            Some(cur) if !cur.valid || cur.expires_at <= now => offer.seqnum >= cur.seqnum,
            Some(cur) => offer.seqnum > cur.seqnum || (offer.seqnum == cur.seqnum && offer.metric < cur.metric),
        };
        if accept {
            self.entries.insert(dest, offer);
        }
        accept
    }

    pub fn invalidate(&mut self, dest: usize) -> bool {
        match self.entries.get_mut(&dest) {
            Some(e) if e.valid => {
                e.valid = false;
                true
            }
            _ => false,
        }
    }

    pub fn refresh(&mut self, dest: usize, until: f64) {
        if let Some(e) = self.entries.get_mut(&dest) {
            if e.valid && e.expires_at < until {
                e.expires_at = until;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &RouteEntry)> {
        self.entries.iter().map(|(d, e)| (*d, e))
    }
}

/// Follows usable next hops from every node towards `dest`. Returns the first
/// node found on a cycle.
pub fn find_loop(tables: &[RoutingTable], dest: usize, now: f64) -> Option<usize> {
    let n = tables.len();
    // 0 = unvisited, 1 = on the current walk, 2 = known to terminate.
    let mut mark = vec![0u8; n];
    for start in 0..n {
        if mark[start] != 0 {
            continue;
        }
        let mut walk = Vec::new();
        let mut cur = start;
        loop {
            if cur == dest || mark[cur] == 2 {
                break;
            }
            if mark[cur] == 1 {
                return Some(cur);
            }
            mark[cur] = 1;
            walk.push(cur);
            match tables[cur].lookup(dest, now) {
                Some(e) if e.next_hop < n => cur = e.next_hop,
                _ => break,
            }
        }
        for w in walk {
            mark[w] = 2;
        }
    }
    None
}

/// One usable edge of the topology snapshot a flood runs over.
#[derive(Clone, Copy, Debug)]
pub struct Edge {
    pub to: usize,
    pub metric: f64,
    /// Time for a control frame to cross, seconds.
    pub latency: f64,
}

/// Result of a flood from `src` to `dst`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discovery {
    /// Best path, `src` first. `None` when the target was not reached.
    pub path: Option<Vec<usize>>,
    pub metric: f64,
    /// Every node the flood reached with its predecessor and metric from `src`.
    pub reverse: BTreeMap<usize, (usize, f64, u32)>,
    /// Seconds from the first request until the reply reaches `src`.
    pub latency: f64,
    /// Request broadcasts and reply unicasts made.
    pub preq_tx: usize,
    pub prep_tx: usize,
}

#[derive(PartialEq)]
struct Preq {
    at: f64,
    order: u64,
    node: usize,
    from: usize,
    metric: f64,
    hops: u32,
}

impl Eq for Preq {}

impl Ord for Preq {
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then(other.order.cmp(&self.order))
    }
}

impl PartialOrd for Preq {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Floods a path request over `adj` in arrival-time order. A node re-broadcasts
/// every request that improves its metric to the originator, so the flood
/// settles on the least-cost path even when a cheaper path is slower to arrive.
pub fn flood(adj: &[Vec<Edge>], src: usize, dst: usize, max_hops: u32) -> Discovery {
    let n = adj.len();
    let mut best: Vec<Option<(usize, f64, u32, f64)>> = vec![None; n];
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    let mut preq_tx = 1;
    best[src] = Some((src, 0.0, 0, 0.0));
    for e in &adj[src] {
        heap.push(Preq { at: e.latency, order, node: e.to, from: src, metric: e.metric, hops: 1 });
        order += 1;
    }
    while let Some(p) = heap.pop() {
        if p.node == src {
            continue;
        }
        let better = best[p.node].is_none_or(|(_, m, _, _)| p.metric < m);
        if !better {
            continue;
        }
        best[p.node] = Some((p.from, p.metric, p.hops, p.at));
        if p.node == dst || p.hops >= max_hops {
            continue;
        }
        preq_tx += 1;
        for e in &adj[p.node] {
            heap.push(Preq {
                at: p.at + e.latency,
                order,
                node: e.to,
                from: p.node,
                metric: p.metric + e.metric,
                hops: p.hops + 1,
            });
            order += 1;
        }
    }
    let mut reverse = BTreeMap::new();
    for (k, b) in best.iter().enumerate() {
        if let Some((pred, m, h, _)) = b {
            if k != src {
                reverse.insert(k, (*pred, *m, *h));
            }
        }
    }
    let Some((_, metric, _, arrived)) = best[dst] else {
        return Discovery { path: None, metric: f64::INFINITY, reverse, latency: 0.0, preq_tx, prep_tx: 0 };
    };
    let mut path = vec![dst];
    let mut back = 0.0;
    let mut cur = dst;
    while cur != src {
        let pred = best[cur].expect("on path").0;
        back += adj[cur].iter().find(|e| e.to == pred).map_or(0.0, |e| e.latency);
        path.push(pred);
        cur = pred;
    }
    path.reverse();
    let prep_tx = path.len() - 1;
    Discovery { path: Some(path), metric, reverse, latency: arrived + back, preq_tx, prep_tx }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(next: usize, metric: f64, seq: u64) -> RouteEntry {
        RouteEntry { next_hop: next, metric, seqnum: seq, expires_at: 100.0, hops: 1, valid: true }
    }

    #[test]
    fn freshness_rule() {
        let mut t = RoutingTable::default();
        assert!(t.offer(5, entry(1, 2.0, 3), 0.0));
        assert!(!t.offer(5, entry(2, 1.0, 2), 0.0), "older seq rejected");
        assert!(!t.offer(5, entry(2, 2.0, 3), 0.0), "equal metric rejected");
        assert!(t.offer(5, entry(2, 1.5, 3), 0.0));
        assert!(t.offer(5, entry(3, 9.0, 4), 0.0), "fresher wins despite metric");
        assert_eq!(t.lookup(5, 0.0).unwrap().next_hop, 3);
        assert!(t.lookup(5, 100.0).is_none(), "expired entries are not used");
        t.invalidate(5);
        assert!(t.lookup(5, 0.0).is_none());
        assert!(t.offer(5, entry(1, 9.0, 4), 0.0));
    }

    #[test]
    fn loop_detection() {
        let mut tables = vec![RoutingTable::default(); 4];
        tables[0].offer(3, entry(1, 3.0, 1), 0.0);
        tables[1].offer(3, entry(2, 2.0, 1), 0.0);
        tables[2].offer(3, entry(3, 1.0, 1), 0.0);
        assert_eq!(find_loop(&tables, 3, 0.0), None);
        tables[2].offer(3, entry(0, 0.5, 1), 0.0);
        assert!(find_loop(&tables, 3, 0.0).is_some());
    }

    fn edge(to: usize, metric: f64) -> Edge {
        Edge { to, metric, latency: 0.001 }
    }

    #[test]
    fn flood_prefers_cheap_slow_path() {
        // 0-3 direct but expensive; 0-1-2-3 cheap.
        let adj = vec![
            vec![edge(3, 10.0), edge(1, 1.0)],
            vec![edge(0, 1.0), edge(2, 1.0)],
            vec![edge(1, 1.0), edge(3, 1.0)],
            vec![edge(0, 10.0), edge(2, 1.0)],
        ];
        let d = flood(&adj, 0, 3, 16);
        assert_eq!(d.path, Some(vec![0, 1, 2, 3]));
        assert_eq!(d.metric, 3.0);
        assert!((d.latency - 0.006).abs() < 1e-12);
        assert_eq!(d.prep_tx, 3);
    }

    #[test]
    fn flood_unreachable_and_hop_limit() {
        let adj = vec![vec![edge(1, 1.0)], vec![edge(0, 1.0), edge(2, 1.0)], vec![edge(1, 1.0)], vec![]];
        assert_eq!(flood(&adj, 0, 3, 16).path, None);
        assert_eq!(flood(&adj, 0, 2, 1).path, None);
        assert_eq!(flood(&adj, 0, 2, 2).path, Some(vec![0, 1, 2]));
    }
}
