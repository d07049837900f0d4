#![allow(dead_code)]

use mamr::amr::AmrGraph;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONCEPTS: [&str; 8] = ["want-01", "boy", "go-01", "girl", "see-01", "city", "name", "thing"];

pub fn var(i: usize) -> String {
    format!("n{i}")
}

/// A random rooted DAG on `n` nodes named `n0..`: every later node gets a
/// parent among earlier ones, plus extra forward edges while the source has
/// fewer than `max_out` children.  Returns the graph and its edges in
/// insertion order.
pub fn random_dag(seed: u64, n: usize, max_out: usize, attributes: bool) -> (AmrGraph, Vec<(usize, usize)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0usize; n];
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for i in 1..n {
        let open: Vec<usize> = (0..i).filter(|&j| out[j] < max_out).collect();
        let p = *open.choose(&mut rng).unwrap_or(&0);
        edges.push((p, i));
        out[p] += 1;
    }
    for _ in 0..n {
        let s = rng.random_range(0..n);
        if s + 1 < n && out[s] < max_out {
            let t = rng.random_range(s + 1..n);
            if !edges.contains(&(s, t)) {
                edges.push((s, t));
                out[s] += 1;
            }
        }
    }
    edges.shuffle(&mut rng);
    let mut g = AmrGraph::new(var(0), CONCEPTS[rng.random_range(0..CONCEPTS.len())]);
    for i in 1..n {
        g.add_node(var(i), CONCEPTS[rng.random_range(0..CONCEPTS.len())]);
    }
    let mut role = vec![0usize; n];
    for &(s, t) in &edges {
        g.add_edge(&var(s), format!(":ARG{}", role[s]), var(t));
        role[s] += 1;
    }
    if attributes {
        for i in 0..n {
            match rng.random_range(0..4) {
                0 => {
                    g.add_attribute(&var(i), ":polarity", "-");
                }
                1 => {
                    g.add_attribute(&var(i), ":quant", rng.random_range(1..500).to_string());
                }
                2 => {
                    g.add_attribute(&var(i), ":op1", "\"New York\"");
                }
                _ => {}
            }
        }
    }
    (g, edges)
}

/// Independent feature oracle: shortest root distance by enumerating every
/// directed path, and subgraph ids from a transitive-closure matrix (the
/// first root child, in edge order, that reaches the node).
pub fn feature_oracle(n: usize, edges: &[(usize, usize)]) -> (Vec<u32>, Vec<u32>) {
    fn walk(at: usize, len: u32, edges: &[(usize, usize)], depth: &mut [u32]) {
        depth[at] = depth[at].min(len);
        for &(s, t) in edges {
            if s == at {
                walk(t, len + 1, edges, depth);
            }
        }
    }
    let mut depth = vec![u32::MAX; n];
    walk(0, 0, edges, &mut depth);

    let mut reach = vec![vec![false; n]; n];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(s, t) in edges {
        reach[s][t] = true;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    let root_children: Vec<usize> = edges.iter().filter(|(s, _)| *s == 0).map(|&(_, t)| t).collect();
    let subgraph = (0..n)
        .map(|v| {
            if v == 0 {
                0
            } else {
                root_children.iter().position(|&c| reach[c][v]).map_or(u32::MAX, |k| k as u32 + 1)
            }
        })
        .collect();
    (depth, subgraph)
}
