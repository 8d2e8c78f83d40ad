//! Brute-force reference implementations used only by tests. Nothing here
//! shares code with the library paths it checks.

use std::collections::{HashMap, VecDeque};

use rand::Rng;

/// Edit distance by plain recursion over (delete, insert, substitute/match).
/// Exponential; meant for inputs of at most six or seven words.
pub fn brute_edit_distance<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let diag = brute_edit_distance(ra, rb) + usize::from(x != y);
            let del = brute_edit_distance(ra, b) + 1;
            let ins = brute_edit_distance(a, rb) + 1;
            diag.min(del).min(ins)
        }
    }
}

/// All-pairs edit distances over every word list of length `<= max_len` drawn
/// from `alphabet`, by breadth-first search over single-word edits (delete,
/// insert or replace one word). Intermediate lists may grow one word longer.
pub fn bfs_edit_distances(alphabet: &[&'static str], max_len: usize) -> HashMap<(Vec<&'static str>, Vec<&'static str>), usize> {
    let mut lists: Vec<Vec<&'static str>> = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for l in &frontier {
            for &w in alphabet {
                let mut l2: Vec<&'static str> = l.clone();
                l2.push(w);
                next.push(l2);
            }
        }
        lists.extend(next.iter().cloned());
        frontier = next;
    }
    let mut out = HashMap::new();
    for src in &lists {
        let mut seen: HashMap<Vec<&'static str>, usize> = HashMap::new();
        let mut queue = VecDeque::new();
        seen.insert(src.clone(), 0);
        queue.push_back(src.clone());
        while let Some(cur) = queue.pop_front() {
            let d = seen[&cur];
            let mut neighbours = Vec::new();
            for i in 0..cur.len() {
                let mut n = cur.clone();
                n.remove(i);
                neighbours.push(n);
                for &w in alphabet {
                    if w != cur[i] {
                        let mut n = cur.clone();
                        n[i] = w;
                        neighbours.push(n);
                    }
                }
            }
            if cur.len() <= max_len {
                for i in 0..=cur.len() {
                    for &w in alphabet {
                        let mut n = cur.clone();
                        n.insert(i, w);
                        neighbours.push(n);
                    }
                }
            }
            for n in neighbours {
                if !seen.contains_key(&n) {
                    seen.insert(n.clone(), d + 1);
                    queue.push_back(n);
                }
            }
        }
        for dst in &lists {
            out.insert((src.clone(), dst.clone()), seen[dst]);
        }
    }
    out
}

/// Every sorted, disjoint, non-adjacent set of inclusive spans over `frames`
/// frames with at most `max_spans` members, enumerated from per-frame bitmasks.
pub fn all_span_sets(frames: usize, max_spans: usize) -> Vec<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for mask in 0u32..(1u32 << frames) {
        let mut spans = Vec::new();
        let mut start = None;
        for t in 0..=frames {
            let on = t < frames && mask & (1 << t) != 0;
            match (on, start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    spans.push((s, t - 1));
                    start = None;
                }
                _ => {}
            }
        }
        if spans.len() <= max_spans {
            out.push(spans);
        }
    }
    out
}

/// Nucleus reference: for each candidate size k, selects the k most probable
/// tokens by repeated arg-max scans (lowest id first among ties) and checks
/// the total mass from scratch. Returns `(id, renormalized prob)` pairs.
pub fn brute_nucleus(dist: &[f64], top_p: f64, eps: f64) -> Vec<(usize, f64)> {
    let total: f64 = dist.iter().sum();
    let positive = dist.iter().filter(|&&p| p > 0.0).count();
    for k in 1..=positive {
        let mut taken = vec![false; dist.len()];
        let mut chosen = Vec::with_capacity(k);
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for (i, &p) in dist.iter().enumerate() {
                if taken[i] || p <= 0.0 {
                    continue;
                }
                if best.map_or(true, |b| p > dist[b]) {
                    best = Some(i);
                }
            }
            let b = best.expect("k <= positive count");
            taken[b] = true;
            chosen.push(b);
        }
        let mass: f64 = chosen.iter().map(|&i| dist[i] / total).sum();
        if mass >= top_p - eps || k == positive {
            return chosen.iter().map(|&i| (i, dist[i] / total / mass)).collect();
        }
    }
    Vec::new()
}

/// Random probability vector of length `n` with occasional exact zeros and ties.
pub fn random_distribution<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let mut d: Vec<f64> = (0..n)
            .map(|_| match rng.gen_range(0..10) {
                0 => 0.0,
                1 => 0.25,
                _ => rng.gen::<f64>(),
            })
            .collect();
        let s: f64 = d.iter().sum();
        if s > 0.0 {
            d.iter_mut().for_each(|x| *x /= s);
            return d;
        }
    }
}

/// Zero-mean noise orthogonal to `reference` (assumed zero-mean), scaled to
/// the reference's energy, by Gram-Schmidt against the reference and the
/// constant vector.
pub fn orthogonal_noise<R: Rng>(rng: &mut R, reference: &[f64]) -> Vec<f64> {
    let n = reference.len() as f64;
    let mut v: Vec<f64> = (0..reference.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
    let mean = v.iter().sum::<f64>() / n;
    v.iter_mut().for_each(|x| *x -= mean);
    let rr: f64 = reference.iter().map(|x| x * x).sum();
    let proj = v.iter().zip(reference).map(|(a, b)| a * b).sum::<f64>() / rr;
    v.iter_mut().zip(reference).for_each(|(x, r)| *x -= proj * r);
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let g = (rr / vv).sqrt();
    v.iter_mut().for_each(|x| *x *= g);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance_basics() {
        assert_eq!(brute_edit_distance(&["a", "b"], &["a", "x", "b"]), 1);
        assert_eq!(brute_edit_distance::<&str>(&[], &["a"]), 1);
        assert_eq!(brute_edit_distance(&["k", "i", "t"], &["s", "i", "t", "g"]), 2);
    }

    #[test]
    fn bfs_agrees_with_recursion() {
        let table = bfs_edit_distances(&["a", "b"], 3);
        for ((a, b), d) in &table {
            assert_eq!(*d, brute_edit_distance(a, b));
        }
    }

    #[test]
    fn span_enumeration_count() {
        // 2^3 bitmasks, all with at most 2 runs.
        assert_eq!(all_span_sets(3, 3).len(), 8);
        // 101 has two runs; excluded with max 1.
        assert_eq!(all_span_sets(3, 1).len(), 7);
    }
}
