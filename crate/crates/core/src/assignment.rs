//! Minimum-cost perfect matching on a square cost matrix.
//!
//! Shortest augmenting paths with dual potentials (Jonker-Volgenant style).
//! Columns are first reduced to their row minima and greedily matched; each
//! remaining row then grows a Dijkstra tree over the unscanned columns until
//! it reaches a free one. Duals are only touched for scanned rows and
//! columns after each search, so a search costs O(n * scanned) rather than
//! O(n^2).

const FREE: usize = usize::MAX;

/// Returns `assign[row] = col` minimizing `sum cost[row * n + assign[row]]`.
pub fn solve(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    let mut u = vec![0.0; n];
    let mut v = vec![f64::INFINITY; n];
    let mut col_of = vec![FREE; n];
    let mut row_of = vec![FREE; n];

    for i in 0..n {
        for (vj, c) in v.iter_mut().zip(&cost[i * n..(i + 1) * n]) {
            *vj = vj.min(*c);
        }
    }
    for j in 0..n {
        if let Some(i) = (0..n).find(|&i| col_of[i] == FREE && cost[i * n + j] == v[j]) {
            col_of[i] = j;
            row_of[j] = i;
        }
    }

    let mut shortest = vec![f64::INFINITY; n];
    let mut path = vec![FREE; n];
    let mut remaining: Vec<usize> = Vec::with_capacity(n);
    let mut scanned_rows: Vec<usize> = Vec::with_capacity(n);
    let mut scanned_cols: Vec<usize> = Vec::with_capacity(n);

    for start in 0..n {
        if col_of[start] != FREE {
            continue;
        }
        shortest.iter_mut().for_each(|s| *s = f64::INFINITY);
        remaining.clear();
        remaining.extend((0..n).rev());
        scanned_rows.clear();
        scanned_cols.clear();

        let mut i = start;
        let mut min_val = 0.0;
        let sink = loop {
            scanned_rows.push(i);
            let row = &cost[i * n..(i + 1) * n];
            let ui = u[i];
            let mut lowest = f64::INFINITY;
            let mut pick = 0;
            for (k, &j) in remaining.iter().enumerate() {
                let r = min_val + row[j] - ui - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                // Ties go to free columns so the search can stop early.
                if shortest[j] < lowest || (shortest[j] == lowest && row_of[j] == FREE) {
                    lowest = shortest[j];
                    pick = k;
                }
            }
            assert!(lowest.is_finite(), "assignment cost matrix must be finite");
            min_val = lowest;
            let j = remaining.swap_remove(pick);
            scanned_cols.push(j);
            if row_of[j] == FREE {
                break j;
            }
            i = row_of[j];
        };

        u[start] += min_val;
        for &r in &scanned_rows[1..] {
            u[r] += min_val - shortest[col_of[r]];
        }
        for &c in &scanned_cols {
            v[c] -= min_val - shortest[c];
        }
        let mut j = sink;
        loop {
            let i = path[j];
            row_of[j] = i;
            let prev = std::mem::replace(&mut col_of[i], j);
            if i == start {
                break;
            }
            j = prev;
        }
    }
    col_of
}
