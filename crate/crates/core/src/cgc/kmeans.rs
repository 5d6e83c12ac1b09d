//! One-dimensional k-means over channel entropies.
//!
//! [`group_channels`] solves the within-group sum-of-squares problem exactly
//! with dynamic programming over the sorted values (optimal 1-D clusters are
//! contiguous runs). [`lloyd_1d`] is the classic heuristic with
//! sorted-quantile seeding, kept for comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LLOYD_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMethod {
    #[default]
    Exact,
    Lloyd,
}

/// Channel → group assignment. Group ids are ordered by ascending centroid
/// and every group is non-empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelGrouping {
    pub assignment: Vec<usize>,
    pub centroids: Vec<f64>,
}

impl ChannelGrouping {
    pub fn groups(&self) -> usize {
        self.centroids.len()
    }

    /// m_j for each group.
    pub fn sizes(&self) -> Vec<usize> {
        let mut m = vec![0; self.groups()];
        for &a in &self.assignment {
            m[a] += 1;
        }
        m
    }

    /// Within-group sum of squared deviations from the centroids.
    pub fn objective(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .zip(&self.assignment)
            .map(|(v, &a)| (v - self.centroids[a]).powi(2))
            .sum()
    }
}

pub fn group_channels_with(values: &[f64], g: usize, method: GroupingMethod) -> Result<ChannelGrouping> {
    match method {
        GroupingMethod::Exact => group_channels(values, g),
        GroupingMethod::Lloyd => lloyd_1d(values, g),
    }
}

/// Globally optimal partition of `values` into `g` groups.
pub fn group_channels(values: &[f64], g: usize) -> Result<ChannelGrouping> {
    check_args(values, g)?;
    let order = sorted_order(values);
    let n = values.len();
    let shift = values.iter().sum::<f64>() / n as f64;
    let xs: Vec<f64> = order.iter().map(|&i| values[i] - shift).collect();

    // prefix sums over the shifted, sorted values
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, x) in xs.iter().enumerate() {
        s1[i + 1] = s1[i] + x;
        s2[i + 1] = s2[i] + x * x;
    }
    // sse of sorted positions lo..=hi
    let cost = |lo: usize, hi: usize| -> f64 {
        let m = (hi - lo + 1) as f64;
        let s = s1[hi + 1] - s1[lo];
        (s2[hi + 1] - s2[lo] - s * s / m).max(0.0)
    };

    // best[k][j]: optimal cost of the first j+1 sorted values in k+1 groups.
    // start[k][j]: first position of the last group in that solution.
    let mut best = vec![vec![f64::INFINITY; n]; g];
    let mut start = vec![vec![0usize; n]; g];
    for j in 0..n {
        best[0][j] = cost(0, j);
    }
    for k in 1..g {
        for j in k..n {
            for i in k..=j {
                let c = best[k - 1][i - 1] + cost(i, j);
                if c < best[k][j] {
                    best[k][j] = c;
                    start[k][j] = i;
                }
            }
        }
    }

    let mut bounds = Vec::with_capacity(g);
    let mut hi = n - 1;
    for k in (0..g).rev() {
        let lo = if k == 0 { 0 } else { start[k][hi] };
        bounds.push((lo, hi));
        if k > 0 {
            hi = lo - 1;
        }
    }
    bounds.reverse();

    let mut assignment = vec![0; n];
    let mut centroids = Vec::with_capacity(g);
    for (j, &(lo, hi)) in bounds.iter().enumerate() {
        let members = &order[lo..=hi];
        centroids.push(members.iter().map(|&c| values[c]).sum::<f64>() / members.len() as f64);
        for &c in members {
            assignment[c] = j;
        }
    }
    Ok(ChannelGrouping {
        assignment,
        centroids,
    })
}

/// Lloyd's algorithm from sorted-quantile seeds. Stops at an assignment
/// fixed point or after 100 iterations.
pub fn lloyd_1d(values: &[f64], g: usize) -> Result<ChannelGrouping> {
    check_args(values, g)?;
    let n = values.len();
    let order = sorted_order(values);
    let mut centroids: Vec<f64> = (0..g)
        .map(|j| values[order[((2 * j + 1) * n) / (2 * g)]])
        .collect();
    let mut assignment = vec![usize::MAX; n];

    for _ in 0..LLOYD_MAX_ITERS {
        let mut next: Vec<usize> = values.iter().map(|&v| nearest(&centroids, v)).collect();
        repair_empty(values, &mut next, &mut centroids);
        if next == assignment {
            break;
        }
        assignment = next;
        let mut sums = vec![0.0; g];
        let mut counts = vec![0usize; g];
        for (v, &a) in values.iter().zip(&assignment) {
            sums[a] += v;
            counts[a] += 1;
        }
        for j in 0..g {
            centroids[j] = sums[j] / counts[j] as f64;
        }
    }
    Ok(relabel_ascending(assignment, centroids))
}

/// Moves the point farthest from its centroid in the largest cluster into
/// each empty cluster.
fn repair_empty(values: &[f64], assignment: &mut [usize], centroids: &mut [f64]) {
    let g = centroids.len();
    loop {
        let mut counts = vec![0usize; g];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..g).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
        let far = (0..values.len())
            .filter(|&i| assignment[i] == largest)
            .max_by(|&a, &b| {
                let da = (values[a] - centroids[largest]).abs();
                let db = (values[b] - centroids[largest]).abs();
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .unwrap();
        assignment[far] = empty;
        centroids[empty] = values[far];
    }
}

fn relabel_ascending(assignment: Vec<usize>, centroids: Vec<f64>) -> ChannelGrouping {
    let mut ids: Vec<usize> = (0..centroids.len()).collect();
    ids.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]).then(a.cmp(&b)));
    let mut rank = vec![0; ids.len()];
    for (r, &j) in ids.iter().enumerate() {
        rank[j] = r;
    }
    ChannelGrouping {
        assignment: assignment.into_iter().map(|a| rank[a]).collect(),
        centroids: ids.iter().map(|&j| centroids[j]).collect(),
    }
}

fn nearest(centroids: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (j, c) in centroids.iter().enumerate().skip(1) {
        if (v - c).abs() < (v - centroids[best]).abs() {
            best = j;
        }
    }
    best
}

fn sorted_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order
}

fn check_args(values: &[f64], g: usize) -> Result<()> {
    if g == 0 {
        return Err(Error::arg("group count must be positive"));
    }
    if g > values.len() {
        return Err(Error::arg(format!(
            "group count {} exceeds channel count {}",
            g,
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("non-finite entropy"));
    }
    Ok(())
}
