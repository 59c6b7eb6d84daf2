//! Token and channel self-swaps.
//!
//! A [`SwapPlan`] is a set of disjoint index pairs along one axis of a
//! single instance. Applying it exchanges the paired token vectors (spatial)
//! or channel vectors (channel) in one parallel step, which makes every plan
//! an involution.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{self, Matrix, TokenTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwapPolicy {
    /// Lowest cosine similarity first (adversarial swap).
    Dissimilar,
    Similar,
    Random,
}

impl SwapPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            SwapPolicy::Dissimilar => "dissimilar",
            SwapPolicy::Similar => "similar",
            SwapPolicy::Random => "random",
        }
    }
}

impl fmt::Display for SwapPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SwapPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dissimilar" => Ok(SwapPolicy::Dissimilar),
            "similar" => Ok(SwapPolicy::Similar),
            "random" => Ok(SwapPolicy::Random),
            other => Err(Error::invalid(format!(
                "unknown swap policy `{other}` (dissimilar|similar|random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SwapAxis {
    Spatial,
    Channel,
}

impl fmt::Display for SwapAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SwapAxis::Spatial => "spatial",
            SwapAxis::Channel => "channel",
        })
    }
}

/// Disjoint index pairs along one axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapPlan {
    axis: SwapAxis,
    axis_len: usize,
    pairs: Vec<(usize, usize)>,
}

impl SwapPlan {
    /// Validates ordering (`i < j`), bounds and disjointness.
    pub fn new(axis: SwapAxis, axis_len: usize, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut used = vec![false; axis_len];
        for &(i, j) in &pairs {
            if i >= j || j >= axis_len {
                return Err(Error::invalid(format!(
                    "bad swap pair ({i},{j}) for axis length {axis_len}"
                )));
            }
            if used[i] || used[j] {
                return Err(Error::invalid(format!("swap pair ({i},{j}) reuses an index")));
            }
            used[i] = true;
            used[j] = true;
        }
        Ok(Self {
            axis,
            axis_len,
            pairs,
        })
    }

    pub fn empty(axis: SwapAxis, axis_len: usize) -> Self {
        Self {
            axis,
            axis_len,
            pairs: Vec::new(),
        }
    }

    pub fn axis(&self) -> SwapAxis {
        self.axis
    }

    pub fn axis_len(&self) -> usize {
        self.axis_len
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The induced permutation: `perm[k]` is the slot whose content lands in `k`.
    pub fn permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.axis_len).collect();
        for &(i, j) in &self.pairs {
            perm.swap(i, j);
        }
        perm
    }

    /// Applies the plan to one row-major `tokens × channels` instance.
    pub fn apply_in_place(&self, instance: &mut [f64], tokens: usize, channels: usize) {
        debug_assert_eq!(instance.len(), tokens * channels);
        match self.axis {
            SwapAxis::Spatial => {
                for &(i, j) in &self.pairs {
                    let (head, tail) = instance.split_at_mut(j * channels);
                    head[i * channels..(i + 1) * channels].swap_with_slice(&mut tail[..channels]);
                }
            }
            SwapAxis::Channel => {
                for row in instance.chunks_exact_mut(channels) {
                    for &(c, d) in &self.pairs {
                        row.swap(c, d);
                    }
                }
            }
        }
    }
}

impl fmt::Display for SwapPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "axis={} pairs=[", self.axis)?;
        for (k, (i, j)) in self.pairs.iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "({i},{j})")?;
        }
        f.write_str("]")
    }
}

/// `floor(r · axis_len / 2)` pairs, so that `2N ≈ r · axis_len` slots move.
pub fn pair_count_from_ratio(r: f64, axis_len: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::invalid(format!("swap ratio must be in [0,1], got {r}")));
    }
    if axis_len < 2 {
        return Err(Error::invalid(format!(
            "swap axis needs at least 2 elements, got {axis_len}"
        )));
    }
    Ok((r * axis_len as f64 / 2.0).floor() as usize)
}

/// Picks `n_pairs` disjoint pairs according to `policy`.
///
/// Similarity policies walk every unordered pair `(i, j)`, `i < j`, sorted by
/// similarity (ascending for `Dissimilar`, descending for `Similar`, ties by
/// `(i, j)`) and keep a pair whenever both indices are still free. `Random`
/// shuffles the indices and pairs them off two at a time.
pub fn select_swap_pairs(
    sim: &Matrix,
    n_pairs: usize,
    policy: SwapPolicy,
    rng: &mut RngStream,
) -> Result<SwapPlan> {
    let n = sim.rows();
    if sim.cols() != n {
        return Err(Error::shape("select_swap_pairs", "square matrix", format!("{}x{}", n, sim.cols())));
    }
    if n_pairs > n / 2 {
        return Err(Error::invalid(format!(
            "{n_pairs} pairs requested but only {} fit in {n} slots",
            n / 2
        )));
    }
    // selection is axis-agnostic; plan_for_instance retags channel plans
    let axis = SwapAxis::Spatial;
    if n_pairs == 0 {
        return Ok(SwapPlan::empty(axis, n));
    }
    let pairs = match policy {
        SwapPolicy::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            idx.chunks_exact(2)
                .take(n_pairs)
                .map(|p| (p[0].min(p[1]), p[0].max(p[1])))
                .collect()
        }
        SwapPolicy::Dissimilar | SwapPolicy::Similar => {
            let mut cands = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in i + 1..n {
                    let s = sim.get(i, j);
                    if (s - sim.get(j, i)).abs() > 1e-12 {
                        return Err(Error::invalid(format!(
                            "similarity matrix not symmetric at ({i},{j})"
                        )));
                    }
                    // + 0.0 folds -0.0 into 0.0 so equal similarities tie
                    cands.push((s + 0.0, i, j));
                }
            }
            let descending = policy == SwapPolicy::Similar;
            let order = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
                let by_sim = if descending { b.0.total_cmp(&a.0) } else { a.0.total_cmp(&b.0) };
                by_sim.then((a.1, a.2).cmp(&(b.1, b.2)))
            };
            let total = cands.len();
            let mut prefix = (8 * n_pairs).max(16);
            loop {
                if prefix < total {
                    cands.select_nth_unstable_by(prefix, order);
                } else {
                    prefix = total;
                }
                let head = &mut cands[..prefix];
                head.sort_unstable_by(order);
                let pairs = greedy_disjoint(head, n, n_pairs);
                if pairs.len() == n_pairs || prefix == total {
                    break pairs;
                }
                prefix *= 2;
            }
        }
    };
    SwapPlan::new(axis, n, pairs)
}

fn greedy_disjoint(sorted: &[(f64, usize, usize)], n: usize, n_pairs: usize) -> Vec<(usize, usize)> {
    let mut used = vec![false; n];
    let mut pairs = Vec::with_capacity(n_pairs);
    for &(_, i, j) in sorted {
        if pairs.len() == n_pairs {
            break;
        }
        if !used[i] && !used[j] {
            used[i] = true;
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

fn check_plan(plan: &SwapPlan, axis: SwapAxis, len: usize) -> Result<()> {
    if plan.axis != axis {
        return Err(Error::invalid(format!(
            "expected a {axis} plan, got a {} plan",
            plan.axis
        )));
    }
    if plan.axis_len != len {
        return Err(Error::shape("apply_swap", len, plan.axis_len));
    }
    Ok(())
}

/// Exchanges whole token vectors of every batch element.
pub fn apply_swap_spatial(x: &TokenTensor, plan: &SwapPlan) -> Result<TokenTensor> {
    check_plan(plan, SwapAxis::Spatial, x.tokens())?;
    let mut out = x.clone();
    let (b, t, d) = x.shape();
    for i in 0..b {
        plan.apply_in_place(out.instance_mut(i), t, d);
    }
    Ok(out)
}

/// Exchanges whole channel vectors of every batch element.
pub fn apply_swap_channel(x: &TokenTensor, plan: &SwapPlan) -> Result<TokenTensor> {
    check_plan(plan, SwapAxis::Channel, x.channels())?;
    let mut out = x.clone();
    let (b, t, d) = x.shape();
    for i in 0..b {
        plan.apply_in_place(out.instance_mut(i), t, d);
    }
    Ok(out)
}

/// Builds the plan for one `T × D` instance: normalise the axis vectors,
/// take all-pairs cosine similarity, convert `r` to a pair count and select.
pub fn plan_for_instance(
    x_instance: &Matrix,
    axis: SwapAxis,
    r: f64,
    policy: SwapPolicy,
    rng: &mut RngStream,
) -> Result<SwapPlan> {
    let len = match axis {
        SwapAxis::Spatial => x_instance.rows(),
        SwapAxis::Channel => x_instance.cols(),
    };
    let n_pairs = pair_count_from_ratio(r, len)?;
    if n_pairs == 0 {
        return Ok(SwapPlan::empty(axis, len));
    }
    let vectors = match axis {
        SwapAxis::Spatial => x_instance.clone(),
        SwapAxis::Channel => x_instance.transpose(),
    };
    let sim = match policy {
        // similarity is irrelevant to a random draw
        SwapPolicy::Random => Matrix::zeros(len, len),
        _ => tensor::cosine_similarity_matrix(&vectors)?,
    };
    let plan = select_swap_pairs(&sim, n_pairs, policy, rng)?;
    Ok(SwapPlan { axis, ..plan })
}
