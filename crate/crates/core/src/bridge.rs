//! Quenched bridge probabilities by forward dynamic programming.
//!
//! The DP pushes the SRW occupancy measure forward one step at a time over
//! the level-order arena. Mass only ever sits on levels whose parity matches
//! the time, so one array serves both time slices: the sweep turns the
//! current slice into outgoing shares in place and overwrites the opposite
//! parity levels with the next slice.
//!
//! In kill mode with limit L the walk is stopped on entering depth L + 1 and
//! the stopped mass is accumulated as `leaked_mass`. Since every path that
//! returns at time 2n stays within depth n, killing at L = n loses nothing
//! for the return probability, which keeps exact computations on capped
//! trees cheap.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::exact::{Mass, Q};
use crate::tree::{NodeId, Tree};
use crate::walk::{Kernel, WalkPath};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BridgeError {
    #[error("the root has no children")]
    IsolatedRoot,
    #[error("depth cap {cap} is below the horizon {horizon}; use a depth limit")]
    HorizonExceedsCap { cap: u32, horizon: usize },
    #[error("depth limit {limit} must lie below the depth cap {cap}")]
    LimitNotBelowCap { limit: u32, cap: u32 },
    #[error("no mass returns to the root at the horizon")]
    NoReturnMass,
    #[error("the table was built without stored slices")]
    SlicesNotKept,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, BridgeError>;

/// Slices below this magnitude trigger a rescale of the f64 DP.
const RESCALE_BELOW: f64 = 1e-200;
const RESCALE_EVERY: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BridgeOptions {
    /// Kill the walk on entering depth `L + 1`.
    pub depth_limit: Option<u32>,
    /// Store every `s`-th slice so that bridges can be sampled.
    pub slice_stride: Option<usize>,
}

/// Output of the forward DP.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTable<M> {
    pub horizon: usize,
    pub depth_limit: Option<u32>,
    /// Total mass stopped at depth `depth_limit + 1`.
    pub leaked_mass: M,
    /// Stored masses are exp(-log_scale) times the true masses.
    pub log_scale: f64,
    /// Occupancy at the horizon, indexed by vertex of depth at most the domain top.
    pub final_mass: Vec<M>,
    stride: usize,
    checkpoints: Vec<Vec<M>>,
    top: u32,
}

impl<M: Mass> OccupancyTable<M> {
    /// True mass at the root at the horizon, in the DP's number type (without the rescale factor).
    pub fn root_mass_scaled(&self) -> M {
        if self.horizon.is_multiple_of(2) {
            self.final_mass[0].clone()
        } else {
            M::mass_zero()
        }
    }

    /// Sum of the stored occupancy at the horizon, times exp(log_scale).
    pub fn total_mass(&self, tree: &Tree) -> f64 {
        let par = (self.horizon % 2) as u32;
        let hi = self.top.min(self.horizon as u32);
        let mut s = 0.0;
        for d in (par..=hi).step_by(2) {
            s += tree
                .level(d)
                .map(|v| self.final_mass[v as usize].to_f64())
                .sum::<f64>();
        }
        s * self.log_scale.exp()
    }
}

impl OccupancyTable<f64> {
    pub fn p_return(&self) -> f64 {
        self.root_mass_scaled() * self.log_scale.exp()
    }

    /// ln of the return probability; finite even when `p_return` underflows.
    pub fn log_p_return(&self) -> f64 {
        self.root_mass_scaled().ln() + self.log_scale
    }
}

/// Forward sweep over the domain (depth <= top). The state is the outgoing
/// share mass(u) / (number of neighbours of u), so one step is a single pull
/// pass: share'(v) = w(v) (share(parent v) + sum of share(children of v)).
struct Sweep<M> {
    /// Parent index (0 for the root, never read there).
    par: Vec<u32>,
    /// Children of v are cstart[v]..cstart[v + 1]; level order makes these prefix sums.
    cstart: Vec<u32>,
    /// Vertex range of each level 0..=top.
    levels: Vec<(usize, usize)>,
    /// 1 / k for each neighbour count k that occurs.
    inv: Vec<M>,
    top: u32,
    kill: bool,
    share: Vec<M>,
    log_scale: f64,
    leaked: M,
    t: usize,
}

impl<M: Mass> Sweep<M> {
    fn new(tree: &Tree, top: u32, kill: bool) -> Self {
        let len = tree.level_end(top);
        let par = (0..len as NodeId)
            .map(|u| tree.parent(u).unwrap_or(0))
            .collect();
        let mut cstart: Vec<u32> = (0..len as NodeId).map(|u| tree.children(u).start).collect();
        cstart.push(cstart[len - 1] + tree.deg(len as NodeId - 1));
        let levels: Vec<(usize, usize)> = (0..=top)
            .map(|d| {
                let r = tree.level(d);
                (r.start as usize, r.end as usize)
            })
            .collect();
        let max_k = (0..len as NodeId)
            .map(|u| tree.deg(u) + 1)
            .max()
            .unwrap_or(1);
        let inv: Vec<M> = (0..=max_k)
            .map(|k| M::mass_one().div_count(k.max(1)))
            .collect();
        let mut sweep = Sweep {
            par,
            cstart,
            levels,
            inv,
            top,
            kill,
            share: vec![M::mass_zero(); len],
            log_scale: 0.0,
            leaked: M::mass_zero(),
            t: 0,
        };
        sweep.share[0] = sweep.weight(0).clone();
        sweep
    }

    fn deg(&self, u: usize) -> u32 {
        self.cstart[u + 1] - self.cstart[u]
    }

    /// Number of SRW moves out of u.
    fn moves(&self, u: usize) -> u32 {
        self.deg(u) + u32::from(u != 0)
    }

    fn weight(&self, u: usize) -> &M {
        &self.inv[self.moves(u) as usize]
    }

    fn mass(&self, u: usize) -> M {
        self.share[u].mul_count(self.moves(u))
    }

    fn restart(&mut self, t: usize, slice: &[M]) {
        self.t = t;
        self.share.clone_from_slice(slice);
    }

    /// Fills level `d` from the shares of levels d - 1 and d + 1.
    fn pull_level(&mut self, d: u32) {
        let (lo, hi) = self.levels[d as usize];
        let pull_children = d < self.top;
        let lo = if lo == 0 {
            let mut x = M::mass_zero();
            if pull_children {
                for a in &self.share[self.cstart[0] as usize..self.cstart[1] as usize] {
                    x.add_assign(a);
                }
            }
            self.share[0] = x.mul(&self.inv[self.deg(0) as usize]);
            1
        } else {
            lo
        };
        let (share, cstart, par, inv) = (&mut self.share, &self.cstart, &self.par, &self.inv);
        for v in lo..hi {
            let mut x = share[par[v] as usize].clone();
            let (c0, c1) = (cstart[v] as usize, cstart[v + 1] as usize);
            if pull_children {
                for a in &share[c0..c1] {
                    if M::UNDERFLOWS || !a.is_nil() {
                        x.add_assign(a);
                    }
                }
            }
            if M::UNDERFLOWS || !x.is_nil() {
                x = x.mul(&inv[c1 - c0 + 1]);
            }
            share[v] = x;
        }
    }

    /// Largest share on the levels of parity `par` up to `hi`.
    fn biggest(&self, par: u32, hi: u32) -> f64 {
        let mut b = 0.0f64;
        for d in (par..=hi).step_by(2) {
            let (lo, hi) = self.levels[d as usize];
            b = self.share[lo..hi].iter().fold(b, |b, x| b.max(x.to_f64()));
        }
        b
    }

    fn step(&mut self) {
        let t = self.t;
        let par = (t % 2) as u32;
        let hi_src = self.top.min(t as u32);
        let hi_dst = self.top.min(t as u32 + 1);
        if self.kill && hi_src == self.top && self.top % 2 == par {
            let (lo, hi) = self.levels[self.top as usize];
            let mut out = M::mass_zero();
            for u in lo..hi {
                let deg = self.deg(u);
                if deg > 0 && !self.share[u].is_nil() {
                    out.add_assign(&self.share[u].mul_count(deg));
                }
            }
            if M::UNDERFLOWS && self.log_scale != 0.0 {
                out.scale(self.log_scale.exp());
            }
            self.leaked.add_assign(&out);
        }
        // Targets have the other parity, so sources are never overwritten within a step.
        for d in (1 - par..=hi_dst).step_by(2) {
            self.pull_level(d);
        }
        // Shares shrink by at most a factor (max degree + 1) per step, so a
        // periodic check keeps them far above the subnormal range.
        let biggest = if M::UNDERFLOWS && t.is_multiple_of(RESCALE_EVERY) {
            self.biggest(1 - par, hi_dst)
        } else {
            1.0
        };
        if biggest > 0.0 && biggest < RESCALE_BELOW {
            let f = 1.0 / biggest;
            for d in (1 - par..=hi_dst).step_by(2) {
                let (lo, hi) = self.levels[d as usize];
                for m in &mut self.share[lo..hi] {
                    m.scale(f);
                }
            }
            self.log_scale -= f.ln();
        }
        self.t += 1;
    }
}

fn domain_top(tree: &Tree, horizon: usize, depth_limit: Option<u32>) -> Result<u32> {
    if tree.deg(0) == 0 {
        return Err(BridgeError::IsolatedRoot);
    }
    match (depth_limit, tree.depth_cap()) {
        (Some(limit), Some(cap)) if limit >= cap => {
            Err(BridgeError::LimitNotBelowCap { limit, cap })
        }
        (Some(limit), _) => Ok(limit.min(tree.height())),
        (None, Some(cap)) if (cap as usize) < horizon => {
            Err(BridgeError::HorizonExceedsCap { cap, horizon })
        }
        (None, _) => Ok(tree
            .height()
            .min(u32::try_from(horizon).unwrap_or(u32::MAX))),
    }
}

/// Runs the forward DP for `horizon` steps (any parity) in number type `M`.
pub fn occupancy<M: Mass>(
    tree: &Tree,
    horizon: usize,
    opts: BridgeOptions,
) -> Result<OccupancyTable<M>> {
    let top = domain_top(tree, horizon, opts.depth_limit)?;
    let stride = opts.slice_stride.unwrap_or(0);
    if opts.slice_stride == Some(0) {
        return Err(BridgeError::InvalidArgument(
            "slice stride must be positive".into(),
        ));
    }
    let mut sweep = Sweep::<M>::new(tree, top, opts.depth_limit.is_some());
    let mut checkpoints = Vec::new();
    for t in 0..horizon {
        if stride > 0 && t % stride == 0 {
            checkpoints.push(sweep.share.clone());
        }
        sweep.step();
    }
    Ok(OccupancyTable {
        horizon,
        depth_limit: opts.depth_limit,
        final_mass: (0..sweep.share.len()).map(|u| sweep.mass(u)).collect(),
        leaked_mass: sweep.leaked,
        log_scale: sweep.log_scale,
        stride,
        checkpoints,
        top,
    })
}

/// SRW_T(X_{2n} = root), optionally jointly with max depth at most L.
pub fn bridge_dp(
    tree: &Tree,
    n: usize,
    depth_limit: Option<u32>,
) -> Result<(f64, OccupancyTable<f64>)> {
    let table = occupancy::<f64>(
        tree,
        2 * n,
        BridgeOptions {
            depth_limit,
            slice_stride: None,
        },
    )?;
    Ok((table.p_return(), table))
}

/// Exact rational version of [`bridge_dp`].
pub fn bridge_dp_exact(
    tree: &Tree,
    n: usize,
    depth_limit: Option<u32>,
) -> Result<(Q, OccupancyTable<Q>)> {
    let table = occupancy::<Q>(
        tree,
        2 * n,
        BridgeOptions {
            depth_limit,
            slice_stride: None,
        },
    )?;
    Ok((table.root_mass_scaled(), table))
}

/// ln P(max depth <= L, X_{2n} = root) from n DP steps instead of 2n.
///
/// The (killed) SRW is reversible with respect to k(v), the number of
/// neighbours, so P^{2n}(root, root) = k(root) sum_v P^n(root, v)^2 / k(v).
pub fn log_joint_return(tree: &Tree, n: usize, depth_limit: Option<u32>) -> Result<f64> {
    let top = domain_top(tree, n, depth_limit)?;
    let mut sweep = Sweep::<f64>::new(tree, top, depth_limit.is_some());
    for _ in 0..n {
        sweep.step();
    }
    let par = (n % 2) as u32;
    let hi = top.min(n as u32);
    let biggest = sweep.biggest(par, hi);
    if biggest == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sum = 0.0;
    for d in (par..=hi).step_by(2) {
        let (lo, hi) = sweep.levels[d as usize];
        for u in lo..hi {
            // mass^2 / k = share^2 k
            let r = sweep.share[u] / biggest;
            sum += r * r * sweep.moves(u) as f64;
        }
    }
    Ok(sum.ln() + 2.0 * (biggest.ln() + sweep.log_scale) + (tree.deg(0) as f64).ln())
}

/// Depth limits evaluated together by [`log_joint_returns`].
const LANES: usize = 4;

/// [`log_joint_return`] for several depth limits at once.
///
/// Limits are grouped [`LANES`] at a time into one sweep whose state is a
/// lane vector per vertex; lane j is zeroed below its own limit each step.
/// The index work is shared, so a group costs little more than its deepest
/// member alone. Results are in the order of `limits`.
pub fn log_joint_returns(tree: &Tree, n: usize, limits: &[u32]) -> Result<Vec<f64>> {
    let tops = limits
        .iter()
        .map(|&l| domain_top(tree, n, Some(l)).map(|t| (t, l)))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..limits.len()).collect();
    // Deepest first, so each group's cost is set by one expensive limit.
    order.sort_by_key(|&i| std::cmp::Reverse(tops[i].0));
    let mut out = vec![0.0; limits.len()];
    for group in order.chunks(LANES) {
        let mut lane_tops = [tops[group[0]].0; LANES];
        for (j, &i) in group.iter().enumerate() {
            lane_tops[j] = tops[i].0;
        }
        let values = lane_sweep(tree, n, lane_tops);
        for (j, &i) in group.iter().enumerate() {
            out[i] = values[j];
        }
    }
    Ok(out)
}

fn lane_sweep(tree: &Tree, n: usize, lane_tops: [u32; LANES]) -> [f64; LANES] {
    type Lanes = [f64; LANES];
    let top = lane_tops[0];
    let mut topo = Sweep::<f64>::new(tree, top, true);
    drop(std::mem::take(&mut topo.share));
    let (par, cstart, levels, inv) = (&topo.par, &topo.cstart, &topo.levels, &topo.inv);
    // keep[d][j] = 1 when depth d lies inside lane j's domain.
    let keep: Vec<Lanes> = (0..=top)
        .map(|d| std::array::from_fn(|j| if d <= lane_tops[j] { 1.0 } else { 0.0 }))
        .collect();
    let mut share: Vec<Lanes> = vec![[0.0; LANES]; cstart.len() - 1];
    share[0] = [*topo.weight(0); LANES];
    let mut log_scale = [0.0; LANES];
    for t in 0..n {
        let parity = t % 2;
        let hi_dst = (top as usize).min(t + 1);
        for d in (1 - parity..=hi_dst).step_by(2) {
            let (lo, hi) = levels[d];
            let pull_children = d < top as usize;
            let k = keep[d];
            let lo = if lo == 0 {
                let mut x = [0.0; LANES];
                for a in &share[cstart[0] as usize..cstart[1] as usize] {
                    x.iter_mut().zip(a).for_each(|(x, a)| *x += a);
                }
                let w = *topo.weight(0);
                share[0] = std::array::from_fn(|j| x[j] * w * k[j]);
                1
            } else {
                lo
            };
            for v in lo..hi {
                let mut x = share[par[v] as usize];
                let (c0, c1) = (cstart[v] as usize, cstart[v + 1] as usize);
                if pull_children {
                    for a in &share[c0..c1] {
                        x.iter_mut().zip(a).for_each(|(x, a)| *x += a);
                    }
                }
                let w = inv[c1 - c0 + 1];
                share[v] = std::array::from_fn(|j| x[j] * w * k[j]);
            }
        }
        if t % RESCALE_EVERY == 0 {
            let mut big = [0.0f64; LANES];
            for d in (1 - parity..=hi_dst).step_by(2) {
                let (lo, hi) = levels[d];
                for x in &share[lo..hi] {
                    big.iter_mut().zip(x).for_each(|(b, x)| *b = b.max(*x));
                }
            }
            if big.iter().any(|&b| b > 0.0 && b < RESCALE_BELOW) {
                let f: Lanes = std::array::from_fn(|j| {
                    if big[j] > 0.0 && big[j] < RESCALE_BELOW {
                        1.0 / big[j]
                    } else {
                        1.0
                    }
                });
                for d in (1 - parity..=hi_dst).step_by(2) {
                    let (lo, hi) = levels[d];
                    for x in &mut share[lo..hi] {
                        x.iter_mut().zip(&f).for_each(|(x, f)| *x *= f);
                    }
                }
                log_scale.iter_mut().zip(&f).for_each(|(s, f)| *s -= f.ln());
            }
        }
    }
    let parity = (n % 2) as u32;
    let hi = top.min(n as u32);
    let mut big = [0.0f64; LANES];
    for d in (parity..=hi).step_by(2) {
        let (lo, hi) = levels[d as usize];
        for x in &share[lo..hi] {
            big.iter_mut().zip(x).for_each(|(b, x)| *b = b.max(*x));
        }
    }
    let mut sum = [0.0; LANES];
    for d in (parity..=hi).step_by(2) {
        let (lo, hi) = levels[d as usize];
        for (u, x) in share.iter().enumerate().take(hi).skip(lo) {
            let m = topo.moves(u) as f64;
            for j in 0..LANES {
                if big[j] > 0.0 {
                    let r = x[j] / big[j];
                    sum[j] += r * r * m;
                }
            }
        }
    }
    let root = (tree.deg(0) as f64).ln();
    std::array::from_fn(|j| {
        if big[j] == 0.0 {
            f64::NEG_INFINITY
        } else {
            sum[j].ln() + 2.0 * (big[j].ln() + log_scale[j]) + root
        }
    })
}

/// Exact rational version of [`log_joint_return`] (without the logarithm).
pub fn joint_return_exact(tree: &Tree, n: usize, depth_limit: Option<u32>) -> Result<Q> {
    let top = domain_top(tree, n, depth_limit)?;
    let mut sweep = Sweep::<Q>::new(tree, top, depth_limit.is_some());
    for _ in 0..n {
        sweep.step();
    }
    let mut sum = Q::mass_zero();
    for u in 0..sweep.share.len() {
        if sweep.t % 2 == tree.depth(u as NodeId) as usize % 2 {
            let a = &sweep.share[u];
            sum.add_assign(&a.mul(a).mul_count(sweep.moves(u)));
        }
    }
    Ok(sum.mul_count(tree.deg(0)))
}

/// Exact return probability on a capped tree: killing at depth n loses no returning path.
pub fn return_prob(tree: &Tree, n: usize) -> Result<(f64, f64)> {
    let limit = u32::try_from(n).unwrap_or(u32::MAX);
    let limit = match tree.depth_cap() {
        Some(cap) if limit >= cap => {
            return Err(BridgeError::LimitNotBelowCap { limit, cap });
        }
        _ => limit,
    };
    let (p, table) = bridge_dp(tree, n, Some(limit))?;
    Ok((p, table.log_p_return()))
}

/// Upper bound on P(X_{2n} = root) - P(max <= L, X_{2n} = root).
pub fn truncation_bound(tree: &Tree, n: usize, depth_limit: u32) -> Result<f64> {
    Ok(bridge_dp(tree, n, Some(depth_limit))?.1.leaked_mass)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub depth_limit: u32,
    pub p_joint: f64,
    pub log_p_joint: f64,
    pub leaked_mass: f64,
}

/// Joint law of (max displacement, return) over a list of limits.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxDispProfile {
    pub n: usize,
    pub rows: Vec<ProfileRow>,
    pub p_return: f64,
    /// `p_return` is the exact unconstrained value rather than the largest-limit value.
    pub p_return_exact: bool,
    /// P(max <= L | X_{2n} = root) per row.
    pub conditional_cdf: Vec<f64>,
}

pub fn max_disp_profile(tree: &Tree, n: usize, limits: &[u32]) -> Result<MaxDispProfile> {
    if limits.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BridgeError::InvalidArgument(
            "limits must be strictly increasing".into(),
        ));
    }
    let rows = limits
        .iter()
        .map(|&l| {
            let (p, table) = bridge_dp(tree, n, Some(l))?;
            Ok(ProfileRow {
                depth_limit: l,
                p_joint: p,
                log_p_joint: table.log_p_return(),
                leaked_mass: table.leaked_mass,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let exact = tree.depth_cap().is_none_or(|cap| n < cap as usize);
    let (p_return, log_p_return) = if exact {
        return_prob(tree, n)?
    } else {
        let last = rows
            .last()
            .ok_or_else(|| BridgeError::InvalidArgument("no limits given".into()))?;
        (last.p_joint, last.log_p_joint)
    };
    let conditional_cdf = rows
        .iter()
        .map(|r| (r.log_p_joint - log_p_return).exp())
        .collect();
    Ok(MaxDispProfile {
        n,
        rows,
        p_return,
        p_return_exact: exact,
        conditional_cdf,
    })
}

/// Quantiles of the max displacement of the bridge, conditioned on staying within `l_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSearch {
    pub l_ref: u32,
    pub log_p_ref: f64,
    /// Smallest L with P(max <= L | return, max <= l_ref) >= p, per requested p.
    pub quantiles: Vec<u32>,
    /// ln P(max <= L, return) for every L the search evaluated.
    pub evaluated: BTreeMap<u32, f64>,
}

/// Finds conditional quantiles over integer limits, caching DP runs.
pub fn conditional_quantiles(
    tree: &Tree,
    n: usize,
    l_ref: u32,
    probs: &[f64],
) -> Result<QuantileSearch> {
    conditional_quantiles_seeded(tree, n, l_ref, probs, &[])
}

/// As [`conditional_quantiles`], also evaluating the `seeds` limits so the
/// caller can reuse them (for example a saturation probe).
///
/// Limits are evaluated in rounds of [`LANES`], batched into one sweep. The
/// first round holds `l_ref`, the seeds and a spread of the upper half.
/// Later rounds hold, per unresolved quantile, the integer just above and
/// just below an interpolated crossing of ln cdf. That crossing averages the
/// chord across the bracket with a tangent extrapolated from above; on a
/// concave ln cdf these straddle it. A quantile whose bracket fails to halve
/// over two rounds falls back to bisection.
pub fn conditional_quantiles_seeded(
    tree: &Tree,
    n: usize,
    l_ref: u32,
    probs: &[f64],
    seeds: &[u32],
) -> Result<QuantileSearch> {
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(BridgeError::InvalidArgument(format!(
            "probability {p} outside [0, 1]"
        )));
    }
    let mut evaluated = BTreeMap::new();
    let mut round: Vec<u32> = std::iter::once(l_ref)
        .chain(seeds.iter().copied().filter(|&l| l < l_ref))
        .collect();
    round.sort_unstable();
    round.dedup();
    // Fill the first round by splitting the widest gaps in [l_ref / 2, l_ref].
    while !round.len().is_multiple_of(LANES) {
        let mut pts: Vec<u32> = round.iter().copied().filter(|&l| 2 * l >= l_ref).collect();
        pts.push(l_ref / 2);
        pts.sort_unstable();
        pts.dedup();
        let Some((a, b)) = pts
            .windows(2)
            .map(|w| (w[0], w[1]))
            .filter(|(a, b)| b - a > 1)
            .max_by_key(|(a, b)| b - a)
        else {
            break;
        };
        round.push(a + (b - a) / 2);
        round.sort_unstable();
    }
    let taus: Vec<Option<f64>> = probs.iter().map(|&p| (p > 0.0).then(|| p.ln())).collect();
    let mut widths = vec![[u32::MAX; 2]; probs.len()];
    loop {
        for (l, lp) in round.iter().zip(log_joint_returns(tree, n, &round)?) {
            evaluated.insert(*l, lp);
        }
        let log_p_ref = evaluated[&l_ref];
        if !log_p_ref.is_finite() {
            return Err(BridgeError::NoReturnMass);
        }
        let lc = |l: u32| evaluated[&l] - log_p_ref;
        // Invariant: cdf(lo) < p <= cdf(hi); limit 0 stands for cdf = 0.
        let bracket = |tau: f64| {
            let lo = evaluated
                .range(..l_ref)
                .rev()
                .find(|(&l, _)| lc(l) < tau)
                .map_or(0, |(&l, _)| l);
            let hi = *evaluated.range(lo + 1..).next().expect("l_ref is cached").0;
            (lo, hi)
        };
        let mut wanted: Vec<Vec<u32>> = Vec::new();
        for (tau, w) in taus.iter().zip(widths.iter_mut()) {
            let Some(tau) = *tau else { continue };
            let (lo, hi) = bracket(tau);
            let width = hi - lo;
            if width <= 1 {
                continue;
            }
            let chord = (lo > 0 && lc(lo).is_finite())
                .then(|| lo as f64 + (tau - lc(lo)) / (lc(hi) - lc(lo)) * width as f64);
            let tangent = evaluated.range(hi + 1..).next().and_then(|(&h2, _)| {
                let slope = (lc(h2) - lc(hi)) / (h2 - hi) as f64;
                (slope > 0.0).then(|| hi as f64 - (lc(hi) - tau) / slope)
            });
            let stalled = w[0] != u32::MAX && 2 * width > w[0];
            *w = [w[1], width];
            let guess = match (chord, tangent) {
                _ if stalled => None,
                (Some(c), Some(t)) => Some(0.5 * (c + t)),
                (c, t) => c.or(t),
            }
            .filter(|g| g.is_finite());
            let inside = |l: i64| (l > lo as i64 && l < hi as i64).then_some(l as u32);
            // Candidates in priority order; the first two usually pin the quantile.
            let c = guess.map_or(lo as i64 + width as i64 / 2, |g| {
                (g.ceil() as i64).clamp(lo as i64 + 1, hi as i64 - 1)
            });
            wanted.push(
                [c, c - 1, c + 1, c - 2]
                    .into_iter()
                    .filter_map(inside)
                    .collect(),
            );
        }
        if wanted.is_empty() {
            break;
        }
        // Take candidates rank by rank; lanes below the round's deepest limit are nearly free.
        round.clear();
        for rank in 0..4 {
            for cands in &wanted {
                if let Some(&l) = cands.get(rank) {
                    let cheap = rank < 2 || round.iter().any(|&r| r >= l);
                    if round.len() < LANES && cheap && !round.contains(&l) {
                        round.push(l);
                    }
                }
            }
        }
    }
    let log_p_ref = evaluated[&l_ref];
    let quantiles = taus
        .iter()
        .map(|tau| {
            tau.map_or(0, |tau| {
                evaluated
                    .iter()
                    .find(|(_, &v)| v - log_p_ref >= tau)
                    .map_or(l_ref, |(&l, _)| l)
            })
        })
        .collect();
    Ok(QuantileSearch {
        l_ref,
        log_p_ref,
        quantiles,
        evaluated,
    })
}

/// Exact sample of the SRW bridge of length `table.horizon` (conditioned on
/// the table's depth limit, if any) by the backward h-transform.
pub fn sample_bridge<R: Rng + ?Sized>(
    tree: &Tree,
    table: &OccupancyTable<f64>,
    rng: &mut R,
) -> Result<WalkPath> {
    if table.stride == 0 {
        return Err(BridgeError::SlicesNotKept);
    }
    if table.horizon % 2 == 1 || table.root_mass_scaled() <= 0.0 {
        return Err(BridgeError::NoReturnMass);
    }
    let horizon = table.horizon;
    let mut sweep = Sweep::<f64>::new(tree, table.top, table.depth_limit.is_some());
    let mut path = vec![0 as NodeId; horizon + 1];
    let mut x = tree.root();
    for (block, checkpoint) in table.checkpoints.iter().enumerate().rev() {
        let start = block * table.stride;
        let end = (start + table.stride).min(horizon);
        sweep.restart(start, checkpoint);
        let mut slices = Vec::with_capacity(end - start);
        for _ in start..end {
            slices.push(sweep.share.clone());
            sweep.step();
        }
        for t in (start..end).rev() {
            let slice = &slices[t - start];
            let mut options: Vec<(NodeId, f64)> = Vec::with_capacity(tree.deg(x) as usize + 1);
            if let Some(p) = tree.parent(x) {
                options.push((p, slice[p as usize]));
            }
            if tree.depth(x) < table.top {
                options.extend(tree.children(x).map(|c| (c, slice[c as usize])));
            }
            let total: f64 = options.iter().map(|o| o.1).sum();
            if total <= 0.0 {
                return Err(BridgeError::NoReturnMass);
            }
            let mut u = rng.random::<f64>() * total;
            let mut pick = options[options.len() - 1].0;
            for &(v, wgt) in &options {
                if u < wgt {
                    pick = v;
                    break;
                }
                u -= wgt;
            }
            path[t] = pick;
            x = pick;
        }
    }
    debug_assert_eq!(path[0], tree.root());
    Ok(WalkPath::new(path, Kernel::Srw, tree))
}

/// [`occupancy`] with stored slices, ready for [`sample_bridge`]. The stride
/// defaults to about sqrt(2n), balancing stored and recomputed slices.
pub fn bridge_table_for_sampling(
    tree: &Tree,
    n: usize,
    depth_limit: Option<u32>,
    stride: Option<usize>,
) -> Result<OccupancyTable<f64>> {
    let stride = stride.unwrap_or_else(|| ((2 * n) as f64).sqrt().ceil().max(1.0) as usize);
    occupancy::<f64>(
        tree,
        2 * n,
        BridgeOptions {
            depth_limit,
            slice_stride: Some(stride),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::q;
    use crate::rng::seeded;

    #[test]
    fn small_examples() {
        assert_eq!(bridge_dp(&Tree::half_line(4), 1, None).unwrap().0, 0.5);
        let star = Tree::from_child_counts(vec![3, 0, 0, 0], None).unwrap();
        assert_eq!(bridge_dp(&star, 1, None).unwrap().0, 1.0);
        let (p, _) = bridge_dp_exact(&Tree::complete(2, 3), 1, None).unwrap();
        assert_eq!(p, q(1, 3));
    }

    #[test]
    fn half_horizon_identity_is_exact() {
        let t = Tree::from_parents(
            &[
                None,
                Some(0),
                Some(0),
                Some(1),
                Some(1),
                Some(2),
                Some(3),
                Some(5),
                Some(5),
                Some(7),
            ],
            None,
        )
        .unwrap();
        for n in 1..=6 {
            for l in [None, Some(1), Some(2), Some(3)] {
                let full = bridge_dp_exact(&t, n, l).unwrap().0;
                assert_eq!(joint_return_exact(&t, n, l).unwrap(), full);
                let lp = log_joint_return(&t, n, l).unwrap();
                assert!((lp.exp() - full.to_f64()).abs() < 1e-14);
            }
        }
        let deep = Tree::complete(3, 6);
        let (_, table) = bridge_dp(&deep, 3000, Some(4)).unwrap();
        let half = log_joint_return(&deep, 3000, Some(4)).unwrap();
        assert!((half - table.log_p_return()).abs() < 1e-9 * half.abs());
    }

    #[test]
    fn odd_horizon_has_no_return() {
        let t = Tree::complete(2, 9);
        let table = occupancy::<f64>(&t, 7, BridgeOptions::default()).unwrap();
        assert_eq!(table.root_mass_scaled(), 0.0);
        assert!((table.total_mass(&t) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn preconditions() {
        let t = Tree::complete(2, 3);
        assert_eq!(
            bridge_dp(&t, 2, None).unwrap_err(),
            BridgeError::HorizonExceedsCap { cap: 3, horizon: 4 }
        );
        assert_eq!(
            bridge_dp(&t, 2, Some(3)).unwrap_err(),
            BridgeError::LimitNotBelowCap { limit: 3, cap: 3 }
        );
        let lone = Tree::from_child_counts(vec![0], None).unwrap();
        assert_eq!(
            bridge_dp(&lone, 1, None).unwrap_err(),
            BridgeError::IsolatedRoot
        );
    }

    #[test]
    fn kill_mode_accounts_for_all_mass() {
        let t = Tree::complete(2, 12);
        for l in 0..6 {
            let table = occupancy::<f64>(
                &t,
                11,
                BridgeOptions {
                    depth_limit: Some(l),
                    slice_stride: None,
                },
            )
            .unwrap();
            assert!((table.total_mass(&t) + table.leaked_mass - 1.0).abs() < 1e-12);
        }
        assert_eq!(truncation_bound(&t, 5, 10).unwrap(), 0.0);
    }

    #[test]
    fn limit_n_recovers_unconstrained_return() {
        let t = Tree::complete(2, 12);
        let (free, _) = bridge_dp(&t, 6, None).unwrap();
        let (p, _) = return_prob(&t, 6).unwrap();
        assert!((free - p).abs() < 1e-15);
    }

    #[test]
    fn profile_is_monotone() {
        let t = Tree::complete(2, 12);
        let prof = max_disp_profile(&t, 5, &[0, 1, 2, 3, 5, 11]).unwrap();
        assert_eq!(prof.rows[0].p_joint, 0.0);
        assert!(prof.rows.windows(2).all(|w| w[0].p_joint <= w[1].p_joint));
        assert!(prof
            .rows
            .windows(2)
            .all(|w| w[0].leaked_mass >= w[1].leaked_mass));
        assert!(prof.p_return_exact);
        assert!((prof.conditional_cdf[5] - 1.0).abs() < 1e-12);
    }

    /// Depth chain of the SRW on the complete ternary tree, killed below depth `l`, in log space.
    fn ternary_log_return(l: usize, steps: usize) -> f64 {
        let lse = |a: f64, b: f64| {
            let m = a.max(b);
            if m == f64::NEG_INFINITY {
                m
            } else {
                m + ((a - m).exp() + (b - m).exp()).ln()
            }
        };
        let mut cur = vec![f64::NEG_INFINITY; l + 1];
        cur[0] = 0.0;
        for _ in 0..steps {
            let mut next = vec![f64::NEG_INFINITY; l + 1];
            for d in 0..=l {
                let (up, down) = if d == 0 {
                    (f64::NEG_INFINITY, 0.0)
                } else {
                    (0.25f64.ln(), 0.75f64.ln())
                };
                if d > 0 {
                    next[d - 1] = lse(next[d - 1], cur[d] + up);
                }
                if d < l {
                    next[d + 1] = lse(next[d + 1], cur[d] + down);
                }
            }
            cur = next;
        }
        cur[0]
    }

    #[test]
    fn rescaling_keeps_tiny_probabilities() {
        let t = Tree::complete(3, 6);
        let (_, table) = bridge_dp(&t, 3000, Some(4)).unwrap();
        assert!(table.log_scale < 0.0);
        let lp = table.log_p_return();
        let oracle = ternary_log_return(4, 6000);
        assert!(oracle < (1e-300f64).ln());
        assert!((lp - oracle).abs() < 1e-9 * oracle.abs());
    }

    #[test]
    fn sampled_bridges_are_bridges() {
        let hl = Tree::half_line(4);
        let table = bridge_table_for_sampling(&hl, 1, None, None).unwrap();
        assert_eq!(
            sample_bridge(&hl, &table, &mut seeded(1)).unwrap().vertices,
            vec![0, 1, 0]
        );
        let t = Tree::complete(2, 12);
        let table = bridge_table_for_sampling(&t, 6, None, Some(5)).unwrap();
        let mut rng = seeded(3);
        for _ in 0..50 {
            let p = sample_bridge(&t, &table, &mut rng).unwrap();
            assert_eq!(p.vertices.len(), 13);
            assert_eq!((p.vertices[0], p.vertices[12]), (0, 0));
            for w in p.vertices.windows(2) {
                assert!(t.parent(w[0]) == Some(w[1]) || t.parent(w[1]) == Some(w[0]));
            }
        }
    }

    #[test]
    fn binary_two_step_bridges_split_evenly() {
        let t = Tree::complete(2, 3);
        let table = bridge_table_for_sampling(&t, 1, None, Some(1)).unwrap();
        let mut rng = seeded(9);
        let hits = (0..20_000)
            .filter(|_| sample_bridge(&t, &table, &mut rng).unwrap().vertices[1] == 1)
            .count();
        assert!((hits as f64 / 20_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn batched_limits_match_single_sweeps() {
        use crate::offspring::OffspringDist;
        use crate::tree::sample_gw;
        let dist = OffspringDist::from_pairs(&[(0, 0.1), (1, 0.6), (2, 0.2), (3, 0.1)]).unwrap();
        let t = sample_gw(&dist, 30, 1 << 20, &mut seeded(4)).unwrap();
        let limits = [29, 3, 17, 17, 1, 8, 22, 5, 12];
        for n in [0, 1, 7, 40, 301, 3001] {
            let batch = log_joint_returns(&t, n, &limits).unwrap();
            for (&l, &b) in limits.iter().zip(&batch) {
                let one = log_joint_return(&t, n, Some(l)).unwrap();
                assert!(
                    one == b || (one - b).abs() < 1e-12 * one.abs().max(1.0),
                    "n {n} L {l}: {one} vs {b}"
                );
            }
        }
        assert!(log_joint_returns(&t, 5, &[30]).is_err());
    }

    #[test]
    fn seeded_search_matches_a_linear_scan() {
        use crate::offspring::OffspringDist;
        use crate::tree::sample_gw;
        let dist = OffspringDist::from_pairs(&[(1, 0.8), (2, 0.2)]).unwrap();
        for r in 0..6u64 {
            let t = sample_gw(&dist, 25, 1 << 20, &mut seeded(r)).unwrap();
            let n = 40 + 20 * r as usize;
            let probs = [0.05, 0.25, 0.5, 0.75, 0.95, 1.0];
            let lp: Vec<f64> = (0..=24)
                .map(|l| log_joint_return(&t, n, Some(l)).unwrap())
                .collect();
            for seeds in [&[][..], &[19][..], &[3, 22][..]] {
                let qs = conditional_quantiles_seeded(&t, n, 24, &probs, seeds).unwrap();
                for (&p, &q) in probs.iter().zip(&qs.quantiles) {
                    let expect = (1..=24)
                        .find(|&l| lp[l as usize] - lp[24] >= p.ln())
                        .unwrap();
                    assert_eq!(q, expect, "replica {r} p {p} seeds {seeds:?}");
                }
            }
        }
    }

    #[test]
    fn quantile_search_matches_profile() {
        let t = Tree::complete(2, 14);
        let qs = conditional_quantiles(&t, 6, 13, &[0.25, 0.5, 0.75]).unwrap();
        let limits: Vec<u32> = (0..=13).collect();
        let prof = max_disp_profile(&t, 6, &limits).unwrap();
        for (k, &p) in [0.25, 0.5, 0.75].iter().enumerate() {
            let expect = limits
                .iter()
                .position(|&l| prof.conditional_cdf[l as usize] >= p - 1e-12)
                .unwrap() as u32;
            assert_eq!(qs.quantiles[k], expect);
        }
    }
}
