//! Mixed-precision allocation under an exact storage budget.
//!
//! The greedy allocator starts every block at its smallest bit-width and
//! repeatedly applies the feasible upgrade with the largest density
//! `γ = Δ / ΔC` from a max-heap with lazily deleted entries. A separable
//! knapsack DP gives the exact optimum for small instances.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losstable::LossTable;
use crate::packer::{block_cost, CostModel};

/// Scaled DP tables larger than this many budget units are refused.
pub const DP_UNIT_GUARD: u64 = 1_000_000;
/// Accepted distance between achieved and target average bits.
pub const TARGET_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitOption {
    pub bits: u32,
    pub loss: f64,
    /// `C_b(m)` in bits.
    pub cost: u64,
    /// Latency `T_b(m)`, when a latency model is configured.
    pub latency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocBlock {
    pub id: String,
    /// Feasible bit-widths in ascending order.
    pub options: Vec<BitOption>,
    /// `tr(Σ⁻¹)/d`.
    pub saliency: f64,
    pub n_weights: u64,
    pub group_size: usize,
}

impl AllocBlock {
    /// Rows of `table` for `id` with costs from the storage model.
    pub fn from_table(
        table: &LossTable,
        id: &str,
        n_weights: usize,
        group_size: usize,
        cm: &CostModel,
        saliency: f64,
    ) -> Result<Self> {
        let options = table
            .block_rows(id)
            .map(|r| {
                Ok(BitOption {
                    bits: r.bits,
                    loss: r.loss,
                    cost: block_cost(n_weights, group_size, r.bits, r.designer, cm)?.total(),
                    latency: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if options.is_empty() {
            return Err(Error::MissingBlock(id.to_string()));
        }
        Ok(AllocBlock { id: id.to_string(), options, saliency, n_weights: n_weights as u64, group_size })
    }

    pub fn min_cost(&self) -> u64 {
        self.options[0].cost
    }

    fn option_index(&self, bits: u32) -> Option<usize> {
        self.options.iter().position(|o| o.bits == bits)
    }
}

/// Lane geometry used by the packing tie-breaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PackingModel {
    pub lane_bits: u32,
    /// Bit-widths that map onto native kernels; preferred after alignment.
    pub preferred_bits: Vec<u32>,
}

impl Default for PackingModel {
    fn default() -> Self {
        PackingModel { lane_bits: 32, preferred_bits: vec![2, 4, 8] }
    }
}

impl PackingModel {
    /// `(lane-aligned groups, preferred width)` after moving `block` to `bits`.
    pub fn score(&self, block: &AllocBlock, bits: u32) -> (u64, bool) {
        let lane = self.lane_bits.max(1) as u64;
        let n = block.n_weights;
        let g = block.group_size.max(1) as u64;
        let full = n / g;
        let rem = n % g;
        let mut aligned = if (g * bits as u64) % lane == 0 { full } else { 0 };
        if rem > 0 && (rem * bits as u64) % lane == 0 {
            aligned += 1;
        }
        (aligned, self.preferred_bits.contains(&bits))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub blocks: Vec<AllocBlock>,
    /// `B_tot` in bits.
    pub budget: u64,
    /// Densities within `eta` of the maximum are ties.
    pub eta: f64,
    pub packing: PackingModel,
    /// Density penalty `λ_reg` per bit of cost increment.
    pub lambda_reg: f64,
    /// Rank upgrades by loss reduction per unit latency instead of per bit.
    pub use_latency: bool,
}

impl AllocationProblem {
    pub fn new(blocks: Vec<AllocBlock>, budget: u64) -> Result<Self> {
        let mut p = AllocationProblem {
            blocks,
            budget,
            eta: 0.0,
            packing: PackingModel::default(),
            lambda_reg: 0.0,
            use_latency: false,
        };
        p.normalize()?;
        Ok(p)
    }

    /// Sorts options, checks costs, and clamps losses to be nonincreasing.
    pub fn normalize(&mut self) -> Result<()> {
        if !(self.eta >= 0.0) || !(self.lambda_reg >= 0.0) {
            return Err(Error::invalid("tie tolerance and regularization must be >= 0"));
        }
        for b in &mut self.blocks {
            if b.options.is_empty() {
                return Err(Error::InvalidBlock { id: b.id.clone(), msg: "no feasible bit-widths".into() });
            }
            b.options.sort_by_key(|o| o.bits);
            for w in b.options.windows(2) {
                if w[0].bits == w[1].bits {
                    return Err(Error::InvalidBlock { id: b.id.clone(), msg: format!("duplicate bit-width {}", w[0].bits) });
                }
                if w[1].cost <= w[0].cost {
                    return Err(Error::InvalidBlock {
                        id: b.id.clone(),
                        msg: format!("cost must increase with bits ({} -> {})", w[0].bits, w[1].bits),
                    });
                }
            }
            if b.options.iter().any(|o| !(o.loss >= 0.0) || !o.loss.is_finite()) {
                return Err(Error::InvalidBlock { id: b.id.clone(), msg: "losses must be finite and >= 0".into() });
            }
            clamp_nonincreasing(&b.id, &mut b.options);
        }
        Ok(())
    }

    pub fn min_cost(&self) -> u64 {
        self.blocks.iter().map(AllocBlock::min_cost).sum()
    }

    pub fn n_weights(&self) -> u64 {
        self.blocks.iter().map(|b| b.n_weights).sum()
    }

    pub fn check_feasible(&self) -> Result<()> {
        let min_cost = self.min_cost();
        if min_cost > self.budget {
            return Err(Error::Infeasible { min_cost, budget: self.budget });
        }
        Ok(())
    }

    /// Drops bit-widths below a per-block floor; the floor never removes a
    /// block's widest option.
    pub fn apply_bit_floors(&mut self, floor: impl Fn(&str) -> Option<u32>) {
        for b in &mut self.blocks {
            if let Some(f) = floor(&b.id) {
                let top = b.options.last().map_or(0, |o| o.bits);
                b.options.retain(|o| o.bits >= f.min(top));
            }
        }
    }

    /// Density of upgrading block `b` from option `k` to `k + 1`.
    fn density(&self, b: usize, k: usize) -> Result<f64> {
        let blk = &self.blocks[b];
        let (lo, hi) = (&blk.options[k], &blk.options[k + 1]);
        let delta = lo.loss - hi.loss;
        let dc = hi.cost - lo.cost;
        if self.use_latency {
            let (t0, t1) = lo.latency.zip(hi.latency).ok_or_else(|| Error::InvalidBlock {
                id: blk.id.clone(),
                msg: "latency density needs latency for every option".into(),
            })?;
            if !(t1 > t0) {
                return Err(Error::InvalidBlock { id: blk.id.clone(), msg: "latency must increase with bits".into() });
            }
            return Ok(delta / (t1 - t0) - self.lambda_reg * dc as f64);
        }
        regularized_density(delta, dc, self.lambda_reg)
    }
}

fn clamp_nonincreasing(id: &str, options: &mut [BitOption]) {
    for k in 1..options.len() {
        if options[k].loss > options[k - 1].loss {
            warn!("block {id}: loss rises from {} to {} bits; clamped", options[k - 1].bits, options[k].bits);
            options[k].loss = options[k - 1].loss;
        }
    }
}

/// `Δ/ΔC − λ_reg·ΔC`; `λ_reg = 0` gives `γ` exactly.
pub fn regularized_density(delta: f64, cost_increment: u64, lambda_reg: f64) -> Result<f64> {
    if cost_increment == 0 {
        return Err(Error::invalid("cost increment must be > 0"));
    }
    if !(lambda_reg >= 0.0) {
        return Err(Error::invalid("regularization must be >= 0"));
    }
    let dc = cost_increment as f64;
    Ok(delta / dc - lambda_reg * dc)
}

/// `B_tot = ⌊m̄ · N⌋`.
pub fn budget_from_target(target_bits: f64, n_weights: u64) -> Result<u64> {
    if !(target_bits > 0.0) || !target_bits.is_finite() {
        return Err(Error::invalid(format!("target average bits must be > 0, got {target_bits}")));
    }
    Ok((target_bits * n_weights as f64 + 1e-9).floor() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpgradeStep {
    pub step: usize,
    pub block: usize,
    pub id: String,
    pub from: u32,
    pub to: u32,
    /// Density the upgrade was ranked by.
    pub gamma: f64,
    pub delta: f64,
    pub cost_after: u64,
    pub loss_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub ids: Vec<String>,
    pub bits: Vec<u32>,
    pub total_cost: u64,
    pub total_loss: f64,
    pub average_bits: f64,
    pub budget: u64,
    pub trace: Vec<UpgradeStep>,
    /// Set when a target average was requested and missed by more than the
    /// tolerance; the allocation is then the closest one under budget.
    pub off_target: bool,
}

impl Allocation {
    fn from_choice(p: &AllocationProblem, choice: &[usize], trace: Vec<UpgradeStep>) -> Self {
        let total_cost = p.blocks.iter().zip(choice).map(|(b, &k)| b.options[k].cost).sum();
        let n = p.n_weights();
        Allocation {
            ids: p.blocks.iter().map(|b| b.id.clone()).collect(),
            bits: p.blocks.iter().zip(choice).map(|(b, &k)| b.options[k].bits).collect(),
            total_cost,
            total_loss: total_loss(p, choice),
            average_bits: if n == 0 { 0.0 } else { total_cost as f64 / n as f64 },
            budget: p.budget,
            trace,
            off_target: false,
        }
    }

    /// Flags the allocation when its average misses `target` by more than
    /// [`TARGET_TOLERANCE`].
    pub fn check_target(&mut self, target: f64) -> bool {
        self.off_target = (self.average_bits - target).abs() > TARGET_TOLERANCE;
        if self.off_target {
            warn!(
                "achieved {:.4} bits/weight vs target {target}; cost granularity does not permit ±{TARGET_TOLERANCE}",
                self.average_bits
            );
        }
        !self.off_target
    }

    /// Replays the trace from the minimum-bit state.
    pub fn replay(&self, p: &AllocationProblem) -> Result<Vec<u32>> {
        let mut bits: Vec<u32> = p.blocks.iter().map(|b| b.options[0].bits).collect();
        for s in &self.trace {
            if bits[s.block] != s.from {
                return Err(Error::invalid(format!("trace step {} starts from the wrong width", s.step)));
            }
            bits[s.block] = s.to;
        }
        Ok(bits)
    }

    /// Loss of this assignment under `p`'s losses.
    pub fn loss_under(&self, p: &AllocationProblem) -> Result<f64> {
        let choice = p
            .blocks
            .iter()
            .zip(&self.bits)
            .map(|(b, &m)| b.option_index(m).ok_or_else(|| Error::MissingBlock(format!("{} at {m} bits", b.id))))
            .collect::<Result<Vec<_>>>()?;
        Ok(total_loss(p, &choice))
    }
}

fn total_loss(p: &AllocationProblem, choice: &[usize]) -> f64 {
    p.blocks.iter().zip(choice).map(|(b, &k)| b.options[k].loss).sum()
}

/// A candidate upgrade of `block` from option `k` to `k + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub block: usize,
    pub k: usize,
    pub density: f64,
    pub delta: f64,
}

/// Resolves near-ties: larger `Δ`, then higher saliency, then the better
/// packing score, then the lowest block index. Returns the winner's
/// position in `cands`.
pub fn tie_break(cands: &[Candidate], p: &AllocationProblem) -> usize {
    let rank = |c: &Candidate| {
        let b = &p.blocks[c.block];
        (c.delta, b.saliency, p.packing.score(b, b.options[c.k + 1].bits))
    };
    let mut best = 0;
    for i in 1..cands.len() {
        let (a, b) = (rank(&cands[i]), rank(&cands[best]));
        let ord = a
            .0
            .total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(cands[best].block.cmp(&cands[i].block));
        if ord == Ordering::Greater {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    density: f64,
    block: usize,
    version: u64,
}

impl PartialEq for Entry {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Entry {
    fn cmp(&self, o: &Self) -> Ordering {
        self.density
            .total_cmp(&o.density)
            .then(o.block.cmp(&self.block))
            .then(self.version.cmp(&o.version))
    }
}

/// Periodic re-estimation of block losses during greedy allocation.
pub struct Rescore<'a> {
    /// Re-score before upgrade 0, S, 2S, ...
    pub every: usize,
    pub top_k: usize,
    /// New losses for the block's options (same order), given its index.
    pub rescorer: &'a mut dyn FnMut(usize, &AllocBlock) -> Result<Vec<f64>>,
}

pub fn greedy_allocate(p: &AllocationProblem) -> Result<Allocation> {
    greedy_core(p.clone(), None)
}

pub fn greedy_allocate_with_rescore(p: &AllocationProblem, rescore: Rescore<'_>) -> Result<Allocation> {
    greedy_core(p.clone(), Some(rescore))
}

fn greedy_core(mut p: AllocationProblem, mut rescore: Option<Rescore<'_>>) -> Result<Allocation> {
    p.normalize()?;
    p.check_feasible()?;
    let nb = p.blocks.len();
    let mut choice = vec![0usize; nb];
    let mut version = vec![0u64; nb];
    let mut cost = p.min_cost();
    let mut heap = BinaryHeap::new();
    for b in 0..nb {
        push_entry(&p, &mut heap, &choice, &version, b)?;
    }
    let mut trace = Vec::new();
    loop {
        if let Some(r) = rescore.as_mut().filter(|r| r.every > 0 && r.top_k > 0 && trace.len() % r.every == 0) {
            rescore_sweep(&mut p, &mut heap, &choice, &mut version, r)?;
        }
        let cands = pop_candidates(&p, &mut heap, &choice, &version, p.budget - cost);
        if cands.is_empty() {
            break;
        }
        let win = tie_break(&cands, &p);
        for (i, c) in cands.iter().enumerate() {
            if i != win {
                heap.push(Entry { density: c.density, block: c.block, version: version[c.block] });
            }
        }
        let c = cands[win];
        let blk = &p.blocks[c.block];
        cost += blk.options[c.k + 1].cost - blk.options[c.k].cost;
        choice[c.block] = c.k + 1;
        version[c.block] += 1;
        trace.push(UpgradeStep {
            step: trace.len(),
            block: c.block,
            id: blk.id.clone(),
            from: blk.options[c.k].bits,
            to: blk.options[c.k + 1].bits,
            gamma: c.density,
            delta: c.delta,
            cost_after: cost,
            loss_after: total_loss(&p, &choice),
        });
        push_entry(&p, &mut heap, &choice, &version, c.block)?;
    }
    info!("greedy allocation: {} upgrades, {} of {} bits", trace.len(), cost, p.budget);
    Ok(Allocation::from_choice(&p, &choice, trace))
}

fn push_entry(p: &AllocationProblem, heap: &mut BinaryHeap<Entry>, choice: &[usize], version: &[u64], b: usize) -> Result<()> {
    let k = choice[b];
    if k + 1 < p.blocks[b].options.len() {
        let density = p.density(b, k)?;
        if density >= 0.0 {
            heap.push(Entry { density, block: b, version: version[b] });
        }
    }
    Ok(())
}

/// Pops every live, affordable entry within `eta` of the best one. Stale
/// entries are dropped; unaffordable ones never become affordable again.
fn pop_candidates(
    p: &AllocationProblem,
    heap: &mut BinaryHeap<Entry>,
    choice: &[usize],
    version: &[u64],
    headroom: u64,
) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = Vec::new();
    while let Some(top) = heap.peek().copied() {
        if let Some(first) = out.first() {
            if top.density < first.density - p.eta {
                break;
            }
        }
        heap.pop();
        if top.version != version[top.block] {
            continue;
        }
        let blk = &p.blocks[top.block];
        let k = choice[top.block];
        if blk.options[k + 1].cost - blk.options[k].cost > headroom {
            continue;
        }
        out.push(Candidate { block: top.block, k, density: top.density, delta: blk.options[k].loss - blk.options[k + 1].loss });
    }
    out
}

fn rescore_sweep(
    p: &mut AllocationProblem,
    heap: &mut BinaryHeap<Entry>,
    choice: &[usize],
    version: &mut [u64],
    r: &mut Rescore<'_>,
) -> Result<()> {
    let mut ranked: Vec<(f64, usize)> = (0..p.blocks.len())
        .filter(|&b| choice[b] + 1 < p.blocks[b].options.len())
        .map(|b| Ok((p.density(b, choice[b])?, b)))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, b) in ranked.iter().take(r.top_k) {
        let losses = (r.rescorer)(b, &p.blocks[b])?;
        let blk = &mut p.blocks[b];
        if losses.len() != blk.options.len() {
            return Err(Error::DimensionMismatch { expected: blk.options.len(), got: losses.len() });
        }
        for (o, l) in blk.options.iter_mut().zip(losses) {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::InvalidBlock { id: blk.id.clone(), msg: format!("re-scored loss {l} is invalid") });
            }
            o.loss = l;
        }
        clamp_nonincreasing(&blk.id.clone(), &mut blk.options);
        version[b] += 1;
        push_entry(p, heap, choice, version, b)?;
    }
    Ok(())
}

/// Full-rescan greedy with the same ranking and tie-breaking as
/// [`greedy_allocate`]; quadratic, for cross-checking.
pub fn naive_greedy(p: &AllocationProblem) -> Result<Allocation> {
    let mut p = p.clone();
    p.normalize()?;
    p.check_feasible()?;
    let mut choice = vec![0usize; p.blocks.len()];
    let mut cost = p.min_cost();
    let mut trace = Vec::new();
    loop {
        let mut all = Vec::new();
        for (b, blk) in p.blocks.iter().enumerate() {
            let k = choice[b];
            if k + 1 >= blk.options.len() || blk.options[k + 1].cost - blk.options[k].cost > p.budget - cost {
                continue;
            }
            let density = p.density(b, k)?;
            if density >= 0.0 {
                all.push(Candidate { block: b, k, density, delta: blk.options[k].loss - blk.options[k + 1].loss });
            }
        }
        let Some(max) = all.iter().map(|c| c.density).max_by(f64::total_cmp) else {
            break;
        };
        let cands: Vec<Candidate> = all.into_iter().filter(|c| c.density >= max - p.eta).collect();
        let c = cands[tie_break(&cands, &p)];
        let blk = &p.blocks[c.block];
        cost += blk.options[c.k + 1].cost - blk.options[c.k].cost;
        choice[c.block] += 1;
        trace.push(UpgradeStep {
            step: trace.len(),
            block: c.block,
            id: blk.id.clone(),
            from: blk.options[c.k].bits,
            to: blk.options[c.k + 1].bits,
            gamma: c.density,
            delta: c.delta,
            cost_after: cost,
            loss_after: total_loss(&p, &choice),
        });
    }
    Ok(Allocation::from_choice(&p, &choice, trace))
}

/// Exact separable-knapsack optimum with costs measured in units of `unit`
/// bits. Cost increments over the minimum-bit state must be multiples of
/// `unit`.
pub fn dp_oracle(p: &AllocationProblem, unit: u64) -> Result<Allocation> {
    dp_core(p, unit, false)
}

/// DP with increments rounded up to the smallest unit in 1, 8, 16, 32, ...
/// that fits the table guard. Rounding up keeps the result within budget;
/// it can be suboptimal when rounding bites.
pub fn dp_oracle_bucketized(p: &AllocationProblem) -> Result<Allocation> {
    let headroom = p.budget.saturating_sub(p.min_cost());
    let mut unit = 1u64;
    while headroom / unit > DP_UNIT_GUARD {
        unit = if unit == 1 { 8 } else { unit * 2 };
    }
    if unit > 1 {
        info!("DP costs bucketized to {unit}-bit units");
    }
    dp_core(p, unit, true)
}

fn dp_core(p: &AllocationProblem, unit: u64, round_up: bool) -> Result<Allocation> {
    if unit == 0 {
        return Err(Error::invalid("DP unit must be >= 1 bit"));
    }
    let mut p = p.clone();
    p.normalize()?;
    p.check_feasible()?;
    let cap = (p.budget - p.min_cost()) / unit;
    if cap > DP_UNIT_GUARD {
        return Err(Error::BudgetTooLarge { units: cap, guard: DP_UNIT_GUARD });
    }
    let cap = cap as usize;
    let mut incs: Vec<Vec<usize>> = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let mut v = Vec::with_capacity(b.options.len());
        for o in &b.options {
            let d = o.cost - b.min_cost();
            if !round_up && d % unit != 0 {
                return Err(Error::NonIntegerCost { id: b.id.clone(), cost: o.cost, unit });
            }
            v.push(d.div_ceil(unit) as usize);
        }
        incs.push(v);
    }
    // best[c]: least loss of the blocks seen so far using at most c units.
    let mut best = vec![0.0f64; cap + 1];
    let mut pick: Vec<Vec<u8>> = Vec::with_capacity(p.blocks.len());
    for (b, blk) in p.blocks.iter().enumerate() {
        let mut next = vec![f64::INFINITY; cap + 1];
        let mut arg = vec![0u8; cap + 1];
        for c in 0..=cap {
            for (k, o) in blk.options.iter().enumerate() {
                let w = incs[b][k];
                if w > c {
                    break;
                }
                let v = best[c - w] + o.loss;
                if v < next[c] {
                    next[c] = v;
                    arg[c] = k as u8;
                }
            }
        }
        best = next;
        pick.push(arg);
    }
    let mut choice = vec![0usize; p.blocks.len()];
    let mut c = cap;
    for b in (0..p.blocks.len()).rev() {
        let k = pick[b][c] as usize;
        choice[b] = k;
        c -= incs[b][k];
    }
    Ok(Allocation::from_choice(&p, &choice, Vec::new()))
}

/// Baseline: the widest bit-width every block can take at once, then
/// single-step upgrades in block order while the budget allows. Ignores
/// losses.
pub fn uniform_fill_allocation(p: &AllocationProblem) -> Result<Allocation> {
    let mut p = p.clone();
    p.normalize()?;
    p.check_feasible()?;
    let mut common: Vec<u32> = p.blocks[0].options.iter().map(|o| o.bits).collect();
    for b in &p.blocks[1..] {
        common.retain(|m| b.option_index(*m).is_some());
    }
    let mut choice = vec![0usize; p.blocks.len()];
    for &m in &common {
        let cand: Vec<usize> = p.blocks.iter().map(|b| b.option_index(m).unwrap()).collect();
        let cost: u64 = p.blocks.iter().zip(&cand).map(|(b, &k)| b.options[k].cost).sum();
        if cost <= p.budget && cand.iter().zip(&choice).all(|(c, o)| c >= o) {
            choice = cand;
        }
    }
    let mut cost: u64 = p.blocks.iter().zip(&choice).map(|(b, &k)| b.options[k].cost).sum();
    let mut progress = true;
    while progress {
        progress = false;
        for (b, blk) in p.blocks.iter().enumerate() {
            let k = choice[b];
            if k + 1 < blk.options.len() && cost + blk.options[k + 1].cost - blk.options[k].cost <= p.budget {
                cost += blk.options[k + 1].cost - blk.options[k].cost;
                choice[b] += 1;
                progress = true;
            }
        }
    }
    Ok(Allocation::from_choice(&p, &choice, Vec::new()))
}

/// Baseline: seeded random single-step upgrades until none fits.
pub fn random_allocation(p: &AllocationProblem, seed: u64) -> Result<Allocation> {
    use rand::Rng;
    let mut p = p.clone();
    p.normalize()?;
    p.check_feasible()?;
    let mut rng = crate::rng::seeded(seed);
    let mut choice = vec![0usize; p.blocks.len()];
    let mut cost = p.min_cost();
    loop {
        let open: Vec<usize> = (0..p.blocks.len())
            .filter(|&b| {
                let blk = &p.blocks[b];
                let k = choice[b];
                k + 1 < blk.options.len() && cost + blk.options[k + 1].cost - blk.options[k].cost <= p.budget
            })
            .collect();
        if open.is_empty() {
            break;
        }
        let b = open[rng.random_range(0..open.len())];
        let blk = &p.blocks[b];
        cost += blk.options[choice[b] + 1].cost - blk.options[choice[b]].cost;
        choice[b] += 1;
    }
    Ok(Allocation::from_choice(&p, &choice, Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn block(id: &str, losses: &[f64], costs: &[u64], bits: &[u32]) -> AllocBlock {
        AllocBlock {
            id: id.into(),
            options: bits
                .iter()
                .zip(losses)
                .zip(costs)
                .map(|((&b, &l), &c)| BitOption { bits: b, loss: l, cost: c, latency: None })
                .collect(),
            saliency: 1.0,
            n_weights: 1,
            group_size: 1,
        }
    }

    fn unit_instance(l1: &[f64], l2: &[f64], headroom: u64) -> AllocationProblem {
        let bits = [2, 3, 4];
        let costs = [2, 3, 4];
        AllocationProblem::new(vec![block("a", l1, &costs, &bits), block("b", l2, &costs, &bits)], 4 + headroom).unwrap()
    }

    fn brute_force(p: &AllocationProblem) -> f64 {
        let mut best = f64::INFINITY;
        let sizes: Vec<usize> = p.blocks.iter().map(|b| b.options.len()).collect();
        let total: usize = sizes.iter().product();
        for mut code in 0..total {
            let mut cost = 0;
            let mut loss = 0.0;
            for (b, &s) in p.blocks.iter().zip(&sizes) {
                let k = code % s;
                code /= s;
                cost += b.options[k].cost;
                loss += b.options[k].loss;
            }
            if cost <= p.budget && loss < best {
                best = loss;
            }
        }
        best
    }

    #[test]
    fn zero_headroom_stays_at_min() {
        let p = unit_instance(&[4.0, 1.0, 0.5], &[3.0, 2.0, 1.8], 0);
        let a = greedy_allocate(&p).unwrap();
        assert_eq!(a.bits, vec![2, 2]);
        assert!(a.trace.is_empty());
        assert_eq!(dp_oracle(&p, 1).unwrap().bits, vec![2, 2]);
    }

    #[test]
    fn two_block_concave_example() {
        let p = unit_instance(&[4.0, 1.0, 0.5], &[3.0, 2.0, 1.8], 2);
        let a = greedy_allocate(&p).unwrap();
        assert_eq!(a.bits, vec![3, 3]);
        assert_eq!(a.trace.iter().map(|s| s.gamma).collect::<Vec<_>>(), vec![3.0, 1.0]);
        assert_eq!(a.total_loss, brute_force(&p));
        assert_eq!(dp_oracle(&p, 1).unwrap().total_loss, a.total_loss);
        assert_eq!(greedy_allocate(&p).unwrap(), a);
        assert_eq!(a.replay(&p).unwrap(), a.bits);
    }

    #[test]
    fn non_concave_example() {
        let p = unit_instance(&[4.0, 3.9, 0.5], &[3.0, 2.0, 1.9], 2);
        let dp = dp_oracle(&p, 1).unwrap();
        assert_eq!(dp.bits, vec![4, 2]);
        assert_eq!(dp.total_loss, brute_force(&p));
        let g = greedy_allocate(&p).unwrap();
        assert_ne!(g.bits, dp.bits);
        assert!(dp.total_loss <= g.total_loss);
    }

    #[test]
    fn infeasible_and_guards() {
        let p = unit_instance(&[4.0, 1.0, 0.5], &[3.0, 2.0, 1.8], 0);
        let tight = AllocationProblem { budget: 3, ..p.clone() };
        assert!(matches!(greedy_allocate(&tight), Err(Error::Infeasible { .. })));
        let huge = AllocationProblem { budget: 4 + 10 * DP_UNIT_GUARD, ..p.clone() };
        assert!(matches!(dp_oracle(&huge, 1), Err(Error::BudgetTooLarge { .. })));
        assert!(dp_oracle_bucketized(&huge).is_ok());
        let odd = AllocationProblem::new(vec![block("a", &[1.0, 0.5], &[8, 13], &[2, 3])], 20).unwrap();
        assert!(matches!(dp_oracle(&odd, 2), Err(Error::NonIntegerCost { .. })));
        let bad = AllocationProblem::new(vec![block("a", &[1.0, 0.5], &[8, 8], &[2, 3])], 20);
        assert!(bad.is_err());
    }

    #[test]
    fn tie_break_chain() {
        let mut p = unit_instance(&[1.0, 0.4, 0.0], &[1.0, 0.6, 0.0], 4);
        let cands = [
            Candidate { block: 0, k: 0, density: 0.5, delta: 0.6 },
            Candidate { block: 1, k: 0, density: 0.5, delta: 0.4 },
        ];
        assert_eq!(tie_break(&cands, &p), 0);
        let eq = [
            Candidate { block: 0, k: 0, density: 0.5, delta: 0.4 },
            Candidate { block: 1, k: 0, density: 0.5, delta: 0.4 },
        ];
        p.blocks[0].saliency = 2.0;
        assert_eq!(tie_break(&eq, &p), 0);
        p.blocks[0].saliency = 1.0;
        p.blocks[1].saliency = 2.0;
        assert_eq!(tie_break(&eq, &p), 1);
        p.blocks[1].saliency = 1.0;
        assert_eq!(tie_break(&eq, &p), 0);

        // Packing: 4 weights per group; 3 bits gives 12-bit groups, 8 bits 32.
        p.packing = PackingModel { lane_bits: 32, preferred_bits: vec![] };
        for b in &mut p.blocks {
            b.n_weights = 64;
            b.group_size = 4;
        }
        p.blocks[1].options[1].bits = 8;
        assert_eq!(tie_break(&eq, &p), 1);
    }

    #[test]
    fn regularized_density_cases() {
        assert_eq!(regularized_density(0.6, 1000, 0.0).unwrap(), 0.6 / 1000.0);
        assert!(regularized_density(0.6, 1000, 1.0).unwrap() < 0.0);
        assert!(regularized_density(0.6, 0, 0.0).is_err());

        // Skipped when negative.
        let mut p = unit_instance(&[4.0, 1.0, 0.5], &[3.0, 2.0, 1.8], 2);
        p.lambda_reg = 10.0;
        assert!(greedy_allocate(&p).unwrap().trace.is_empty());

        // Equal increments: the penalty shifts every density by the same
        // amount and the order is unchanged.
        let base = unit_instance(&[4.0, 1.0, 0.5], &[3.0, 2.0, 1.8], 2);
        let reg = AllocationProblem { lambda_reg: 1e-4, ..base.clone() };
        let order = |p: &AllocationProblem| greedy_allocate(p).unwrap().trace.iter().map(|s| s.block).collect::<Vec<_>>();
        assert_eq!(order(&base), order(&reg));

        // Unequal increments: a cheap small gain beats an expensive large one
        // once the penalty is applied.
        let a = block("a", &[200.0, 0.0], &[0, 1000], &[2, 3]);
        let b = block("b", &[1.0, 0.7], &[0, 2], &[2, 3]);
        let p0 = AllocationProblem::new(vec![a, b], 2000).unwrap();
        let p1 = AllocationProblem { lambda_reg: 1e-4, ..p0.clone() };
        assert_eq!(order(&p0), vec![0, 1]);
        assert_eq!(order(&p1), vec![1, 0]);
    }

    #[test]
    fn latency_density() {
        let mut a = block("a", &[1.0, 0.5], &[10, 20], &[2, 3]);
        let mut b = block("b", &[1.0, 0.6], &[10, 20], &[2, 3]);
        a.options[0].latency = Some(1.0);
        a.options[1].latency = Some(3.0);
        b.options[0].latency = Some(1.0);
        b.options[1].latency = Some(1.5);
        let mut p = AllocationProblem::new(vec![a, b], 30).unwrap();
        assert_eq!(greedy_allocate(&p).unwrap().bits, vec![3, 2]);
        p.use_latency = true;
        assert_eq!(greedy_allocate(&p).unwrap().bits, vec![2, 3]);
    }

    fn random_problem(rng: &mut crate::rng::SeededRng, concave: bool, eta: f64) -> AllocationProblem {
        let nb = rng.random_range(1..=10);
        let bits = [2u32, 3, 4, 8];
        let blocks = (0..nb)
            .map(|i| {
                let step = rng.random_range(1..=4) as u64 * 16;
                let mut losses = vec![rng.random_range(64..4096) as f64 / 64.0];
                let mut d = (losses[0] * rng.random_range(16..60) as f64 / 64.0).floor();
                for _ in 1..bits.len() {
                    let drop = if concave {
                        d
                    } else {
                        (losses.last().unwrap() * rng.random_range(0..64) as f64 / 64.0).floor()
                    };
                    losses.push((losses.last().unwrap() - drop).max(0.0));
                    d = (d * rng.random_range(8..64) as f64 / 64.0).floor();
                }
                let costs: Vec<u64> = (0..bits.len() as u64).map(|k| 64 + k * step).collect();
                let mut b = block(&format!("b{i}"), &losses, &costs, &bits);
                b.saliency = rng.random_range(0..3) as f64;
                b.n_weights = rng.random_range(1..200);
                b.group_size = 16;
                b
            })
            .collect::<Vec<_>>();
        let min: u64 = blocks.iter().map(|b: &AllocBlock| b.options[0].cost).sum();
        let max: u64 = blocks.iter().map(|b| b.options.last().unwrap().cost).sum();
        let budget = rng.random_range(min..=max);
        AllocationProblem { eta, ..AllocationProblem::new(blocks, budget).unwrap() }
    }

    #[test]
    fn heap_matches_naive_rescan() {
        let mut rng = seeded(77);
        for i in 0..100 {
            let p = random_problem(&mut rng, i % 2 == 0, if i % 3 == 0 { 0.01 } else { 0.0 });
            assert_eq!(greedy_allocate(&p).unwrap(), naive_greedy(&p).unwrap(), "instance {i}");
        }
    }

    #[test]
    fn budget_safety_and_monotone_trace() {
        let mut rng = seeded(3);
        for _ in 0..1000 {
            let p = random_problem(&mut rng, false, 0.0);
            let a = greedy_allocate(&p).unwrap();
            assert!(a.total_cost <= p.budget);
            assert!(a.trace.windows(2).all(|w| w[1].loss_after <= w[0].loss_after));
            assert_eq!(a.replay(&p).unwrap(), a.bits);
        }
    }

    #[test]
    fn rescore_noop_and_restore() {
        let mut rng = seeded(9);
        let p = random_problem(&mut rng, true, 0.0);
        let plain = greedy_allocate(&p).unwrap();
        let same = |_: usize, b: &AllocBlock| Ok(b.options.iter().map(|o| o.loss).collect());
        let mut f = same;
        let r = greedy_allocate_with_rescore(&p, Rescore { every: 1, top_k: 3, rescorer: &mut f }).unwrap();
        assert_eq!(r.bits, plain.bits);
        let mut g = same;
        let r0 = greedy_allocate_with_rescore(&p, Rescore { every: 1, top_k: 0, rescorer: &mut g }).unwrap();
        assert_eq!(r0, plain);

        // Corrupt one block ×10; an exact re-score restores the optimum.
        let truth = unit_instance(&[8.0, 2.0, 1.0], &[6.0, 5.0, 4.5], 2);
        let mut corrupt = truth.clone();
        for o in &mut corrupt.blocks[1].options {
            o.loss *= 10.0;
        }
        let optimum = dp_oracle(&truth, 1).unwrap();
        assert_ne!(greedy_allocate(&corrupt).unwrap().bits, optimum.bits);
        let mut exact = |b: usize, _: &AllocBlock| Ok(truth.blocks[b].options.iter().map(|o| o.loss).collect());
        let fixed = greedy_allocate_with_rescore(&corrupt, Rescore { every: 1, top_k: 2, rescorer: &mut exact }).unwrap();
        assert_eq!(fixed.bits, optimum.bits);
    }

    #[test]
    fn target_budget() {
        assert_eq!(budget_from_target(3.0, 1000).unwrap(), 3000);
        assert_eq!(budget_from_target(3.5, 3).unwrap(), 10);
        assert!(budget_from_target(0.0, 10).is_err());
        let bits = [2, 3, 4];
        let blocks = (0..4)
            .map(|i| {
                let mut b = block(&format!("b{i}"), &[3.0, 1.0, 0.5], &[200, 300, 400], &bits);
                b.n_weights = 100;
                b
            })
            .collect();
        let p = AllocationProblem::new(blocks, budget_from_target(3.0, 400).unwrap()).unwrap();
        let mut a = greedy_allocate(&p).unwrap();
        assert!(a.check_target(3.0));
        let p = AllocationProblem { budget: budget_from_target(3.5, 400).unwrap(), ..p };
        let mut a2 = greedy_allocate(&p).unwrap();
        assert!(a2.check_target(3.5));
        let p = AllocationProblem { budget: 1150, ..p };
        let mut a3 = greedy_allocate(&p).unwrap();
        assert!(!a3.check_target(2.875));
        assert!(a3.off_target && a3.total_cost <= 1150);
        a.off_target = false;
    }

    #[test]
    fn baselines_respect_budget() {
        let mut rng = seeded(21);
        for i in 0..200 {
            let p = random_problem(&mut rng, i % 2 == 0, 0.0);
            let u = uniform_fill_allocation(&p).unwrap();
            let r = random_allocation(&p, i).unwrap();
            let g = greedy_allocate(&p).unwrap();
            assert!(u.total_cost <= p.budget && r.total_cost <= p.budget);
            if i % 2 == 0 {
                assert!(g.total_loss <= u.total_loss && g.total_loss <= r.total_loss);
            }
        }
        let p = unit_instance(&[4.0, 1.0, 0.5], &[3.0, 2.0, 1.8], 2);
        assert_eq!(uniform_fill_allocation(&p).unwrap().bits, vec![3, 3]);
        let p = unit_instance(&[4.0, 1.0, 0.5], &[3.0, 2.0, 1.8], 3);
        assert_eq!(uniform_fill_allocation(&p).unwrap().bits, vec![4, 3]);
    }

    #[test]
    fn greedy_equals_dp_on_concave_uniform_steps() {
        let mut rng = seeded(5);
        for _ in 0..200 {
            let p = random_problem(&mut rng, true, 0.0);
            let step = p.blocks[0].options[1].cost - p.blocks[0].options[0].cost;
            let blocks = p
                .blocks
                .iter()
                .map(|b| {
                    let mut b = b.clone();
                    for (k, o) in b.options.iter_mut().enumerate() {
                        o.cost = 64 + k as u64 * step;
                    }
                    b
                })
                .collect();
            let q = AllocationProblem { blocks, ..p };
            let q = AllocationProblem { budget: q.budget.clamp(q.min_cost(), q.min_cost() + 30 * step), ..q };
            assert_eq!(greedy_allocate(&q).unwrap().total_loss, dp_oracle(&q, 1).unwrap().total_loss);
        }
    }

    #[test]
    fn bit_floors() {
        let mut p = unit_instance(&[4.0, 1.0, 0.5], &[3.0, 2.0, 1.8], 4);
        p.apply_bit_floors(|id| (id == "a").then_some(3));
        assert_eq!(p.blocks[0].options[0].bits, 3);
        assert_eq!(p.blocks[1].options[0].bits, 2);
        p.apply_bit_floors(|_| Some(99));
        assert_eq!(p.blocks[0].options.len(), 1);
    }
}
