//! Seeded fixtures shared by the benchmarks.

use postq::allocator::{AllocBlock, AllocationProblem, BitOption};
use postq::rng::seeded;
use rand::Rng;

/// `n` blocks over bits {2, 3, 4, 8} with convex-decreasing losses and
/// byte-granular costs; the budget sits halfway between min and max cost.
pub fn allocation_problem(n: usize, seed: u64) -> AllocationProblem {
    let mut rng = seeded(seed);
    let blocks: Vec<AllocBlock> = (0..n)
        .map(|i| {
            let weights = rng.random_range(256..65536u64);
            let scale: f64 = rng.random_range(0.1..10.0);
            let options = [2u32, 3, 4, 8]
                .iter()
                .map(|&m| BitOption {
                    bits: m,
                    loss: scale * 4f64.powi(-(m as i32)),
                    cost: weights * m as u64 + 64,
                    latency: None,
                })
                .collect();
            AllocBlock { id: format!("b{i}"), options, saliency: scale, n_weights: weights, group_size: 64 }
        })
        .collect();
    let min: u64 = blocks.iter().map(|b| b.options[0].cost).sum();
    let max: u64 = blocks.iter().map(|b| b.options[3].cost).sum();
    AllocationProblem::new(blocks, (min + max) / 2).expect("feasible fixture")
}

/// `n` uniform random indices below `2^width`.
pub fn indices(n: usize, width: u32, seed: u64) -> Vec<u32> {
    let mut rng = seeded(seed);
    let top = if width == 32 { u32::MAX } else { (1u32 << width) - 1 };
    (0..n).map(|_| rng.random_range(0..=top)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_valid() {
        let p = allocation_problem(50, 1);
        assert!(p.min_cost() <= p.budget);
        assert!(indices(100, 3, 2).iter().all(|&q| q < 8));
    }
}
