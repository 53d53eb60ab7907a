//! Resource partitioning across sequential layers and concurrent branches.

use crate::error::{Error, Result};

/// Split `total` across sequential layers in proportion to `√C_i`.
pub fn interlayer_partition(complexities: &[f64], total: f64) -> Result<Vec<f64>> {
    if complexities.is_empty() {
        return Err(Error::invalid("no layers to partition"));
    }
    if let Some(bad) = complexities.iter().find(|c| !(**c > 0.0) || !c.is_finite()) {
        return Err(Error::invalid(format!("layer complexity must be positive, got {bad}")));
    }
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::invalid(format!("total resources must be positive, got {total}")));
    }
    let roots: Vec<f64> = complexities.iter().map(|c| c.sqrt()).collect();
    let sum: f64 = roots.iter().sum();
    Ok(roots.iter().map(|r| total * r / sum).collect())
}

/// One branch of an [`AllocationPlan`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BranchAllocation {
    pub complexity: f64,
    pub normalized: f64,
    pub ideal: f64,
    /// Realized power-of-two share.
    pub units: u64,
    /// `ideal - units` at termination.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AllocationPlan {
    pub branches: Vec<BranchAllocation>,
    pub total: f64,
    pub ideal_sum: f64,
    pub units_sum: u64,
    /// Some branch's ideal share was below one unit and was raised to one,
    /// so `units_sum` may exceed `ideal_sum`.
    pub clamped: bool,
    /// Doubling steps taken by the refinement loop.
    pub iterations: usize,
}

impl AllocationPlan {
    pub fn units(&self) -> Vec<u64> {
        self.branches.iter().map(|b| b.units).collect()
    }

    /// `max_i C_i / R_i`, the slowest branch under the realized shares.
    pub fn estimated_latency(&self) -> f64 {
        self.branches.iter().map(|b| b.complexity / b.units as f64).fold(0.0, f64::max)
    }
}

fn floor_pow2(x: f64) -> u64 {
    let mut p = 1u64;
    while ((p * 2) as f64) <= x {
        p *= 2;
    }
    p
}

/// Power-of-two branch shares proportional to complexity.
///
/// Ideal shares are truncated to powers of two, then the branch with the
/// largest remaining gap (lowest index on ties) is doubled while the budget
/// allows; a branch that cannot be doubled leaves the candidate queue.
pub fn branch_allocate(complexities: &[f64], total: f64) -> Result<AllocationPlan> {
    let n = complexities.len();
    if n == 0 {
        return Err(Error::invalid("no branches to allocate"));
    }
    if let Some(bad) = complexities.iter().find(|c| !(**c > 0.0) || !c.is_finite()) {
        return Err(Error::invalid(format!("branch complexity must be positive, got {bad}")));
    }
    if !total.is_finite() || total < n as f64 {
        return Err(Error::invalid(format!("{total} resource units cannot cover {n} branches")));
    }

    let min = complexities.iter().cloned().fold(f64::INFINITY, f64::min);
    let normalized: Vec<f64> = complexities.iter().map(|c| c / min).collect();
    let norm_sum: f64 = normalized.iter().sum();
    let ideal: Vec<f64> = normalized.iter().map(|c| total * c / norm_sum).collect();
    let ideal_sum: f64 = ideal.iter().sum();

    let clamped = ideal.iter().any(|&r| r < 1.0);
    let mut units: Vec<u64> = ideal.iter().map(|&r| floor_pow2(r)).collect();
    let mut sum: u64 = units.iter().sum();

    let mut queue: Vec<usize> = (0..n).collect();
    let mut iterations = 0;
    while (sum as f64) < ideal_sum && !queue.is_empty() {
        // queue order is branch order, so the first maximum wins ties
        let mut sel = queue[0];
        for &i in &queue[1..] {
            if ideal[i] - units[i] as f64 > ideal[sel] - units[sel] as f64 {
                sel = i;
            }
        }
        if (sum + units[sel]) as f64 <= ideal_sum {
            sum += units[sel];
            units[sel] *= 2;
            iterations += 1;
            continue;
        }
        queue.retain(|&i| i != sel);
    }

    let branches = (0..n)
        .map(|i| BranchAllocation {
            complexity: complexities[i],
            normalized: normalized[i],
            ideal: ideal[i],
            units: units[i],
            gap: ideal[i] - units[i] as f64,
        })
        .collect();
    Ok(AllocationPlan { branches, total, ideal_sum, units_sum: sum, clamped, iterations })
}
