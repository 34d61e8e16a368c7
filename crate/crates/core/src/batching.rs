//! Balls-in-bins batch assignment and the fixed-size batches used in practice.
//!
//! Each example lands in exactly one of `b` batches, independently and
//! uniformly. The sampler shuffles the dataset once and cuts it according to
//! multinomial counts, which has the same joint law as per-example draws.
//! Batch numbers are 1-based in [`schedule`] and 0-based everywhere else.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index standing for a zero-gradient padding example.
pub const SENTINEL: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentPlan {
    dataset_size: usize,
    seed: u64,
    counts: Vec<usize>,
    /// `batch_of[x]` is the 0-based batch of example `x`.
    batch_of: Vec<usize>,
    /// Examples grouped by batch, each group in shuffle order.
    order: Vec<usize>,
    offsets: Vec<usize>,
}

/// Serializable form: counts are informative, the rest is regenerated from the seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentSummary {
    pub dataset_size: usize,
    pub batches: usize,
    pub seed: u64,
    pub counts: Vec<usize>,
}

impl AssignmentSummary {
    pub fn regenerate(&self) -> Result<AssignmentPlan> {
        let plan = assign(self.dataset_size, self.batches, self.seed)?;
        if plan.counts != self.counts {
            return Err(Error::InvalidParameter(
                "counts do not match the seed".into(),
            ));
        }
        Ok(plan)
    }
}

impl AssignmentPlan {
    pub fn dataset_size(&self) -> usize {
        self.dataset_size
    }

    pub fn batches(&self) -> usize {
        self.counts.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn batch_of(&self, example: usize) -> usize {
        self.batch_of[example]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.batch_of
    }

    /// Members of 0-based batch `k`, in shuffle order.
    pub fn batch(&self, k: usize) -> &[usize] {
        &self.order[self.offsets[k]..self.offsets[k + 1]]
    }

    pub fn summary(&self) -> AssignmentSummary {
        AssignmentSummary {
            dataset_size: self.dataset_size,
            batches: self.batches(),
            seed: self.seed,
            counts: self.counts.clone(),
        }
    }
}

/// Multinomial counts with equal cell probabilities via sequential binomials.
pub fn multinomial_counts<R: Rng>(trials: usize, cells: usize, rng: &mut R) -> Result<Vec<usize>> {
    if cells == 0 {
        return Err(Error::InvalidParameter("need at least one batch".into()));
    }
    let mut remaining = trials as u64;
    let mut counts = Vec::with_capacity(cells);
    for k in 0..cells - 1 {
        let c = if remaining == 0 {
            0
        } else {
            let p = 1.0 / (cells - k) as f64;
            Binomial::new(remaining, p)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?
                .sample(rng)
        };
        counts.push(c as usize);
        remaining -= c;
    }
    counts.push(remaining as usize);
    Ok(counts)
}

/// Balls-in-bins assignment of `dataset_size` examples to `b` batches.
pub fn assign(dataset_size: usize, b: usize, seed: u64) -> Result<AssignmentPlan> {
    if b == 0 {
        return Err(Error::InvalidParameter("need at least one batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset_size).collect();
    order.shuffle(&mut rng);
    let counts = multinomial_counts(dataset_size, b, &mut rng)?;
    let mut offsets = Vec::with_capacity(b + 1);
    offsets.push(0);
    let mut batch_of = vec![0; dataset_size];
    for (k, &c) in counts.iter().enumerate() {
        let start = *offsets.last().expect("non-empty");
        for &x in &order[start..start + c] {
            batch_of[x] = k;
        }
        offsets.push(start + c);
    }
    Ok(AssignmentPlan {
        dataset_size,
        seed,
        counts,
        batch_of,
        order,
        offsets,
    })
}

/// Reference sampler drawing each example's batch independently.
pub fn assign_direct(dataset_size: usize, b: usize, seed: u64) -> Result<Vec<usize>> {
    if b == 0 {
        return Err(Error::InvalidParameter("need at least one batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..dataset_size).map(|_| rng.random_range(0..b)).collect())
}

/// Round-robin batch used at 1-based iteration `i`, itself 1-based (`b mod b = b`).
pub fn schedule(iteration: usize, b: usize) -> Result<usize> {
    if iteration == 0 || b == 0 {
        return Err(Error::InvalidParameter(format!(
            "iteration {iteration} and batch count {b} must be positive"
        )));
    }
    Ok((iteration - 1) % b + 1)
}

/// A batch of exactly `B` slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PracticalBatch {
    /// Real examples in increasing order, then [`SENTINEL`] pads.
    pub example_indices: Vec<usize>,
    pub real_count: usize,
    pub truncated_count: usize,
}

impl PracticalBatch {
    pub fn pad_count(&self) -> usize {
        self.example_indices.len() - self.real_count
    }

    pub fn real(&self) -> &[usize] {
        &self.example_indices[..self.real_count]
    }
}

/// Keeps the first `B` members (in the given order) and pads the rest with [`SENTINEL`].
///
/// The kept members are sorted so that gradient sums do not depend on the shuffle.
pub fn pad_truncate(batch: &[usize], batch_size: usize) -> Result<PracticalBatch> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter(
            "batch size must be positive".into(),
        ));
    }
    let real_count = batch.len().min(batch_size);
    let mut example_indices = batch[..real_count].to_vec();
    example_indices.sort_unstable();
    example_indices.resize(batch_size, SENTINEL);
    Ok(PracticalBatch {
        example_indices,
        real_count,
        truncated_count: batch.len() - real_count,
    })
}

/// Practical balls-in-bins: one assignment, every batch padded or truncated to `B`.
pub fn practical_batches(plan: &AssignmentPlan, batch_size: usize) -> Result<Vec<PracticalBatch>> {
    (0..plan.batches())
        .map(|k| pad_truncate(plan.batch(k), batch_size))
        .collect()
}

/// Comparison arm: shuffle once and cut `b` consecutive batches of size `B`.
pub fn shuffle_fixed(
    dataset_size: usize,
    b: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<PracticalBatch>> {
    if b == 0 {
        return Err(Error::InvalidParameter("need at least one batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset_size).collect();
    order.shuffle(&mut rng);
    (0..b)
        .map(|k| {
            let start = (k * batch_size).min(dataset_size);
            let end = ((k + 1) * batch_size).min(dataset_size);
            pad_truncate(&order[start..end], batch_size)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_batch_takes_everything() {
        let plan = assign(37, 1, 4).unwrap();
        assert_eq!(plan.counts(), &[37]);
        assert!(plan.assignment().iter().all(|&k| k == 0));
    }

    #[test]
    fn empty_dataset() {
        let plan = assign(0, 5, 1).unwrap();
        assert_eq!(plan.counts(), &[0; 5]);
        assert!(assign(10, 0, 1).is_err());
    }

    #[test]
    fn counts_match_membership() {
        let plan = assign(1000, 7, 11).unwrap();
        assert_eq!(plan.counts().iter().sum::<usize>(), 1000);
        for k in 0..7 {
            assert_eq!(plan.batch(k).len(), plan.counts()[k]);
            assert!(plan.batch(k).iter().all(|&x| plan.batch_of(x) == k));
        }
    }

    #[test]
    fn summary_round_trips() {
        let plan = assign(500, 4, 99).unwrap();
        let json = serde_json::to_string(&plan.summary()).unwrap();
        let back: AssignmentSummary = serde_json::from_str(&json).unwrap();
        assert_eq!(back.regenerate().unwrap(), plan);
    }

    #[test]
    fn schedule_uses_one_based_wraparound() {
        assert_eq!(schedule(1, 3).unwrap(), 1);
        assert_eq!(schedule(3, 3).unwrap(), 3);
        assert_eq!(schedule(4, 3).unwrap(), 1);
        assert_eq!(schedule(6, 3).unwrap(), 3);
        assert!(schedule(0, 3).is_err());
    }

    #[test]
    fn pad_truncate_examples() {
        let exact = pad_truncate(&[5, 2, 9, 1], 4).unwrap();
        assert_eq!(exact.example_indices, vec![1, 2, 5, 9]);
        assert_eq!((exact.pad_count(), exact.truncated_count), (0, 0));

        let empty = pad_truncate(&[], 4).unwrap();
        assert_eq!(empty.example_indices, vec![SENTINEL; 4]);
        assert_eq!(empty.pad_count(), 4);

        let long = pad_truncate(&[8, 7, 6, 5, 4, 3, 2], 4).unwrap();
        assert_eq!(long.truncated_count, 3);
        assert_eq!(long.real(), &[5, 6, 7, 8]);
        assert!(pad_truncate(&[1], 0).is_err());
    }

    #[test]
    fn shuffle_fixed_partitions_a_prefix() {
        let batches = shuffle_fixed(10, 3, 4, 2).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].real_count, 2);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.real().to_vec()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
