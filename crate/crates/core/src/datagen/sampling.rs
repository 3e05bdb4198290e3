use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Report;

/// Pages drawn from the early, middle and late thirds of one report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageSamplingPlan {
    pub report_id: String,
    pub seed: u64,
    /// Sorted page numbers per region: early, middle, late.
    pub regions: [Vec<u32>; 3],
}

impl PageSamplingPlan {
    /// All selected pages in ascending order.
    pub fn pages(&self) -> Vec<u32> {
        let mut all: Vec<u32> = self.regions.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    pub fn len(&self) -> usize {
        self.regions.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits `total` into three parts, earlier parts taking the remainder.
fn split_thirds(total: usize) -> [usize; 3] {
    let base = total / 3;
    let rem = total % 3;
    [base + usize::from(rem > 0), base + usize::from(rem > 1), base]
}

/// Draws up to `n` distinct pages, allocated to each third of the report in
/// proportion to its size.
///
/// Reports with fewer than three pages have no thirds to draw from; every
/// page is then taken and the plan puts them all in the first region.
pub fn sample_pages(report: &Report, n: usize, seed: u64) -> PageSamplingPlan {
    let pages = report.page_numbers();
    let total = pages.len();
    let mut regions: [Vec<u32>; 3] = Default::default();
    if total < 3 {
        regions[0] = pages;
        return PageSamplingPlan {
            report_id: report.report_id.clone(),
            seed,
            regions,
        };
    }
    let sizes = split_thirds(total);
    let n = n.min(total);

    // Largest-remainder allocation; ties go to the earlier region.
    let mut quota = [0usize; 3];
    let mut remainders = [(0usize, 0usize); 3];
    for r in 0..3 {
        quota[r] = n * sizes[r] / total;
        remainders[r] = (n * sizes[r] % total, r);
    }
    let mut left = n - quota.iter().sum::<usize>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, r) in &remainders {
        if left == 0 {
            break;
        }
        quota[r] += 1;
        left -= 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = 0;
    for r in 0..3 {
        let slice = &pages[start..start + sizes[r]];
        let mut chosen: Vec<u32> = index::sample(&mut rng, slice.len(), quota[r].min(slice.len()))
            .into_iter()
            .map(|i| slice[i])
            .collect();
        chosen.sort_unstable();
        regions[r] = chosen;
        start += sizes[r];
    }
    PageSamplingPlan {
        report_id: report.report_id.clone(),
        seed,
        regions,
    }
}
