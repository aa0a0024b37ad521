// Copyright 2026 The OSKT Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
use crate::error::{contract_err, Result};

/// Splits `target` seats among clusters of sizes `sizes` proportionally.
///
/// Largest remainder on quotas `target * n_j / N`, with every cluster
/// holding at least one and at most `n_j` seats. Extra seats go to the
/// largest remainder (ties: larger cluster, then lower index); surplus seats
/// created by the one-seat floor are taken from the smallest remainder
/// (ties: smaller cluster, then higher index). Remainders are compared in
/// exact integer arithmetic.
pub fn apportion(sizes: &[usize], target: usize) -> Result<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    if sizes.contains(&0) {
        return Err(contract_err!("cluster sizes {:?} include an empty cluster", sizes));
    }
    if target < sizes.len() || target > total {
        return Err(contract_err!(
            "{} seats outside [{}, {}] for sizes {:?}",
            target,
            sizes.len(),
            total,
            sizes
        ));
    }
    // Remainder q_j - r_j scaled by N.
    let excess = |j: usize, r: usize| (target * sizes[j]) as i128 - (r * total) as i128;
    let mut seats: Vec<usize> = sizes.iter().map(|&n| (target * n / total).max(1)).collect();
    let mut held: usize = seats.iter().sum();
    while held < target {
        let j = (0..sizes.len())
            .filter(|&j| seats[j] < sizes[j])
            .max_by(|&a, &b| {
                excess(a, seats[a])
                    .cmp(&excess(b, seats[b]))
                    .then(sizes[a].cmp(&sizes[b]))
                    .then(b.cmp(&a))
            })
            .expect("target <= total leaves a cluster below its size");
        seats[j] += 1;
        held += 1;
    }
    while held > target {
        let j = (0..sizes.len())
            .filter(|&j| seats[j] > 1)
            .min_by(|&a, &b| {
                excess(a, seats[a])
                    .cmp(&excess(b, seats[b]))
                    .then(sizes[a].cmp(&sizes[b]))
                    .then(b.cmp(&a))
            })
            .expect("target >= cluster count leaves a cluster above one seat");
        seats[j] -= 1;
        held -= 1;
    }
    Ok(seats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_case() {
        assert_eq!(apportion(&[5, 3, 2, 6], 8).unwrap(), vec![3, 1, 1, 3]);
    }

    #[test]
    fn bounds() {
        assert_eq!(apportion(&[4, 1, 7], 3).unwrap(), vec![1, 1, 1]);
        assert_eq!(apportion(&[4, 1, 7], 12).unwrap(), vec![4, 1, 7]);
        assert!(apportion(&[4, 1, 7], 2).is_err());
        assert!(apportion(&[4, 1, 7], 13).is_err());
    }

    #[test]
    fn floor_surplus_is_removed_from_the_most_overrepresented() {
        assert_eq!(apportion(&[1, 1, 8], 3).unwrap(), vec![1, 1, 1]);
        // quotas [0.4, 0.4, 3.2] -> floors [1,1,3] hold 5 > 4 seats
        assert_eq!(apportion(&[1, 1, 8], 4).unwrap(), vec![1, 1, 2]);
    }
}
