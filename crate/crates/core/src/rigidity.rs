//! Greedy one-sided rigidity test for partial distance graphs in 3D.
//!
//! A vertex joined by at least D+1 known distances to an already rigid point
//! set has a unique position, so growing from a clique certifies uniqueness.
//! A negative answer is inconclusive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edm::{random_mask_indexed, Mask};
use crate::error::{Error, Result};

/// Links required in three dimensions.
pub const DEFAULT_MIN_LINKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdoptionRule {
    /// Count only original links into the adopted set.
    #[default]
    Sound,
    /// After each adoption, mark every pair touching the new vertex as known,
    /// including pairs to vertices not yet adopted. Can certify graphs whose
    /// completion is not unique; kept for comparison.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RigidityResult {
    pub rigid: bool,
    /// Vertices in adoption order, starting with the seed clique.
    pub order: Vec<usize>,
    pub seed_clique: Vec<usize>,
}

/// Greedy rigidity test with the sound adoption rule.
pub fn is_rigid(b: &Mask, min_links: usize) -> RigidityResult {
    is_rigid_with(b, min_links, AdoptionRule::Sound)
}

pub fn is_rigid_with(b: &Mask, min_links: usize, rule: AdoptionRule) -> RigidityResult {
    let n = b.n();
    let mut known: Vec<bool> = b.bits().to_vec();
    let seed_clique = greedy_clique(b);

    let mut adopted = vec![false; n];
    for &v in &seed_clique {
        adopted[v] = true;
    }
    let mut order = seed_clique.clone();
    if seed_clique.len() < n && seed_clique.len() < min_links {
        return RigidityResult {
            rigid: false,
            order,
            seed_clique,
        };
    }
    while order.len() < n {
        let mut best: Option<(usize, usize)> = None;
        for i in (0..n).filter(|&i| !adopted[i]) {
            let links = order.iter().filter(|&&j| known[i * n + j]).count();
            if best.is_none_or(|(_, k)| links > k) {
                best = Some((i, links));
            }
        }
        let Some((p, links)) = best else { break };
        if links < min_links {
            break;
        }
        adopted[p] = true;
        order.push(p);
        if rule == AdoptionRule::Literal {
            for j in 0..n {
                if j != p {
                    known[p * n + j] = true;
                    known[j * n + p] = true;
                }
            }
        }
    }
    RigidityResult {
        rigid: order.len() == n,
        order,
        seed_clique,
    }
}

/// Largest clique found by growing greedily from each start vertex,
/// scanning candidates in index order.
fn greedy_clique(b: &Mask) -> Vec<usize> {
    let n = b.n();
    let mut best: Vec<usize> = Vec::new();
    for i in 0..n {
        let mut c = vec![i];
        for j in 0..n {
            if j != i && c.iter().all(|&k| b.is_known(k, j)) {
                c.push(j);
            }
        }
        if c.len() > best.len() {
            best = c;
        }
    }
    best
}

/// Fraction of `random_mask(n, mu)` draws passing [`is_rigid`].
///
/// Trial `k` uses mask stream `k` of `seed`.
pub fn rigid_fraction(n: usize, mu: f64, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let passed: Result<usize> = (0..trials as u64)
        .into_par_iter()
        .map(|k| {
            let mask = random_mask_indexed(n, mu, seed, k)?;
            Ok(usize::from(is_rigid(&mask, DEFAULT_MIN_LINKS).rigid))
        })
        .sum();
    Ok(passed? as f64 / trials as f64)
}
