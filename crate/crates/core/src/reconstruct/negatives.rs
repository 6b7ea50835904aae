use rand::seq::SliceRandom;
use rand::Rng;

use super::DocRef;
use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, Mat};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Row indices ordered by descending cosine to `query`, ties by row index.
pub fn rank_by_cosine(embeddings: &Mat, query: &[f64]) -> Vec<usize> {
    let sims: Vec<f64> = (0..embeddings.rows)
        .map(|i| cosine(embeddings.row(i), query))
        .collect();
    let mut order: Vec<usize> = (0..embeddings.rows).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// Mid-tail rank window for a corpus of `n` rows, clipped to the corpus.
pub fn default_window(n: usize) -> (usize, usize) {
    let lo = ((0.6 * n as f64).ceil() as usize).max(1);
    (lo.min(n), (lo + 15).min(n))
}

/// Draws `count` refs uniformly from the 1-based rank window `[lo, hi]`
/// after removing `positives`. Results are returned in rank order.
pub fn sample_negatives<R: Rng>(
    embeddings: &Mat,
    refs: &[DocRef],
    query: &[f64],
    positives: &[DocRef],
    window: (usize, usize),
    count: usize,
    rng: &mut R,
) -> Result<Vec<DocRef>> {
    let (lo, hi) = window;
    let size = embeddings.rows;
    if refs.len() != size {
        return Err(Error::ShapeMismatch(format!(
            "{} refs for {} embedding rows",
            refs.len(),
            size
        )));
    }
    if lo < 1 || hi < lo || hi > size {
        return Err(Error::InvalidWindow { lo, hi, size });
    }
    if count > hi - lo + 1 {
        return Err(Error::CountExceedsWindow {
            count,
            available: hi - lo + 1,
        });
    }
    let order = rank_by_cosine(embeddings, query);
    let pool: Vec<usize> = (lo - 1..hi)
        .filter(|&r| !positives.contains(&refs[order[r]]))
        .collect();
    if pool.is_empty() {
        return Err(Error::WindowExcludesAll);
    }
    if count > pool.len() {
        return Err(Error::CountExceedsWindow {
            count,
            available: pool.len(),
        });
    }
    let mut picked: Vec<usize> = pool.choose_multiple(rng, count).copied().collect();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|r| refs[order[r]].clone()).collect())
}

/// Hashed bag-of-tokens vector, used to rank documents before any model
/// has been trained.
pub fn lexical_embedding(tokens: &[usize], special_count: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for &t in tokens {
        if t < special_count {
            continue;
        }
        let h = (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let bucket = (h >> 32) as usize % dim;
        let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    v
}
