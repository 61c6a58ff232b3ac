//! Greedy first-kept near-duplicate removal on global embeddings.

use ndarray::Array1;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DedupRemoval {
    pub id: String,
    pub duplicate_of: String,
    pub similarity: f64,
}

/// Scan ids in lexicographic order; an image is removed when its cosine
/// similarity to any previously *kept* image reaches the threshold. The first
/// occurrence of a duplicate cluster is always kept.
///
/// All vectors must be unit-norm (within 1e-6).
pub fn dedup(
    embeddings: &[(String, Array1<f64>)],
    threshold: f64,
) -> Result<Vec<DedupRemoval>> {
    if !(0.0 < threshold && threshold <= 1.0) {
        return Err(Error::Argument(format!(
            "dedup threshold {threshold} must be in (0, 1]"
        )));
    }
    for (id, v) in embeddings {
        let norm = v.dot(v).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Argument(format!(
                "embedding for `{id}` has norm {norm}, expected unit"
            )));
        }
    }
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    order.sort_by(|&a, &b| embeddings[a].0.cmp(&embeddings[b].0));

    let mut kept: Vec<usize> = Vec::new();
    let mut removals = Vec::new();
    for &i in &order {
        let (id, v) = &embeddings[i];
        let mut hit: Option<(usize, f64)> = None;
        for &k in &kept {
            let sim = v.dot(&embeddings[k].1);
            if sim >= threshold {
                hit = Some((k, sim));
                break;
            }
        }
        match hit {
            Some((k, sim)) => removals.push(DedupRemoval {
                id: id.clone(),
                duplicate_of: embeddings[k].0.clone(),
                similarity: sim,
            }),
            None => kept.push(i),
        }
    }
    Ok(removals)
}
