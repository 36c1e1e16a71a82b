use super::kdtree::KdTree;
use super::weights::WeightVector;
use crate::error::{Error, Result};

/// Outcome of one selection pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Selected ids in ascending order.
    pub ids: Vec<usize>,
    /// The client whose neighbourhood was chosen.
    pub centre: usize,
    /// Per client, in input order: summed distance to its `M − 1` nearest
    /// neighbours.
    pub spread: Vec<f64>,
}

/// Picks the `m` mutually closest clients: the client whose `m − 1` nearest
/// neighbours are closest in total, together with those neighbours.
pub fn select_clients(vectors: &[(usize, &WeightVector)], m: usize) -> Result<Selection> {
    let n = vectors.len();
    if m == 0 || m > n {
        return Err(Error::Config(format!("cannot select {m} of {n} clients")));
    }
    for (_, v) in vectors {
        vectors[0].1.check_compatible(v)?;
    }
    let mut all: Vec<usize> = vectors.iter().map(|(id, _)| *id).collect();
    if m == n {
        all.sort_unstable();
        let centre = all[0];
        return Ok(Selection {
            ids: all,
            centre,
            spread: vec![0.0; n],
        });
    }
    let points: Vec<(usize, &[f64])> = vectors.iter().map(|(id, v)| (*id, v.values.as_slice())).collect();
    let tree = KdTree::build(&points, None)?;
    let mut spread = Vec::with_capacity(n);
    let mut hoods = Vec::with_capacity(n);
    for &(id, v) in vectors {
        let hood = tree.query_knn(&v.values, m - 1, Some(id))?;
        spread.push(hood.iter().map(|(_, d)| d).sum::<f64>());
        hoods.push(hood);
    }
    let mut best = 0;
    for i in 1..n {
        let (a, b) = ((spread[i], vectors[i].0), (spread[best], vectors[best].0));
        if a.0 < b.0 || (a.0 == b.0 && a.1 < b.1) {
            best = i;
        }
    }
    let centre = vectors[best].0;
    let mut ids: Vec<usize> = std::iter::once(centre).chain(hoods[best].iter().map(|(id, _)| *id)).collect();
    ids.sort_unstable();
    Ok(Selection { ids, centre, spread })
}
