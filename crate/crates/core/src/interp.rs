//! Heatmaps of spatial transforms, semantic neighbours of transformed
//! subjects, and a PCA projection of category embeddings.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, SceneGraphSample, Split};
use crate::error::{Error, Result};
use crate::model::{init_hidden, Direction, FeatureProvider, PredicateModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub side: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Pixel bytes, `round(255 v)`.
    pub fn pixels(&self) -> Vec<u8> {
        self.values.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect()
    }

    /// Binary PGM (P5), maxval 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.side, self.side).into_bytes();
        out.extend(self.pixels());
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    /// Mass-weighted `(row, col)` centre.
    pub fn centroid(&self) -> (f64, f64) {
        centroid(&self.values, self.side)
    }
}

pub fn centroid(map: &[f64], side: usize) -> (f64, f64) {
    let mut total = 0.0;
    let (mut r, mut c) = (0.0, 0.0);
    for (k, &v) in map.iter().enumerate() {
        total += v;
        r += v * (k / side) as f64;
        c += v * (k % side) as f64;
    }
    if total == 0.0 {
        let mid = (side as f64 - 1.0) / 2.0;
        return (mid, mid);
    }
    (r / total, c / total)
}

fn slot_for(model: &PredicateModel, predicate: usize) -> Result<usize> {
    model
        .slot_of(predicate)
        .ok_or_else(|| Error::NotFound(format!("predicate {predicate} has no learned functions")))
}

/// Spatial transform of one node's mask by a predicate.
pub fn spatial_heatmap(model: &PredicateModel, predicate: usize, direction: Direction, sample: &SceneGraphSample, node: usize) -> Result<Heatmap> {
    let slot = slot_for(model, predicate)?;
    let proposal = sample
        .proposals
        .get(node)
        .ok_or_else(|| Error::NotFound(format!("node {node} in sample `{}`", sample.sample_id)))?;
    let side = model.config().mask_resolution;
    let mask = crate::synthworld::rasterize_mask(&proposal.bbox, side);
    Ok(Heatmap {
        side,
        values: model.apply_spatial(slot, direction, &mask)?,
    })
}

type CategoryVector = (usize, Vec<f64>);

/// Mean final-iteration semantic vector per category over the train split;
/// `None` for categories never observed.
pub fn category_means(model: &PredicateModel, dataset: &Dataset, provider: &dyn FeatureProvider) -> Result<Vec<Option<Vec<f64>>>> {
    let c = dataset.vocabulary.n_categories();
    let d = model.config().feature_dim;
    let per_sample: Vec<Result<Vec<CategoryVector>>> = dataset
        .split(Split::Train)
        .par_iter()
        .map(|s| {
            let out = model.forward_sample(s, provider)?;
            Ok(out
                .states
                .into_iter()
                .zip(&s.proposals)
                .filter_map(|(h, p)| p.category.map(|cat| (cat, h.sem)))
                .collect())
        })
        .collect();
    let mut sums = vec![vec![0.0; d]; c];
    let mut counts = vec![0usize; c];
    for r in per_sample {
        for (cat, v) in r? {
            counts[cat] += 1;
            for (a, x) in sums[cat].iter_mut().zip(&v) {
                *a += x;
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|x| x / n as f64).collect()))
        .collect())
}

/// Input-feature means, for comparison with the learned ones.
pub fn raw_category_means(dataset: &Dataset, provider: &dyn FeatureProvider, side: usize) -> Result<Vec<Option<Vec<f64>>>> {
    let c = dataset.vocabulary.n_categories();
    let mut sums: Vec<Vec<f64>> = vec![vec![0.0; provider.dim()]; c];
    let mut counts = vec![0usize; c];
    for s in dataset.split(Split::Train) {
        for (h, p) in init_hidden(s, provider, side)?.into_iter().zip(&s.proposals) {
            if let Some(cat) = p.category {
                counts[cat] += 1;
                for (a, x) in sums[cat].iter_mut().zip(&h.sem) {
                    *a += x;
                }
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|x| x / n as f64).collect()))
        .collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = crate::autograd::norm(a);
    let nb = crate::autograd::norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub category: usize,
    pub name: String,
    pub similarity: f64,
}

/// Categories ranked by cosine between the transformed subject mean and each
/// category mean, excluding the subject itself. Ties go to the lower index.
pub fn semantic_neighbors(
    model: &PredicateModel,
    means: &[Option<Vec<f64>>],
    names: &[String],
    predicate: usize,
    subject_category: usize,
    top_n: usize,
) -> Result<Vec<Neighbor>> {
    let slot = slot_for(model, predicate)?;
    let unseen = |c: usize| Error::NotFound(format!("category `{}` never observed in the train split", names.get(c).map_or("?", String::as_str)));
    let subject = means.get(subject_category).and_then(Option::as_ref).ok_or_else(|| unseen(subject_category))?;
    let query = model.apply_semantic(slot, Direction::Forward, subject)?;
    let mut out: Vec<Neighbor> = means
        .iter()
        .enumerate()
        .filter(|&(c, m)| c != subject_category && m.is_some())
        .map(|(c, m)| Neighbor {
            category: c,
            name: names.get(c).cloned().unwrap_or_default(),
            similarity: cosine(&query, m.as_ref().expect("filtered")),
        })
        .collect();
    out.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.category.cmp(&b.category)));
    out.truncate(top_n);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedCategory {
    pub category: usize,
    pub name: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub points: Vec<ProjectedCategory>,
    /// Variance captured by each of the two components.
    pub variance: [f64; 2],
}

/// PCA of the observed category means onto two components. Each component's
/// largest-magnitude loading is made positive.
pub fn embedding_projection(means: &[Option<Vec<f64>>], names: &[String]) -> Result<Projection> {
    let rows: Vec<(usize, &Vec<f64>)> = means.iter().enumerate().filter_map(|(c, m)| m.as_ref().map(|m| (c, m))).collect();
    if rows.len() < 3 {
        return Err(Error::InvalidArgument(format!("projection needs at least 3 observed categories, got {}", rows.len())));
    }
    let (n, d) = (rows.len(), rows[0].1.len());
    let x = DMatrix::from_fn(n, d, |r, c| rows[r].1[c]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |r, c| x[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut comps = Vec::with_capacity(2);
    let mut variance = [0.0; 2];
    for (k, &idx) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let mut lead = 0;
        for (i, x) in v.iter().enumerate() {
            if x.abs() > v[lead].abs() {
                lead = i;
            }
        }
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        variance[k] = eig.eigenvalues[idx].max(0.0);
        comps.push(v);
    }
    while comps.len() < 2 {
        comps.push(vec![0.0; d]);
    }
    let points = rows
        .iter()
        .enumerate()
        .map(|(r, &(c, _))| {
            let row = centered.row(r);
            let dot = |v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            ProjectedCategory {
                category: c,
                name: names.get(c).cloned().unwrap_or_default(),
                x: dot(&comps[0]),
                y: dot(&comps[1]),
            }
        })
        .collect();
    Ok(Projection { points, variance })
}

pub fn write_projection_csv(out: &mut dyn Write, projection: &Projection) -> Result<()> {
    let io = |e| Error::io("<csv>", e);
    writeln!(out, "category,x,y").map_err(io)?;
    for p in &projection.points {
        writeln!(out, "{},{},{}", p.name, p.x, p.y).map_err(io)?;
    }
    Ok(())
}
