//! Semantic class space and the directed class graph built over it.
//!
//! Every seen class gets `k1` outgoing edges to its nearest seen classes and
//! `k2` outgoing edges to its nearest unseen classes, weighted by
//! `exp(-distance)`. Every unseen class only points to itself with weight 1,
//! which gives the weight matrix the block layout
//!
//! ```text
//! W = | R1  R2 |
//!     |  0   I |
//! ```

use std::collections::{HashMap, HashSet};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type ClassId = String;

/// Seen and unseen classes together with their semantic vectors.
#[derive(Debug, Clone)]
pub struct SemanticSpace {
    seen: Vec<ClassId>,
    unseen: Vec<ClassId>,
    vectors: HashMap<ClassId, Vec<f64>>,
    dim: usize,
}

impl SemanticSpace {
    pub fn new(
        seen: Vec<ClassId>,
        unseen: Vec<ClassId>,
        vectors: HashMap<ClassId, Vec<f64>>,
    ) -> Result<Self> {
        if seen.is_empty() || unseen.is_empty() {
            return Err(Error::invalid(format!(
                "need at least one seen and one unseen class (got p = {}, q = {})",
                seen.len(),
                unseen.len()
            )));
        }
        let mut ids = HashSet::new();
        for id in seen.iter().chain(&unseen) {
            if !ids.insert(id.as_str()) {
                return Err(Error::DuplicateClass(id.clone()));
            }
        }
        let mut dim = None;
        for id in seen.iter().chain(&unseen) {
            let v = vectors
                .get(id)
                .ok_or_else(|| Error::UnknownClass(id.clone()))?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("semantic vector of `{id}`")));
            }
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: v.len(),
                    })
                }
                _ => {}
            }
        }
        let dim = dim.unwrap_or(0);
        if dim == 0 {
            return Err(Error::invalid("semantic vectors must have dimension >= 1"));
        }
        let vectors = vectors
            .into_iter()
            .filter(|(id, _)| ids.contains(id.as_str()))
            .collect();
        Ok(SemanticSpace {
            seen,
            unseen,
            vectors,
            dim,
        })
    }

    pub fn seen(&self) -> &[ClassId] {
        &self.seen
    }

    pub fn unseen(&self) -> &[ClassId] {
        &self.unseen
    }

    pub fn p(&self) -> usize {
        self.seen.len()
    }

    pub fn q(&self) -> usize {
        self.unseen.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `seen ++ unseen`, the row/column order of the class graph.
    pub fn class_order(&self) -> Vec<ClassId> {
        self.seen.iter().chain(&self.unseen).cloned().collect()
    }

    pub fn vector(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    /// Per-dimension z-scoring across all classes of the space. Constant
    /// dimensions are centered but not scaled.
    pub fn z_scored(&self) -> SemanticSpace {
        let order = self.class_order();
        let n = order.len() as f64;
        let mut mean = vec![0.0; self.dim];
        for id in &order {
            for (m, x) in mean.iter_mut().zip(&self.vectors[id]) {
                *m += x / n;
            }
        }
        let mut sd = vec![0.0; self.dim];
        for id in &order {
            for ((s, x), m) in sd.iter_mut().zip(&self.vectors[id]).zip(&mean) {
                *s += (x - m) * (x - m) / n;
            }
        }
        let sd: Vec<f64> = sd
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        let vectors = order
            .iter()
            .map(|id| {
                let v = self.vectors[id]
                    .iter()
                    .zip(&mean)
                    .zip(&sd)
                    .map(|((x, m), s)| (x - m) / s)
                    .collect();
                (id.clone(), v)
            })
            .collect();
        SemanticSpace {
            seen: self.seen.clone(),
            unseen: self.unseen.clone(),
            vectors,
            dim: self.dim,
        }
    }
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Edge weight `exp(-dist)`.
pub fn edge_weight(dist: f64) -> Result<f64> {
    if !(dist >= 0.0) {
        return Err(Error::invalid(format!(
            "distance must be nonnegative, got {dist}"
        )));
    }
    Ok((-dist).exp())
}

/// The `k` candidates closest to `query`, sorted by (distance, position in
/// `candidates`). The query itself is never returned.
pub fn knn_neighbors(
    query: &str,
    candidates: &[ClassId],
    k: usize,
    space: &SemanticSpace,
) -> Result<Vec<ClassId>> {
    Ok(knn_with_distances(query, candidates, k, space)?
        .into_iter()
        .map(|(idx, _)| candidates[idx].clone())
        .collect())
}

fn knn_with_distances(
    query: &str,
    candidates: &[ClassId],
    k: usize,
    space: &SemanticSpace,
) -> Result<Vec<(usize, f64)>> {
    let qv = space
        .vector(query)
        .ok_or_else(|| Error::UnknownClass(query.to_string()))?;
    let mut scored = Vec::with_capacity(candidates.len());
    for (idx, id) in candidates.iter().enumerate() {
        if id == query {
            continue;
        }
        let v = space
            .vector(id)
            .ok_or_else(|| Error::UnknownClass(id.clone()))?;
        scored.push((idx, euclidean_distance(qv, v)?));
    }
    if k == 0 || k > scored.len() {
        return Err(Error::TooFewCandidates {
            k,
            available: scored.len(),
        });
    }
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Directed class graph in `seen ++ unseen` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGraph {
    pub weights: DMatrix<f64>,
    pub k1: usize,
    pub k2: usize,
    pub class_order: Vec<ClassId>,
    pub p: usize,
}

impl ClassGraph {
    pub fn n(&self) -> usize {
        self.class_order.len()
    }

    pub fn q(&self) -> usize {
        self.n() - self.p
    }

    /// Check the block layout and the per-row edge counts.
    pub fn validate(&self) -> Result<()> {
        let (n, p) = (self.n(), self.p);
        if self.weights.nrows() != n || self.weights.ncols() != n {
            return Err(Error::invalid(format!(
                "weight matrix is {}x{}, expected {n}x{n}",
                self.weights.nrows(),
                self.weights.ncols()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let w = self.weights[(i, j)];
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::invalid(format!("W[{i},{j}] = {w} outside [0,1]")));
                }
                if i >= p {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    if w != expected {
                        return Err(Error::invalid(format!(
                            "unseen row {i} must be an identity row, W[{i},{j}] = {w}"
                        )));
                    }
                }
            }
            if i < p {
                if self.weights[(i, i)] != 0.0 {
                    return Err(Error::invalid(format!("seen self-loop at {i}")));
                }
                let seen_nz = (0..p).filter(|&j| self.weights[(i, j)] != 0.0).count();
                let unseen_nz = (p..n).filter(|&j| self.weights[(i, j)] != 0.0).count();
                if seen_nz != self.k1 || unseen_nz != self.k2 {
                    return Err(Error::invalid(format!(
                        "seen row {i} has {seen_nz}+{unseen_nz} edges, expected {}+{}",
                        self.k1, self.k2
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn build_weight_matrix(space: &SemanticSpace, k1: usize, k2: usize) -> Result<ClassGraph> {
    let (p, q) = (space.p(), space.q());
    if k1 == 0 || k1 >= p {
        return Err(Error::TooFewCandidates {
            k: k1,
            available: p.saturating_sub(1),
        });
    }
    if k2 == 0 || k2 > q {
        return Err(Error::TooFewCandidates {
            k: k2,
            available: q,
        });
    }
    let n = p + q;
    let mut weights = DMatrix::zeros(n, n);
    for (i, id) in space.seen().iter().enumerate() {
        for (j, dist) in knn_with_distances(id, space.seen(), k1, space)? {
            if dist == 0.0 {
                log::warn!(
                    "seen classes `{id}` and `{}` share a semantic vector",
                    space.seen()[j]
                );
            }
            weights[(i, j)] = edge_weight(dist)?;
        }
        for (j, dist) in knn_with_distances(id, space.unseen(), k2, space)? {
            if dist == 0.0 {
                log::warn!(
                    "classes `{id}` and `{}` share a semantic vector",
                    space.unseen()[j]
                );
            }
            weights[(i, p + j)] = edge_weight(dist)?;
        }
    }
    for u in p..n {
        weights[(u, u)] = 1.0;
    }
    Ok(ClassGraph {
        weights,
        k1,
        k2,
        class_order: space.class_order(),
        p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(seen: &[(&str, Vec<f64>)], unseen: &[(&str, Vec<f64>)]) -> SemanticSpace {
        let vectors = seen
            .iter()
            .chain(unseen)
            .map(|(id, v)| (id.to_string(), v.clone()))
            .collect();
        SemanticSpace::new(
            seen.iter().map(|(id, _)| id.to_string()).collect(),
            unseen.iter().map(|(id, _)| id.to_string()).collect(),
            vectors,
        )
        .unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&[1.0; 3], &[1.0; 3]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[2.0], &[0.0]).unwrap(), 2.0);
        assert!(matches!(
            euclidean_distance(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn weight_examples() {
        assert_eq!(edge_weight(0.0).unwrap(), 1.0);
        assert!((edge_weight(std::f64::consts::LN_2).unwrap() - 0.5).abs() < 1e-15);
        // exp(-1), 1/e to 17 digits
        assert!((edge_weight(1.0).unwrap() - 0.367_879_441_171_442_33).abs() < 1e-15);
        assert!(edge_weight(-0.1).is_err());
        assert!(edge_weight(f64::NAN).is_err());
    }

    #[test]
    fn knn_on_a_line() {
        let s = space(
            &[
                ("q", vec![0.0]),
                ("a", vec![1.0]),
                ("b", vec![2.0]),
                ("c", vec![3.0]),
            ],
            &[("u", vec![9.0])],
        );
        let cands: Vec<ClassId> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(knn_neighbors("q", &cands, 2, &s).unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn knn_tie_goes_to_lower_index() {
        let s = space(
            &[("q", vec![0.0]), ("pos", vec![1.0]), ("neg", vec![-1.0])],
            &[("u", vec![9.0])],
        );
        let cands: Vec<ClassId> = vec!["neg".into(), "pos".into()];
        assert_eq!(knn_neighbors("q", &cands, 1, &s).unwrap(), vec!["neg"]);
        let cands: Vec<ClassId> = vec!["pos".into(), "neg".into()];
        assert_eq!(knn_neighbors("q", &cands, 1, &s).unwrap(), vec!["pos"]);
    }

    #[test]
    fn knn_2d_matches_brute_force_sort() {
        let s = space(
            &[
                ("q", vec![0.0, 0.0]),
                ("a", vec![1.0, 0.0]),
                ("b", vec![0.0, 2.0]),
            ],
            &[("c", vec![3.0, 3.0])],
        );
        let cands: Vec<ClassId> = vec!["c".into(), "b".into(), "a".into()];
        assert_eq!(knn_neighbors("q", &cands, 2, &s).unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn knn_rejects_large_k_and_skips_query() {
        let s = space(&[("q", vec![0.0]), ("a", vec![1.0])], &[("u", vec![2.0])]);
        let cands: Vec<ClassId> = vec!["q".into(), "a".into()];
        match knn_neighbors("q", &cands, 2, &s) {
            Err(Error::TooFewCandidates { k: 2, available: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let msg = knn_neighbors("q", &cands, 2, &s).unwrap_err().to_string();
        assert!(msg.contains('2') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn two_seen_one_unseen_weight_matrix() {
        let s = space(
            &[("s1", vec![0.0]), ("s2", vec![1.0])],
            &[("u1", vec![2.0])],
        );
        let g = build_weight_matrix(&s, 1, 1).unwrap();
        let e1 = (-1.0f64).exp();
        let e2 = (-2.0f64).exp();
        let expected = DMatrix::from_row_slice(3, 3, &[0.0, e1, e2, e1, 0.0, e1, 0.0, 0.0, 1.0]);
        assert_eq!(g.weights, expected);
        assert_eq!(g.class_order, vec!["s1", "s2", "u1"]);
        g.validate().unwrap();
    }

    #[test]
    fn rejects_bad_k() {
        let s = space(&[("s1", vec![0.0])], &[("u1", vec![2.0])]);
        assert!(build_weight_matrix(&s, 1, 1).is_err());
        let s = space(
            &[("s1", vec![0.0]), ("s2", vec![1.0])],
            &[("u1", vec![2.0])],
        );
        assert!(build_weight_matrix(&s, 1, 2).is_err());
        assert!(build_weight_matrix(&s, 2, 1).is_err());
    }

    #[test]
    fn rejects_duplicates_and_missing_vectors() {
        let mut v = HashMap::new();
        v.insert("a".to_string(), vec![0.0]);
        v.insert("b".to_string(), vec![1.0]);
        assert!(matches!(
            SemanticSpace::new(vec!["a".into(), "a".into()], vec!["b".into()], v.clone()),
            Err(Error::DuplicateClass(_))
        ));
        assert!(matches!(
            SemanticSpace::new(vec!["a".into()], vec!["a".into()], v.clone()),
            Err(Error::DuplicateClass(_))
        ));
        assert!(matches!(
            SemanticSpace::new(vec!["a".into()], vec!["c".into()], v.clone()),
            Err(Error::UnknownClass(_))
        ));
        v.insert("c".to_string(), vec![1.0, 2.0]);
        assert!(matches!(
            SemanticSpace::new(vec!["a".into()], vec!["c".into()], v),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_vectors_give_unit_weight() {
        let s = space(
            &[("s1", vec![0.0]), ("s2", vec![0.0])],
            &[("u1", vec![0.0])],
        );
        let g = build_weight_matrix(&s, 1, 1).unwrap();
        assert_eq!(g.weights[(0, 1)], 1.0);
        assert_eq!(g.weights[(0, 2)], 1.0);
        g.validate().unwrap();
    }

    #[test]
    fn z_scoring_centers_and_scales() {
        let s = space(
            &[("a", vec![0.0, 5.0]), ("b", vec![2.0, 5.0])],
            &[("c", vec![4.0, 5.0])],
        );
        let z = s.z_scored();
        let col: Vec<f64> = ["a", "b", "c"]
            .iter()
            .map(|id| z.vector(id).unwrap()[0])
            .collect();
        let sd = (8.0f64 / 3.0).sqrt();
        assert!((col[0] + 2.0 / sd).abs() < 1e-12);
        assert!(col[1].abs() < 1e-12);
        assert_eq!(z.vector("a").unwrap()[1], 0.0);
    }
}
