use super::{DistanceMatrix, PhyloError, PhyloTree};

/// Neighbor joining.
///
/// Taxa are processed in lexicographic order and each joined node is
/// appended after the remaining ones, so among pairs with equal Q the
/// first in that scan order is joined. Negative branch lengths are set to
/// zero and the pair's distance is given to the sibling; the last three
/// nodes are joined as a star.
pub fn neighbor_join(d: &DistanceMatrix) -> Result<PhyloTree, PhyloError> {
    let n = d.len();
    if n < 3 {
        return Err(PhyloError::TooFewTaxa { needed: 3, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d.taxa()[a].cmp(&d.taxa()[b]));
    let mut tree = PhyloTree::new();
    let mut active: Vec<usize> = order.iter().map(|&i| tree.add_leaf(&d.taxa()[i])).collect();
    let mut dist: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| order.iter().map(|&j| d.get(i, j)).collect())
        .collect();

    while active.len() > 3 {
        let m = active.len();
        let r: Vec<f64> = dist.iter().map(|row| row.iter().sum()).collect();
        let (mut bi, mut bj, mut best) = (0, 1, f64::INFINITY);
        for i in 0..m {
            for j in i + 1..m {
                let q = (m - 2) as f64 * dist[i][j] - r[i] - r[j];
                if q < best {
                    (bi, bj, best) = (i, j, q);
                }
            }
        }
        let dij = dist[bi][bj];
        let mut li = dij / 2.0 + (r[bi] - r[bj]) / (2.0 * (m - 2) as f64);
        let mut lj = dij - li;
        if li < 0.0 {
            (li, lj) = (0.0, dij);
        } else if lj < 0.0 {
            (li, lj) = (dij, 0.0);
        }
        let u = tree.add_internal();
        tree.connect(u, active[bi], Some(li));
        tree.connect(u, active[bj], Some(lj));
        let row: Vec<f64> = (0..m)
            .filter(|&k| k != bi && k != bj)
            .map(|k| (dist[bi][k] + dist[bj][k] - dij) / 2.0)
            .collect();
        for idx in [bj, bi] {
            active.remove(idx);
            dist.remove(idx);
            for r in &mut dist {
                r.remove(idx);
            }
        }
        for (r, &v) in dist.iter_mut().zip(&row) {
            r.push(v);
        }
        let mut own = row;
        own.push(0.0);
        dist.push(own);
        active.push(u);
    }

    let c = tree.add_internal();
    let (ab, ac, bc) = (dist[0][1], dist[0][2], dist[1][2]);
    for (node, len) in active.iter().zip([(ab + ac - bc) / 2.0, (ab + bc - ac) / 2.0, (ac + bc - ab) / 2.0]) {
        tree.connect(c, *node, Some(len.max(0.0)));
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::super::parse_newick;
    use super::*;

    fn matrix(taxa: &[&str], v: &[f64]) -> DistanceMatrix {
        DistanceMatrix::new(taxa.iter().map(|s| s.to_string()).collect(), v.to_vec()).unwrap()
    }

    fn pendant(t: &PhyloTree, label: &str) -> f64 {
        let leaf = t.leaf(label).unwrap();
        t.neighbors(leaf).next().unwrap().1.unwrap()
    }

    #[test]
    fn three_taxa_star() {
        let d = matrix(&["A", "B", "C"], &[0.0, 3.0, 4.0, 3.0, 0.0, 5.0, 4.0, 5.0, 0.0]);
        let t = neighbor_join(&d).unwrap();
        assert_eq!(t.internal_degrees().get(&3), Some(&1));
        assert!((pendant(&t, "A") - 1.0).abs() < 1e-12);
        assert!((pendant(&t, "B") - 2.0).abs() < 1e-12);
        assert!((pendant(&t, "C") - 3.0).abs() < 1e-12);
    }

    #[test]
    fn additive_quartet() {
        #[rustfmt::skip]
        let d = matrix(&["A", "B", "C", "D"], &[
            0.0, 2.0, 4.0, 4.0,
            2.0, 0.0, 4.0, 4.0,
            4.0, 4.0, 0.0, 2.0,
            4.0, 4.0, 2.0, 0.0,
        ]);
        let t = neighbor_join(&d).unwrap();
        assert!(t.same_topology(&parse_newick("((A,B),(C,D));").unwrap()));
        for l in ["A", "B", "C", "D"] {
            assert!((pendant(&t, l) - 1.0).abs() < 1e-12);
        }
        let back = t.path_length_matrix();
        for i in 0..4 {
            for j in 0..4 {
                assert!((back.get(i, j) - d.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn negative_lengths_are_clamped() {
        #[rustfmt::skip]
        let d = matrix(&["A", "B", "C", "D"], &[
            0.0, 0.1, 5.0, 5.0,
            0.1, 0.0, 1.0, 1.0,
            5.0, 1.0, 0.0, 0.1,
            5.0, 1.0, 0.1, 0.0,
        ]);
        let t = neighbor_join(&d).unwrap();
        for u in 0..t.node_count() {
            assert!(t.neighbors(u).all(|(_, l)| l.unwrap() >= 0.0));
        }
    }

    #[test]
    fn too_few_taxa() {
        let d = matrix(&["A", "B"], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(neighbor_join(&d).unwrap_err(), PhyloError::TooFewTaxa { needed: 3, got: 2 });
    }
}
