//! Finite boxes in Z^d: sites, nearest-neighbour bonds, the l1 graph metric
//! and the exponential weight functions used by the decay estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A site of the lattice, as integer coordinates.
pub type Site = Vec<i64>;

/// A finite box `[0, shape_0) x ... x [0, shape_{d-1})` of Z^d with free
/// boundary and nearest-neighbour adjacency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeSpec {
    dimension: usize,
    shape: Vec<usize>,
    sites: Vec<Site>,
    bonds: Vec<(usize, usize)>,
}

/// Builds the box lattice with lexicographically ordered sites.
pub fn build_lattice(dimension: usize, shape: &[usize]) -> Result<LatticeSpec> {
    if dimension == 0 {
        return Err(Error::InvalidGeometry(
            "lattice::build_lattice: dimension must be >= 1".into(),
        ));
    }
    if shape.len() != dimension {
        return Err(Error::InvalidGeometry(format!(
            "lattice::build_lattice: shape has {} extents, dimension is {dimension}",
            shape.len()
        )));
    }
    if let Some(bad) = shape.iter().position(|&e| e == 0) {
        return Err(Error::InvalidGeometry(format!(
            "lattice::build_lattice: extent along axis {bad} is zero"
        )));
    }

    let total: usize = shape.iter().product();
    let mut sites = Vec::with_capacity(total);
    for mut flat in 0..total {
        let mut site = vec![0i64; dimension];
        for axis in (0..dimension).rev() {
            site[axis] = (flat % shape[axis]) as i64;
            flat /= shape[axis];
        }
        sites.push(site);
    }

    let mut bonds = Vec::new();
    for (a, sa) in sites.iter().enumerate() {
        for (b, sb) in sites.iter().enumerate().skip(a + 1) {
            if l1(sa, sb) == 1 {
                bonds.push((a, b));
            }
        }
    }

    Ok(LatticeSpec {
        dimension,
        shape: shape.to_vec(),
        sites,
        bonds,
    })
}

/// Convenience constructor for a one-dimensional chain of `len` sites.
pub fn chain(len: usize) -> Result<LatticeSpec> {
    build_lattice(1, &[len])
}

fn l1(a: &[i64], b: &[i64]) -> u64 {
    a.iter().zip(b).map(|(x, y)| x.abs_diff(*y)).sum()
}

impl LatticeSpec {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    /// Number of sites |Lambda|.
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Nearest-neighbour pairs `(a, b)` with `a < b`, as site indices.
    pub fn bonds(&self) -> &[(usize, usize)] {
        &self.bonds
    }

    pub fn are_adjacent(&self, a: usize, b: usize) -> bool {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        self.bonds.binary_search(&(lo, hi)).is_ok()
    }

    /// Index of a site given by coordinates.
    pub fn index_of(&self, site: &[i64]) -> Result<usize> {
        if site.len() != self.dimension {
            return Err(Error::UnknownSite(format!("{site:?} has wrong dimension")));
        }
        let mut flat = 0usize;
        for (axis, &c) in site.iter().enumerate() {
            if c < 0 || c as usize >= self.shape[axis] {
                return Err(Error::UnknownSite(format!("{site:?} is outside the box")));
            }
            flat = flat * self.shape[axis] + c as usize;
        }
        Ok(flat)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.sites.len() {
            Err(Error::UnknownSite(format!(
                "site index {i} (lattice has {} sites)",
                self.sites.len()
            )))
        } else {
            Ok(())
        }
    }

    /// l1 graph distance between two site indices.
    pub fn graph_distance(&self, i: usize, j: usize) -> Result<u64> {
        self.check_index(i)?;
        self.check_index(j)?;
        Ok(l1(&self.sites[i], &self.sites[j]))
    }

    /// Distance from site `i` to the nearest member of `subset`.
    pub fn set_distance(&self, i: usize, subset: &SiteSubset) -> Result<u64> {
        self.check_index(i)?;
        subset
            .members()
            .iter()
            .map(|&j| l1(&self.sites[i], &self.sites[j]))
            .min()
            .ok_or_else(|| Error::EmptySupport("lattice::set_distance".into()))
    }

    /// Distance between the index set `indices` and `subset`: the minimum over
    /// all pairs. Used for multi-index weights.
    pub fn multi_distance(&self, indices: &[usize], subset: &SiteSubset) -> Result<u64> {
        let mut best: Option<u64> = None;
        for &i in indices {
            let d = self.set_distance(i, subset)?;
            best = Some(best.map_or(d, |b| b.min(d)));
        }
        best.ok_or_else(|| Error::EmptySupport("lattice::multi_distance: no indices".into()))
    }
}

/// A subset of the sites of a lattice, stored as sorted unique indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSubset {
    members: Vec<usize>,
}

impl SiteSubset {
    pub fn new(lattice: &LatticeSpec, members: &[usize]) -> Result<Self> {
        let mut m = members.to_vec();
        m.sort_unstable();
        m.dedup();
        for &i in &m {
            lattice.check_index(i)?;
        }
        Ok(SiteSubset { members: m })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn contains(&self, i: usize) -> bool {
        self.members.binary_search(&i).is_ok()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }
}

/// A positive site weight `rho` whose ratio across every bond stays within
/// `[e^-lambda, e^lambda]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFunction {
    pub values: Vec<f64>,
    pub lipschitz_lambda: f64,
}

impl WeightFunction {
    /// The constant weight `rho = 1` (M = I).
    pub fn identity(lattice: &LatticeSpec) -> Self {
        WeightFunction {
            values: vec![1.0; lattice.len()],
            lipschitz_lambda: f64::MIN_POSITIVE,
        }
    }

    /// Checks the bond ratio bound on every adjacent pair. Returns the worst
    /// `|ln(rho_i / rho_j)|` seen.
    pub fn check_ratio_bound(&self, lattice: &LatticeSpec) -> Result<f64> {
        let mut worst = 0.0f64;
        for &(a, b) in lattice.bonds() {
            let r = (self.values[a] / self.values[b]).ln().abs();
            worst = worst.max(r);
        }
        if worst > self.lipschitz_lambda * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "lattice::WeightFunction: bond log-ratio {worst} exceeds lambda {}",
                self.lipschitz_lambda
            )));
        }
        Ok(worst)
    }
}

/// `rho(i) = exp(kappa * d(i, S))`.
pub fn exponential_weight(
    lattice: &LatticeSpec,
    kappa: f64,
    subset: &SiteSubset,
) -> Result<WeightFunction> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "lattice::exponential_weight: kappa must be positive, got {kappa}"
        )));
    }
    let values = (0..lattice.len())
        .map(|i| lattice.set_distance(i, subset).map(|d| (kappa * d as f64).exp()))
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightFunction {
        values,
        lipschitz_lambda: kappa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn chain_and_square_counts() {
        let c = build_lattice(1, &[4]).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.bonds().len(), 3);
        let sq = build_lattice(2, &[2, 2]).unwrap();
        assert_eq!(sq.len(), 4);
        assert_eq!(sq.bonds().len(), 4);
        assert_eq!(sq.sites()[1], vec![0, 1]);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(
            build_lattice(1, &[0]),
            Err(Error::InvalidGeometry(_))
        ));
        assert!(matches!(build_lattice(0, &[]), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn distances() {
        let c = chain(4).unwrap();
        assert_eq!(c.graph_distance(0, 3).unwrap(), 3);
        assert_eq!(c.graph_distance(2, 2).unwrap(), 0);
        let sq = build_lattice(2, &[2, 2]).unwrap();
        let a = sq.index_of(&[0, 0]).unwrap();
        let b = sq.index_of(&[1, 1]).unwrap();
        assert_eq!(sq.graph_distance(a, b).unwrap(), 2);
        assert!(matches!(c.graph_distance(0, 4), Err(Error::UnknownSite(_))));
    }

    #[test]
    fn set_distance_cases() {
        let c = chain(6).unwrap();
        let s = SiteSubset::new(&c, &[0, 1]).unwrap();
        assert_eq!(c.set_distance(5, &s).unwrap(), 4);
        assert_eq!(c.set_distance(1, &s).unwrap(), 0);
        let empty = SiteSubset::new(&c, &[]).unwrap();
        assert!(matches!(
            c.set_distance(2, &empty),
            Err(Error::EmptySupport(_))
        ));
    }

    #[test]
    fn exponential_weight_values() {
        let c = chain(6).unwrap();
        let s = SiteSubset::new(&c, &[0]).unwrap();
        let w = exponential_weight(&c, 0.3, &s).unwrap();
        assert!((w.values[2] - 0.6f64.exp()).abs() < 1e-15);
        assert_eq!(w.values[0], 1.0);
        assert!((w.values[2] / w.values[3] - (-0.3f64).exp()).abs() < 1e-15);
        w.check_ratio_bound(&c).unwrap();
        assert!(exponential_weight(&c, 0.0, &s).is_err());
        let empty = SiteSubset::new(&c, &[]).unwrap();
        assert!(exponential_weight(&c, 0.3, &empty).is_err());
    }

    fn small_lattice() -> impl Strategy<Value = LatticeSpec> {
        prop_oneof![
            (1usize..=16).prop_map(|n| build_lattice(1, &[n]).unwrap()),
            (1usize..=4, 1usize..=4).prop_map(|(a, b)| build_lattice(2, &[a, b]).unwrap()),
            (1usize..=2, 1usize..=2, 1usize..=4)
                .prop_map(|(a, b, c)| build_lattice(3, &[a, b, c]).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn metric_axioms_exhaustive(lat in small_lattice()) {
            let n = lat.len();
            for i in 0..n {
                prop_assert_eq!(lat.graph_distance(i, i).unwrap(), 0);
                for j in 0..n {
                    let dij = lat.graph_distance(i, j).unwrap();
                    prop_assert_eq!(dij, lat.graph_distance(j, i).unwrap());
                    if i != j { prop_assert!(dij > 0); }
                    for k in 0..n {
                        prop_assert!(lat.graph_distance(i, k).unwrap()
                            <= dij + lat.graph_distance(j, k).unwrap());
                    }
                }
            }
            for &(a, b) in lat.bonds() {
                prop_assert_eq!(lat.graph_distance(a, b).unwrap(), 1);
            }
            let mut sorted = lat.sites().to_vec();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), n);
        }

        #[test]
        fn weights_respect_ratio_bound(lat in small_lattice(), kappa in 0.01f64..2.0, seed in 0usize..100) {
            let s = SiteSubset::new(&lat, &[seed % lat.len()]).unwrap();
            let w = exponential_weight(&lat, kappa, &s).unwrap();
            prop_assert!(w.check_ratio_bound(&lat).is_ok());
            for i in 0..lat.len() {
                for &j in s.members() {
                    prop_assert!(lat.set_distance(i, &s).unwrap() <= lat.graph_distance(i, j).unwrap());
                }
            }
        }
    }
}
