//! Torus geometry and symmetric finite-range step kernels.

use std::collections::BTreeMap;
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Tolerance on the total mass of a kernel and on weight equality.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("dimension {0} is below 3; only transient lattices are supported")]
    DimensionTooSmall(usize),
    #[error("torus side length must be positive")]
    EmptyTorus,
    #[error("torus with side {side} in dimension {dim} has too many sites")]
    TorusTooLarge { side: usize, dim: usize },
    #[error("kernel has no offsets")]
    Empty,
    #[error("offset {offset:?} has length {got}, expected {expected}")]
    OffsetDimension {
        offset: Vec<i32>,
        got: usize,
        expected: usize,
    },
    #[error("kernel is not stochastic: {0}")]
    NonStochastic(String),
    #[error("zero offset carries weight {0}")]
    ZeroOffsetWeighted(f64),
    #[error("kernel is not symmetric: offset {offset:?} has weight {weight} but its image {image:?} under {transform} has weight {image_weight}")]
    SymmetryViolation {
        offset: Vec<i32>,
        weight: f64,
        transform: Transform,
        image: Vec<i32>,
        image_weight: f64,
    },
    #[error("unknown kernel preset `{0}` (expected `nn` or `moore-1`)")]
    UnknownPreset(String),
}

/// A generator of the coordinate symmetry group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    /// Exchange of coordinates `i` and `j`.
    Swap(usize, usize),
    /// Negation of coordinate `i`.
    Flip(usize),
}

impl Transform {
    fn apply(self, z: &[i32]) -> Vec<i32> {
        let mut out = z.to_vec();
        match self {
            Transform::Swap(i, j) => out.swap(i, j),
            Transform::Flip(i) => out[i] = -out[i],
        }
        out
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Swap(i, j) => write!(f, "swap of coordinates {i} and {j}"),
            Transform::Flip(i) => write!(f, "sign flip of coordinate {i}"),
        }
    }
}

/// The torus `(Z mod L)^d`, sites indexed row-major with the last
/// coordinate fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GeomSpec", into = "GeomSpec")]
pub struct TorusGeom {
    side: usize,
    dim: usize,
    sites: usize,
}

#[derive(Serialize, Deserialize)]
struct GeomSpec {
    side: usize,
    d: usize,
}

impl TryFrom<GeomSpec> for TorusGeom {
    type Error = KernelError;
    fn try_from(s: GeomSpec) -> Result<Self, KernelError> {
        TorusGeom::new(s.side, s.d)
    }
}

impl From<TorusGeom> for GeomSpec {
    fn from(g: TorusGeom) -> Self {
        GeomSpec {
            side: g.side,
            d: g.dim,
        }
    }
}

impl TorusGeom {
    pub fn new(side: usize, dim: usize) -> Result<Self, KernelError> {
        if dim < 3 {
            return Err(KernelError::DimensionTooSmall(dim));
        }
        if side == 0 {
            return Err(KernelError::EmptyTorus);
        }
        let sites = (0..dim)
            .try_fold(1usize, |acc, _| acc.checked_mul(side))
            .filter(|&n| n <= u32::MAX as usize)
            .ok_or(KernelError::TorusTooLarge { side, dim })?;
        Ok(TorusGeom { side, dim, sites })
    }

    /// Side length `L`.
    pub fn side(&self) -> usize {
        self.side
    }

    /// Dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Site count `N = L^d`.
    pub fn sites(&self) -> usize {
        self.sites
    }

    /// Index of the site with the given (unwrapped) coordinates.
    pub fn index_of(&self, coords: &[i64]) -> usize {
        debug_assert_eq!(coords.len(), self.dim);
        let l = self.side as i64;
        coords
            .iter()
            .fold(0usize, |acc, &c| acc * self.side + c.rem_euclid(l) as usize)
    }

    /// Coordinates in `0..L` of a site index.
    pub fn coords_of(&self, mut index: usize) -> Vec<i64> {
        let mut out = vec![0i64; self.dim];
        for c in out.iter_mut().rev() {
            *c = (index % self.side) as i64;
            index /= self.side;
        }
        out
    }

    /// Reduces every coordinate mod `L` in place.
    pub fn wrap(&self, coords: &mut [i64]) {
        let l = self.side as i64;
        for c in coords {
            *c = c.rem_euclid(l);
        }
    }

    /// Site reached from `site` by displacement `offset`.
    pub fn translate(&self, site: usize, offset: &[i32]) -> usize {
        let mut c = self.coords_of(site);
        for (ci, &o) in c.iter_mut().zip(offset) {
            *ci += i64::from(o);
        }
        self.index_of(&c)
    }
}

/// Vose alias table over `0..n`.
#[derive(Debug, Clone)]
struct AliasTable {
    threshold: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    fn new(weights: &[f64]) -> Self {
        let n = weights.len();
        let total: f64 = weights.iter().sum();
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut threshold = vec![1.0; n];
        let mut alias: Vec<u32> = (0..n as u32).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) =
            (0..n).partition(|&i| scaled[i] < 1.0);
        while let (Some(s), Some(&l)) = (small.pop(), large.last()) {
            threshold[s] = scaled[s];
            alias[s] = l as u32;
            scaled[l] -= 1.0 - scaled[s];
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        AliasTable { threshold, alias }
    }

    #[inline]
    fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> usize {
        let n = self.threshold.len();
        let prod = u128::from(rng.next_u64()) * n as u128;
        let i = (prod >> 64) as usize;
        let frac = (prod as u64) as f64 * (1.0 / 18_446_744_073_709_551_616.0);
        if frac < self.threshold[i] {
            i
        } else {
            self.alias[i] as usize
        }
    }
}

/// A finite-range step distribution on `Z^d`.
///
/// Offsets with zero weight are dropped; the support is stored densely so
/// that sampling is `O(1)` through an alias table.
#[derive(Debug, Clone)]
pub struct Kernel {
    id: String,
    dim: usize,
    offsets: Vec<i32>,
    weights: Vec<f64>,
    range: u32,
    symmetric: bool,
    alias: AliasTable,
}

/// Serialized kernel description: either a named preset or an explicit
/// list of `(offset, weight)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelSpec {
    Preset {
        preset: String,
        d: usize,
    },
    Explicit {
        d: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<String>,
        offsets: Vec<WeightedOffset>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedOffset {
    pub offset: Vec<i32>,
    pub weight: f64,
}

impl KernelSpec {
    pub fn build(&self) -> Result<Kernel, KernelError> {
        match self {
            KernelSpec::Preset { preset, d } => Kernel::preset(preset, *d),
            KernelSpec::Explicit { d, id, offsets } => {
                let k = validate_kernel(*d, offsets.iter().map(|o| (o.offset.clone(), o.weight)))?;
                Ok(match id {
                    Some(id) => k.with_id(id.clone()),
                    None => k,
                })
            }
        }
    }
}

impl TryFrom<KernelSpec> for Kernel {
    type Error = KernelError;
    fn try_from(spec: KernelSpec) -> Result<Self, KernelError> {
        spec.build()
    }
}

impl From<Kernel> for KernelSpec {
    fn from(k: Kernel) -> Self {
        k.to_spec()
    }
}

impl Serialize for Kernel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_spec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Kernel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        KernelSpec::deserialize(d)?
            .build()
            .map_err(serde::de::Error::custom)
    }
}

fn collect_weights(
    dim: usize,
    weights: impl IntoIterator<Item = (Vec<i32>, f64)>,
) -> Result<BTreeMap<Vec<i32>, f64>, KernelError> {
    if dim < 3 {
        return Err(KernelError::DimensionTooSmall(dim));
    }
    let mut map: BTreeMap<Vec<i32>, f64> = BTreeMap::new();
    for (offset, w) in weights {
        if offset.len() != dim {
            return Err(KernelError::OffsetDimension {
                got: offset.len(),
                offset,
                expected: dim,
            });
        }
        if !w.is_finite() || w < 0.0 {
            return Err(KernelError::NonStochastic(format!(
                "offset {offset:?} has weight {w}"
            )));
        }
        *map.entry(offset).or_insert(0.0) += w;
    }
    if map.is_empty() {
        return Err(KernelError::Empty);
    }
    let total: f64 = map.values().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(KernelError::NonStochastic(format!(
            "weights sum to {total}"
        )));
    }
    let zero = vec![0; dim];
    if let Some(&w) = map.get(&zero) {
        if w > 0.0 {
            return Err(KernelError::ZeroOffsetWeighted(w));
        }
    }
    map.retain(|_, w| *w > 0.0);
    Ok(map)
}

fn check_symmetry(dim: usize, map: &BTreeMap<Vec<i32>, f64>) -> Result<(), KernelError> {
    // Transpositions and single sign flips generate the whole group of
    // coordinate permutations and reflections.
    let mut generators: Vec<Transform> = (0..dim).map(Transform::Flip).collect();
    for i in 0..dim {
        for j in i + 1..dim {
            generators.push(Transform::Swap(i, j));
        }
    }
    for (z, &w) in map {
        for &t in &generators {
            let image = t.apply(z);
            let iw = map.get(&image).copied().unwrap_or(0.0);
            if (iw - w).abs() > STOCHASTIC_TOL {
                return Err(KernelError::SymmetryViolation {
                    offset: z.clone(),
                    weight: w,
                    transform: t,
                    image,
                    image_weight: iw,
                });
            }
        }
    }
    Ok(())
}

/// Validates a weight map against the kernel assumptions: stochastic,
/// no mass at the origin, and invariant under coordinate permutations and
/// sign flips.
pub fn validate_kernel(
    dim: usize,
    weights: impl IntoIterator<Item = (Vec<i32>, f64)>,
) -> Result<Kernel, KernelError> {
    let map = collect_weights(dim, weights)?;
    check_symmetry(dim, &map)?;
    Ok(Kernel::from_map(dim, map, true, "custom".into()))
}

impl Kernel {
    fn from_map(dim: usize, map: BTreeMap<Vec<i32>, f64>, symmetric: bool, id: String) -> Self {
        let mut offsets = Vec::with_capacity(map.len() * dim);
        let mut weights = Vec::with_capacity(map.len());
        let mut range = 0u32;
        for (z, w) in map {
            range = range.max(z.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0));
            offsets.extend_from_slice(&z);
            weights.push(w);
        }
        let alias = AliasTable::new(&weights);
        Kernel {
            id,
            dim,
            offsets,
            weights,
            range,
            symmetric,
            alias,
        }
    }

    /// Builds a kernel that is only checked for stochasticity and zero mass
    /// at the origin. Used for degenerate test kernels (e.g. a walk confined
    /// to one axis) that break the permutation symmetry.
    pub fn without_symmetry_check(
        dim: usize,
        weights: impl IntoIterator<Item = (Vec<i32>, f64)>,
    ) -> Result<Kernel, KernelError> {
        let map = collect_weights(dim, weights)?;
        let symmetric = check_symmetry(dim, &map).is_ok();
        Ok(Kernel::from_map(dim, map, symmetric, "unchecked".into()))
    }

    /// Uniform kernel on the `2d` unit vectors.
    pub fn nearest_neighbor(dim: usize) -> Result<Kernel, KernelError> {
        let w = 1.0 / (2 * dim) as f64;
        let pairs = (0..dim).flat_map(|i| {
            [1, -1].into_iter().map(move |s| {
                let mut z = vec![0; dim];
                z[i] = s;
                (z, w)
            })
        });
        Ok(validate_kernel(dim, pairs)?.with_id("nn".into()))
    }

    /// Uniform kernel on the L-infinity ball of the given radius minus the
    /// origin.
    pub fn moore(dim: usize, radius: u32) -> Result<Kernel, KernelError> {
        if dim < 3 {
            return Err(KernelError::DimensionTooSmall(dim));
        }
        let r = radius as i32;
        let side = (2 * r + 1) as usize;
        let count = side.pow(dim as u32) - 1;
        let w = 1.0 / count as f64;
        let mut pairs = Vec::with_capacity(count);
        for idx in 0..side.pow(dim as u32) {
            let mut rem = idx;
            let mut z = vec![0; dim];
            for c in z.iter_mut() {
                *c = (rem % side) as i32 - r;
                rem /= side;
            }
            if z.iter().any(|&c| c != 0) {
                pairs.push((z, w));
            }
        }
        Ok(validate_kernel(dim, pairs)?.with_id(format!("moore-{radius}")))
    }

    /// Named presets: `nn` and `moore-1`.
    pub fn preset(name: &str, dim: usize) -> Result<Kernel, KernelError> {
        match name {
            "nn" => Kernel::nearest_neighbor(dim),
            "moore-1" => Kernel::moore(dim, 1),
            other => Err(KernelError::UnknownPreset(other.to_string())),
        }
    }

    pub fn with_id(mut self, id: String) -> Self {
        self.id = id;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of offsets with positive weight.
    pub fn support_size(&self) -> usize {
        self.weights.len()
    }

    /// Max L-infinity norm over the support.
    pub fn range(&self) -> u32 {
        self.range
    }

    /// Whether the kernel passed the symmetry checks.
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn offset(&self, k: usize) -> &[i32] {
        &self.offsets[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    /// `(offset, weight)` pairs of the support.
    pub fn iter(&self) -> impl Iterator<Item = (&[i32], f64)> + '_ {
        (0..self.support_size()).map(move |k| (self.offset(k), self.weights[k]))
    }

    /// Weight of an arbitrary offset (0 off the support).
    pub fn weight_of(&self, z: &[i32]) -> f64 {
        (0..self.support_size())
            .find(|&k| self.offset(k) == z)
            .map_or(0.0, |k| self.weights[k])
    }

    /// Effective number of neighbours, `1 / sum_x p(x) p(-x)`.
    pub fn kappa(&self) -> f64 {
        let mut neg: Vec<i32> = Vec::with_capacity(self.dim);
        let mut s = 0.0;
        for (z, w) in self.iter() {
            neg.clear();
            neg.extend(z.iter().map(|c| -c));
            s += w * self.weight_of(&neg);
        }
        1.0 / s
    }

    /// Per-coordinate variance of one jump, `sum_z p(z) z_1^2`.
    pub fn sigma2(&self) -> f64 {
        self.iter().map(|(z, w)| w * f64::from(z[0]).powi(2)).sum()
    }

    /// Index into the support of a random step.
    #[inline]
    pub fn sample_index<R: RngCore + ?Sized>(&self, rng: &mut R) -> usize {
        self.alias.sample(rng)
    }

    /// A random step distributed according to the kernel weights.
    #[inline]
    pub fn sample_step<R: RngCore + ?Sized>(&self, rng: &mut R) -> &[i32] {
        self.offset(self.sample_index(rng))
    }

    pub fn to_spec(&self) -> KernelSpec {
        match self.id.as_str() {
            "nn" | "moore-1" => KernelSpec::Preset {
                preset: self.id.clone(),
                d: self.dim,
            },
            _ => KernelSpec::Explicit {
                d: self.dim,
                id: Some(self.id.clone()),
                offsets: self
                    .iter()
                    .map(|(z, w)| WeightedOffset {
                        offset: z.to_vec(),
                        weight: w,
                    })
                    .collect(),
            },
        }
    }

    /// Dense `sites x support` table of translated site indices.
    pub fn neighbor_table(&self, geom: &TorusGeom) -> NeighborTable {
        assert_eq!(geom.dim(), self.dim, "kernel and torus dimensions differ");
        let m = self.support_size();
        let mut table = Vec::with_capacity(geom.sites() * m);
        let mut c = vec![0i64; self.dim];
        for site in 0..geom.sites() {
            let base = geom.coords_of(site);
            for k in 0..m {
                for ((ci, &b), &o) in c.iter_mut().zip(&base).zip(self.offset(k)) {
                    *ci = b + i64::from(o);
                }
                table.push(geom.index_of(&c) as u32);
            }
        }
        NeighborTable { width: m, table }
    }
}

impl PartialEq for Kernel {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.offsets == other.offsets && self.weights == other.weights
    }
}

/// Precomputed `site + offset_k` indices on a torus.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    width: usize,
    table: Vec<u32>,
}

impl NeighborTable {
    #[inline]
    pub fn get(&self, site: usize, k: usize) -> usize {
        self.table[site * self.width + k] as usize
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Integer approximation of a count written in scientific notation
/// (`1e4`, `1e5`); used by CLI parsing.
pub fn parse_count(s: &str) -> Result<u64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{s}: {e}"))?;
    if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0) {
        return Err(format!("{s} is not a nonnegative integer"));
    }
    Ok(v as u64)
}

/// Draws a uniform site.
#[inline]
pub fn random_site<R: RngCore + ?Sized>(geom: &TorusGeom, rng: &mut R) -> usize {
    rng::index(rng, geom.sites())
}
