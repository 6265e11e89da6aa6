//! Farthest point sampling, capped fixed-radius neighbor search on a
//! uniform grid, and multi-scale grouping.

use nalgebra::Vector3;
use std::cmp::Ordering;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Greedy farthest point sampling.
///
/// The first pick is the lexicographically smallest point (x, then y, then
/// z), so the selected coordinates do not depend on the input order. Each
/// later pick maximizes the squared distance to the already selected set;
/// exact ties go to the smallest index.
pub fn farthest_point_sampling(points: &[Vector3<f64>], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("farthest point sampling with k = 0".into()));
    }
    if k > points.len() {
        return Err(Error::InsufficientPoints {
            needed: k,
            available: points.len(),
        });
    }
    let first = (0..points.len())
        .min_by(|&a, &b| {
            let (p, q) = (&points[a], &points[b]);
            let by = |u: f64, v: f64| u.partial_cmp(&v).unwrap_or(Ordering::Equal);
            by(p.x, q.x)
                .then(by(p.y, q.y))
                .then(by(p.z, q.z))
                .then(a.cmp(&b))
        })
        .expect("non-empty");

    let mut selected = Vec::with_capacity(k);
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    let mut current = first;
    loop {
        selected.push(current);
        if selected.len() == k {
            break;
        }
        min_d2[current] = -1.0;
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = &mut min_d2[i];
            if *d < 0.0 {
                continue;
            }
            let d2 = (p - c).norm_squared();
            if d2 < *d {
                *d = d2;
            }
            if *d > best_d2 {
                best_d2 = *d;
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// A neighbor returned by a radius query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance_squared: f64,
}

type Cell = (i64, i64, i64);

/// Uniform grid over a set of points. Queries may use any radius; the cell
/// size only affects speed.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Vector3<f64>>,
    cell_size: f64,
    cells: HashMap<Cell, Vec<usize>>,
}

impl NeighborIndex {
    pub fn new(points: &[Vector3<f64>], cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("grid cell size {cell_size}")));
        }
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(p, cell_size)).or_default().push(i);
        }
        Ok(Self {
            points: points.to_vec(),
            cell_size,
            cells,
        })
    }

    pub fn for_cloud(cloud: &PointCloud, cell_size: f64) -> Result<Self> {
        Self::new(cloud.points(), cell_size)
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// All points with `|p - center| < radius`, nearest first (ties by
    /// index), truncated to the `cap` nearest.
    pub fn radius_neighbors(&self, center: &Vector3<f64>, radius: f64, cap: usize) -> Vec<Neighbor> {
        if !(radius > 0.0) || cap == 0 {
            return Vec::new();
        }
        let r2 = radius * radius;
        let reach = (radius / self.cell_size).ceil() as i64;
        let (cx, cy, cz) = cell_of(center, self.cell_size);
        let mut found = Vec::new();
        // Sparse grids with a large reach would visit mostly empty cells.
        let span = (2 * reach + 1).pow(3) as usize;
        if span > self.cells.len() {
            for bucket in self.cells.values() {
                self.collect(bucket, center, r2, &mut found);
            }
        } else {
            for dx in -reach..=reach {
                for dy in -reach..=reach {
                    for dz in -reach..=reach {
                        if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                            self.collect(bucket, center, r2, &mut found);
                        }
                    }
                }
            }
        }
        sort_neighbors(&mut found);
        found.truncate(cap);
        found
    }

    /// Nearest point strictly within `radius`, if any.
    pub fn nearest_within(&self, center: &Vector3<f64>, radius: f64) -> Option<Neighbor> {
        self.radius_neighbors(center, radius, 1).into_iter().next()
    }

    fn collect(&self, bucket: &[usize], center: &Vector3<f64>, r2: f64, out: &mut Vec<Neighbor>) {
        for &i in bucket {
            let d2 = (self.points[i] - center).norm_squared();
            if d2 < r2 {
                out.push(Neighbor {
                    index: i,
                    distance_squared: d2,
                });
            }
        }
    }
}

fn cell_of(p: &Vector3<f64>, size: f64) -> Cell {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

pub(crate) fn sort_neighbors(found: &mut [Neighbor]) {
    found.sort_unstable_by(|a, b| {
        a.distance_squared
            .total_cmp(&b.distance_squared)
            .then(a.index.cmp(&b.index))
    });
}

/// Free-function form of [`NeighborIndex::radius_neighbors`] returning indices.
pub fn radius_neighbors(index: &NeighborIndex, center: &Vector3<f64>, radius: f64, cap: usize) -> Vec<usize> {
    index
        .radius_neighbors(center, radius, cap)
        .into_iter()
        .map(|n| n.index)
        .collect()
}

/// Members of one ball around a sampled center.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedNeighborhood {
    pub center: usize,
    pub neighbors: Vec<usize>,
    /// `x_neighbor - x_center`, parallel to `neighbors`.
    pub displacements: Vec<Vector3<f64>>,
}

/// Groups every center at every radius. The center is always the first
/// member of its own groups; the remaining slots go to the nearest other
/// points strictly inside the radius, up to the cap.
///
/// Returns `groups[center_slot][radius_slot]`.
pub fn group_multi_scale(
    cloud: &PointCloud,
    centers: &[usize],
    radii: &[f64],
    caps: &[usize],
) -> Result<Vec<Vec<GroupedNeighborhood>>> {
    validate_scales(radii, caps)?;
    let max_radius = *radii.last().expect("validated non-empty");
    let index = NeighborIndex::for_cloud(cloud, max_radius)?;
    let points = cloud.points();
    let mut out = Vec::with_capacity(centers.len());
    for &c in centers {
        let center = points[c];
        let all = index.radius_neighbors(&center, max_radius, usize::MAX);
        let groups = radii
            .iter()
            .zip(caps)
            .map(|(&r, &cap)| {
                let r2 = r * r;
                let mut neighbors = Vec::with_capacity(cap.min(all.len() + 1));
                neighbors.push(c);
                neighbors.extend(
                    all.iter()
                        .take_while(|n| n.distance_squared < r2)
                        .filter(|n| n.index != c)
                        .map(|n| n.index)
                        .take(cap - 1),
                );
                let displacements = neighbors.iter().map(|&k| points[k] - center).collect();
                GroupedNeighborhood {
                    center: c,
                    neighbors,
                    displacements,
                }
            })
            .collect();
        out.push(groups);
    }
    Ok(out)
}

pub(crate) fn validate_scales(radii: &[f64], caps: &[usize]) -> Result<()> {
    if radii.len() != caps.len() {
        return Err(Error::Config(format!(
            "{} grouping radii but {} caps",
            radii.len(),
            caps.len()
        )));
    }
    if radii.is_empty() {
        return Err(Error::Config("at least one grouping radius is required".into()));
    }
    if radii.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::Config(format!("grouping radii must be positive, got {radii:?}")));
    }
    if radii.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("grouping radii must increase, got {radii:?}")));
    }
    if caps.contains(&0) {
        return Err(Error::Config("grouping caps must be at least 1".into()));
    }
    Ok(())
}
