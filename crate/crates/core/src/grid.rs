//! Discretized search space of controller parameter vectors.
//!
//! All geometry (distances, line membership, kernel inputs) is computed in
//! step-normalized coordinates, i.e. integer grid coordinates, so that the
//! very different scales of the parameters do not bias the search.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One axis of the grid: `min, min + step, ..., max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Dimension {
    pub fn new(name: impl Into<String>, min: f64, max: f64, step: f64) -> Self {
        Self {
            name: name.into(),
            min,
            max,
            step,
        }
    }

    /// Number of grid points along this axis.
    pub fn count(&self) -> Result<usize> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "dimension `{}` has non-positive step {}",
                self.name, self.step
            )));
        }
        if !(self.min <= self.max) {
            return Err(Error::InvalidGrid(format!(
                "dimension `{}` has inverted bounds [{}, {}]",
                self.name, self.min, self.max
            )));
        }
        let span = (self.max - self.min) / self.step;
        let rounded = span.round();
        if (span - rounded).abs() > 1e-6 * rounded.max(1.0) {
            return Err(Error::InvalidGrid(format!(
                "dimension `{}`: step {} does not divide [{}, {}]",
                self.name, self.step, self.min, self.max
            )));
        }
        Ok(rounded as usize + 1)
    }

    fn value(&self, coord: usize) -> f64 {
        let v = self.min + coord as f64 * self.step;
        // strip float noise such as 0.30000000000000004
        (v * 1e12).round() / 1e12
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dimensions: Vec<Dimension>,
}

impl GridSpec {
    /// The robustness-parameter space `(alpha, phi, a, b)`.
    pub fn robust_params() -> Self {
        Self {
            dimensions: vec![
                Dimension::new("alpha", 0.5, 5.0, 0.5),
                Dimension::new("phi", 0.0, 1.0, 0.1),
                Dimension::new("a", 0.0, 1.0, 0.1),
                Dimension::new("b", 0.0, 0.05, 0.005),
            ],
        }
    }

    pub fn counts(&self) -> Result<Vec<usize>> {
        if self.dimensions.is_empty() {
            return Err(Error::InvalidGrid("grid has no dimensions".into()));
        }
        self.dimensions.iter().map(Dimension::count).collect()
    }

    pub fn size(&self) -> Result<usize> {
        Ok(self.counts()?.iter().product())
    }
}

/// A single grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub index: usize,
    pub coords: Vec<usize>,
    pub values: Vec<f64>,
}

impl Action {
    pub fn alpha(&self) -> f64 {
        self.values[0]
    }
    pub fn phi(&self) -> f64 {
        self.values[1]
    }
    pub fn a(&self) -> f64 {
        self.values[2]
    }
    pub fn b(&self) -> f64 {
        self.values[3]
    }
}

/// Up to `e` grid points nearest to a line through an anchor point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSubspace {
    pub anchor: usize,
    /// Unit direction in step-normalized coordinates.
    pub direction: Vec<f64>,
    /// Member indices ordered by their position along the line.
    pub members: Vec<usize>,
}

/// Immutable grid with row-major indexing (first dimension varies slowest).
#[derive(Debug, Clone)]
pub struct Grid {
    spec: GridSpec,
    counts: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        let counts = spec.counts()?;
        let mut strides = vec![1usize; counts.len()];
        for d in (0..counts.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * counts[d + 1];
        }
        let len = counts.iter().product();
        Ok(Self {
            spec,
            counts,
            strides,
            len,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn dims(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, index: usize) -> bool {
        index < self.len
    }

    pub fn coords(&self, index: usize) -> Result<Vec<usize>> {
        if index >= self.len {
            return Err(Error::UnknownAction(index));
        }
        Ok(self.coords_unchecked(index))
    }

    fn coords_unchecked(&self, mut index: usize) -> Vec<usize> {
        self.strides
            .iter()
            .map(|&stride| {
                let c = index / stride;
                index %= stride;
                c
            })
            .collect()
    }

    pub fn index_of(&self, coords: &[usize]) -> Option<usize> {
        if coords.len() != self.dims() {
            return None;
        }
        let mut index = 0;
        for ((&c, &n), &stride) in coords.iter().zip(&self.counts).zip(&self.strides) {
            if c >= n {
                return None;
            }
            index += c * stride;
        }
        Some(index)
    }

    pub fn action(&self, index: usize) -> Result<Action> {
        let coords = self.coords(index)?;
        let values = coords
            .iter()
            .zip(&self.spec.dimensions)
            .map(|(&c, dim)| dim.value(c))
            .collect();
        Ok(Action {
            index,
            coords,
            values,
        })
    }

    /// All grid points in index order.
    pub fn actions(&self) -> Vec<Action> {
        (0..self.len)
            .map(|i| self.action(i).expect("index in range"))
            .collect()
    }

    /// Nearest grid point to a parameter vector given in physical units.
    /// Returns `None` when the vector lies outside the grid bounds by more
    /// than half a step in some dimension.
    pub fn snap(&self, values: &[f64]) -> Option<usize> {
        if values.len() != self.dims() {
            return None;
        }
        let mut coords = Vec::with_capacity(values.len());
        for ((&v, dim), &n) in values.iter().zip(&self.spec.dimensions).zip(&self.counts) {
            let c = ((v - dim.min) / dim.step).round();
            if c < 0.0 || c >= n as f64 {
                return None;
            }
            coords.push(c as usize);
        }
        self.index_of(&coords)
    }

    /// Step-normalized coordinates of a grid point.
    pub fn normalized(&self, index: usize) -> Result<Vec<f64>> {
        Ok(self.coords(index)?.into_iter().map(|c| c as f64).collect())
    }

    /// Euclidean distance in step-normalized coordinates.
    pub fn distance(&self, a: usize, b: usize) -> Result<f64> {
        let ca = self.coords(a)?;
        let cb = self.coords(b)?;
        Ok(ca
            .iter()
            .zip(&cb)
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt())
    }

    /// Draws a uniformly random direction and returns the grid points
    /// nearest to the line through `anchor` along it.
    pub fn draw_line<R: Rng + ?Sized>(
        &self,
        anchor: usize,
        rng: &mut R,
        max_points: usize,
    ) -> Result<LineSubspace> {
        let direction = loop {
            let v: Vec<f64> = (0..self.dims())
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect::<Vec<_>>();
            }
        };
        self.line_through(anchor, &direction, max_points)
    }

    /// Grid points nearest to the line `anchor + t * direction`.
    ///
    /// The line is walked in half-step increments, each sample is rounded to
    /// the nearest grid point, and the `max_points` candidates with the
    /// smallest perpendicular distance (ties: closer to the anchor, then
    /// lower index) are kept.
    pub fn line_through(
        &self,
        anchor: usize,
        direction: &[f64],
        max_points: usize,
    ) -> Result<LineSubspace> {
        let origin = self.normalized(anchor)?;
        if direction.len() != self.dims() {
            return Err(Error::InvalidGrid(format!(
                "direction has {} components, grid has {} dimensions",
                direction.len(),
                self.dims()
            )));
        }
        let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::InvalidGrid("zero line direction".into()));
        }
        let unit: Vec<f64> = direction.iter().map(|x| x / norm).collect();

        let extent = self
            .counts
            .iter()
            .map(|&n| ((n - 1) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
            + 1.0;
        let half_steps = (extent / 0.5).ceil() as i64;

        // index -> (perpendicular distance, signed position along the line)
        let mut candidates: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        let mut coords = vec![0usize; self.dims()];
        for k in -half_steps..=half_steps {
            let t = 0.5 * k as f64;
            let mut inside = true;
            for d in 0..self.dims() {
                let c = (origin[d] + t * unit[d]).round();
                if c < 0.0 || c > (self.counts[d] - 1) as f64 {
                    inside = false;
                    break;
                }
                coords[d] = c as usize;
            }
            if !inside {
                continue;
            }
            let index = self.index_of(&coords).expect("coords in bounds");
            candidates.entry(index).or_insert_with(|| {
                let offset: Vec<f64> = coords
                    .iter()
                    .zip(&origin)
                    .map(|(&c, &o)| c as f64 - o)
                    .collect();
                let along: f64 = offset.iter().zip(&unit).map(|(w, u)| w * u).sum();
                let perp = offset
                    .iter()
                    .zip(&unit)
                    .map(|(w, u)| (w - along * u).powi(2))
                    .sum::<f64>()
                    .sqrt();
                (perp, along)
            });
        }

        let mut ranked: Vec<(usize, f64, f64)> = candidates
            .into_iter()
            .map(|(i, (perp, along))| (i, perp, along))
            .collect();
        ranked.sort_by(|x, y| {
            x.1.total_cmp(&y.1)
                .then(x.2.abs().total_cmp(&y.2.abs()))
                .then(x.0.cmp(&y.0))
        });
        ranked.truncate(max_points.max(1));
        ranked.sort_by(|x, y| x.2.total_cmp(&y.2).then(x.0.cmp(&y.0)));

        Ok(LineSubspace {
            anchor,
            direction: unit,
            members: ranked.into_iter().map(|(i, _, _)| i).collect(),
        })
    }
}
