//! Scattered-point to raster gridding and the spatio-temporal tensor.
//!
//! Grids are north-up: row 0 is the northernmost row and node `(r, c)` sits
//! at `(min_easting + c·dx, max_northing − r·dy)` with the nodes spanning
//! the bounding box inclusively.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spade::{DelaunayTriangulation, FloatTriangulation, HasPosition, Point2, Triangulation};
use thiserror::Error;

use crate::ingest::PointSet;
use crate::par;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("degenerate extent: {0}")]
    DegenerateExtent(String),
    #[error("invalid grid size {height}x{width}: both dimensions must be at least 2")]
    InvalidSize { height: usize, width: usize },
    #[error("triangulation failed: {0}")]
    TriangulationFailure(String),
    #[error("grid spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("sidecar error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_easting: f64,
    pub max_easting: f64,
    pub min_northing: f64,
    pub max_northing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub bbox: BoundingBox,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, bbox: BoundingBox) -> Result<Self, GridError> {
        if height < 2 || width < 2 {
            return Err(GridError::InvalidSize { height, width });
        }
        if !(bbox.max_easting > bbox.min_easting) {
            return Err(GridError::DegenerateExtent("zero easting extent".into()));
        }
        if !(bbox.max_northing > bbox.min_northing) {
            return Err(GridError::DegenerateExtent("zero northing extent".into()));
        }
        Ok(Self { height, width, bbox })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn easting_spacing(&self) -> f64 {
        (self.bbox.max_easting - self.bbox.min_easting) / (self.width - 1) as f64
    }

    pub fn northing_spacing(&self) -> f64 {
        (self.bbox.max_northing - self.bbox.min_northing) / (self.height - 1) as f64
    }

    /// Projected coordinate of node `(row, col)`. Edge nodes land exactly on
    /// the bounding box.
    pub fn node(&self, row: usize, col: usize) -> (f64, f64) {
        let b = &self.bbox;
        let e = if col + 1 == self.width {
            b.max_easting
        } else {
            b.min_easting + (b.max_easting - b.min_easting) * col as f64 / (self.width - 1) as f64
        };
        let n = if row + 1 == self.height {
            b.min_northing
        } else {
            b.max_northing - (b.max_northing - b.min_northing) * row as f64 / (self.height - 1) as f64
        };
        (e, n)
    }
}

/// Tight bounding box of the point coordinates, gridded at `height × width`.
pub fn build_grid_spec(ps: &PointSet, height: usize, width: usize) -> Result<GridSpec, GridError> {
    if ps.records.is_empty() {
        return Err(GridError::EmptyInput);
    }
    let mut bbox = BoundingBox {
        min_easting: f64::INFINITY,
        max_easting: f64::NEG_INFINITY,
        min_northing: f64::INFINITY,
        max_northing: f64::NEG_INFINITY,
    };
    for r in &ps.records {
        bbox.min_easting = bbox.min_easting.min(r.easting);
        bbox.max_easting = bbox.max_easting.max(r.easting);
        bbox.min_northing = bbox.min_northing.min(r.northing);
        bbox.max_northing = bbox.max_northing.max(r.northing);
    }
    GridSpec::new(height, width, bbox)
}

/// One H×W raster of displacement (mm), row-major. Cells flagged in
/// `missing` hold no meaningful value until [`fill_missing`] runs.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementMap {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
    pub epoch_index: usize,
}

impl DisplacementMap {
    /// A fully populated map.
    pub fn from_values(spec: GridSpec, values: Vec<f64>, epoch_index: usize) -> Self {
        assert_eq!(values.len(), spec.len(), "map values must cover the grid");
        let missing = vec![false; values.len()];
        Self {
            spec,
            values,
            missing,
            epoch_index,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.spec.width + col]
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }
}

/// Sets every missing cell to 0 mm and clears the flags.
pub fn fill_missing(mut map: DisplacementMap) -> DisplacementMap {
    for (v, m) in map.values.iter_mut().zip(map.missing.iter_mut()) {
        if *m {
            *v = 0.0;
            *m = false;
        }
    }
    map
}

#[derive(Debug, Clone, Copy)]
struct IndexedVertex {
    position: Point2<f64>,
    index: usize,
}

impl HasPosition for IndexedVertex {
    type Scalar = f64;
    fn position(&self) -> Point2<f64> {
        self.position
    }
}

/// Barycentric stencil of one grid node: up to three (point index, weight)
/// pairs, or none when the node is outside the convex hull.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStencil {
    pub points: [usize; 3],
    pub weights: [f64; 3],
    pub len: u8,
}

/// Linear interpolation weights from a fixed point set onto a fixed grid.
/// Built once from the Delaunay triangulation, then applied to any number
/// of value vectors.
#[derive(Debug, Clone)]
pub struct Interpolator {
    spec: GridSpec,
    n_points: usize,
    stencils: Vec<NodeStencil>,
}

impl Interpolator {
    pub fn new(coords: &[(f64, f64)], spec: GridSpec) -> Result<Self, GridError> {
        if coords.len() < 3 {
            return Err(GridError::TriangulationFailure(format!(
                "need at least 3 points, got {}",
                coords.len()
            )));
        }
        // lexicographic insertion order fixes the diagonal chosen for
        // cocircular quadruples
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by(|&a, &b| {
            coords[a]
                .0
                .total_cmp(&coords[b].0)
                .then(coords[a].1.total_cmp(&coords[b].1))
        });
        let mut tri: DelaunayTriangulation<IndexedVertex> = DelaunayTriangulation::new();
        for &i in &order {
            let (x, y) = coords[i];
            tri.insert(IndexedVertex {
                position: Point2::new(x, y),
                index: i,
            })
            .map_err(|e| GridError::TriangulationFailure(format!("point {i}: {e:?}")))?;
        }
        if tri.num_inner_faces() == 0 {
            return Err(GridError::TriangulationFailure("all points are collinear".into()));
        }
        if tri.num_vertices() != coords.len() {
            return Err(GridError::TriangulationFailure("duplicate points".into()));
        }

        let bary = tri.barycentric();
        let mut buf = Vec::with_capacity(3);
        let mut stencils = Vec::with_capacity(spec.len());
        for r in 0..spec.height {
            for c in 0..spec.width {
                let (e, n) = spec.node(r, c);
                bary.get_weights(Point2::new(e, n), &mut buf);
                let mut s = NodeStencil {
                    points: [0; 3],
                    weights: [0.0; 3],
                    len: buf.len() as u8,
                };
                for (k, (h, w)) in buf.iter().enumerate() {
                    s.points[k] = tri.vertex(*h).data().index;
                    s.weights[k] = *w;
                }
                stencils.push(s);
            }
        }
        Ok(Self {
            spec,
            n_points: coords.len(),
            stencils,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn stencils(&self) -> &[NodeStencil] {
        &self.stencils
    }

    /// Interpolates one value per point onto the grid. Nodes outside the
    /// hull are flagged missing.
    pub fn apply(&self, values: &[f64], epoch_index: usize) -> DisplacementMap {
        assert_eq!(values.len(), self.n_points, "one value per triangulated point");
        let mut out = Vec::with_capacity(self.stencils.len());
        let mut missing = Vec::with_capacity(self.stencils.len());
        for s in &self.stencils {
            if s.len == 0 {
                out.push(0.0);
                missing.push(true);
            } else {
                let v = (0..s.len as usize)
                    .map(|k| values[s.points[k]] * s.weights[k])
                    .sum();
                out.push(v);
                missing.push(false);
            }
        }
        DisplacementMap {
            spec: self.spec,
            values: out,
            missing,
            epoch_index,
        }
    }
}

/// One-shot linear interpolation (triangulate, then apply).
pub fn interpolate_linear(
    coords: &[(f64, f64)],
    values: &[f64],
    spec: &GridSpec,
    epoch_index: usize,
) -> Result<DisplacementMap, GridError> {
    if coords.len() != values.len() {
        return Err(GridError::SpecMismatch(format!(
            "{} coordinates but {} values",
            coords.len(),
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GridError::TriangulationFailure("non-finite value".into()));
    }
    Ok(Interpolator::new(coords, *spec)?.apply(values, epoch_index))
}

/// T×H×W stack of displacement maps on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalTensor {
    pub spec: GridSpec,
    pub steps: Vec<DisplacementMap>,
}

impl SpatioTemporalTensor {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Shape of the batched model input `[batch, time, channel, height, width]`.
    pub fn shape_5d(&self) -> [usize; 5] {
        [1, self.steps.len(), 1, self.spec.height, self.spec.width]
    }

    /// Value at `(t, row, col)`.
    pub fn get(&self, t: usize, row: usize, col: usize) -> f64 {
        self.steps[t].get(row, col)
    }
}

pub fn assemble_tensor(maps: Vec<DisplacementMap>) -> Result<SpatioTemporalTensor, GridError> {
    let spec = maps.first().ok_or(GridError::EmptyInput)?.spec;
    for (i, m) in maps.iter().enumerate() {
        if m.spec != spec {
            return Err(GridError::SpecMismatch(format!("map {i} differs from map 0")));
        }
        if i > 0 && m.epoch_index <= maps[i - 1].epoch_index {
            return Err(GridError::SpecMismatch(format!(
                "epoch index {} at position {i} is not increasing",
                m.epoch_index
            )));
        }
    }
    Ok(SpatioTemporalTensor { spec, steps: maps })
}

/// Interpolated, zero-filled input tensor and target map for a point set.
/// The triangulation is built once and shared by every epoch.
pub fn grid_point_set(
    ps: &PointSet,
    spec: &GridSpec,
    input_epochs: std::ops::Range<usize>,
    target_epoch: usize,
) -> Result<(SpatioTemporalTensor, DisplacementMap), GridError> {
    let interp = Interpolator::new(&ps.coordinates(), *spec)?;
    let epochs: Vec<usize> = input_epochs.collect();
    let maps = par::map_slice(&epochs, |&t| fill_missing(interp.apply(&ps.values_at(t), t)));
    let target = fill_missing(interp.apply(&ps.values_at(target_epoch), target_epoch));
    Ok((assemble_tensor(maps)?, target))
}

/// MiB needed to hold a `[1, t, 1, h, w]` tensor, rounded to 2 decimals.
pub fn estimate_memory(t: usize, h: usize, w: usize, bytes_per_value: usize) -> f64 {
    let bytes = t as f64 * h as f64 * w as f64 * bytes_per_value as f64;
    (bytes / (1u64 << 20) as f64 * 100.0).round() / 100.0
}

/// JSON sidecar written next to a tensor blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSidecar {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub bbox: BoundingBox,
    pub epoch_labels: Vec<String>,
}

fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

/// Writes `<stem>.bin` (little-endian f32, t-major then row-major) and
/// `<stem>.json`.
pub fn save_tensor(
    tensor: &SpatioTemporalTensor,
    epoch_labels: &[String],
    blob: &Path,
) -> Result<(), GridError> {
    let spec = tensor.spec;
    let mut w = BufWriter::new(File::create(blob)?);
    for step in &tensor.steps {
        for v in &step.values {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    let sidecar = TensorSidecar {
        t: tensor.len(),
        h: spec.height,
        w: spec.width,
        bbox: spec.bbox,
        epoch_labels: epoch_labels.to_vec(),
    };
    serde_json::to_writer_pretty(File::create(sidecar_path(blob))?, &sidecar)?;
    Ok(())
}

pub fn load_tensor(blob: &Path) -> Result<(SpatioTemporalTensor, TensorSidecar), GridError> {
    let sidecar: TensorSidecar =
        serde_json::from_reader(BufReader::new(File::open(sidecar_path(blob))?))?;
    let spec = GridSpec::new(sidecar.h, sidecar.w, sidecar.bbox)?;
    let mut bytes = Vec::new();
    File::open(blob)?.read_to_end(&mut bytes)?;
    let expected = sidecar.t * spec.len() * 4;
    if bytes.len() != expected {
        return Err(GridError::SpecMismatch(format!(
            "blob has {} bytes, sidecar implies {expected}",
            bytes.len()
        )));
    }
    let floats: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let steps = floats
        .chunks_exact(spec.len().max(1))
        .enumerate()
        .map(|(t, v)| DisplacementMap::from_values(spec, v.to_vec(), t))
        .collect();
    Ok((SpatioTemporalTensor { spec, steps }, sidecar))
}

pub fn save_map(map: &DisplacementMap, label: &str, blob: &Path) -> Result<(), GridError> {
    let t = SpatioTemporalTensor {
        spec: map.spec,
        steps: vec![map.clone()],
    };
    save_tensor(&t, &[label.to_string()], blob)
}

pub fn load_map(blob: &Path) -> Result<DisplacementMap, GridError> {
    let (mut t, _) = load_tensor(blob)?;
    if t.steps.len() != 1 {
        return Err(GridError::SpecMismatch(format!(
            "expected a single map, found {} steps",
            t.steps.len()
        )));
    }
    Ok(t.steps.remove(0))
}
