//! Discrete approximations of Ahlfors-regular measures.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use ndarray_linalg::Solve;
use serde::{Deserialize, Serialize};

use crate::elliptic::Grid;
use crate::error::{invalid, Error, Result};

/// Relative slack used for containment and closed-ball tests.
const GEOM_TOL: f64 = 1e-12;

/// Default cap on the number of atoms an IFS expansion may produce.
pub const DEFAULT_MAX_ATOMS: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return invalid("bounding box corners must have equal nonzero dimension");
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
            return invalid("bounding box requires finite lo <= hi on every axis");
        }
        Ok(Self { lo, hi })
    }

    pub fn unit(dim: usize) -> Self {
        Self { lo: vec![0.0; dim], hi: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn diameter(&self) -> f64 {
        (0..self.dim()).map(|a| self.extent(a).powi(2)).sum::<f64>().sqrt()
    }

    pub fn contains(&self, x: ArrayView1<f64>) -> bool {
        let scale = self.diameter().max(1.0);
        x.iter().enumerate().all(|(a, &v)| v >= self.lo[a] - GEOM_TOL * scale && v <= self.hi[a] + GEOM_TOL * scale)
    }

    /// Tight box around the rows of `points`.
    pub fn hull(points: &Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return invalid("hull of an empty point set");
        }
        let lo = points.fold_axis(Axis(0), f64::INFINITY, |m, &x| m.min(x)).to_vec();
        let hi = points.fold_axis(Axis(0), f64::NEG_INFINITY, |m, &x| m.max(x)).to_vec();
        Self::new(lo, hi)
    }
}

/// x ↦ ratio · rotation · x + translation.
#[derive(Clone, Debug, PartialEq)]
pub struct Similitude {
    ratio: f64,
    rotation: Array2<f64>,
    translation: Array1<f64>,
}

impl Similitude {
    pub fn new(ratio: f64, rotation: Array2<f64>, translation: Array1<f64>) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return invalid(format!("similitude ratio {ratio} outside (0,1)"));
        }
        let n = translation.len();
        if n == 0 || rotation.dim() != (n, n) {
            return invalid("rotation must be N×N with N = translation length");
        }
        let gram = rotation.t().dot(&rotation) - Array2::<f64>::eye(n);
        if gram.iter().any(|x| x.abs() > 1e-12) {
            return invalid("rotation is not orthogonal to 1e-12");
        }
        Ok(Self { ratio, rotation, translation })
    }

    /// Homothety plus translation, no rotation.
    pub fn scaling(ratio: f64, translation: &[f64]) -> Result<Self> {
        let n = translation.len();
        Self::new(ratio, Array2::eye(n), Array1::from(translation.to_vec()))
    }

    /// Planar similitude with rotation angle `angle` (radians).
    pub fn planar(ratio: f64, angle: f64, translation: [f64; 2]) -> Result<Self> {
        let (s, c) = angle.sin_cos();
        let rot = ndarray::arr2(&[[c, -s], [s, c]]);
        Self::new(ratio, rot, Array1::from(translation.to_vec()))
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.rotation.dot(&x) * self.ratio + &self.translation
    }

    /// Unique fixed point of the contraction.
    pub fn fixed_point(&self) -> Result<Array1<f64>> {
        let n = self.dim();
        let m = Array2::<f64>::eye(n) - &self.rotation * self.ratio;
        m.solve(&self.translation).map_err(|e| Error::Numerical(format!("fixed point: {e}")))
    }
}

/// Atoms with nonnegative quadrature weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Array2<f64>,
    weights: Array1<f64>,
    nominal_dim: f64,
    label: String,
    bbox: BBox,
}

impl DiscreteMeasure {
    pub fn new(
        atoms: Array2<f64>,
        weights: Array1<f64>,
        nominal_dim: f64,
        label: impl Into<String>,
        bbox: BBox,
    ) -> Result<Self> {
        let n = atoms.ncols();
        if atoms.nrows() == 0 {
            return invalid("a measure needs at least one atom");
        }
        if bbox.dim() != n {
            return invalid("bounding box dimension differs from atom dimension");
        }
        if weights.len() != atoms.nrows() {
            return invalid("one weight per atom required");
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid("weights must be finite and nonnegative");
        }
        if weights.sum() <= 0.0 {
            return invalid("total mass must be positive");
        }
        if !(nominal_dim >= 0.0 && nominal_dim <= n as f64) {
            return invalid(format!("nominal dimension {nominal_dim} outside [0, {n}]"));
        }
        if atoms.iter().any(|x| !x.is_finite()) {
            return invalid("atom coordinates must be finite");
        }
        if let Some(i) = (0..atoms.nrows()).find(|&i| !bbox.contains(atoms.row(i))) {
            return invalid(format!("atom {i} lies outside the bounding box"));
        }
        Ok(Self { atoms, weights, nominal_dim, label: label.into(), bbox })
    }

    /// Zero-atom measure; the neutral element of [`union_measure`].
    pub fn null(ambient_dim: usize) -> Self {
        Self {
            atoms: Array2::zeros((0, ambient_dim)),
            weights: Array1::zeros(0),
            nominal_dim: 0.0,
            label: "null".into(),
            bbox: BBox::new(vec![0.0; ambient_dim], vec![0.0; ambient_dim]).expect("valid box"),
        }
    }

    pub fn ambient_dim(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn len(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn atoms(&self) -> &Array2<f64> {
        &self.atoms
    }

    pub fn atom(&self, k: usize) -> ArrayView1<'_, f64> {
        self.atoms.row(k)
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.sum()
    }

    pub fn nominal_dim(&self) -> f64 {
        self.nominal_dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    /// Same atoms with every weight multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return invalid("mass scale must be positive");
        }
        let mut out = self.clone();
        out.weights *= c;
        Ok(out)
    }

    pub fn with_bbox(&self, bbox: BBox) -> Result<Self> {
        Self::new(self.atoms.clone(), self.weights.clone(), self.nominal_dim, self.label.clone(), bbox)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Smallest positive distance between two atoms.
    pub fn min_spacing(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in 0..i {
                let d = dist(self.atom(i), self.atom(j));
                if d > 0.0 && d < best {
                    best = d;
                }
            }
        }
        best
    }

    /// Largest distance between two atoms.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.len() {
            for j in 0..i {
                best = best.max(dist(self.atom(i), self.atom(j)));
            }
        }
        best
    }

    /// μ of the closed ball B(x, r).
    pub fn ball_mass(&self, x: ArrayView1<f64>, r: f64) -> f64 {
        let rr = r * (1.0 + GEOM_TOL);
        (0..self.len()).filter(|&k| dist(self.atom(k), x) <= rr).map(|k| self.weights[k]).sum()
    }
}

pub(crate) fn dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Positive root d of Σ ρ_j^d = 1.
pub fn solve_moran_dimension(ratios: &[f64]) -> Result<f64> {
    if ratios.is_empty() {
        return invalid("Moran equation needs at least one ratio");
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return invalid(format!("ratio {r} outside (0,1)"));
    }
    if ratios.len() == 1 {
        return invalid("a single ratio has no positive Moran dimension");
    }
    let f = |d: f64| ratios.iter().map(|r| r.powf(d)).sum::<f64>() - 1.0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while f(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let d = if f(lo).abs() <= f(hi).abs() { lo } else { hi };
    if f(d).abs() > 1e-12 {
        return Err(Error::Numerical(format!("Moran residual {:e}", f(d))));
    }
    Ok(d)
}

/// Depth-fold IFS words applied to a seed.
///
/// The seed is the mean of the maps' fixed points. Word weights are Π ρ^d,
/// renormalized so rounding cannot move the total mass off 1.
pub fn ifs_measure(maps: &[Similitude], depth: usize, max_atoms: usize) -> Result<DiscreteMeasure> {
    if maps.is_empty() {
        return invalid("IFS needs at least one map");
    }
    let n = maps[0].dim();
    if maps.iter().any(|m| m.dim() != n) {
        return invalid("IFS maps act on different dimensions");
    }
    let count = (maps.len() as u128).checked_pow(depth as u32).unwrap_or(u128::MAX);
    if count > max_atoms as u128 {
        return Err(Error::Cap { what: "atom", count: count.min(usize::MAX as u128) as usize, cap: max_atoms });
    }
    let ratios: Vec<f64> = maps.iter().map(Similitude::ratio).collect();
    let d = solve_moran_dimension(&ratios)?;
    let mut seed = Array1::<f64>::zeros(n);
    for m in maps {
        seed += &m.fixed_point()?;
    }
    seed /= maps.len() as f64;

    let mut atoms = seed.insert_axis(Axis(0));
    let mut weights = Array1::from(vec![1.0]);
    for _ in 0..depth {
        let k = atoms.nrows();
        let mut next = Array2::<f64>::zeros((k * maps.len(), n));
        let mut next_w = Array1::<f64>::zeros(k * maps.len());
        for (j, m) in maps.iter().enumerate() {
            let mass = m.ratio().powf(d);
            for i in 0..k {
                next.row_mut(j * k + i).assign(&m.apply(atoms.row(i)));
                next_w[j * k + i] = weights[i] * mass;
            }
        }
        atoms = next;
        weights = next_w;
    }
    let total = weights.sum();
    weights /= total;
    let bbox = BBox::hull(&atoms)?;
    // Overlapping systems have similarity dimension above N; the support cannot.
    DiscreteMeasure::new(atoms, weights, d.min(n as f64), format!("ifs(maps={}, depth={depth})", maps.len()), bbox)
}

/// The two-map middle-thirds Cantor system on [0,1].
pub fn cantor_maps() -> Vec<Similitude> {
    vec![
        Similitude::scaling(1.0 / 3.0, &[0.0]).expect("valid map"),
        Similitude::scaling(1.0 / 3.0, &[2.0 / 3.0]).expect("valid map"),
    ]
}

/// Midpoint rule on the segment [a, b].
pub fn segment_measure(a: &[f64], b: &[f64], count: usize) -> Result<DiscreteMeasure> {
    if a.len() != b.len() || a.is_empty() {
        return invalid("segment endpoints must share a nonzero dimension");
    }
    if count < 2 {
        return invalid("segment needs at least two atoms");
    }
    let len = a.iter().zip(b).map(|(x, y)| (y - x).powi(2)).sum::<f64>().sqrt();
    if len == 0.0 {
        return invalid("coincident segment endpoints");
    }
    let n = a.len();
    let atoms = Array2::from_shape_fn((count, n), |(k, i)| {
        let s = (k as f64 + 0.5) / count as f64;
        a[i] + s * (b[i] - a[i])
    });
    let weights = Array1::from_elem(count, len / count as f64);
    let lo: Vec<f64> = (0..n).map(|i| a[i].min(b[i])).collect();
    let hi: Vec<f64> = (0..n).map(|i| a[i].max(b[i])).collect();
    DiscreteMeasure::new(atoms, weights, 1.0, format!("segment(count={count})"), BBox::new(lo, hi)?)
}

/// Arc-length measure on the boundary of the grid box, one atom per boundary cell.
pub fn boundary_measure(grid: &Grid) -> Result<DiscreteMeasure> {
    boundary_measure_refined(grid, 1)
}

/// Boundary measure with `per_cell` midpoint atoms along each boundary cell edge.
///
/// Atoms sit on ∂Ω; each carries arc length h/per_cell, so the total mass
/// equals the perimeter up to rounding. In 1D the boundary is the two
/// endpoints with unit weight.
pub fn boundary_measure_refined(grid: &Grid, per_cell: usize) -> Result<DiscreteMeasure> {
    if per_cell == 0 {
        return invalid("per_cell must be at least 1");
    }
    let bbox = grid.bbox().clone();
    match grid.dim() {
        1 => {
            let atoms = ndarray::arr2(&[[bbox.lo[0]], [bbox.hi[0]]]);
            DiscreteMeasure::new(atoms, Array1::ones(2), 0.0, "boundary", bbox)
        }
        2 => {
            let mut pts: Vec<[f64; 2]> = Vec::new();
            let mut w: Vec<f64> = Vec::new();
            for axis in 0..2 {
                let other = 1 - axis;
                let n = grid.shape()[axis];
                let h = grid.spacing()[axis];
                for side in [bbox.lo[other], bbox.hi[other]] {
                    for i in 0..n {
                        for k in 0..per_cell {
                            let mut p = [0.0; 2];
                            p[axis] = bbox.lo[axis] + (i as f64 + (k as f64 + 0.5) / per_cell as f64) * h;
                            p[other] = side;
                            pts.push(p);
                            w.push(h / per_cell as f64);
                        }
                    }
                }
            }
            let atoms = Array2::from_shape_fn((pts.len(), 2), |(k, i)| pts[k][i]);
            DiscreteMeasure::new(atoms, Array1::from(w), 1.0, format!("boundary(per_cell={per_cell})"), bbox)
        }
        n => invalid(format!("boundary measure unsupported for dimension {n}")),
    }
}

/// Lebesgue measure restricted to `region`, one atom per grid node with the cell volume.
pub fn lebesgue_measure(grid: &Grid, region: Option<&BBox>) -> Result<DiscreteMeasure> {
    let nodes = grid.nodes();
    let keep: Vec<usize> = (0..nodes.nrows()).filter(|&i| region.is_none_or(|r| r.contains(nodes.row(i)))).collect();
    if keep.is_empty() {
        return invalid("region contains no grid nodes");
    }
    let atoms = nodes.select(Axis(0), &keep);
    let weights = Array1::from_elem(keep.len(), grid.cell_volume());
    let n = grid.dim() as f64;
    DiscreteMeasure::new(atoms, weights, n, "lebesgue", grid.bbox().clone())
}

/// Sum μ1 + μ2: concatenated atoms, nominal dimension the larger of the two.
pub fn union_measure(m1: &DiscreteMeasure, m2: &DiscreteMeasure) -> Result<DiscreteMeasure> {
    if m1.ambient_dim() != m2.ambient_dim() {
        return invalid("union of measures in different ambient dimensions");
    }
    if m2.is_empty() {
        return Ok(m1.clone());
    }
    if m1.is_empty() {
        return Ok(m2.clone());
    }
    let atoms = ndarray::concatenate(Axis(0), &[m1.atoms.view(), m2.atoms.view()])
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let weights = ndarray::concatenate(Axis(0), &[m1.weights.view(), m2.weights.view()])
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let lo = (0..m1.ambient_dim()).map(|a| m1.bbox.lo[a].min(m2.bbox.lo[a])).collect();
    let hi = (0..m1.ambient_dim()).map(|a| m1.bbox.hi[a].max(m2.bbox.hi[a])).collect();
    let label = format!("union[{} (d={}), {} (d={})]", m1.label, m1.nominal_dim, m2.label, m2.nominal_dim);
    DiscreteMeasure::new(atoms, weights, m1.nominal_dim.max(m2.nominal_dim), label, BBox::new(lo, hi)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct AhlforsReport {
    pub radii: Vec<f64>,
    pub lower_const: f64,
    pub upper_const: f64,
    /// Center attaining `upper_const`.
    pub worst_center: Vec<f64>,
}

/// Geometric radii (factor 1/2) from the diameter down to 4·h_min.
pub fn default_radii(m: &DiscreteMeasure) -> Vec<f64> {
    let (hmin, diam) = (m.min_spacing(), m.diameter());
    let mut out = Vec::new();
    let mut r = diam;
    while r >= 4.0 * hmin && r > 0.0 {
        out.push(r);
        r *= 0.5;
    }
    out
}

/// Extremes of μ(B(X,r))/r^d over all atoms X and the given radii.
pub fn estimate_ahlfors_constants(m: &DiscreteMeasure, d: f64, radii: &[f64]) -> Result<AhlforsReport> {
    if radii.is_empty() {
        return invalid("empty radii list");
    }
    if m.is_empty() {
        return invalid("Ahlfors constants of an empty measure");
    }
    let hmin = m.min_spacing();
    if let Some(r) = radii.iter().find(|r| !(**r > hmin)) {
        return invalid(format!("radius {r} at or below the resolution floor {hmin}"));
    }
    let (mut lower, mut upper) = (f64::INFINITY, 0.0f64);
    let mut worst = 0usize;
    for c in 0..m.len() {
        let x = m.atom(c);
        for &r in radii {
            let ratio = m.ball_mass(x, r) / r.powf(d);
            lower = lower.min(ratio);
            if ratio > upper {
                upper = ratio;
                worst = c;
            }
        }
    }
    Ok(AhlforsReport {
        radii: radii.to_vec(),
        lower_const: lower,
        upper_const: upper,
        worst_center: m.atom(worst).to_vec(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Sidecar {
    label: String,
    nominal_dim: f64,
    bbox: BBox,
}

/// Sidecar path next to a measure CSV: `foo.csv` → `foo.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes columns x_1..x_N, weight and optionally V, plus the JSON sidecar.
pub fn write_measure_csv(m: &DiscreteMeasure, values: Option<&[f64]>, path: &Path) -> Result<()> {
    if let Some(v) = values {
        if v.len() != m.len() {
            return invalid("one V value per atom required");
        }
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header: Vec<String> = (1..=m.ambient_dim()).map(|i| format!("x_{i}")).collect();
    header.push("weight".into());
    if values.is_some() {
        header.push("V".into());
    }
    w.write_record(&header)?;
    for k in 0..m.len() {
        let mut rec: Vec<String> = m.atom(k).iter().map(|&x| fmt17(x)).collect();
        rec.push(fmt17(m.weights[k]));
        if let Some(v) = values {
            rec.push(fmt17(v[k]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    let side = Sidecar { label: m.label.clone(), nominal_dim: m.nominal_dim, bbox: m.bbox.clone() };
    serde_json::to_writer_pretty(BufWriter::new(File::create(sidecar_path(path))?), &side)?;
    Ok(())
}

/// Reads a measure written by [`write_measure_csv`]; returns the V column when present.
pub fn read_measure_csv(path: &Path) -> Result<(DiscreteMeasure, Option<Vec<f64>>)> {
    let side: Sidecar = serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let header = r.headers()?.clone();
    let n = side.bbox.dim();
    let has_v = match header.len() {
        l if l == n + 1 => false,
        l if l == n + 2 && header.get(n + 1) == Some("V") => true,
        _ => return invalid(format!("unexpected measure CSV header {header:?}")),
    };
    let mut coords = Vec::new();
    let mut weights = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Invalid("short CSV record".into()))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Invalid(format!("bad number: {e}")))
        };
        for i in 0..n {
            coords.push(parse(i)?);
        }
        weights.push(parse(n)?);
        if has_v {
            values.push(parse(n + 1)?);
        }
    }
    let count = weights.len();
    let atoms = Array2::from_shape_vec((count, n), coords).map_err(|e| Error::Invalid(e.to_string()))?;
    let m = DiscreteMeasure::new(atoms, Array1::from(weights), side.nominal_dim, side.label, side.bbox)?;
    Ok((m, has_v.then_some(values)))
}

/// Column slice helper used by experiment code: the k-th coordinate of every atom.
pub fn coordinate(m: &DiscreteMeasure, axis: usize) -> Array1<f64> {
    m.atoms.slice(s![.., axis]).to_owned()
}
