//! Image-method multipath simulator for a box room with axis-aligned
//! specular walls.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::csi::{Csi, CsiError, CsiRecord, Split};
use crate::geometry::{Aabb, Vec3};
use crate::numerics::complex::expj;
use crate::renderer::SpectrumGrid;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const RX_MARGIN: f64 = 0.2;
pub const TRAIN_FRACTION: f64 = 0.8;
const MAX_ORDER_LIMIT: usize = 6;
const IMAGE_DEDUP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("receiver {0:?} coincides with the transmitter")]
    Coincident(Vec3),
    #[error("receiver {0:?} lies outside the room")]
    OutsideRoom(Vec3),
    #[error("cannot parse scene")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csi(#[from] CsiError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        self as usize
    }
}

/// Plane `axis = offset`, written `"x=0"` in scene files.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub axis: Axis,
    pub offset: f64,
}

impl Plane {
    pub fn mirror(&self, p: Vec3) -> Vec3 {
        let mut q = p;
        let i = self.axis.index();
        q.0[i] = 2.0 * self.offset - p.0[i];
        q
    }
}

impl FromStr for Plane {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SceneError::Invalid(format!("wall '{s}' is not of the form 'x=<offset>'"));
        let (axis, offset) = s.split_once('=').ok_or_else(bad)?;
        let axis = match axis.trim() {
            "x" | "X" => Axis::X,
            "y" | "Y" => Axis::Y,
            "z" | "Z" => Axis::Z,
            _ => return Err(bad()),
        };
        let offset: f64 = offset.trim().parse().map_err(|_| bad())?;
        if !offset.is_finite() {
            return Err(bad());
        }
        Ok(Plane { axis, offset })
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = match self.axis {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        };
        write!(f, "{a}={}", self.offset)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wall {
    pub plane: Plane,
    pub gamma: Complex64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WallEntry {
    Plane(String),
    Table { plane: String, gamma: [f64; 2] },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    #[serde(default = "default_extents")]
    extents: [f64; 3],
    #[serde(default)]
    walls: Option<Vec<WallEntry>>,
    #[serde(default = "default_gamma")]
    gamma: [f64; 2],
    #[serde(default = "default_tx")]
    tx: [f64; 3],
    #[serde(default = "default_carrier")]
    carrier_hz: f64,
    #[serde(default = "default_spacing")]
    spacing_hz: f64,
    #[serde(default = "default_subcarriers")]
    subcarriers: usize,
    #[serde(default = "default_order")]
    max_order: usize,
    #[serde(default = "default_antennas")]
    antennas: usize,
    #[serde(default)]
    antenna_spacing: Option<f64>,
    #[serde(default)]
    seed: u64,
}

fn default_extents() -> [f64; 3] {
    [5.0, 4.0, 3.0]
}
fn default_gamma() -> [f64; 2] {
    [0.6, 0.0]
}
fn default_tx() -> [f64; 3] {
    [1.2, 2.0, 1.5]
}
fn default_carrier() -> f64 {
    2.4e9
}
fn default_spacing() -> f64 {
    312.5e3
}
fn default_subcarriers() -> usize {
    52
}
fn default_order() -> usize {
    1
}
fn default_antennas() -> usize {
    1
}

/// Room, walls, transmitter and OFDM layout. The room spans
/// `[0, extents]` on each axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub bounds: Aabb,
    pub walls: Vec<Wall>,
    pub tx: Vec3,
    pub carrier_hz: f64,
    pub spacing_hz: f64,
    pub subcarriers: usize,
    pub max_order: usize,
    /// Receive elements along +x, centred on the receiver position.
    pub antennas: usize,
    pub antenna_spacing: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::from_toml("").expect("defaults are valid")
    }
}

impl<'de> Deserialize<'de> for SceneSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let file = SceneFile::deserialize(d)?;
        SceneSpec::from_file(file).map_err(serde::de::Error::custom)
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self, SceneError> {
        let file: SceneFile = toml::from_str(text)?;
        Self::from_file(file)
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    fn from_file(f: SceneFile) -> Result<Self, SceneError> {
        let [ex, ey, ez] = f.extents;
        let bounds = Aabb::new(Vec3::ZERO, Vec3::new(ex, ey, ez));
        let default_gamma = Complex64::new(f.gamma[0], f.gamma[1]);
        let walls = match f.walls {
            None => [("x", 0.0), ("x", ex), ("y", 0.0), ("y", ey), ("z", 0.0), ("z", ez)]
                .iter()
                .map(|(a, o)| Ok(Wall { plane: format!("{a}={o}").parse()?, gamma: default_gamma }))
                .collect::<Result<Vec<_>, SceneError>>()?,
            Some(entries) => entries
                .into_iter()
                .map(|e| match e {
                    WallEntry::Plane(p) => Ok(Wall { plane: p.parse()?, gamma: default_gamma }),
                    WallEntry::Table { plane, gamma } => {
                        Ok(Wall { plane: plane.parse()?, gamma: Complex64::new(gamma[0], gamma[1]) })
                    }
                })
                .collect::<Result<Vec<_>, SceneError>>()?,
        };
        let spacing = f.antenna_spacing.unwrap_or(SPEED_OF_LIGHT / f.carrier_hz / 2.0);
        let spec = SceneSpec {
            bounds,
            walls,
            tx: Vec3(f.tx),
            carrier_hz: f.carrier_hz,
            spacing_hz: f.spacing_hz,
            subcarriers: f.subcarriers,
            max_order: f.max_order,
            antennas: f.antennas,
            antenna_spacing: spacing,
            seed: f.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Invalid(m));
        if !self.bounds.is_valid() {
            return bad("room extents must be positive and finite".into());
        }
        if !self.bounds.contains(self.tx) {
            return bad(format!("transmitter {:?} lies outside the room", self.tx));
        }
        if let Some(w) = self.walls.iter().find(|w| !w.gamma.is_finite() || w.gamma.norm() > 1.0) {
            return bad(format!("wall {} has |Γ| = {} > 1", w.plane, w.gamma.norm()));
        }
        if self.subcarriers == 0 {
            return bad("need at least one subcarrier".into());
        }
        if !(self.carrier_hz > 0.0 && self.carrier_hz.is_finite()) || !(self.spacing_hz >= 0.0 && self.spacing_hz.is_finite()) {
            return bad("carrier must be positive and spacing non-negative".into());
        }
        if self.max_order > MAX_ORDER_LIMIT {
            return bad(format!("max_order {} exceeds {MAX_ORDER_LIMIT}", self.max_order));
        }
        if self.antennas == 0 || !(self.antenna_spacing >= 0.0 && self.antenna_spacing.is_finite()) {
            return bad("need at least one antenna and a finite spacing".into());
        }
        Ok(())
    }

    /// `f_c + k·Δf`.
    pub fn frequency(&self, k: usize) -> f64 {
        self.carrier_hz + k as f64 * self.spacing_hz
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.subcarriers).map(|k| self.frequency(k)).collect()
    }

    pub fn antenna_positions(&self, rx: Vec3) -> Vec<Vec3> {
        let mid = (self.antennas as f64 - 1.0) / 2.0;
        (0..self.antennas).map(|n| rx + Vec3::new((n as f64 - mid) * self.antenna_spacing, 0.0, 0.0)).collect()
    }

    pub fn with_tx(&self, tx: Vec3) -> Self {
        Self { tx, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathInfo {
    pub length: f64,
    /// Product of the reflection coefficients along the path.
    pub reflection: Complex64,
    /// Unit vector from the receiver toward the (image) source.
    pub direction: Vec3,
    pub order: usize,
}

impl PathInfo {
    /// `λ/(4πd) · ΠΓ` at frequency `f`.
    pub fn amplitude(&self, f: f64) -> Complex64 {
        self.reflection * (SPEED_OF_LIGHT / f / (4.0 * PI * self.length))
    }

    /// `−2π f d / c`.
    pub fn phase(&self, f: f64) -> f64 {
        -2.0 * PI * f * self.length / SPEED_OF_LIGHT
    }

    pub fn contribution(&self, f: f64) -> Complex64 {
        self.amplitude(f) * expj(self.phase(f))
    }

    /// Mean of `|ΔA·ΠΓ|²` over the given frequencies.
    pub fn power(&self, freqs: &[f64]) -> f64 {
        freqs.iter().map(|&f| self.amplitude(f).norm_sqr()).sum::<f64>() / freqs.len() as f64
    }
}

/// Line of sight plus every distinct mirror image up to the scene's order.
pub fn enumerate_paths(scene: &SceneSpec, rx: Vec3) -> Result<Vec<PathInfo>, SceneError> {
    if !rx.is_finite() || !scene.bounds.contains(rx) {
        return Err(SceneError::OutsideRoom(rx));
    }
    if rx.distance(scene.tx) < 1e-12 {
        return Err(SceneError::Coincident(rx));
    }
    // (image position, reflection product, order, last wall)
    let mut images: Vec<(Vec3, Complex64, usize)> = vec![(scene.tx, Complex64::new(1.0, 0.0), 0)];
    let mut frontier: Vec<(Vec3, Complex64, Option<usize>)> = vec![(scene.tx, Complex64::new(1.0, 0.0), None)];
    for order in 1..=scene.max_order {
        let mut next = Vec::new();
        for &(pos, gamma, last) in &frontier {
            for (w, wall) in scene.walls.iter().enumerate() {
                if Some(w) == last {
                    continue;
                }
                next.push((wall.plane.mirror(pos), gamma * wall.gamma, Some(w)));
            }
        }
        for &(pos, gamma, _) in &next {
            if !images.iter().any(|(p, _, _)| p.distance(pos) < IMAGE_DEDUP_TOL) {
                images.push((pos, gamma, order));
            }
        }
        frontier = next;
    }
    images
        .into_iter()
        .filter(|(_, g, _)| *g != Complex64::default())
        .filter_map(|(pos, reflection, order)| {
            let d = pos - rx;
            d.normalized().map(|direction| PathInfo { length: d.norm(), reflection, direction, order })
        })
        .map(Ok)
        .collect()
}

/// `Σ_l λ_k/(4π d_l) · ΠΓ · e^{−j2π f_k d_l / c}`.
pub fn channel_from_paths(paths: &[PathInfo], freqs: &[f64]) -> Vec<Complex64> {
    freqs.iter().map(|&f| paths.iter().map(|p| p.contribution(f)).sum()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRecord {
    pub rx: Vec3,
    pub csi: Csi,
    /// Paths per receive antenna.
    pub paths: Vec<Vec<PathInfo>>,
}

pub fn simulate_channel(scene: &SceneSpec, rx: Vec3) -> Result<ChannelRecord, SceneError> {
    let freqs = scene.frequencies();
    let mut data = Vec::with_capacity(scene.antennas * freqs.len());
    let mut paths = Vec::with_capacity(scene.antennas);
    for pos in scene.antenna_positions(rx) {
        let p = enumerate_paths(scene, pos)?;
        data.extend(channel_from_paths(&p, &freqs));
        paths.push(p);
    }
    Ok(ChannelRecord { rx, csi: Csi::new(scene.antennas, freqs.len(), data)?, paths })
}

/// Train/test assignment: a seeded permutation, first 80% train.
pub fn split_assignment(n: usize, seed: u64) -> Vec<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B17));
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let mut out = vec![Split::Test; n];
    for &i in &idx[..n_train] {
        out[i] = Split::Train;
    }
    out
}

/// Uniform receivers at least [`RX_MARGIN`] from every wall.
pub fn generate_dataset(scene: &SceneSpec, n_rx: usize, seed: u64) -> Result<Vec<CsiRecord>, SceneError> {
    if n_rx == 0 {
        return Err(SceneError::Invalid("n_rx must be at least 1".into()));
    }
    let lo = scene.bounds.min + Vec3([RX_MARGIN; 3]);
    let hi = scene.bounds.max - Vec3([RX_MARGIN; 3]);
    if (0..3).any(|i| hi.0[i] <= lo.0[i]) {
        return Err(SceneError::Invalid("room too small for the receiver margin".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splits = split_assignment(n_rx, seed);
    let mut out = Vec::with_capacity(n_rx);
    while out.len() < n_rx {
        let rx = Vec3(std::array::from_fn(|i| rng.random_range(lo.0[i]..hi.0[i])));
        if scene.antenna_positions(rx).iter().any(|p| p.distance(scene.tx) < 1e-6) {
            continue;
        }
        let rec = simulate_channel(scene, rx)?;
        out.push(CsiRecord::from_csi(rx, scene.tx, &rec.csi, Some(splits[out.len()])));
    }
    Ok(out)
}

/// Per-path power accumulated into the bin of its arrival direction, for
/// the first receive antenna.
pub fn simulate_spectrum(scene: &SceneSpec, rx: Vec3, az_bins: usize, el_bins: usize) -> Result<SpectrumGrid, SceneError> {
    if az_bins == 0 || el_bins == 0 {
        return Err(SceneError::Invalid("spectrum needs at least one bin per axis".into()));
    }
    let freqs = scene.frequencies();
    let mut grid = SpectrumGrid::zeros(az_bins, el_bins);
    for path in enumerate_paths(scene, rx)? {
        let (a, e) = grid.bin_of(path.direction);
        grid.values[a * el_bins + e] += path.power(&freqs);
    }
    Ok(grid)
}

#[derive(Serialize)]
struct PathRow {
    length: f64,
    reflection_re: f64,
    reflection_im: f64,
    direction: Vec3,
    order: usize,
}

/// JSON listing of the paths to one receiver; handy for inspection.
pub fn paths_json(paths: &[PathInfo]) -> String {
    let rows: Vec<PathRow> = paths
        .iter()
        .map(|p| PathRow {
            length: p.length,
            reflection_re: p.reflection.re,
            reflection_im: p.reflection.im,
            direction: p.direction,
            order: p.order,
        })
        .collect();
    serde_json::to_string_pretty(&rows).expect("paths serialize")
}
