//! City-local hexagonal tessellation.
//!
//! Cells are pointy-top hexagons in axial `(q, r)` coordinates laid over an
//! azimuthal-equidistant projection centred on the city origin. The default
//! edge length matches a resolution-9 global hexagon grid (174.4 m), so
//! neighbourhoods, k-rings and distances carry the same meaning as on that
//! grid without the icosahedral machinery.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;
/// Default hexagon edge length in meters.
pub const DEFAULT_EDGE_M: f64 = 174.4;
/// Points farther than this from the origin are rejected.
pub const MAX_PROJECTION_RADIUS_M: f64 = 100_000.0;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Axial neighbour offsets, clockwise starting from the north-east neighbour.
pub const DIRECTIONS: [Axial; 6] = [
    Axial { q: 0, r: 1 },
    Axial { q: 1, r: 0 },
    Axial { q: 1, r: -1 },
    Axial { q: 0, r: -1 },
    Axial { q: -1, r: 0 },
    Axial { q: -1, r: 1 },
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Domain(format!("coordinate ({lat}, {lon}) outside WGS84 bounds")));
        }
        Ok(Self { lat, lon })
    }
}

/// Planar coordinates in meters east / north of the tessellation origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarXY {
    pub x: f64,
    pub y: f64,
}

impl PlanarXY {
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: PlanarXY) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axial hexagon coordinate, independent of any tessellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Axial {
    pub q: i32,
    pub r: i32,
}

impl Axial {
    pub const ORIGIN: Axial = Axial { q: 0, r: 0 };

    pub const fn new(q: i32, r: i32) -> Self {
        Self { q, r }
    }

    pub fn distance(self, other: Axial) -> u32 {
        let dq = self.q - other.q;
        let dr = self.r - other.r;
        ((dq.abs() + dr.abs() + (dq + dr).abs()) / 2) as u32
    }

    fn offset(self, d: Axial, times: i32) -> Axial {
        Axial::new(self.q + d.q * times, self.r + d.r * times)
    }

    pub fn neighbors(self) -> [Axial; 6] {
        DIRECTIONS.map(|d| self.offset(d, 1))
    }

    /// Cells in ring `k` around `self`, clockwise starting from `k` steps
    /// towards the north-east.
    pub fn ring(self, k: u32) -> Vec<Axial> {
        if k == 0 {
            return vec![self];
        }
        let k = k as i32;
        let mut out = Vec::with_capacity(6 * k as usize);
        let mut cur = self.offset(DIRECTIONS[0], k);
        for side in 0..6 {
            let step = DIRECTIONS[(side + 2) % 6];
            for _ in 0..k {
                out.push(cur);
                cur = cur.offset(step, 1);
            }
        }
        out
    }

    /// Spiral order: the centre, then rings 1..=k.
    pub fn spiral(self, k: u32) -> Vec<Axial> {
        let mut out = Vec::with_capacity(disk_size(k));
        for ring in 0..=k {
            out.extend(self.ring(ring));
        }
        out
    }
}

impl fmt::Display for Axial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.q, self.r)
    }
}

/// Number of cells within hex distance `k`: 3k(k+1)+1.
pub const fn disk_size(k: u32) -> usize {
    let k = k as usize;
    3 * k * (k + 1) + 1
}

/// A hexagon bound to the tessellation of one city.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HexCellId {
    pub city_id: Arc<str>,
    pub axial: Axial,
}

impl HexCellId {
    pub fn q(&self) -> i32 {
        self.axial.q
    }

    pub fn r(&self) -> i32 {
        self.axial.r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tessellation {
    pub city_id: String,
    pub origin: GeoPoint,
    pub edge_m: f64,
}

impl Tessellation {
    pub fn new(city_id: impl Into<String>, origin: GeoPoint, edge_m: f64) -> Result<Self> {
        let tess = Self {
            city_id: city_id.into(),
            origin,
            edge_m,
        };
        tess.validate()?;
        Ok(tess)
    }

    pub fn with_default_edge(city_id: impl Into<String>, origin: GeoPoint) -> Result<Self> {
        Self::new(city_id, origin, DEFAULT_EDGE_M)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.edge_m.is_finite() && self.edge_m > 0.0) {
            return Err(Error::Config(format!("edge_m must be > 0, got {}", self.edge_m)));
        }
        GeoPoint::new(self.origin.lat, self.origin.lon)?;
        if self.origin.lat.abs() >= 89.0 {
            return Err(Error::Config("origin too close to a pole".into()));
        }
        Ok(())
    }

    pub fn cell(&self, axial: Axial) -> HexCellId {
        HexCellId {
            city_id: Arc::from(self.city_id.as_str()),
            axial,
        }
    }

    /// Azimuthal-equidistant projection about the origin.
    pub fn project(&self, p: GeoPoint) -> Result<PlanarXY> {
        let (phi0, lam0) = (self.origin.lat.to_radians(), self.origin.lon.to_radians());
        let (phi, lam) = (p.lat.to_radians(), p.lon.to_radians());
        let dlam = lam - lam0;
        let hav = ((phi - phi0) / 2.0).sin().powi(2) + phi0.cos() * phi.cos() * (dlam / 2.0).sin().powi(2);
        let c = 2.0 * hav.sqrt().min(1.0).asin();
        let distance_m = c * EARTH_RADIUS_M;
        if !(distance_m <= MAX_PROJECTION_RADIUS_M) {
            return Err(Error::OutOfRange {
                distance_m,
                limit_m: MAX_PROJECTION_RADIUS_M,
            });
        }
        let k = if c < 1e-12 { 1.0 } else { c / c.sin() };
        let x = EARTH_RADIUS_M * k * phi.cos() * dlam.sin();
        let y = EARTH_RADIUS_M * k * (phi0.cos() * phi.sin() - phi0.sin() * phi.cos() * dlam.cos());
        Ok(PlanarXY { x, y })
    }

    pub fn unproject(&self, xy: PlanarXY) -> GeoPoint {
        let (phi0, lam0) = (self.origin.lat.to_radians(), self.origin.lon.to_radians());
        let rho = xy.norm();
        if rho < 1e-12 {
            return self.origin;
        }
        let c = rho / EARTH_RADIUS_M;
        let (sc, cc) = c.sin_cos();
        let phi = (cc * phi0.sin() + xy.y * sc * phi0.cos() / rho).clamp(-1.0, 1.0).asin();
        let lam = lam0 + (xy.x * sc).atan2(rho * phi0.cos() * cc - xy.y * phi0.sin() * sc);
        let mut lon = lam.to_degrees();
        if lon > 180.0 {
            lon -= 360.0;
        } else if lon < -180.0 {
            lon += 360.0;
        }
        GeoPoint {
            lat: phi.to_degrees(),
            lon,
        }
    }

    pub fn center_xy(&self, a: Axial) -> PlanarXY {
        let s = self.edge_m;
        PlanarXY {
            x: s * SQRT3 * (a.q as f64 + a.r as f64 / 2.0),
            y: s * 1.5 * a.r as f64,
        }
    }

    pub fn cell_center(&self, a: Axial) -> GeoPoint {
        self.unproject(self.center_xy(a))
    }

    /// Hexagon containing a planar point. Points on a shared boundary go to the
    /// nearest centre, then to the lexicographically smallest `(q, r)`.
    pub fn xy_to_axial(&self, xy: PlanarXY) -> Axial {
        let s = self.edge_m;
        let qf = (SQRT3 / 3.0 * xy.x - xy.y / 3.0) / s;
        let rf = (2.0 / 3.0 * xy.y) / s;
        let guess = cube_round(qf, rf);
        let tol = 1e-9 * s * s;
        let mut best = guess;
        let mut best_d = self.center_xy(guess).dist_sq(xy);
        for cand in guess.neighbors() {
            let d = self.center_xy(cand).dist_sq(xy);
            if d < best_d - tol || ((d - best_d).abs() <= tol && cand < best) {
                best = cand;
                best_d = d;
            }
        }
        best
    }

    pub fn point_to_axial(&self, p: GeoPoint) -> Result<Axial> {
        Ok(self.xy_to_axial(self.project(p)?))
    }

    pub fn point_to_cell(&self, p: GeoPoint) -> Result<HexCellId> {
        Ok(self.cell(self.point_to_axial(p)?))
    }

    /// Vertices in planar meters, counter-clockwise, first vertex not repeated.
    pub fn cell_polygon_xy(&self, a: Axial) -> [PlanarXY; 6] {
        let c = self.center_xy(a);
        std::array::from_fn(|i| {
            let ang = (30.0 + 60.0 * i as f64).to_radians();
            PlanarXY {
                x: c.x + self.edge_m * ang.cos(),
                y: c.y + self.edge_m * ang.sin(),
            }
        })
    }

    pub fn cell_polygon(&self, a: Axial) -> [GeoPoint; 6] {
        self.cell_polygon_xy(a).map(|v| self.unproject(v))
    }
}

impl PlanarXY {
    fn dist_sq(self, other: PlanarXY) -> f64 {
        (self.x - other.x).powi(2) + (self.y - other.y).powi(2)
    }
}

fn cube_round(qf: f64, rf: f64) -> Axial {
    let sf = -qf - rf;
    let (mut q, mut r, s) = (qf.round(), rf.round(), sf.round());
    let (dq, dr, ds) = ((q - qf).abs(), (r - rf).abs(), (s - sf).abs());
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    Axial::new(q as i32, r as i32)
}

/// All cells within hex distance `k` of `c`, in spiral order.
pub fn k_ring(c: &HexCellId, k: u32) -> Vec<HexCellId> {
    c.axial
        .spiral(k)
        .into_iter()
        .map(|axial| HexCellId {
            city_id: c.city_id.clone(),
            axial,
        })
        .collect()
}

pub fn hex_distance(a: &HexCellId, b: &HexCellId) -> Result<u32> {
    if a.city_id != b.city_id {
        return Err(Error::CityMismatch(a.city_id.to_string(), b.city_id.to_string()));
    }
    Ok(a.axial.distance(b.axial))
}
