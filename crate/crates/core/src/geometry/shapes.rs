use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Point, PointCloud, Source};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Analytic shape families of the synthetic corpus. Every family is
/// modelled upright along +y.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Sphere,
    Box,
    Cylinder,
    Lamp,
    Chair,
    Table,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Sphere,
        ShapeFamily::Box,
        ShapeFamily::Cylinder,
        ShapeFamily::Lamp,
        ShapeFamily::Chair,
        ShapeFamily::Table,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Box => "box",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Lamp => "lamp",
            ShapeFamily::Chair => "chair",
            ShapeFamily::Table => "table",
        }
    }

    /// Names of the dimension parameters, in order.
    pub fn parameter_names(self) -> &'static [&'static str] {
        match self {
            ShapeFamily::Sphere => &["radius"],
            ShapeFamily::Box => &["half_x", "half_y", "half_z"],
            ShapeFamily::Cylinder => &["radius", "half_height"],
            ShapeFamily::Lamp => &[
                "base_radius",
                "base_height",
                "pole_radius",
                "pole_height",
                "shade_bottom_radius",
                "shade_top_radius",
                "shade_height",
            ],
            ShapeFamily::Chair => &[
                "seat_width",
                "seat_depth",
                "seat_thickness",
                "leg_height",
                "leg_radius",
                "back_height",
                "back_thickness",
            ],
            ShapeFamily::Table => &[
                "top_width",
                "top_depth",
                "top_thickness",
                "leg_height",
                "leg_radius",
            ],
        }
    }

    /// Reflection planes (through the origin) under which the family's
    /// surface is invariant.
    pub fn symmetry_planes(self) -> Vec<Point> {
        let x = [1.0, 0.0, 0.0];
        let y = [0.0, 1.0, 0.0];
        let z = [0.0, 0.0, 1.0];
        match self {
            ShapeFamily::Sphere | ShapeFamily::Box => vec![x, y, z],
            ShapeFamily::Cylinder => vec![x, y, z],
            ShapeFamily::Lamp | ShapeFamily::Table => vec![x, z],
            ShapeFamily::Chair => vec![x],
        }
    }

    fn ranges(self) -> &'static [(f64, f64)] {
        match self {
            ShapeFamily::Sphere => &[(0.6, 1.0)],
            ShapeFamily::Box => &[(0.3, 0.8), (0.3, 0.8), (0.3, 0.8)],
            ShapeFamily::Cylinder => &[(0.25, 0.5), (0.4, 0.9)],
            ShapeFamily::Lamp => &[
                (0.25, 0.4),
                (0.04, 0.08),
                (0.03, 0.05),
                (0.6, 1.0),
                (0.35, 0.5),
                (0.15, 0.25),
                (0.25, 0.4),
            ],
            ShapeFamily::Chair => &[
                (0.8, 1.0),
                (0.7, 0.9),
                (0.06, 0.1),
                (0.7, 0.9),
                (0.04, 0.06),
                (0.7, 1.0),
                (0.06, 0.1),
            ],
            ShapeFamily::Table => &[
                (1.2, 1.8),
                (0.7, 1.1),
                (0.06, 0.1),
                (0.6, 0.9),
                (0.04, 0.07),
            ],
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape family {s:?}")))
    }
}

/// A concrete member of a family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub family: ShapeFamily,
    pub parameters: Vec<f64>,
}

impl ShapeSpec {
    pub fn new(family: ShapeFamily, parameters: Vec<f64>) -> Result<Self> {
        let spec = ShapeSpec { family, parameters };
        spec.validate()?;
        Ok(spec)
    }

    /// Parameters drawn uniformly from the family's default ranges.
    pub fn random(family: ShapeFamily, rng: &mut Rng) -> Self {
        let parameters = family
            .ranges()
            .iter()
            .map(|&(lo, hi)| rng.random_range(lo..hi))
            .collect();
        ShapeSpec { family, parameters }
    }

    /// Midpoint of every parameter range.
    pub fn canonical(family: ShapeFamily) -> Self {
        let parameters = family
            .ranges()
            .iter()
            .map(|&(lo, hi)| 0.5 * (lo + hi))
            .collect();
        ShapeSpec { family, parameters }
    }

    pub fn symmetry_planes(&self) -> Vec<Point> {
        self.family.symmetry_planes()
    }

    pub fn validate(&self) -> Result<()> {
        let names = self.family.parameter_names();
        if self.parameters.len() != names.len() {
            return Err(Error::InvalidArgument(format!(
                "{} expects {} parameters ({}), got {}",
                self.family,
                names.len(),
                names.join(", "),
                self.parameters.len()
            )));
        }
        for (name, &v) in names.iter().zip(&self.parameters) {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{} parameter {name} must be positive, got {v}",
                    self.family
                )));
            }
        }
        Ok(())
    }

    fn surfaces(&self) -> Vec<Surface> {
        let p = &self.parameters;
        match self.family {
            ShapeFamily::Sphere => vec![Surface::Sphere {
                center: [0.0; 3],
                radius: p[0],
            }],
            ShapeFamily::Box => cuboid([0.0; 3], [p[0], p[1], p[2]]),
            ShapeFamily::Cylinder => closed_cylinder([0.0; 3], p[0], p[1]),
            ShapeFamily::Lamp => {
                let (base_r, base_h, pole_r, pole_h, shade_r0, shade_r1, shade_h) =
                    (p[0], p[1], p[2], p[3], p[4], p[5], p[6]);
                let mut s = closed_cylinder([0.0, base_h / 2.0, 0.0], base_r, base_h / 2.0);
                s.push(Surface::Tube {
                    center: [0.0, base_h + pole_h / 2.0, 0.0],
                    r0: pole_r,
                    r1: pole_r,
                    half_height: pole_h / 2.0,
                });
                s.push(Surface::Tube {
                    center: [0.0, base_h + pole_h + shade_h / 2.0, 0.0],
                    r0: shade_r0,
                    r1: shade_r1,
                    half_height: shade_h / 2.0,
                });
                s
            }
            ShapeFamily::Chair => {
                let (w, d, t, leg_h, leg_r, back_h, back_t) =
                    (p[0], p[1], p[2], p[3], p[4], p[5], p[6]);
                let mut s = cuboid([0.0, leg_h + t / 2.0, 0.0], [w / 2.0, t / 2.0, d / 2.0]);
                s.extend(cuboid(
                    [0.0, leg_h + t + back_h / 2.0, -d / 2.0 + back_t / 2.0],
                    [w / 2.0, back_h / 2.0, back_t / 2.0],
                ));
                s.extend(legs(w, d, leg_h, leg_r));
                s
            }
            ShapeFamily::Table => {
                let (w, d, t, leg_h, leg_r) = (p[0], p[1], p[2], p[3], p[4]);
                let mut s = cuboid([0.0, leg_h + t / 2.0, 0.0], [w / 2.0, t / 2.0, d / 2.0]);
                s.extend(legs(w, d, leg_h, leg_r));
                s
            }
        }
    }
}

fn legs(w: f64, d: f64, h: f64, r: f64) -> Vec<Surface> {
    let (x, z) = (w / 2.0 - 1.5 * r, d / 2.0 - 1.5 * r);
    [[-x, -z], [x, -z], [-x, z], [x, z]]
        .into_iter()
        .flat_map(|[lx, lz]| closed_cylinder([lx, h / 2.0, lz], r, h / 2.0))
        .collect()
}

fn cuboid(c: Point, h: [f64; 3]) -> Vec<Surface> {
    let mut faces = Vec::with_capacity(6);
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let mut center = c;
            center[axis] += sign * h[axis];
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            faces.push(Surface::Rect {
                center,
                axis_u: u,
                axis_v: v,
                half_u: h[u],
                half_v: h[v],
            });
        }
    }
    faces
}

fn closed_cylinder(c: Point, r: f64, half_height: f64) -> Vec<Surface> {
    vec![
        Surface::Tube {
            center: c,
            r0: r,
            r1: r,
            half_height,
        },
        Surface::Disk {
            center: [c[0], c[1] - half_height, c[2]],
            radius: r,
        },
        Surface::Disk {
            center: [c[0], c[1] + half_height, c[2]],
            radius: r,
        },
    ]
}

/// Primitive surface patches. Tubes and disks are aligned with +y.
#[derive(Clone, Debug)]
enum Surface {
    Sphere {
        center: Point,
        radius: f64,
    },
    Rect {
        center: Point,
        axis_u: usize,
        axis_v: usize,
        half_u: f64,
        half_v: f64,
    },
    Disk {
        center: Point,
        radius: f64,
    },
    /// Lateral surface of a frustum, radius `r0` at the bottom and `r1` at the top.
    Tube {
        center: Point,
        r0: f64,
        r1: f64,
        half_height: f64,
    },
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Surface::Rect { half_u, half_v, .. } => 4.0 * half_u * half_v,
            Surface::Disk { radius, .. } => PI * radius * radius,
            Surface::Tube {
                r0,
                r1,
                half_height,
                ..
            } => {
                let h = 2.0 * half_height;
                PI * (r0 + r1) * (h * h + (r1 - r0).powi(2)).sqrt()
            }
        }
    }

    fn sample(&self, rng: &mut Rng) -> Point {
        match *self {
            Surface::Sphere { center, radius } => loop {
                let g = rng::normals(rng, 3);
                let l = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                if l > 1e-12 {
                    break [0, 1, 2].map(|d| center[d] + radius * g[d] / l);
                }
            },
            Surface::Rect {
                center,
                axis_u,
                axis_v,
                half_u,
                half_v,
            } => {
                let mut p = center;
                p[axis_u] += rng.random_range(-half_u..half_u);
                p[axis_v] += rng.random_range(-half_v..half_v);
                p
            }
            Surface::Disk { center, radius } => {
                let r = radius * rng.random::<f64>().sqrt();
                let t = 2.0 * PI * rng.random::<f64>();
                [center[0] + r * t.cos(), center[1], center[2] + r * t.sin()]
            }
            Surface::Tube {
                center,
                r0,
                r1,
                half_height,
            } => {
                // Height drawn with density proportional to the local radius.
                let u: f64 = rng.random();
                let s = if (r1 - r0).abs() < 1e-12 {
                    u
                } else {
                    let a = r1 - r0;
                    let target = u * (r0 + r1) / 2.0;
                    (-r0 + (r0 * r0 + 2.0 * a * target).sqrt()) / a
                };
                let r = r0 + (r1 - r0) * s;
                let t = 2.0 * PI * rng.random::<f64>();
                [
                    center[0] + r * t.cos(),
                    center[1] - half_height + 2.0 * half_height * s,
                    center[2] + r * t.sin(),
                ]
            }
        }
    }
}

/// Draws `n_dense` points area-uniformly over the analytic surface of `spec`.
pub fn synth_shape(spec: &ShapeSpec, n_dense: usize, rng_seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    if n_dense < 1024 {
        return Err(Error::InvalidArgument(format!(
            "n_dense must be at least 1024, got {n_dense}"
        )));
    }
    let surfaces = spec.surfaces();
    let mut cumulative = Vec::with_capacity(surfaces.len());
    let mut total = 0.0;
    for s in &surfaces {
        total += s.area();
        cumulative.push(total);
    }
    let mut r = rng::stream(rng_seed, "shape.surface");
    let points = (0..n_dense)
        .map(|_| {
            let u = r.random::<f64>() * total;
            let k = cumulative
                .partition_point(|&c| c <= u)
                .min(surfaces.len() - 1);
            surfaces[k].sample(&mut r)
        })
        .collect();
    Ok(PointCloud::new(points)?
        .with_category(spec.family.name())
        .with_source(Source::Synthetic))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{dist2, mirror, normalize_unit_sphere};

    fn brute_cd(a: &[Point], b: &[Point]) -> f64 {
        let one = |p: &[Point], q: &[Point]| {
            p.iter()
                .map(|x| q.iter().map(|y| dist2(x, y)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / p.len() as f64
        };
        one(a, b) + one(b, a)
    }

    #[test]
    fn sphere_points_lie_on_surface() {
        let c = synth_shape(
            &ShapeSpec::new(ShapeFamily::Sphere, vec![1.0]).unwrap(),
            2048,
            5,
        )
        .unwrap();
        assert_eq!(c.len(), 2048);
        for p in c.points() {
            assert!(((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn chair_is_mirror_symmetric() {
        let spec = ShapeSpec::canonical(ShapeFamily::Chair);
        let c = synth_shape(&spec, 8192, 11).unwrap();
        let (n, _) = normalize_unit_sphere(&c);
        for plane in spec.symmetry_planes() {
            let m = mirror(&n, plane).unwrap();
            let cd = brute_cd(n.points(), m.points());
            assert!(cd < 1e-3, "cd {cd}");
        }
    }

    #[test]
    fn every_family_is_symmetric_under_its_planes() {
        for family in ShapeFamily::ALL {
            let mut r = rng::stream(2, "test.spec");
            let spec = ShapeSpec::random(family, &mut r);
            let c = synth_shape(&spec, 4096, 1).unwrap();
            for plane in spec.symmetry_planes() {
                let m = mirror(&c, plane).unwrap();
                let cd = brute_cd(c.points(), m.points());
                assert!(cd < 3e-3, "{family} plane {plane:?} cd {cd}");
            }
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = ShapeSpec::canonical(ShapeFamily::Lamp);
        let a = synth_shape(&spec, 1024, 9).unwrap();
        let b = synth_shape(&spec, 1024, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_shape(&spec, 1024, 10).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ShapeSpec::new(ShapeFamily::Box, vec![1.0, -1.0, 1.0]).is_err());
        assert!(ShapeSpec::new(ShapeFamily::Box, vec![1.0]).is_err());
        assert!(synth_shape(&ShapeSpec::canonical(ShapeFamily::Box), 1000, 0).is_err());
    }

    #[test]
    fn frustum_sampling_is_area_uniform() {
        // Cone-like frustum: the fraction of samples below mid-height equals
        // the fraction of lateral area below it.
        let s = Surface::Tube {
            center: [0.0; 3],
            r0: 1.0,
            r1: 0.2,
            half_height: 0.5,
        };
        let mut r = rng::stream(4, "test.tube");
        let n = 200_000;
        let below = (0..n).filter(|_| s.sample(&mut r)[1] < 0.0).count() as f64 / n as f64;
        let want = (1.0 + 0.6) / 2.0 / ((1.0 + 0.2) / 2.0) * 0.5;
        assert!((below - want).abs() < 0.005, "{below} vs {want}");
    }

    #[test]
    fn family_names_round_trip() {
        for f in ShapeFamily::ALL {
            assert_eq!(f.name().parse::<ShapeFamily>().unwrap(), f);
        }
    }
}
