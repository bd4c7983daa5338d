use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};

use super::pose::{rot_x, rot_y, rot_z};
use crate::error::{Error, Result};

/// Rotations (in the model frame) that leave the object unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetrySpec {
    /// Always contains the identity and is closed under composition.
    pub finite_rotations: Vec<Matrix3<f64>>,
    /// Unit axis of continuous rotational symmetry.
    pub axial: Option<Vector3<f64>>,
}

impl SymmetrySpec {
    pub fn none() -> Self {
        SymmetrySpec {
            finite_rotations: vec![Matrix3::identity()],
            axial: None,
        }
    }

    /// Validates closure at 1e-6 and adds the identity when missing.
    pub fn new(mut finite_rotations: Vec<Matrix3<f64>>, axial: Option<Vector3<f64>>) -> Result<Self> {
        let is_member = |set: &[Matrix3<f64>], m: &Matrix3<f64>| set.iter().any(|g| (g - m).abs().max() < 1e-6);
        if !is_member(&finite_rotations, &Matrix3::identity()) {
            finite_rotations.insert(0, Matrix3::identity());
        }
        for a in &finite_rotations {
            if (a.transpose() * a - Matrix3::identity()).abs().max() > 1e-6 || (a.determinant() - 1.0).abs() > 1e-6 {
                return Err(Error::Contract("symmetry element is not a rotation".into()));
            }
            for b in &finite_rotations {
                if !is_member(&finite_rotations, &(a * b)) {
                    return Err(Error::Contract("finite symmetry set is not closed under composition".into()));
                }
            }
        }
        if let Some(axis) = axial {
            if (axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Contract("axial symmetry axis must have unit norm".into()));
            }
        }
        Ok(SymmetrySpec { finite_rotations, axial })
    }

    pub fn is_trivial(&self) -> bool {
        self.axial.is_none() && self.finite_rotations.len() == 1
    }
}

/// Triangle mesh of the object of interest, in meters.
#[derive(Clone, Debug)]
pub struct MeshModel {
    pub name: String,
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    /// Largest pairwise vertex distance.
    pub diameter: f64,
    /// Bounding sphere (Ritter's approximation of the minimal one).
    pub bsphere_center: Vector3<f64>,
    pub bsphere_diameter: f64,
    pub symmetry: SymmetrySpec,
}

impl MeshModel {
    pub fn new(
        name: impl Into<String>,
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<[u32; 3]>,
        symmetry: SymmetrySpec,
    ) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::Contract("mesh has no vertices".into()));
        }
        if let Some(bad) = triangles.iter().flatten().find(|&&i| i as usize >= vertices.len()) {
            return Err(Error::Contract(format!("triangle index {bad} out of range")));
        }
        let mut diameter = 0.0f64;
        for (i, a) in vertices.iter().enumerate() {
            for b in &vertices[i + 1..] {
                diameter = diameter.max((a - b).norm());
            }
        }
        let (bsphere_center, radius) = ritter_sphere(&vertices);
        Ok(MeshModel {
            name: name.into(),
            vertices,
            triangles,
            diameter,
            bsphere_center,
            bsphere_diameter: 2.0 * radius,
            symmetry,
        })
    }

    /// Built-in models: `tripod` (default, asymmetric), `cuboid`, `cylinder`, `icosphere`.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "tripod" => Ok(Self::tripod()),
            "cuboid" => Ok(Self::cuboid(0.05, 0.03, 0.02)),
            "cylinder" => Ok(Self::cylinder(0.025, 0.05, 16)),
            "icosphere" => Ok(Self::icosphere(0.04, 2)),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }

    /// Three orthogonal square-section arms of lengths 10, 8 and 6 cm
    /// joined at a corner cube; no proper rotational symmetry. The origin is
    /// the solid's centroid.
    pub fn tripod() -> Self {
        let s = 0.03;
        let parts = [
            ([0.0, 0.0, 0.0], [s, s, s]),
            ([s, 0.0, 0.0], [0.10, s, s]),
            ([0.0, s, 0.0], [s, 0.08, s]),
            ([0.0, 0.0, s], [s, s, 0.06]),
        ];
        let mut vol = 0.0;
        let mut centroid = Vector3::zeros();
        for (lo, hi) in &parts {
            let lo = Vector3::from(*lo);
            let hi = Vector3::from(*hi);
            let v = (hi - lo).product();
            vol += v;
            centroid += v * (lo + hi) / 2.0;
        }
        centroid /= vol;
        let (mut vertices, mut triangles) = (vec![], vec![]);
        for (lo, hi) in &parts {
            append_box(
                &mut vertices,
                &mut triangles,
                Vector3::from(*lo) - centroid,
                Vector3::from(*hi) - centroid,
            );
        }
        Self::new("tripod", vertices, triangles, SymmetrySpec::none()).expect("valid built-in mesh")
    }

    /// Box centered at the origin; symmetric under half turns about each axis.
    pub fn cuboid(hx: f64, hy: f64, hz: f64) -> Self {
        let (mut vertices, mut triangles) = (vec![], vec![]);
        append_box(
            &mut vertices,
            &mut triangles,
            Vector3::new(-hx, -hy, -hz),
            Vector3::new(hx, hy, hz),
        );
        let sym = SymmetrySpec::new(vec![Matrix3::identity(), rot_x(PI), rot_y(PI), rot_z(PI)], None)
            .expect("D2 group is closed");
        Self::new("cuboid", vertices, triangles, sym).expect("valid built-in mesh")
    }

    /// Closed cylinder about the model y axis (axial symmetry plus the end-for-end flip).
    pub fn cylinder(radius: f64, half_height: f64, segments: usize) -> Self {
        let mut vertices = vec![];
        for &y in &[-half_height, half_height] {
            for k in 0..segments {
                let a = TAU * k as f64 / segments as f64;
                vertices.push(Vector3::new(radius * a.cos(), y, radius * a.sin()));
            }
        }
        let bottom = vertices.len() as u32;
        vertices.push(Vector3::new(0.0, -half_height, 0.0));
        let top = vertices.len() as u32;
        vertices.push(Vector3::new(0.0, half_height, 0.0));
        let n = segments as u32;
        let mut triangles = vec![];
        for k in 0..n {
            let k1 = (k + 1) % n;
            triangles.push([k, n + k, k1]);
            triangles.push([k1, n + k, n + k1]);
            triangles.push([bottom, k, k1]);
            triangles.push([top, n + k1, n + k]);
        }
        let sym = SymmetrySpec::new(vec![Matrix3::identity(), rot_x(PI)], Some(Vector3::y()))
            .expect("flip group is closed");
        Self::new("cylinder", vertices, triangles, sym).expect("valid built-in mesh")
    }

    /// Subdivided icosahedron projected onto a sphere of `radius`.
    pub fn icosphere(radius: f64, subdivisions: usize) -> Self {
        let p = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Vector3<f64>> = [
            [-1.0, p, 0.0],
            [1.0, p, 0.0],
            [-1.0, -p, 0.0],
            [1.0, -p, 0.0],
            [0.0, -1.0, p],
            [0.0, 1.0, p],
            [0.0, -1.0, -p],
            [0.0, 1.0, -p],
            [p, 0.0, -1.0],
            [p, 0.0, 1.0],
            [-p, 0.0, -1.0],
            [-p, 0.0, 1.0],
        ]
        .iter()
        .map(|v| Vector3::from(*v).normalize())
        .collect();
        let mut triangles: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut cache = std::collections::HashMap::new();
            let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vector3<f64>>| -> u32 {
                let key = (a.min(b), a.max(b));
                *cache.entry(key).or_insert_with(|| {
                    verts.push(((verts[a as usize] + verts[b as usize]) / 2.0).normalize());
                    (verts.len() - 1) as u32
                })
            };
            let mut next = Vec::with_capacity(triangles.len() * 4);
            for [a, b, c] in triangles {
                let ab = midpoint(a, b, &mut vertices);
                let bc = midpoint(b, c, &mut vertices);
                let ca = midpoint(c, a, &mut vertices);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            triangles = next;
        }
        for v in &mut vertices {
            *v *= radius;
        }
        Self::new("icosphere", vertices, triangles, SymmetrySpec::none()).expect("valid built-in mesh")
    }

    /// Parses the ASCII `BPMESH` format; symmetry comes from the run config.
    pub fn from_bpmesh(name: &str, text: &str, symmetry: SymmetrySpec) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("BPMESH") {
            return Err(Error::Data("mesh file lacks BPMESH header".into()));
        }
        let mut tokens = lines.flat_map(str::split_whitespace);
        let mut next = |what: &str| tokens.next().ok_or_else(|| Error::Data(format!("mesh file truncated at {what}")));
        let parse_err = |e: &dyn std::fmt::Display| Error::Data(format!("mesh file: {e}"));
        let nv: usize = next("vertex count")?.parse().map_err(|e| parse_err(&e))?;
        let nt: usize = next("triangle count")?.parse().map_err(|e| parse_err(&e))?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let mut v = [0.0; 3];
            for c in &mut v {
                *c = next("vertex")?.parse().map_err(|e| parse_err(&e))?;
            }
            vertices.push(Vector3::from(v));
        }
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let mut t = [0u32; 3];
            for c in &mut t {
                *c = next("triangle")?.parse().map_err(|e| parse_err(&e))?;
            }
            triangles.push(t);
        }
        Self::new(name, vertices, triangles, symmetry).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn to_bpmesh(&self) -> String {
        let mut s = format!("BPMESH\n{}\n{}\n", self.vertices.len(), self.triangles.len());
        for v in &self.vertices {
            s.push_str(&format!("{:?} {:?} {:?}\n", v.x, v.y, v.z));
        }
        for t in &self.triangles {
            s.push_str(&format!("{} {} {}\n", t[0], t[1], t[2]));
        }
        s
    }

    /// Generalized winding number of the (closed) surface around `p`:
    /// about 1 inside, 0 outside.
    pub fn winding_number(&self, p: &Vector3<f64>) -> f64 {
        let mut total = 0.0;
        for t in &self.triangles {
            let a = self.vertices[t[0] as usize] - p;
            let b = self.vertices[t[1] as usize] - p;
            let c = self.vertices[t[2] as usize] - p;
            let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
            let num = a.dot(&b.cross(&c));
            let den = la * lb * lc + a.dot(&b) * lc + b.dot(&c) * la + c.dot(&a) * lb;
            total += 2.0 * num.atan2(den);
        }
        total / (4.0 * PI)
    }

    /// Euclidean distance from `p` to the nearest surface point.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                point_triangle_distance(
                    p,
                    &self.vertices[t[0] as usize],
                    &self.vertices[t[1] as usize],
                    &self.vertices[t[2] as usize],
                )
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest distance from the model origin to any vertex.
    pub fn bounding_radius(&self) -> f64 {
        self.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// Appends an axis-aligned box with outward-facing (counter-clockwise) triangles.
fn append_box(vertices: &mut Vec<Vector3<f64>>, triangles: &mut Vec<[u32; 3]>, lo: Vector3<f64>, hi: Vector3<f64>) {
    let base = vertices.len() as u32;
    for i in 0..8 {
        vertices.push(Vector3::new(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { lo.z } else { hi.z },
        ));
    }
    let faces: [[u32; 4]; 6] = [
        [0, 2, 3, 1], // -z
        [4, 5, 7, 6], // +z
        [0, 1, 5, 4], // -y
        [2, 6, 7, 3], // +y
        [0, 4, 6, 2], // -x
        [1, 3, 7, 5], // +x
    ];
    for f in faces {
        triangles.push([base + f[0], base + f[1], base + f[2]]);
        triangles.push([base + f[0], base + f[2], base + f[3]]);
    }
}

fn ritter_sphere(points: &[Vector3<f64>]) -> (Vector3<f64>, f64) {
    let farthest = |from: &Vector3<f64>| {
        *points
            .iter()
            .max_by(|a, b| (*a - from).norm().total_cmp(&(*b - from).norm()))
            .unwrap()
    };
    let y = farthest(&points[0]);
    let z = farthest(&y);
    let mut center = (y + z) / 2.0;
    let mut radius = (z - y).norm() / 2.0;
    for p in points {
        let d = (p - center).norm();
        if d > radius {
            let new_radius = (radius + d) / 2.0;
            center += (p - center) * ((new_radius - radius) / d);
            radius = new_radius;
        }
    }
    // Absorb rounding so that every vertex is inside.
    let reach = points.iter().map(|p| (p - center).norm()).fold(0.0, f64::max);
    (center, radius.max(reach))
}

/// Closest-point distance from `p` to triangle `abc`.
pub fn point_triangle_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}
