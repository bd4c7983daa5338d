use nalgebra::Vector3;

use crate::geometry::MeshModel;

/// Interior spheres approximating a mesh for contact tests.
#[derive(Clone, Debug, PartialEq)]
pub struct CollisionProxy {
    /// Model-frame centers.
    pub centers: Vec<Vector3<f64>>,
    pub radii: Vec<f64>,
}

impl CollisionProxy {
    /// Fits `k` spheres by greedy coverage of interior grid samples.
    ///
    /// Candidates are grid points inside the mesh (winding number > 0.5),
    /// each carrying its largest inscribed radius. Each round picks the
    /// candidate whose sphere covers the most still-uncovered samples
    /// (ties: larger radius, then lower index).
    pub fn fit(model: &MeshModel, k: usize, grid: usize) -> Self {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &model.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        let mut samples = vec![];
        for i in 0..grid {
            for j in 0..grid {
                for l in 0..grid {
                    let f = |n: usize, a: f64, b: f64| a + (b - a) * (n as f64 + 0.5) / grid as f64;
                    let p = Vector3::new(f(i, lo.x, hi.x), f(j, lo.y, hi.y), f(l, lo.z, hi.z));
                    if model.winding_number(&p) > 0.5 {
                        let r = model.surface_distance(&p);
                        samples.push((p, r));
                    }
                }
            }
        }
        let mut covered = vec![false; samples.len()];
        let mut centers = vec![];
        let mut radii = vec![];
        for _ in 0..k {
            let mut best: Option<(usize, usize, f64)> = None;
            for (ci, (c, r)) in samples.iter().enumerate() {
                let gain = samples
                    .iter()
                    .zip(&covered)
                    .filter(|((p, _), cov)| !**cov && (p - c).norm() <= *r)
                    .count();
                let better = match best {
                    None => true,
                    Some((_, g, br)) => gain > g || (gain == g && *r > br),
                };
                if better {
                    best = Some((ci, gain, *r));
                }
            }
            let Some((ci, gain, r)) = best else { break };
            if gain == 0 && !centers.is_empty() {
                break;
            }
            let c = samples[ci].0;
            for ((p, _), cov) in samples.iter().zip(covered.iter_mut()) {
                if (p - c).norm() <= r {
                    *cov = true;
                }
            }
            centers.push(c);
            radii.push(r);
        }
        CollisionProxy { centers, radii }
    }

    /// Radius of a ball around the model origin containing every sphere.
    pub fn reach(&self) -> f64 {
        self.centers
            .iter()
            .zip(&self.radii)
            .map(|(c, r)| c.norm() + r)
            .fold(0.0, f64::max)
    }
}
