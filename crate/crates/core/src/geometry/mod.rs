//! Rigid poses, meshes, symmetry-aware pose distances and box predicates.

mod boxes;
mod distance;
mod mesh;
mod pose;

pub use boxes::{box2d_iou, box3d_overlaps, model_box3d, Box2D, Box3D};
pub use distance::{add_distance, sym_distance};
pub use mesh::{point_triangle_distance, MeshModel, SymmetrySpec};
pub use pose::{euler_to_matrix, matrix_to_euler, rot_x, rot_y, rot_z, wrap_tau, Pose6D};
