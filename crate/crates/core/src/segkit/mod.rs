//! Ground-truth segmentation procedures: range-restricted region growing
//! (bolus), rigid-body tracking (bones and cartilage) and lattice-cage
//! deformation of a template mesh (tongue, soft palate), plus mesh
//! voxelization.

mod cage;
mod grow;
mod mesh;
mod rigid;
mod voxelize;

pub use cage::{cage_bind, cage_deform, Binding, Cage, CageMoves, NodeMove, VertexWeights};
pub use grow::{region_grow, Connectivity, GrowParams, DEFAULT_MAX_VOXELS};
pub use mesh::TriMesh;
pub use rigid::{apply_rigid, track_rigid, RigidPose, SimilarityMetric, TrackParams, TrackedFrame};
pub use voxelize::{point_in_mesh, voxelize};
