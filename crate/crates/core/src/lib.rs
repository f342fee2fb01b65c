//! Rotation-equivariant keypoint estimation on cylindrical occupancy grids.

pub mod diffcore;
pub mod geom;
pub mod par;
pub mod synthgait;
pub mod backbone;
pub mod semitrain;
pub mod evalkit;
