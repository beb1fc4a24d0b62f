//! Constraint projection and constrained planning for teams of mobile
//! manipulators carrying a shared rigid structure.

pub mod bench;
pub mod constraints;
pub mod geometry;
pub mod kinematics;
pub mod planner;
pub mod scenarios;
pub mod solvers;
pub mod svg;
