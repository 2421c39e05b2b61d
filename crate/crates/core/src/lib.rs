//! Numerical laboratory for the implicit bias of gradient flow on homogeneous networks.
//!
//! The pipeline integrates gradient flow to directional convergence ([`flowsim`]), rescales
//! the limit to unit margin and certifies it against the KKT conditions of the parameter-space
//! max-margin problem ([`kktcert`]), then probes local and global optimality with explicit
//! witnesses, randomized search and convex reference solvers ([`optprobe`], [`convexref`]).
//! [`scenarios`] holds the catalog of reproducible constructions and [`runner`] ties everything
//! into a single report.

pub mod netcore;
pub mod flowsim;
pub mod kktcert;
pub mod convexref;
pub mod optprobe;
pub mod scenarios;
pub mod runner;
