//! Transfer operators of piecewise expanding interval maps on atomic Besov
//! spaces.
//!
//! The modules build on each other in this order:
//!
//! - [`grid`]: `m`-adic cells, interval unions and the good-grid axioms.
//! - [`besov`]: parameters, piecewise constant functions and atomic
//!   representations with their coefficient norm.
//! - [`domains`]: regular decompositions of interval unions into cells.
//! - [`dynamics`]: inverse branches, potentials and the per-branch ledger.
//! - [`transfer`]: the operator Φ, its bound ledger and the truncated matrix.
//! - [`spectral`]: invariant densities, peripheral spectrum, Lasota–Yorke
//!   fits, decay of correlations and asymptotic variance.
//! - [`config`] and [`pipeline`]: JSON-driven runs that write artifacts.
//!
//! ```
//! use besov_transfer::besov::BesovParams;
//! use besov_transfer::dynamics::{make_map, MapSpec, SystemOptions};
//! use besov_transfer::transfer::{assemble_matrix, prepare, TransferOptions};
//! use besov_transfer::spectral::{peripheral_spectrum, PERIPHERAL_TOL};
//!
//! let system = make_map(&MapSpec::doubling(), &BesovParams::default(), &SystemOptions::with_level(6)).unwrap();
//! let matrix = assemble_matrix(&prepare(system, TransferOptions::default()).unwrap()).unwrap();
//! let spectrum = peripheral_spectrum(&matrix, PERIPHERAL_TOL).unwrap();
//! assert!(spectrum.contains_one());
//! assert!(spectrum.lambda2 < 1e-10);
//! ```

pub mod besov;
pub mod config;
pub mod domains;
pub mod dynamics;
pub mod grid;
pub mod pipeline;
pub mod spectral;
pub mod transfer;
mod util;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/grids-and-atoms.md")]
    mod grids_and_atoms {}
    #[doc = include_str!("../../../book/src/maps.md")]
    mod maps {}
    #[doc = include_str!("../../../book/src/transfer.md")]
    mod transfer {}
    #[doc = include_str!("../../../book/src/spectral.md")]
    mod spectral {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
