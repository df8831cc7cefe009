//! Core engine for recommending local suppliers to manufacturing facilities.
//!
//! Supplier relations come from input-output tables projected onto the NACE
//! activity nomenclature ([`ioanalysis`]). Alternative, "productive-jump"
//! suppliers come from the product space ([`complexity`]), embedded with metric
//! MDS and lifted to activities through export-weighted concordances
//! ([`embedding`], [`nomenclature`]). [`facilities`] holds the geolocated
//! registry and [`recommender`] joins everything together.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod complexity;
pub mod embedding;
pub mod error;
pub mod facilities;
pub mod ioanalysis;
pub mod nomenclature;
pub mod recommender;

pub use error::{Error, Result};
