// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared test helpers: finite-difference gradient checks, random traces and
//! scalar-loop reference implementations of the explainers.

#![allow(dead_code)]

pub mod explainers;
pub mod fd;
pub mod gen;
pub mod models;
pub mod oracles;
