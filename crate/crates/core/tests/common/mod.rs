//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

pub mod gradients;
pub mod oracles;
