#![allow(dead_code)]

pub mod data;
pub mod graphs;
pub mod oracles;
