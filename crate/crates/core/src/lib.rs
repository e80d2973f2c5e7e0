//! Analysis and runtime support for storing typed records as contiguous
//! byte segments in managed pages.

pub mod classify;
pub mod containers;
pub mod datum;
pub mod engine;
pub mod ir;
pub mod pagestore;
