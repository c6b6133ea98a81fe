//! Minimal from-scratch neural-net toolkit: dense ops with manual backward
//! passes, multi-head attention, pre-norm transformer stacks, and Adam.

pub mod adam;
pub mod attention;
pub mod ops;
pub mod stack;
