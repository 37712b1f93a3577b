#![allow(dead_code)]

pub mod gradchecks;
pub mod properties;
pub mod reference;
