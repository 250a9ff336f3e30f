#![allow(dead_code)]

pub mod clahe_ref;
pub mod fixtures;
pub mod gradcheck;
pub mod t_oracle;
