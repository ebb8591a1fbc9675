#![allow(dead_code)]

pub mod cases;
pub mod energy;
pub mod fuzz;
pub mod gradcheck;
pub mod oracle;
