#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod flows;
pub mod model;
pub mod processes;
pub mod train;
