#![allow(dead_code)]

pub mod doomed;
pub mod reference_net;
