// Each test target uses a different part of the shared helpers.
#![allow(dead_code)]

pub mod gradcheck;
