//! Runs the guide's code listings as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod ch1_autodiff {}

#[doc = include_str!("../../../book/src/gate.md")]
pub mod ch2_gate {}

#[doc = include_str!("../../../book/src/attention.md")]
pub mod ch3_attention {}

#[doc = include_str!("../../../book/src/hourglass.md")]
pub mod ch4_hourglass {}

#[doc = include_str!("../../../book/src/heads.md")]
pub mod ch5_heads {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod ch6_metrics {}

#[doc = include_str!("../../../book/src/harness.md")]
pub mod ch7_harness {}
