//! Library surface of the `sharpen` binary: experiment configuration and
//! execution, report serialization, and the fixture self-check suite.

pub mod report;
pub mod run;
pub mod verify;
