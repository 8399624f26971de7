//! Acceptance suite for `recbench`; everything lives in `tests/acceptance.rs`.
