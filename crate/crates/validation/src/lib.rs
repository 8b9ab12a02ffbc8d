//! Holds the `acceptance` test target (`tests/acceptance.rs`), kept in its own
//! package so `cargo test --workspace` runs it after the unit and integration tests.
