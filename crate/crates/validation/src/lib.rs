//! Hosts the `acceptance` test target; run it with
//! `cargo test -p lanegen-validation --test acceptance -- --nocapture`.
