//! Holds the `acceptance` test target; run it with
//! `cargo test -p sparse-meanrev-suite --test acceptance`.
