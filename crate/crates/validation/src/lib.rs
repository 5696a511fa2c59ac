//! Holds the `acceptance` test target, which checks the toolkit's end-to-end
//! criteria and prints one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p qmix-validation --test acceptance`.
