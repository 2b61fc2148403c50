//! Holds the `acceptance` test target. It lives in its own package so it runs
//! after the per-crate suites, and a failing criterion does not stop them.
