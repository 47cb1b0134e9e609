//! Holds the `acceptance` test target, which checks every headline property of the workspace
//! and prints one PASS/FAIL line per criterion. Run it with
//! `cargo test -p bcnet-acceptance --test acceptance`.
