//! Bundled training text: eight Shakespeare plays from Project Gutenberg
//! (public domain), about 1 MB.

pub const BUNDLED: &str = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/data/shakespeare.txt"));
