//! Write the shipped feeder descriptions to `data/` so the CLI can load them.
//!
//! ```text
//! cargo run -p tasrl-core --example export_feeders
//! ```

use std::path::Path;

use tasrl_core::feeders;
use tasrl_core::io::save_network;

fn main() {
    let out = Path::new("data");
    save_network(&out.join("feeder13.json"), &feeders::feeder13()).unwrap();
    save_network(&out.join("feeder123.json"), &feeders::feeder123()).unwrap();
    save_network(&out.join("feeder13_sub10.json"), &feeders::feeder13_sub10()).unwrap();
    println!("wrote data/feeder13.json, data/feeder123.json, data/feeder13_sub10.json");
}
