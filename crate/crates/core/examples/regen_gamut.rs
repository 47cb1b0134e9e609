//! Rebuilds `fixtures/gamut_v1.txt` from the colour-space conversion.
//!
//! cargo run -p bcnet --example regen_gamut > crates/core/fixtures/gamut_v1.txt

fn main() {
    let gamut = bcnet::quantizer::build_gamut(&Default::default()).expect("gamut builds");
    print!("{}", gamut.to_fixture());
}
