//! Paillier key generation, fixed-point encoding and the homomorphic
//! operations the protocol relies on.

use fedvgcn::paillier::{keygen, FixedPointCodec, KeySize, DEFAULT_FRAC_BITS};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let (pk, sk) = keygen(KeySize::Test512, &mut rng);
    let codec = FixedPointCodec::for_key(&pk, DEFAULT_FRAC_BITS);
    println!("{}-bit modulus, resolution {:e}", pk.bits(), codec.resolution());

    let x = 3.25;
    let y = -1.5;
    let cx = pk.encrypt(&codec.encode(x)?, &mut rng)?;
    let cy = pk.encrypt(&codec.encode(y)?, &mut rng)?;

    let sum = pk.add_ct(&cx, &cy)?;
    println!("[[x]] + [[y]] -> {}", codec.decode(&sk.decrypt(&sum)?));

    // a real scalar doubles the fixed-point scale; one such product per ciphertext
    let w = 0.125;
    let prod = pk.mul_signed(&sum, &codec.encode_int(w)?)?;
    println!(
        "w * ([[x]] + [[y]]) -> {} at {:?} scale",
        codec.decode_scaled(&sk.decrypt(&prod)?, prod.scale()),
        prod.scale()
    );

    match pk.mul_signed(&prod, &codec.encode_int(2.0)?) {
        Err(e) => println!("second product rejected: {e}"),
        Ok(_) => unreachable!("product depth is limited to one"),
    }
    Ok(())
}
