//! The quadratic stand-in for ReLU: the closed-form coefficients for a given
//! scale, a numerical least-squares fit for comparison, and fitting the scale
//! to observed pre-activations.

use fedvgcn::polyact::{fit_scale_param, l2_error_sq, least_squares_fit, relu, Interval, QuadActivation};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let unit = Interval::symmetric(1.0)?;
    let fit = least_squares_fit(relu, 2, unit)?;
    println!("least-squares quadratic for relu on [-1, 1]: {:?}", fit.as_slice());
    println!("  squared L2 error {:.3e}", l2_error_sq(relu, &fit, unit)?);

    for a in [0.5, 1.0, 4.0] {
        let q = QuadActivation::new(a)?;
        let [c0, c1, c2] = q.coefficients();
        let iv = Interval::symmetric(a)?;
        println!(
            "a = {a}: p(x) = {c2:.5} x^2 + {c1:.2} x + {c0:.5}, squared L2 error on [-a, a] {:.3e}",
            l2_error_sq(relu, &q.as_poly(), iv)?
        );
    }

    let samples: Vec<f64> = (0..200).map(|i| ((i as f64) * 0.37).sin() * 2.5).collect();
    let q = fit_scale_param(&samples)?;
    println!("scale fitted to samples in [-2.5, 2.5]: a = {:.4}", q.scale());
    for x in [-2.0, -0.5, 0.0, 0.5, 2.0] {
        println!("  x = {x:>4}: relu {:.3}  p(x) {:.3}  p'(x) {:.3}", relu(x), q.apply(x), q.deriv(x));
    }
    Ok(())
}
