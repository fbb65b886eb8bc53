//! Rewrites a piecewise-linear function that becomes the identity on its
//! right tail as a single APL unit and checks the two agree on a grid.

use aplnet::pwl::{apl_to_pwl, pwl_to_apl, PwlFunction};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Slope -0.5 below -2, then 2, then -1, then the identity from 3 on.
    let breakpoints = vec![-2.0, 0.5, 3.0];
    let slopes = vec![-0.5, 2.0, -1.0, 1.0];
    // g(-2) chosen so that g(3) = 3.
    let anchor = 3.0 - (2.0 * 2.5 - 1.0 * 2.5);
    let g = PwlFunction::new(breakpoints, slopes, anchor)?;

    let unit = pwl_to_apl(&g)?;
    println!("{} hinges:", unit.hinges());
    for (a, b) in unit.pairs() {
        println!("  a = {a:+.3}  b = {b:+.3}");
    }

    let mut worst = 0.0f64;
    for i in 0..=2000 {
        let x = -10.0 + 0.01 * i as f64;
        worst = worst.max((unit.eval(x) - g.eval(x)?).abs());
    }
    println!("max |h(x) - g(x)| on [-10, 10]: {worst:.2e}");

    let back = apl_to_pwl(&unit);
    println!("breakpoints after round trip: {:?}", back.breakpoints());
    println!("left tail slope {} , right tail slope {}", back.left_slope(), back.right_slope());
    Ok(())
}
