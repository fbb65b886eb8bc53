//! An APL unit written two other ways: as the difference of two maxout
//! units, and as a two-stage rectifier network with tied input weights.

use aplnet::pwl::{maxout_eval, maxout_pair_from_apl, AplParams1D, TiedMlpConv};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let unit = AplParams1D::new(vec![0.8, -0.3, 0.5], vec![-1.0, 0.5, 2.0])?;

    let (f, g) = maxout_pair_from_apl(&unit);
    let (fp, gp) = (f.affine_pieces(), g.affine_pieces());
    println!("convex part: {} pieces {:?}", fp.len(), fp);
    println!("subtracted part: {} pieces {:?}", gp.len(), gp);

    let net = TiedMlpConv::from_apl(&unit);
    println!("tied network: signs {:?} biases {:?} mix {:?}", net.signs(), net.biases(), net.mix());

    println!("{:>6} {:>10} {:>10} {:>10}", "x", "apl", "maxout", "mlpconv");
    for i in 0..=8 {
        let x = -4.0 + i as f64;
        let direct = unit.eval(x);
        let maxout = maxout_eval(&fp, x) - maxout_eval(&gp, x);
        println!("{x:>6.1} {direct:>10.4} {maxout:>10.4} {:>10.4}", net.eval(x));
    }
    Ok(())
}
