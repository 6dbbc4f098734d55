//! Backpropagation against central finite differences on a small network.

use dplm::model::Architecture;
use dplm::numerics::{self, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dplm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let arch = Architecture::new(4, 3, vec![16, 8, 4], 30)?;
    let params = ParamVector::init(&arch, &mut rng);
    let context: Vec<usize> = (0..4).map(|_| rng.random_range(0..30)).collect();
    let target = 7;

    let analytic = numerics::example_grad(&params, &context, target, &arch)?;
    let numeric = numerics::finite_diff_grad(&params, &context, target, &arch, 1e-5)?;

    println!(
        "{} parameters, loss {:.6}",
        params.len(),
        numerics::example_loss(&params, &context, target, &arch)?
    );
    println!("{:<16} {:>12} {:>12}", "block", "|grad|", "max rel err");
    for block in params.layout.blocks() {
        let a = &analytic.values[block.range()];
        let n = &numeric.values[block.range()];
        println!(
            "{:<16} {:>12.4e} {:>12.2e}",
            block.name,
            numerics::l2_norm(a),
            numerics::max_relative_error(a, n)
        );
    }
    println!(
        "overall max rel err {:.2e}",
        numerics::max_relative_error(&analytic.values, &numeric.values)
    );
    Ok(())
}
