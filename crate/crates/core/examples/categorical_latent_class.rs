//! Latent class analysis of categorical answers where one class skips
//! questions far more often.

use mnar_cluster::distributions::LinkFunction;
use mnar_cluster::fit::{fit_model, ModelConfig};
use mnar_cluster::mechanisms::{MechanismKind, MechanismParams, MechanismSpec};
use mnar_cluster::metrics::adjusted_rand_index;
use mnar_cluster::rng::seeded;
use mnar_cluster::simulate::generate_latent_class;
use nalgebra::DMatrix;

fn main() -> mnar_cluster::error::Result<()> {
    let tables = vec![vec![vec![0.7, 0.2, 0.1]; 6], vec![vec![0.1, 0.3, 0.6]; 6]];
    let alpha = DMatrix::from_fn(2, 6, |k, _| if k == 0 { -1.8 } else { -0.4 });
    let mech = MechanismParams::from_tables(MechanismKind::MNARz, LinkFunction::Probit, alpha, DMatrix::zeros(2, 6))?;
    let sim = generate_latent_class(800, &[0.6, 0.4], &tables, &mech, &mut seeded(1))?;
    for kind in [MechanismKind::MNARz, MechanismKind::MCAR] {
        let fit = fit_model(&sim.dataset, 2, MechanismSpec::new(kind, LinkFunction::Probit), &ModelConfig::default().with_seed(4))?;
        println!("{kind:<6} ARI {:.3}", adjusted_rand_index(&fit.partition, &sim.labels)?);
        for k in 0..2 {
            println!("  class {} item 1 probabilities {:.2?}", k + 1, fit.theta.mixture.component(k).categorical[0]);
        }
    }
    Ok(())
}
