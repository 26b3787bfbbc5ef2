//! ARI of the Bayes classifier under the generating parameters, the
//! ceiling any fitted model can reach on that design.

use mnar_cluster::distributions::LinkFunction;
use mnar_cluster::simulate::{bayes_rates, theoretical_ari, BayesRule, GeneratorConfig};

fn main() -> mnar_cluster::error::Result<()> {
    println!("missing  target mis  Bayes mis (observed only)  theoretical ARI");
    for rate in [0.1, 0.3, 0.5] {
        let config = GeneratorConfig::mnarz_reference(LinkFunction::Probit, rate, 0.1, 0.0, 10_000, 0)?;
        let r = bayes_rates(&config, 50_000, BayesRule::ObservedOnly, 1, 1)?;
        let ari = theoretical_ari(&config, 50_000, 1, 2)?;
        println!("{rate:>7.1}  {:>10.2}  {:>25.3}  {ari:>15.3}", 0.1, r.misclassification);
    }
    Ok(())
}
