//! Choose the number of classes by ICL.

use mnar_cluster::distributions::LinkFunction;
use mnar_cluster::fit::ModelConfig;
use mnar_cluster::mechanisms::{MechanismKind, MechanismSpec};
use mnar_cluster::metrics::select_k;
use mnar_cluster::simulate::{generate_seeded, GeneratorConfig};

fn main() -> mnar_cluster::error::Result<()> {
    let sim = generate_seeded(&GeneratorConfig::reference(MechanismKind::MNARz, 6, 500, 7)?)?;
    let spec = MechanismSpec::new(MechanismKind::MNARz, LinkFunction::Probit);
    let report = select_k(&sim.dataset, &[1, 2, 3, 4, 5], spec, &ModelConfig::default().with_seed(2))?;
    report.write_csv(std::io::stdout())?;
    println!("chosen K = {:?} (truth 3)", report.chosen_k());
    Ok(())
}
