//! Search the class separation and intercept shift that give a target
//! Bayes misclassification rate and share of missing cells.

use mnar_cluster::distributions::LinkFunction;
use mnar_cluster::mechanisms::{MechanismKind, MechanismParams};
use mnar_cluster::simulate::{calibrate, CalibrationOptions, GeneratorConfig};
use nalgebra::DMatrix;

fn main() -> mnar_cluster::error::Result<()> {
    let mech = MechanismParams::from_tables(
        MechanismKind::MNARz,
        LinkFunction::Logit,
        DMatrix::from_fn(3, 6, |k, _| [-1.0, 0.0, 1.0][k]),
        DMatrix::zeros(3, 6),
    )?;
    let start = GeneratorConfig::three_class(1000, 6, 2.0, mech, 0)?;
    let opts = CalibrationOptions { n_mc: 20_000, tolerance: 0.01, ..CalibrationOptions::default() };
    let c = calibrate(0.15, 0.25, &start, &opts)?;
    println!(
        "delta {:.3}, intercept shift {:.3}: misclassification {:.3}, missing {:.3} after {} rounds",
        c.delta, c.shift, c.achieved.misclassification, c.achieved.missing_rate, c.rounds
    );
    Ok(())
}
