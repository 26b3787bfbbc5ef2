//! Agreement between two partitions.

use mnar_cluster::cli::evaluate;

fn main() -> mnar_cluster::error::Result<()> {
    let truth = [1, 1, 1, 2, 2, 2, 3, 3, 3];
    let found = [7, 7, 4, 4, 4, 4, 9, 9, 9];
    let e = evaluate(&found, &truth)?;
    println!("ARI {:.4}", e.ari);
    println!("rows {:?} x columns {:?}", e.labels_a, e.labels_b);
    for row in &e.confusion {
        println!("{row:?}");
    }
    Ok(())
}
