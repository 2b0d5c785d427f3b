//! Builds the ring-with-leader topology and prints its Laplacians and the
//! leader-connectivity check.

use formation_learning::graph::{build_laplacians, check_assumption3, Topology};

fn main() -> formation_learning::Result<()> {
    let ring = Topology::ring_with_leader(4)?;
    let l = build_laplacians(&ring);
    println!("follower Laplacian L1 = L + Delta:{}", l.follower);
    println!("full Laplacian:{}", l.full);
    let c = check_assumption3(&ring);
    println!("ring: {}", c.diagnostic());

    // Agent 4 cut off from everyone.
    let split = Topology::from_edges(4, &[(0, 1, 1.0), (1, 2, 1.0)], &[(0, 1.0)])?;
    println!("split: {}", check_assumption3(&split).diagnostic());
    Ok(())
}
