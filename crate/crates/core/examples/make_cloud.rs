//! Writes a uniformly sampled sphere or torus point cloud, handy as input
//! for the CLI pipeline.
//!
//! Usage: make_cloud <sphere:RADIUS | torus:R,r> <count> <seed> <out.(xyz|ply)>

use densify_core::geom::{PointCloud, Vec3};
use densify_core::io::{write_point_cloud, PointFormat};
use densify_core::metrics::OracleSurface;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() != 5 {
        eprintln!("usage: make_cloud <sphere:RADIUS | torus:R,r> <count> <seed> <out.(xyz|ply)>");
        std::process::exit(1);
    }
    let surface = match args[1].split_once(':') {
        Some(("sphere", radius)) => {
            OracleSurface::sphere(Vec3::zeros(), radius.parse().expect("bad radius"))
        }
        Some(("torus", params)) => {
            let (big_r, r) = params.split_once(',').expect("torus needs R,r");
            OracleSurface::torus(big_r.parse().expect("bad R"), r.parse().expect("bad r"))
        }
        _ => {
            eprintln!("unknown surface `{}`", args[1]);
            std::process::exit(1);
        }
    }
    .expect("invalid surface parameters");
    let count: usize = args[2].parse().expect("bad count");
    let seed: u64 = args[3].parse().expect("bad seed");
    let out = Path::new(&args[4]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = surface.sample(count, &mut rng).expect("sampling failed");
    let cloud = PointCloud::new(points).expect("non-finite sample");
    write_point_cloud(&cloud, out, PointFormat::from_path(out)).expect("write failed");
    eprintln!("wrote {} points to {}", count, out.display());
}
