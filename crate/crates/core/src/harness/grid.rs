use std::f64::consts::PI;

use crate::sphere::{SamplingSet, SphericalPoint};

/// Regular lat/lon grid at cell centres, point index `i_lon · nlat + i_lat`,
/// with exact cell-area weights.
pub fn make_latlon_grid(nlon: usize, nlat: usize) -> SamplingSet {
    assert!(nlon >= 1 && nlat >= 1, "grid needs at least one cell per axis");
    let dlon = 2.0 * PI / nlon as f64;
    let dlat = PI / nlat as f64;
    let mut points = Vec::with_capacity(nlon * nlat);
    let mut weights = Vec::with_capacity(nlon * nlat);
    for i in 0..nlon {
        let lon = (i as f64 + 0.5) * dlon;
        for j in 0..nlat {
            let lat = -PI / 2.0 + (j as f64 + 0.5) * dlat;
            points.push(SphericalPoint::from_lat_lon(lat, lon).expect("latitude in range"));
            let lo = -PI / 2.0 + j as f64 * dlat;
            weights.push(dlon * ((lo + dlat).sin() - lo.sin()));
        }
    }
    SamplingSet::new(points, Some(weights), format!("latlon-{nlon}x{nlat}"))
        .expect("cell centres are distinct")
}

/// The grid shifted by half a cell in both directions: longitudes on the
/// base cell edges and latitudes on the interior edges, `nlon × (nlat − 1)`
/// points in total. It shares no point with the base grid.
pub fn make_staggered_grid(nlon: usize, nlat: usize) -> SamplingSet {
    assert!(nlon >= 1 && nlat >= 2, "staggered grid needs two latitude cells");
    let dlon = 2.0 * PI / nlon as f64;
    let dlat = PI / nlat as f64;
    let mut points = Vec::with_capacity(nlon * (nlat - 1));
    for i in 0..nlon {
        let lon = i as f64 * dlon;
        for j in 1..nlat {
            let lat = -PI / 2.0 + j as f64 * dlat;
            points.push(SphericalPoint::from_lat_lon(lat, lon).expect("latitude in range"));
        }
    }
    SamplingSet::new(points, None, "staggered").expect("edge points are distinct")
}
