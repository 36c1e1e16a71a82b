use rand::Rng;
use rand_distr::StandardNormal;

use super::{Scene, SceneParams};
use crate::geom::RotatedBox;
use crate::grad::Tensor;
use crate::seed;

/// Per-vehicle height profile: occupancy of each of the `slices` height
/// slices, lowest first. Taller vehicles fill more slices.
pub fn vehicle_template(scene_seed: u64, vehicle: usize, slices: usize) -> Vec<f64> {
    let mut rng = seed::rng(seed::derive(
        scene_seed,
        &[seed::stream::TEMPLATE, vehicle as u64],
    ));
    let height = rng.random_range(0.45..1.0) * slices as f64;
    (0..slices)
        .map(|k| (height - k as f64).clamp(0.0, 1.0))
        .collect()
}

/// Calls `f(row, col, distance_to_ego)` for each cell whose centre lies in
/// `b`, within `range` of the ego.
fn for_covered_cells(b: &RotatedBox, params: &SceneParams, range: f64, mut f: impl FnMut(usize, usize, f64)) {
    let n = params.grid as f64;
    let (ex, ey) = params.ego();
    let (x0, y0, x1, y1) = b.hull();
    let c0 = x0.floor().max(0.0) as usize;
    let r0 = y0.floor().max(0.0) as usize;
    let c1 = x1.ceil().min(n) as usize;
    let r1 = y1.ceil().min(n) as usize;
    for r in r0..r1 {
        for c in c0..c1 {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let d = (x - ex).hypot(y - ey);
            if d <= range && b.contains(x, y) {
                f(r, c, d);
            }
        }
    }
}

/// Channelised lidar frame `C_l × H × W`: `C_l − 1` occupancy slices then an
/// intensity channel. Nothing beyond the lidar range is observed.
pub fn render_lidar(scene: &Scene, params: &SceneParams) -> Tensor {
    let (c, n) = (params.lidar_channels, params.grid);
    let slices = c - 1;
    let plane = n * n;
    let mut data = vec![0.0; c * plane];
    for (i, v) in scene.vehicles.iter().enumerate() {
        let template = vehicle_template(scene.seed, i, slices);
        for_covered_cells(v, params, params.lidar_range, |r, col, d| {
            let cell = r * n + col;
            for (k, occ) in template.iter().enumerate() {
                data[k * plane + cell] = *occ;
            }
            data[slices * plane + cell] = 1.0 / (1.0 + d / params.intensity_d0);
        });
    }
    Tensor::new(vec![c, n, n], data).expect("shape matches buffer")
}

/// Single-channel radar frame: vehicle footprints out to the radar range,
/// blurred by a 3×3 box kernel, with multiplicative speckle and an additive
/// noise floor.
pub fn render_radar(scene: &Scene, params: &SceneParams, noise_seed: u64) -> Tensor {
    let n = params.grid;
    let mut echo = vec![0.0; n * n];
    for v in &scene.vehicles {
        for_covered_cells(v, params, params.radar_range, |r, c, _| echo[r * n + c] = 1.0);
    }
    let mut blurred = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let mut s = 0.0;
            for rr in r.saturating_sub(1)..(r + 2).min(n) {
                for cc in c.saturating_sub(1)..(c + 2).min(n) {
                    s += echo[rr * n + cc];
                }
            }
            blurred[r * n + c] = s / 9.0;
        }
    }
    let mut rng = seed::rng(noise_seed);
    for v in &mut blurred {
        let speckle: f64 = rng.sample(StandardNormal);
        let floor: f64 = rng.sample(StandardNormal);
        *v = (*v * (1.0 + params.radar_speckle * speckle)).max(0.0)
            + (params.radar_floor * floor).abs();
    }
    Tensor::new(vec![1, n, n], blurred).expect("shape matches buffer")
}
