use serde::{Deserialize, Serialize};

use crate::volume::{Affine3, Volume};

use super::StepSizes;

/// Twelve-parameter affine: translation (mm), intrinsic z-y-x Euler angles
/// (rad), log-scales and shears (xy, xz, yz).
///
/// The transform is `T(p) = R·S·H·(p - c) + c + t` about a center `c`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub v: [f64; 12],
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|k| a[r][k] * b[k][c]).sum()))
}

impl AffineParams {
    pub fn rigid(translation: [f64; 3], angles: [f64; 3]) -> Self {
        let mut v = [0.0; 12];
        v[..3].copy_from_slice(&translation);
        v[3..6].copy_from_slice(&angles);
        Self { v }
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.v[0], self.v[1], self.v[2]]
    }

    /// Rotation angles about x, y, z (applied z first in the intrinsic sense: `R = Rz·Ry·Rx`).
    pub fn angles(&self) -> [f64; 3] {
        [self.v[3], self.v[4], self.v[5]]
    }

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [rx, ry, rz] = self.angles();
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        let mx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let my = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let mz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        matmul(&mz, &matmul(&my, &mx))
    }

    pub fn linear(&self) -> [[f64; 3]; 3] {
        let s = [self.v[6].exp(), self.v[7].exp(), self.v[8].exp()];
        let scale = [[s[0], 0.0, 0.0], [0.0, s[1], 0.0], [0.0, 0.0, s[2]]];
        let shear = [[1.0, self.v[9], self.v[10]], [0.0, 1.0, self.v[11]], [0.0, 0.0, 1.0]];
        matmul(&self.rotation_matrix(), &matmul(&scale, &shear))
    }

    pub fn to_affine(&self, center: [f64; 3]) -> Affine3 {
        let l = self.linear();
        let t = self.translation();
        let trans: [f64; 3] = std::array::from_fn(|r| {
            center[r] + t[r] - (0..3).map(|k| l[r][k] * center[k]).sum::<f64>()
        });
        Affine3::from_parts(l, trans)
    }

    pub(crate) fn fd_steps(s: &StepSizes) -> [f64; 12] {
        let mut h = [0.0; 12];
        h[..3].fill(s.translation);
        h[3..6].fill(s.rotation);
        h[6..9].fill(s.scale);
        h[9..12].fill(s.shear);
        h
    }

    /// Parameter increments that displace a point at distance `radius` by ~1 mm.
    pub(crate) fn unit_scales(radius: f64) -> [f64; 12] {
        let mut u = [1.0 / radius; 12];
        u[..3].fill(1.0);
        u
    }
}

/// Mean distance (mm) between where `estimate⁻¹` and `truth⁻¹` send the
/// eight corner voxel centers of `grid`.
pub fn corner_landmark_error(estimate: &Affine3, truth: &Affine3, grid: &Volume) -> f64 {
    let (Ok(ei), Ok(ti)) = (estimate.invert(), truth.invert()) else {
        return f64::INFINITY;
    };
    let d = grid.dims();
    let mut total = 0.0;
    for corner in 0..8 {
        let idx: [f64; 3] = std::array::from_fn(|a| if corner >> a & 1 == 1 { (d[a] - 1) as f64 } else { 0.0 });
        let p = grid.voxel_to_world(idx);
        let (a, b) = (ei.apply(p), ti.apply(p));
        total += (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
    }
    total / 8.0
}
