use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{Result, VolumeError};

/// Physical-space affine map `p ↦ L·p + t`, stored as a row-major 3×4 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine3 {
    pub m: [[f64; 4]; 3],
}

impl Default for Affine3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine3 {
    pub fn identity() -> Self {
        Self::from_parts([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3])
    }

    pub fn from_parts(linear: [[f64; 3]; 3], translation: [f64; 3]) -> Self {
        let m = std::array::from_fn(|r| {
            [linear[r][0], linear[r][1], linear[r][2], translation[r]]
        });
        Self { m }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut a = Self::identity();
        for r in 0..3 {
            a.m[r][3] = t[r];
        }
        a
    }

    pub fn from_row_major(values: [f64; 12]) -> Self {
        Self {
            m: std::array::from_fn(|r| std::array::from_fn(|c| values[r * 4 + c])),
        }
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        std::array::from_fn(|i| self.m[i / 4][i % 4])
    }

    pub fn linear(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| [self.m[r][0], self.m[r][1], self.m[r][2]])
    }

    pub fn translation_part(&self) -> [f64; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|r| {
            self.m[r][0] * p[0] + self.m[r][1] * p[1] + self.m[r][2] * p[2] + self.m[r][3]
        })
    }

    pub fn det(&self) -> f64 {
        let l = self.linear();
        l[0][0] * (l[1][1] * l[2][2] - l[1][2] * l[2][1])
            - l[0][1] * (l[1][0] * l[2][2] - l[1][2] * l[2][0])
            + l[0][2] * (l[1][0] * l[2][1] - l[1][1] * l[2][0])
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Affine3) -> Affine3 {
        let mut m = [[0.0; 4]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, out) in row.iter_mut().enumerate() {
                let mut v = if c == 3 { self.m[r][3] } else { 0.0 };
                for k in 0..3 {
                    v += self.m[r][k] * other.m[k][c];
                }
                *out = v;
            }
        }
        Affine3 { m }
    }

    pub fn invert(&self) -> Result<Affine3> {
        let d = self.det();
        if !(d.abs() > 1e-9) {
            return Err(VolumeError::SingularTransform(d));
        }
        let l = self.linear();
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| l[r0][c0] * l[r1][c1] - l[r0][c1] * l[r1][c0];
        // Adjugate (transposed cofactor matrix) over the determinant.
        let inv = [
            [cof(1, 2, 1, 2) / d, -cof(0, 2, 1, 2) / d, cof(0, 1, 1, 2) / d],
            [-cof(1, 2, 0, 2) / d, cof(0, 2, 0, 2) / d, -cof(0, 1, 0, 2) / d],
            [cof(1, 2, 0, 1) / d, -cof(0, 2, 0, 1) / d, cof(0, 1, 0, 1) / d],
        ];
        let t = self.translation_part();
        let ti = std::array::from_fn(|r| -(inv[r][0] * t[0] + inv[r][1] * t[1] + inv[r][2] * t[2]));
        Ok(Affine3::from_parts(inv, ti))
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &Affine3) -> f64 {
        self.to_row_major()
            .iter()
            .zip(other.to_row_major())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("array of numbers always serializes")
    }

    pub fn from_json(s: &str) -> Result<Affine3> {
        serde_json::from_str(s).map_err(|e| VolumeError::SchemaError(format!("affine: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Affine3> {
        let s = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => VolumeError::MissingFile(path.to_path_buf()),
            _ => VolumeError::Io(e),
        })?;
        Self::from_json(&s)
    }
}

impl Serialize for Affine3 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Affine3 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 12]>::deserialize(d)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(serde::de::Error::custom("non-finite affine entry"));
        }
        Ok(Affine3::from_row_major(v))
    }
}
