use serde::{Deserialize, Serialize};

/// Axis-aligned 3D box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// Full extents.
    pub size: [f64; 3],
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], class_id: usize) -> Self {
        Box3D {
            center,
            size,
            class_id,
            score: None,
        }
    }

    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.center[a] - 0.5 * self.size[a])
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.center[a] + 0.5 * self.size[a])
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }

    /// Strict interior test.
    pub fn contains_strict(&self, p: &[f64; 3]) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|a| p[a] > lo[a] && p[a] < hi[a])
    }

    /// Regression target relative to `point`: centre offset and log size.
    pub fn encode(&self, point: &[f64; 3]) -> [f64; 6] {
        [
            self.center[0] - point[0],
            self.center[1] - point[1],
            self.center[2] - point[2],
            self.size[0].ln(),
            self.size[1].ln(),
            self.size[2].ln(),
        ]
    }

    pub fn decode(reg: &[f64], point: &[f64; 3], class_id: usize) -> Self {
        Box3D::new(
            [point[0] + reg[0], point[1] + reg[1], point[2] + reg[2]],
            [reg[3].exp(), reg[4].exp(), reg[5].exp()],
            class_id,
        )
    }
}

pub fn intersection_volume(a: &Box3D, b: &Box3D) -> f64 {
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    (0..3)
        .map(|i| (ahi[i].min(bhi[i]) - alo[i].max(blo[i])).max(0.0))
        .product()
}

/// Axis-aligned intersection over union.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_iou_is_one() {
        let a = Box3D::new([1.0, 2.0, 0.5], [0.4, 1.0, 2.0], 0);
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_offset_unit_cubes() {
        let a = Box3D::new([0.0; 3], [1.0; 3], 0);
        let b = Box3D::new([0.5, 0.0, 0.0], [1.0; 3], 0);
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_is_zero() {
        let a = Box3D::new([0.0; 3], [1.0; 3], 0);
        let b = Box3D::new([3.0, 0.0, 0.0], [1.0; 3], 0);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn zero_regression_is_unit_box() {
        let b = Box3D::decode(&[0.0; 6], &[1.0, 2.0, 3.0], 2);
        assert_eq!(b.center, [1.0, 2.0, 3.0]);
        assert_eq!(b.size, [1.0; 3]);
    }
}
