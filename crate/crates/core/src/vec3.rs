//! Small fixed-size vector helpers shared by the geometry modules.

use crate::scalar::Scalar;

pub fn add<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale<T: Scalar>(a: [T; 3], s: T) -> [T; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot<T: Scalar>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<T: Scalar>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm<T: Scalar>(a: [T; 3]) -> T {
    dot(a, a).sqrt()
}

pub fn distance<T: Scalar>(a: [T; 3], b: [T; 3]) -> T {
    norm(sub(a, b))
}

pub fn normalize<T: Scalar>(a: [T; 3]) -> [T; 3] {
    let n = norm(a);
    if n > T::zero() {
        scale(a, T::one() / n)
    } else {
        a
    }
}

/// Distance from point `p` to the segment `[a, b]`.
pub fn point_segment_distance<T: Scalar>(p: [T; 3], a: [T; 3], b: [T; 3]) -> T {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    if len2 <= T::zero() {
        return distance(p, a);
    }
    let t = (dot(sub(p, a), ab) / len2).max(T::zero()).min(T::one());
    distance(p, add(a, scale(ab, t)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_of_axes() {
        let x = [1.0f64, 0.0, 0.0];
        let y = [0.0, 1.0, 0.0];
        assert_eq!(cross(x, y), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn segment_distance_clamps_to_endpoints() {
        let a = [0.0f64, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0];
        assert_eq!(point_segment_distance([2.0, 0.0, 0.0], a, b), 1.0);
        assert_eq!(point_segment_distance([0.5, 2.0, 0.0], a, b), 2.0);
        assert_eq!(point_segment_distance([-3.0, 4.0, 0.0], a, b), 5.0);
    }
}
