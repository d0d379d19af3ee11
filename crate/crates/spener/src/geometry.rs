//! 2D fan-beam acquisition geometry: source positions, detector bins, rays,
//! and sample points along rays.
//!
//! Conventions used throughout the crate:
//! - the image occupies the square `[-E/2, E/2]^2` with `E = image_size *
//!   pixel_size`, centered at the isocenter;
//! - the reconstructible field of view is the disk of radius `E/2` inscribed
//!   in that square;
//! - the source at view `v` sits at `source_distance * (cos a_v, sin a_v)`;
//! - the detector is flat, perpendicular to the source-isocenter axis, at
//!   `detector_distance` behind the isocenter, with bins spaced uniformly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Full description of a 2D fan-beam acquisition. Immutable after
/// construction; shared freely across worker threads.
#[derive(Debug, Clone, PartialEq)]
pub struct FanBeamGeometry<S> {
    pub n_views: usize,
    pub n_detectors: usize,
    pub source_distance: S,
    pub detector_distance: S,
    pub detector_spacing: S,
    /// Source angles in radians, strictly increasing within `[0, 2pi)`.
    pub angles: Vec<S>,
    /// Radius of the reconstructible disk.
    pub fov_radius: S,
    /// Side length of the target pixel grid.
    pub image_size: usize,
    /// Physical pixel size of the target grid.
    pub pixel_size: S,
}

/// A single source-to-detector ray, clipped against the FOV disk.
///
/// `t_near == t_far` signals that the ray misses the disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray<S> {
    pub origin: [S; 2],
    pub direction: [S; 2],
    pub t_near: S,
    pub t_far: S,
}

impl<S: Scalar> Ray<S> {
    /// Chord length of the ray inside the FOV disk.
    pub fn chord(&self) -> S {
        self.t_far - self.t_near
    }

    /// Perpendicular distance from the isocenter to the ray's line.
    pub fn distance_to_isocenter(&self) -> S {
        (self.origin[0] * self.direction[1] - self.origin[1] * self.direction[0]).abs()
    }

    pub fn point_at(&self, t: S) -> [S; 2] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
        ]
    }
}

/// Detector spacing such that the fan from every view covers the FOV disk
/// with a 5% angular margin.
pub fn default_detector_spacing<S: Scalar>(
    n_detectors: usize,
    source_distance: S,
    detector_distance: S,
    fov_radius: S,
) -> S {
    let margin = S::of(1.05);
    let ratio = (margin * fov_radius / source_distance).min(S::of(0.999));
    let half_fan = ratio.asin();
    let half_width = (source_distance + detector_distance) * half_fan.tan();
    S::of(2.0) * half_width / S::from_usize(n_detectors).unwrap()
}

/// Builds a uniform-angle fan-beam geometry.
///
/// Angles are `2 pi k / n_views`; the FOV radius is half the image extent.
/// The source must lie strictly outside the image square's circumscribed
/// circle, otherwise the fan is degenerate.
pub fn make_geometry<S: Scalar>(
    n_views: usize,
    n_detectors: usize,
    source_distance: S,
    detector_distance: S,
    detector_spacing: S,
    image_size: usize,
    pixel_size: S,
) -> Result<FanBeamGeometry<S>> {
    if n_views < 1 || n_detectors < 1 || image_size < 1 {
        return Err(Error::InvalidGeometry(format!(
            "counts must be >= 1 (n_views={n_views}, n_detectors={n_detectors}, image_size={image_size})"
        )));
    }
    for (name, v) in [
        ("source_distance", source_distance),
        ("detector_distance", detector_distance),
        ("detector_spacing", detector_spacing),
        ("pixel_size", pixel_size),
    ] {
        if !(v > S::zero()) || !v.is_finite() {
            return Err(Error::InvalidGeometry(format!("{name} must be > 0, got {v}")));
        }
    }
    let extent = S::from_usize(image_size).unwrap() * pixel_size;
    let fov_radius = extent / S::of(2.0);
    let half_diagonal = fov_radius * S::of(2.0).sqrt();
    if source_distance <= half_diagonal {
        return Err(Error::InvalidGeometry(format!(
            "source_distance {source_distance} lies inside the image (half-diagonal {half_diagonal})"
        )));
    }

    let step = S::of(std::f64::consts::TAU) / S::from_usize(n_views).unwrap();
    let angles = (0..n_views)
        .map(|k| S::from_usize(k).unwrap() * step)
        .collect();

    Ok(FanBeamGeometry {
        n_views,
        n_detectors,
        source_distance,
        detector_distance,
        detector_spacing,
        angles,
        fov_radius,
        image_size,
        pixel_size,
    })
}

impl<S: Scalar> FanBeamGeometry<S> {
    /// Total number of rays (`n_views * n_detectors`).
    pub fn n_rays(&self) -> usize {
        self.n_views * self.n_detectors
    }

    /// Signed detector offset of bin `d` from the detector center line.
    pub fn detector_offset(&self, detector: usize) -> S {
        let center = (S::from_usize(self.n_detectors).unwrap() - S::one()) / S::of(2.0);
        (S::from_usize(detector).unwrap() - center) * self.detector_spacing
    }

    /// The ray from the view's source through the center of a detector bin,
    /// clipped against the FOV disk.
    pub fn ray_for(&self, view: usize, detector: usize) -> Result<Ray<S>> {
        if view >= self.n_views || detector >= self.n_detectors {
            return Err(Error::invalid(format!(
                "ray index out of range: view {view}/{}, detector {detector}/{}",
                self.n_views, self.n_detectors
            )));
        }
        let beta = self.angles[view];
        let (sin_b, cos_b) = (beta.sin(), beta.cos());
        let axis = [cos_b, sin_b]; // isocenter -> source
        let tangent = [-sin_b, cos_b]; // detector direction
        let u = self.detector_offset(detector);

        let origin = [self.source_distance * axis[0], self.source_distance * axis[1]];
        let det_point = [
            -self.detector_distance * axis[0] + u * tangent[0],
            -self.detector_distance * axis[1] + u * tangent[1],
        ];
        let dx = det_point[0] - origin[0];
        let dy = det_point[1] - origin[1];
        let norm = (dx * dx + dy * dy).sqrt();
        let direction = [dx / norm, dy / norm];

        // Line-circle intersection against the FOV disk.
        let od = origin[0] * direction[0] + origin[1] * direction[1];
        let oo = origin[0] * origin[0] + origin[1] * origin[1];
        let disc = od * od - (oo - self.fov_radius * self.fov_radius);
        let (t_near, t_far) = if disc > S::zero() {
            let sq = disc.sqrt();
            (-od - sq, -od + sq)
        } else {
            (-od, -od) // miss (or exact tangent): empty chord
        };

        Ok(Ray { origin, direction, t_near, t_far })
    }
}

/// Midpoint-rule sample points along the ray's FOV chord, spaced exactly
/// `delta_p` apart. Empty when the ray misses the disk or the chord is
/// shorter than one step.
pub fn sample_points<S: Scalar>(ray: &Ray<S>, delta_p: S) -> Result<Vec<[S; 2]>> {
    let mut out = Vec::new();
    sample_points_into(ray, delta_p, &mut out)?;
    Ok(out)
}

/// Allocation-free variant of [`sample_points`] for hot loops.
pub fn sample_points_into<S: Scalar>(ray: &Ray<S>, delta_p: S, out: &mut Vec<[S; 2]>) -> Result<()> {
    if !(delta_p > S::zero()) {
        return Err(Error::invalid(format!("delta_p must be > 0, got {delta_p}")));
    }
    out.clear();
    let chord = ray.chord();
    if chord <= S::zero() {
        return Ok(());
    }
    let n = (chord / delta_p).floor().to_usize().unwrap_or(0);
    out.reserve(n);
    let half = S::of(0.5);
    for k in 0..n {
        let t = ray.t_near + (S::from_usize(k).unwrap() + half) * delta_p;
        out.push(ray.point_at(t));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom_8x5() -> FanBeamGeometry<f64> {
        // Small geometry with the default distances; spacing covers the FOV.
        let spacing = default_detector_spacing(5, 3.0, 3.0, 0.5);
        make_geometry(8, 5, 3.0, 3.0, spacing, 64, 1.0 / 64.0).unwrap()
    }

    #[test]
    fn rejects_empty_acquisition() {
        let err = make_geometry::<f64>(0, 512, 3.0, 3.0, 0.006, 256, 1.0 / 256.0);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_source_inside_fov() {
        // fov_radius = 0.5, source at 0.4: degenerate fan.
        let err = make_geometry::<f64>(60, 512, 0.4, 3.0, 0.006, 256, 1.0 / 256.0);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_nonpositive_lengths() {
        assert!(make_geometry::<f64>(4, 4, 3.0, -1.0, 0.01, 64, 1.0 / 64.0).is_err());
        assert!(make_geometry::<f64>(4, 4, 3.0, 3.0, 0.0, 64, 1.0 / 64.0).is_err());
    }

    #[test]
    fn paper_scale_geometry_has_uniform_angles() {
        let g = make_geometry::<f64>(60, 512, 3.0, 3.0, 0.006, 256, 1.0 / 256.0).unwrap();
        assert_eq!(g.angles.len(), 60);
        assert_eq!(g.fov_radius, 0.5);
        let step = std::f64::consts::TAU / 60.0;
        for (k, a) in g.angles.iter().enumerate() {
            assert!((a - k as f64 * step).abs() < 1e-15);
            assert!(*a >= 0.0 && *a < std::f64::consts::TAU);
        }
        for w in g.angles.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn central_ray_passes_through_isocenter() {
        let g = geom_8x5();
        for v in 0..g.n_views {
            let ray = g.ray_for(v, 2).unwrap(); // (n_d - 1) / 2 with n_d = 5
            assert!(ray.distance_to_isocenter() < 1e-9);
        }
    }

    #[test]
    fn directions_are_unit_norm() {
        let g = geom_8x5();
        for v in 0..g.n_views {
            for d in 0..g.n_detectors {
                let ray = g.ray_for(v, d).unwrap();
                let n = (ray.direction[0].powi(2) + ray.direction[1].powi(2)).sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn opposed_central_rays_are_the_same_line_reversed() {
        let g = geom_8x5();
        for v in 0..4 {
            let a = g.ray_for(v, 2).unwrap();
            let b = g.ray_for(v + 4, 2).unwrap();
            // Same line: both pass through the isocenter, directions opposite.
            assert!(a.distance_to_isocenter() < 1e-9);
            assert!(b.distance_to_isocenter() < 1e-9);
            assert!((a.direction[0] + b.direction[0]).abs() < 1e-9);
            assert!((a.direction[1] + b.direction[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn perpendicular_distance_matches_trigonometric_oracle() {
        // Brute-force oracle: distance from isocenter to the source-detector
        // line is sd * |u| / sqrt((sd + dd)^2 + u^2) by similar triangles.
        let g = geom_8x5();
        for v in 0..g.n_views {
            for d in 0..g.n_detectors {
                let ray = g.ray_for(v, d).unwrap();
                let u = g.detector_offset(d);
                let sd = g.source_distance;
                let dd = g.detector_distance;
                let expected = sd * u.abs() / ((sd + dd).powi(2) + u * u).sqrt();
                assert!(
                    (ray.distance_to_isocenter() - expected).abs() < 1e-9,
                    "view {v} det {d}"
                );
            }
        }
    }

    #[test]
    fn extreme_detector_missing_the_fov_has_empty_chord() {
        // Spacing much wider than needed: outer bins miss the disk.
        let g = make_geometry::<f64>(4, 9, 3.0, 3.0, 0.8, 64, 1.0 / 64.0).unwrap();
        let ray = g.ray_for(0, 0).unwrap();
        // Analytic discriminant oracle.
        let od = ray.origin[0] * ray.direction[0] + ray.origin[1] * ray.direction[1];
        let oo = ray.origin[0].powi(2) + ray.origin[1].powi(2);
        let disc = od * od - (oo - g.fov_radius * g.fov_radius);
        assert!(disc < 0.0);
        assert_eq!(ray.t_near, ray.t_far);
        assert!(sample_points(&ray, 0.01).unwrap().is_empty());
    }

    #[test]
    fn sample_count_matches_chord_over_step() {
        let ray = Ray::<f64> {
            origin: [-2.0, 0.0],
            direction: [1.0, 0.0],
            t_near: 0.0,
            t_far: 1.0,
        };
        let pts = sample_points(&ray, 0.1).unwrap();
        assert_eq!(pts.len(), 10);
        for w in pts.windows(2) {
            let dx = w[1][0] - w[0][0];
            assert!((dx - 0.1).abs() < 1e-12 * 0.1);
        }
        // Degenerate short chord: no points, the ray contributes zero.
        let short = Ray::<f64> {
            origin: [-2.0, 0.0],
            direction: [1.0, 0.0],
            t_near: 0.0,
            t_far: 0.05,
        };
        assert!(sample_points(&short, 0.1).unwrap().is_empty());
    }

    #[test]
    fn sample_points_stay_inside_the_fov() {
        let g = geom_8x5();
        for v in 0..g.n_views {
            for d in 0..g.n_detectors {
                let ray = g.ray_for(v, d).unwrap();
                for p in sample_points(&ray, g.pixel_size / 2.0).unwrap() {
                    let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                    assert!(r <= g.fov_radius + 1e-9);
                }
            }
        }
    }

    #[test]
    fn rotating_by_the_angular_step_permutes_views() {
        let g = geom_8x5();
        let step = std::f64::consts::TAU / 8.0;
        let (s, c) = step.sin_cos();
        let rot = |p: [f64; 2]| [c * p[0] - s * p[1], s * p[0] + c * p[1]];
        for v in 0..g.n_views {
            for d in 0..g.n_detectors {
                let a = g.ray_for(v, d).unwrap();
                let b = g.ray_for((v + 1) % g.n_views, d).unwrap();
                let ro = rot(a.origin);
                let rd = rot(a.direction);
                for i in 0..2 {
                    assert!((ro[i] - b.origin[i]).abs() < 1e-12);
                    assert!((rd[i] - b.direction[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn out_of_range_indices_are_rejected() {
        let g = geom_8x5();
        assert!(g.ray_for(8, 0).is_err());
        assert!(g.ray_for(0, 5).is_err());
    }
}
