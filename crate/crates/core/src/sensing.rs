//! Stereo-camera measurements of a known planar feature map.
//!
//! Each visible feature contributes its horizontal left/right pixel
//! coordinates. Detection is modelled as a Bernoulli event whose probability
//! falls off smoothly with the viewing angle `alpha` (off the optical axis)
//! and the perspective-shift angle `beta` (off the feature's surface normal).
//! During planning the pixel noise of a feature is inflated to `R / p`, i.e.
//! its information is scaled by the detection probability.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::{wrap_angle, StateVector};
use crate::diff::{numeric_jacobian, JACOBIAN_STEP};
use crate::dynamics::{Measurement, NoiseWeighting, ObservationModel};
use crate::error::{Error, Result};

/// Features closer than this along the optical axis cannot be projected.
pub const DEPTH_MIN: f64 = 0.1;

/// Detection probability below which a feature is dropped from the update.
pub const DEFAULT_P_MIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub id: usize,
    /// World-frame position in metres.
    pub position: [f64; 2],
    /// Direction of the surface normal in the world frame, radians in `(-pi, pi]`.
    pub normal_angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Obstacle {
    /// Signed distance from `p` to the obstacle surface (negative inside).
    pub fn surface_distance(&self, p: [f64; 2]) -> f64 {
        (p[0] - self.center[0]).hypot(p[1] - self.center[1]) - self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

/// Known world: features sorted by id, circular obstacles, optional workspace bounds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMap {
    features: Vec<Feature>,
    obstacles: Vec<Obstacle>,
    bounds: Option<Bounds>,
}

impl FeatureMap {
    pub fn new(
        mut features: Vec<Feature>,
        obstacles: Vec<Obstacle>,
        bounds: Option<Bounds>,
    ) -> Result<Self> {
        features.sort_by_key(|f| f.id);
        if let Some(w) = features.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::config(
                "features",
                format!("duplicate feature id {}", w[0].id),
            ));
        }
        for (i, f) in features.iter().enumerate() {
            if !(f.position.iter().all(|c| c.is_finite()) && f.normal_angle.is_finite()) {
                return Err(Error::config(format!("features[{i}]"), "non-finite value"));
            }
            if !(f.normal_angle > -PI && f.normal_angle <= PI) {
                return Err(Error::config(
                    format!("features[{i}].normal_angle"),
                    "must lie in (-pi, pi]",
                ));
            }
        }
        for (i, o) in obstacles.iter().enumerate() {
            if !(o.radius > 0.0 && o.radius.is_finite()) {
                return Err(Error::config(
                    format!("obstacles[{i}].r"),
                    format!("radius must be positive, got {}", o.radius),
                ));
            }
        }
        Ok(Self {
            features,
            obstacles,
            bounds,
        })
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn bounds(&self) -> Option<Bounds> {
        self.bounds
    }

    pub fn feature(&self, id: usize) -> Option<&Feature> {
        self.features
            .binary_search_by_key(&id, |f| f.id)
            .ok()
            .map(|i| &self.features[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub focal_px: f64,
    pub baseline_m: f64,
    /// Half field of view, radians.
    pub alpha_max: f64,
    /// Largest perspective shift before matching fails, radians.
    pub beta_max: f64,
    pub pixel_noise_std: f64,
}

impl Default for CameraParams {
    fn default() -> Self {
        Self {
            focal_px: 400.0,
            baseline_m: 0.2,
            alpha_max: 15f64.to_radians(),
            beta_max: 60f64.to_radians(),
            pixel_noise_std: 1.0,
        }
    }
}

impl CameraParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("focal_px", self.focal_px),
            ("baseline_m", self.baseline_m),
            ("alpha_max", self.alpha_max),
            ("beta_max", self.beta_max),
            ("pixel_noise_std", self.pixel_noise_std),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("camera.{name}"), "must be positive"));
            }
        }
        if self.alpha_max > PI / 2.0 {
            return Err(Error::config("camera.alpha_max", "must not exceed pi/2"));
        }
        Ok(())
    }

    /// Per-feature pixel noise covariance `R_l`.
    pub fn pixel_noise(&self) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * self.pixel_noise_std.powi(2)
    }
}

/// Point in the camera frame: lateral offset (left positive) and forward depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPoint {
    pub lateral: f64,
    pub depth: f64,
}

/// Expresses world point `p` in the frame of a camera looking along the robot heading.
pub fn world_to_camera(x: &StateVector, p: [f64; 2]) -> CameraPoint {
    let (dx, dy) = (p[0] - x.x, p[1] - x.y);
    let (s, c) = x.theta.sin_cos();
    CameraPoint {
        lateral: -s * dx + c * dy,
        depth: c * dx + s * dy,
    }
}

/// Horizontal pixel coordinates `(u_L, u_R)` of a camera-frame point.
pub fn project_stereo(pc: CameraPoint, cam: &CameraParams) -> Result<[f64; 2]> {
    if pc.depth.is_nan() || pc.depth <= DEPTH_MIN {
        return Err(Error::NotVisible {
            depth: pc.depth,
            min_depth: DEPTH_MIN,
        });
    }
    let f = cam.focal_px;
    Ok([
        f * pc.lateral / pc.depth,
        f * (pc.lateral - cam.baseline_m) / pc.depth,
    ])
}

/// Viewing angle `alpha` and perspective-shift angle `beta`, both in `[0, pi]`.
/// `None` when the robot sits on the feature.
pub fn view_angles(x: &StateVector, feat: &Feature) -> Option<(f64, f64)> {
    let pc = world_to_camera(x, feat.position);
    let range = pc.lateral.hypot(pc.depth);
    if range == 0.0 {
        return None;
    }
    let alpha = pc.lateral.abs().atan2(pc.depth);
    let (rx, ry) = (x.x - feat.position[0], x.y - feat.position[1]);
    let (ns, nc) = feat.normal_angle.sin_cos();
    let beta = (rx * ns - ry * nc).abs().atan2(rx * nc + ry * ns);
    Some((alpha, beta))
}

fn cosine_falloff(angle: f64, max: f64) -> f64 {
    0.5 * ((angle / max * PI).cos() + 1.0)
}

/// Probability that the feature is matched from pose `x`.
pub fn visibility_prob(x: &StateVector, feat: &Feature, cam: &CameraParams) -> f64 {
    match view_angles(x, feat) {
        Some((alpha, beta)) if alpha < cam.alpha_max && beta < cam.beta_max => {
            cosine_falloff(alpha, cam.alpha_max) * cosine_falloff(beta, cam.beta_max)
        }
        _ => 0.0,
    }
}

/// Planning-time treatment of feature visibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisibilityMode {
    /// Smooth cosine falloff; noise inflated to `R / p`.
    #[default]
    Smooth,
    /// Indicator of the view cone; full-information measurements inside it.
    Hard,
}

impl VisibilityMode {
    /// Weight `p` entering `R / p` for this mode.
    pub fn weight(self, x: &StateVector, feat: &Feature, cam: &CameraParams) -> f64 {
        match self {
            VisibilityMode::Smooth => visibility_prob(x, feat, cam),
            VisibilityMode::Hard => match view_angles(x, feat) {
                Some((alpha, beta)) if alpha < cam.alpha_max && beta < cam.beta_max => 1.0,
                _ => 0.0,
            },
        }
    }
}

/// Stacked predicted pixels, Jacobian and (scaled) noise for the features
/// active at `x`. Blocks follow ascending feature id.
pub fn assemble_measurement(
    x: &StateVector,
    map: &FeatureMap,
    cam: &CameraParams,
    p_min: f64,
    mode: VisibilityMode,
) -> Result<Measurement> {
    let sensor = StereoCamera {
        map: map.clone(),
        camera: *cam,
        mode,
        p_min,
    };
    let xv = x.to_vector();
    let ids = sensor.active_set(&xv);
    sensor.predict(&xv, &ids, NoiseWeighting::Visibility)
}

/// Stereo camera over a known feature map, usable as a belief-dynamics sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoCamera {
    pub map: FeatureMap,
    pub camera: CameraParams,
    pub mode: VisibilityMode,
    pub p_min: f64,
}

impl StereoCamera {
    pub fn new(map: FeatureMap, camera: CameraParams, mode: VisibilityMode) -> Self {
        Self {
            map,
            camera,
            mode,
            p_min: DEFAULT_P_MIN,
        }
    }

    fn pixels(&self, x: &DVector<f64>, feat: &Feature) -> Result<DVector<f64>> {
        let s = StateVector::from_slice(x.as_slice())?;
        let px = project_stereo(world_to_camera(&s, feat.position), &self.camera)?;
        Ok(DVector::from_row_slice(&px))
    }

    fn lookup(&self, id: usize) -> Result<&Feature> {
        self.map
            .feature(id)
            .ok_or_else(|| Error::config("features", format!("unknown feature id {id}")))
    }
}

impl ObservationModel for StereoCamera {
    fn state_dim(&self) -> usize {
        StateVector::DIM
    }

    fn active_set(&self, x: &DVector<f64>) -> Vec<usize> {
        let Ok(s) = StateVector::from_slice(x.as_slice()) else {
            return Vec::new();
        };
        self.map
            .features()
            .iter()
            .filter(|f| {
                let p = self.mode.weight(&s, f, &self.camera);
                p > 0.0 && p >= self.p_min && world_to_camera(&s, f.position).depth > DEPTH_MIN
            })
            .map(|f| f.id)
            .collect()
    }

    fn predict(&self, x: &DVector<f64>, ids: &[usize], weighting: NoiseWeighting) -> Result<Measurement> {
        let s = StateVector::from_slice(x.as_slice())?;
        let rows = 2 * ids.len();
        let mut meas = Measurement {
            ids: ids.to_vec(),
            predicted: DVector::zeros(rows),
            jacobian: DMatrix::zeros(rows, StateVector::DIM),
            noise_cov: DMatrix::zeros(rows, rows),
        };
        let var = self.camera.pixel_noise_std.powi(2);
        for (k, &id) in ids.iter().enumerate() {
            let feat = self.lookup(id)?;
            let z = self.pixels(x, feat)?;
            let h = numeric_jacobian(|xp| self.pixels(xp, feat), x, JACOBIAN_STEP)?;
            let scale = match weighting {
                NoiseWeighting::Unscaled => 1.0,
                // a frozen feature may sit outside the cone at a probe point
                NoiseWeighting::Visibility => 1.0 / self.mode.weight(&s, feat, &self.camera).max(self.p_min),
            };
            meas.predicted.rows_mut(2 * k, 2).copy_from(&z);
            meas.jacobian.view_mut((2 * k, 0), (2, 3)).copy_from(&h);
            meas.noise_cov[(2 * k, 2 * k)] = var * scale;
            meas.noise_cov[(2 * k + 1, 2 * k + 1)] = var * scale;
        }
        Ok(meas)
    }

    fn channel_ids(&self) -> Vec<usize> {
        self.map.features().iter().map(|f| f.id).collect()
    }

    fn detection_probability(&self, x: &DVector<f64>, id: usize) -> f64 {
        match (StateVector::from_slice(x.as_slice()), self.map.feature(id)) {
            (Ok(s), Some(f)) if world_to_camera(&s, f.position).depth > DEPTH_MIN => {
                visibility_prob(&s, f, &self.camera)
            }
            _ => 0.0,
        }
    }
}

/// Heading that points the camera from `from` towards `to`.
pub fn bearing(from: [f64; 2], to: [f64; 2]) -> f64 {
    wrap_angle((to[1] - from[1]).atan2(to[0] - from[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn feature(id: usize, x: f64, y: f64, normal: f64) -> Feature {
        Feature {
            id,
            position: [x, y],
            normal_angle: normal,
        }
    }

    #[test]
    fn world_to_camera_examples() {
        let pc = world_to_camera(&StateVector::new(0., 0., 0.), [2., 0.]);
        assert_eq!((pc.lateral, pc.depth), (0.0, 2.0));
        let pc = world_to_camera(&StateVector::new(0., 0., FRAC_PI_2), [0., 3.]);
        assert!(pc.lateral.abs() < 1e-15 && (pc.depth - 3.0).abs() < 1e-15);
        let pc = world_to_camera(&StateVector::new(1., 1., 0.), [3., 2.]);
        assert_eq!((pc.lateral, pc.depth), (1.0, 2.0));
    }

    #[test]
    fn project_stereo_examples() {
        let cam = CameraParams::default();
        let px = project_stereo(CameraPoint { lateral: 0.0, depth: 2.0 }, &cam).unwrap();
        assert!(px[0].abs() < 1e-12 && (px[1] + 40.0).abs() < 1e-12);
        let px = project_stereo(CameraPoint { lateral: 1.0, depth: 2.0 }, &cam).unwrap();
        assert!((px[0] - 200.0).abs() < 1e-12 && (px[1] - 160.0).abs() < 1e-12);
        assert!(matches!(
            project_stereo(CameraPoint { lateral: 0.0, depth: 0.1 }, &cam),
            Err(Error::NotVisible { .. })
        ));
    }

    #[test]
    fn disparity_is_fb_over_depth() {
        let cam = CameraParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let pc = CameraPoint {
                lateral: rng.random_range(-5.0..5.0),
                depth: rng.random_range(0.2..20.0),
            };
            let px = project_stereo(pc, &cam).unwrap();
            let disparity = px[0] - px[1];
            assert!(disparity > 0.0);
            assert!((disparity - cam.focal_px * cam.baseline_m / pc.depth).abs() < 1e-9);
        }
    }

    /// Pose at the origin whose camera sees `feat` (normal facing the robot)
    /// at view angle `alpha`.
    fn pose_with_alpha(alpha: f64) -> (StateVector, Feature) {
        (StateVector::new(0., 0., -alpha), feature(0, 3.0, 0.0, PI))
    }

    #[test]
    fn visibility_examples() {
        let cam = CameraParams::default();
        let (x, f) = pose_with_alpha(0.0);
        assert!((visibility_prob(&x, &f, &cam) - 1.0).abs() < 1e-12);
        let (x, f) = pose_with_alpha(cam.alpha_max / 2.0);
        assert!((visibility_prob(&x, &f, &cam) - 0.5).abs() < 1e-12);
        let (x, f) = pose_with_alpha(cam.alpha_max);
        assert_eq!(visibility_prob(&x, &f, &cam), 0.0);
        let (x, f) = pose_with_alpha(cam.alpha_max * (1.0 - 1e-9));
        assert!(visibility_prob(&x, &f, &cam) < 1e-15);
        // robot on top of the feature
        assert_eq!(
            visibility_prob(&StateVector::new(3., 0., 0.), &f, &cam),
            0.0
        );
    }

    #[test]
    fn beta_uses_feature_normal() {
        let cam = CameraParams::default();
        // feature normal points away from the robot: beta = pi
        let f = feature(0, 3.0, 0.0, 0.0);
        assert_eq!(visibility_prob(&StateVector::new(0., 0., 0.), &f, &cam), 0.0);
        // robot at 30 deg off the normal: p2 = (cos(pi/2) + 1)/2 = 0.5
        let f = feature(0, 0.0, 0.0, 0.0);
        let r = 3.0;
        let a = 30f64.to_radians();
        let x = StateVector::new(r * a.cos(), r * a.sin(), a + PI);
        let (alpha, beta) = view_angles(&x, &f).unwrap();
        assert!(alpha.abs() < 1e-12);
        assert!((beta - a).abs() < 1e-12);
        assert!((visibility_prob(&x, &f, &cam) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn visibility_is_continuous_across_the_boundary() {
        let cam = CameraParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let f = feature(0, rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0);
            let range = rng.random_range(0.5..6.0);
            let bearing_from_feature: f64 = rng.random_range(-1.0..1.0);
            let rx = f.position[0] + range * bearing_from_feature.cos();
            let ry = f.position[1] + range * bearing_from_feature.sin();
            let to_feature = (f.position[1] - ry).atan2(f.position[0] - rx);
            // straddle one of the alpha cone edges
            let edge = if rng.random_bool(0.5) { cam.alpha_max } else { -cam.alpha_max };
            let offset = rng.random_range(-1e-3..1e-3);
            let x = StateVector::new(rx, ry, to_feature + edge + offset);
            let mut xp = x;
            xp.theta += 1e-6;
            let dp = (visibility_prob(&x, &f, &cam) - visibility_prob(&xp, &f, &cam)).abs();
            assert!(dp < 1e-4, "jump {dp}");
        }
    }

    #[test]
    fn visibility_monotone_in_alpha() {
        let cam = CameraParams::default();
        let mut last = f64::INFINITY;
        for i in 0..=200 {
            let (x, f) = pose_with_alpha(cam.alpha_max * 1.2 * i as f64 / 200.0);
            let p = visibility_prob(&x, &f, &cam);
            assert!(p <= last + 1e-15);
            last = p;
        }
    }

    fn single_feature_map() -> FeatureMap {
        FeatureMap::new(vec![feature(0, 3.0, 0.0, PI)], vec![], None).unwrap()
    }

    #[test]
    fn assembly_excludes_features_outside_the_cone() {
        let map = single_feature_map();
        let cam = CameraParams::default();
        let x = StateVector::new(0., 0., PI / 2.0);
        for mode in [VisibilityMode::Smooth, VisibilityMode::Hard] {
            let m = assemble_measurement(&x, &map, &cam, DEFAULT_P_MIN, mode).unwrap();
            assert!(m.is_empty());
            assert_eq!(m.jacobian.nrows(), 0);
        }
    }

    #[test]
    fn assembly_scales_noise_by_visibility() {
        let map = single_feature_map();
        let cam = CameraParams::default();
        let r = cam.pixel_noise();

        let (x, _) = pose_with_alpha(0.0);
        let smooth = assemble_measurement(&x, &map, &cam, DEFAULT_P_MIN, VisibilityMode::Smooth).unwrap();
        let hard = assemble_measurement(&x, &map, &cam, DEFAULT_P_MIN, VisibilityMode::Hard).unwrap();
        assert!((&smooth.noise_cov - &r).amax() < 1e-12);
        assert_eq!(smooth, hard);
        assert_eq!(smooth.ids, vec![0]);
        assert!((smooth.predicted[0]).abs() < 1e-9);

        let (x, _) = pose_with_alpha(cam.alpha_max / 2.0);
        let m = assemble_measurement(&x, &map, &cam, DEFAULT_P_MIN, VisibilityMode::Smooth).unwrap();
        assert!((&m.noise_cov - &r * 2.0).amax() < 1e-9);
    }

    #[test]
    fn hard_mode_near_the_cone_edge() {
        let map = single_feature_map();
        let cam = CameraParams::default();
        let (x, _) = pose_with_alpha(0.99 * cam.alpha_max);
        let hard = assemble_measurement(&x, &map, &cam, DEFAULT_P_MIN, VisibilityMode::Hard).unwrap();
        assert!((&hard.noise_cov - cam.pixel_noise()).amax() < 1e-12);

        // p1(0.99 alpha_max) = (1 - cos(0.01 pi)) / 2, well above p_min
        let p = 0.5 * (1.0 - (0.01 * PI).cos());
        assert!((p - 2.4672e-4).abs() < 1e-7);
        let smooth = assemble_measurement(&x, &map, &cam, DEFAULT_P_MIN, VisibilityMode::Smooth).unwrap();
        assert_eq!(smooth.ids, vec![0]);
        assert!(((smooth.noise_cov[(0, 0)] * p) - 1.0).abs() < 1e-9);
        assert_eq!(smooth.jacobian, hard.jacobian);
    }

    #[test]
    fn jacobian_matches_pinhole_derivative() {
        let map = single_feature_map();
        let cam = CameraParams::default();
        let x = StateVector::new(0.2, -0.1, 0.05);
        let m = assemble_measurement(&x, &map, &cam, DEFAULT_P_MIN, VisibilityMode::Smooth).unwrap();
        // d u_L / d theta = f (lateral^2 + depth^2) / depth^2 * (-1)
        let pc = world_to_camera(&x, [3.0, 0.0]);
        let expected = -cam.focal_px * (pc.lateral.powi(2) + pc.depth.powi(2)) / pc.depth.powi(2);
        assert!((m.jacobian[(0, 2)] - expected).abs() < 1e-4 * expected.abs());
    }

    #[test]
    fn information_scales_linearly_with_p() {
        let map = single_feature_map();
        let cam = CameraParams::default();
        let info = |alpha: f64| {
            let (x, _) = pose_with_alpha(alpha);
            let m = assemble_measurement(&x, &map, &cam, DEFAULT_P_MIN, VisibilityMode::Smooth).unwrap();
            let p = visibility_prob(&x, &map.features()[0], &cam);
            let unit = m.jacobian.transpose() * cam.pixel_noise().try_inverse().unwrap() * &m.jacobian;
            let scaled = m.jacobian.transpose() * m.noise_cov.clone().try_inverse().unwrap() * &m.jacobian;
            (scaled - unit * p).amax()
        };
        for a in [0.0, 0.05, 0.1, 0.2, 0.25] {
            assert!(info(a) < 1e-6);
        }
    }

    #[test]
    fn map_validation() {
        assert!(FeatureMap::new(
            vec![feature(1, 0., 0., 0.), feature(1, 1., 0., 0.)],
            vec![],
            None
        )
        .is_err());
        let err = FeatureMap::new(
            vec![],
            vec![Obstacle {
                center: [0., 0.],
                radius: 0.0,
            }],
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("obstacles[0].r"));
        let m = FeatureMap::new(vec![feature(5, 0., 0., 0.), feature(2, 1., 0., 0.)], vec![], None).unwrap();
        assert_eq!(m.features()[0].id, 2);
        assert!(m.feature(5).is_some());
    }
}
