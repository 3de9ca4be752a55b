//! Map files: features with surface normals (degrees), circular obstacles, bounds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::belief::wrap_angle;
use crate::error::{Error, Result};
use crate::sensing::{Bounds, Feature, FeatureMap, Obstacle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bounds: Option<Bounds>,
    #[serde(default)]
    features: Vec<FeatureEntry>,
    #[serde(default)]
    obstacles: Vec<ObstacleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureEntry {
    id: usize,
    x: f64,
    y: f64,
    normal_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObstacleEntry {
    cx: f64,
    cy: f64,
    r: f64,
}

pub fn parse_map(text: &str, origin: &str) -> Result<FeatureMap> {
    let file: MapFile = toml::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    let features = file
        .features
        .iter()
        .map(|f| Feature {
            id: f.id,
            position: [f.x, f.y],
            normal_angle: wrap_angle(f.normal_deg.to_radians()),
        })
        .collect();
    let obstacles = file
        .obstacles
        .iter()
        .map(|o| Obstacle {
            center: [o.cx, o.cy],
            radius: o.r,
        })
        .collect();
    FeatureMap::new(features, obstacles, file.bounds).map_err(|e| match e {
        Error::Config { path, message } => Error::Config {
            path: format!("{origin}: {path}"),
            message,
        },
        other => other,
    })
}

pub fn load_map(path: &Path) -> Result<FeatureMap> {
    let text = super::read_text(path)?;
    parse_map(&text, &path.display().to_string())
}

/// Degree value that converts back to exactly `angle`.
fn exact_degrees(angle: f64) -> f64 {
    let mut d = angle.to_degrees();
    for _ in 0..64 {
        let back = wrap_angle(d.to_radians());
        if back == angle {
            return d;
        }
        d = if back < angle { d.next_up() } else { d.next_down() };
    }
    angle.to_degrees()
}

pub fn map_to_toml(map: &FeatureMap) -> Result<String> {
    let file = MapFile {
        bounds: map.bounds(),
        features: map
            .features()
            .iter()
            .map(|f| FeatureEntry {
                id: f.id,
                x: f.position[0],
                y: f.position[1],
                normal_deg: exact_degrees(f.normal_angle),
            })
            .collect(),
        obstacles: map
            .obstacles()
            .iter()
            .map(|o| ObstacleEntry {
                cx: o.center[0],
                cy: o.center[1],
                r: o.radius,
            })
            .collect(),
    };
    toml::to_string(&file).map_err(|e| Error::Parse {
        path: "map".into(),
        message: e.to_string(),
    })
}

pub fn save_map(map: &FeatureMap, path: &Path) -> Result<()> {
    super::write_text(path, &map_to_toml(map)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn degrees_are_converted() {
        let map = parse_map(
            "[[features]]\nid = 3\nx = 1.0\ny = 2.0\nnormal_deg = 180\n\n[[features]]\nid = 1\nx = 0.0\ny = 0.0\nnormal_deg = -90.0\n",
            "inline",
        )
        .unwrap();
        assert_eq!(map.feature(3).unwrap().normal_angle, PI);
        assert_eq!(map.feature(1).unwrap().normal_angle, -PI / 2.0);
        assert_eq!(map.features()[0].id, 1);
    }

    #[test]
    fn empty_map_is_valid() {
        let map = parse_map("", "inline").unwrap();
        assert!(map.features().is_empty() && map.obstacles().is_empty());
    }

    #[test]
    fn bad_maps_name_the_field() {
        let err = parse_map("[[obstacles]]\ncx = 0.0\ncy = 0.0\nr = 0.0\n", "m.toml").unwrap_err();
        assert!(err.to_string().contains("obstacles[0].r"), "{err}");
        let dup = "[[features]]\nid = 1\nx = 0.0\ny = 0.0\nnormal_deg = 0.0\n".repeat(2);
        assert!(parse_map(&dup, "m.toml").unwrap_err().to_string().contains("duplicate"));
        let err = parse_map("[[features]]\nid = 1\nx = 0.0\nnormal_deg = 0.0\n", "m.toml").unwrap_err();
        assert!(err.to_string().contains('y'), "{err}");
    }

    #[test]
    fn round_trip_is_exact() {
        let map = FeatureMap::new(
            vec![
                Feature { id: 0, position: [0.1, -3.7], normal_angle: 0.3 },
                Feature { id: 4, position: [2.5, 1.0], normal_angle: -2.9 },
                Feature { id: 7, position: [1.0 / 3.0, 5.0], normal_angle: PI },
            ],
            vec![Obstacle { center: [1.0, 2.0], radius: 0.45 }],
            Some(Bounds { xmin: -1.0, xmax: 10.0, ymin: -2.0, ymax: 3.0 }),
        )
        .unwrap();
        let back = parse_map(&map_to_toml(&map).unwrap(), "rt").unwrap();
        assert_eq!(back, map);
    }
}
