use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::factors::{reprojection_residual, semantic_residual};
use super::noise::{robust_cost, NoiseModel, RobustKernel};
use super::OptimError;
use crate::geometry::{Intrinsics, Pixel, Point3, Pose};
use crate::wire::{self, PoseRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub point_id: u64,
    pub pixel: Pixel,
}

/// Position prior from a matched library frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticAnchor {
    pub position: Point3,
    pub noise: NoiseModel<3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: u64,
    pub pose: Pose,
    pub fixed: bool,
    pub observations: Vec<Observation>,
    pub anchor: Option<SemanticAnchor>,
}

impl Keyframe {
    pub fn new(id: u64, pose: Pose) -> Self {
        Self {
            id,
            pose,
            fixed: false,
            observations: Vec::new(),
            anchor: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub id: u64,
    pub position: Point3,
    pub fixed: bool,
}

/// Keyframes, map points and the factors between them.
///
/// Keyframes are kept in insertion order, which is also the order in which
/// factors are evaluated and summed.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    pub keyframes: Vec<Keyframe>,
    pub points: BTreeMap<u64, MapPoint>,
    pub intrinsics: Intrinsics,
    pub pixel_noise: NoiseModel<2>,
    pub anchor_noise: NoiseModel<3>,
    pub pixel_kernel: RobustKernel,
    pub anchor_kernel: RobustKernel,
}

/// Objective value with the number of factors that could not be evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub dropped_factors: usize,
}

impl FactorGraph {
    /// Empty graph with the default noise models and Huber kernels.
    pub fn new(intrinsics: Intrinsics) -> Self {
        Self {
            keyframes: Vec::new(),
            points: BTreeMap::new(),
            intrinsics,
            pixel_noise: NoiseModel::isotropic(1.0).expect("unit covariance"),
            anchor_noise: NoiseModel::diagonal([0.25, 0.25, 1.0]).expect("diagonal covariance"),
            pixel_kernel: RobustKernel::Huber(2.0),
            anchor_kernel: RobustKernel::Huber(1.0),
        }
    }

    pub fn add_keyframe(&mut self, kf: Keyframe) -> Result<(), OptimError> {
        if self.keyframes.iter().any(|k| k.id == kf.id) {
            return Err(OptimError::DuplicateId(kf.id));
        }
        self.keyframes.push(kf);
        Ok(())
    }

    pub fn add_point(&mut self, p: MapPoint) -> Result<(), OptimError> {
        if self.points.contains_key(&p.id) {
            return Err(OptimError::DuplicateId(p.id));
        }
        self.points.insert(p.id, p);
        Ok(())
    }

    /// Attach an anchor with the graph's default anchor covariance.
    pub fn set_anchor(&mut self, kf_id: u64, position: Point3) -> Result<(), OptimError> {
        let noise = self.anchor_noise;
        let kf = self.keyframe_mut(kf_id)?;
        kf.anchor = Some(SemanticAnchor { position, noise });
        Ok(())
    }

    pub fn keyframe(&self, id: u64) -> Option<&Keyframe> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    pub fn keyframe_mut(&mut self, id: u64) -> Result<&mut Keyframe, OptimError> {
        self.keyframes
            .iter_mut()
            .find(|k| k.id == id)
            .ok_or(OptimError::UnknownKeyframe(id))
    }

    pub fn factor_count(&self) -> usize {
        self.keyframes
            .iter()
            .map(|k| k.observations.len() + usize::from(k.anchor.is_some()))
            .sum()
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let mut ids = HashSet::new();
        for kf in &self.keyframes {
            if !ids.insert(kf.id) {
                return Err(OptimError::DuplicateId(kf.id));
            }
            for o in &kf.observations {
                if !self.points.contains_key(&o.point_id) {
                    return Err(OptimError::UnknownMapPoint {
                        keyframe: kf.id,
                        point: o.point_id,
                    });
                }
            }
        }
        Ok(())
    }

    /// True when at least one variable is held fixed or an anchor exists.
    pub fn is_gauge_constrained(&self) -> bool {
        self.keyframes.iter().any(|k| k.fixed || k.anchor.is_some()) || self.points.values().any(|p| p.fixed)
    }

    pub fn objective(&self) -> Result<Objective, OptimError> {
        self.validate()?;
        if !self.is_gauge_constrained() {
            return Err(OptimError::GaugeUnconstrained);
        }
        Ok(self.evaluate())
    }

    /// Sum of robustified factor costs, keyframe by keyframe: every
    /// reprojection factor in stored order followed by the anchor.
    pub(crate) fn evaluate(&self) -> Objective {
        let mut value = 0.0;
        let mut dropped = 0;
        for kf in &self.keyframes {
            for o in &kf.observations {
                let p = &self.points[&o.point_id].position;
                match reprojection_residual(&kf.pose, p, &o.pixel, &self.intrinsics) {
                    Ok(r) => value += robust_cost(self.pixel_kernel, self.pixel_noise.squared_norm(&r)).0,
                    Err(_) => dropped += 1,
                }
            }
            if let Some(a) = &kf.anchor {
                let r = semantic_residual(&kf.pose.center(), &a.position);
                value += robust_cost(self.anchor_kernel, a.noise.squared_norm(&r)).0;
            }
        }
        Objective {
            value,
            dropped_factors: dropped,
        }
    }

    /// Root-mean-square pixel residual per image axis over all evaluable
    /// reprojection factors.
    pub fn reprojection_rmse(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for kf in &self.keyframes {
            for o in &kf.observations {
                if let Ok(r) = reprojection_residual(&kf.pose, &self.points[&o.point_id].position, &o.pixel, &self.intrinsics) {
                    sum += r.norm_squared();
                    n += 2;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).sqrt()
        }
    }

    pub fn write_jsonl<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut records = Vec::new();
        for kf in &self.keyframes {
            records.push(GraphRecord::Keyframe {
                id: kf.id,
                pose: PoseRecord::from(&kf.pose),
                fixed: kf.fixed,
                observations: kf
                    .observations
                    .iter()
                    .map(|o| ObservationRecord {
                        point_id: o.point_id,
                        u: o.pixel.u,
                        v: o.pixel.v,
                    })
                    .collect(),
            });
        }
        for p in self.points.values() {
            records.push(GraphRecord::MapPoint {
                id: p.id,
                position: wire::point_array(&p.position),
                fixed: p.fixed,
            });
        }
        for kf in &self.keyframes {
            if let Some(a) = &kf.anchor {
                records.push(GraphRecord::Anchor {
                    keyframe_id: kf.id,
                    position: wire::point_array(&a.position),
                    covariance: a.noise.covariance_row_major(),
                });
            }
        }
        wire::write_jsonl(w, records)
    }

    /// Load keyframes, points and anchors; camera and kernels come from the caller.
    pub fn read_jsonl<R: BufRead>(r: R, template: &FactorGraph) -> Result<FactorGraph, OptimError> {
        let records: Vec<GraphRecord> = wire::read_jsonl(r)?;
        let mut g = FactorGraph {
            keyframes: Vec::new(),
            points: BTreeMap::new(),
            ..template.clone()
        };
        let mut anchors = Vec::new();
        for rec in records {
            match rec {
                GraphRecord::Keyframe {
                    id,
                    pose,
                    fixed,
                    observations,
                } => {
                    let pose = Pose::try_from(pose).map_err(|e| OptimError::Record(format!("keyframe {id}: {e}")))?;
                    g.add_keyframe(Keyframe {
                        id,
                        pose,
                        fixed,
                        observations: observations
                            .into_iter()
                            .map(|o| Observation {
                                point_id: o.point_id,
                                pixel: Pixel::new(o.u, o.v),
                            })
                            .collect(),
                        anchor: None,
                    })?;
                }
                GraphRecord::MapPoint { id, position, fixed } => g.add_point(MapPoint {
                    id,
                    position: Point3::from(position),
                    fixed,
                })?,
                GraphRecord::Anchor {
                    keyframe_id,
                    position,
                    covariance,
                } => anchors.push((keyframe_id, position, covariance)),
            }
        }
        for (kf_id, position, covariance) in anchors {
            let noise = NoiseModel::from_row_major(&covariance)?;
            g.keyframe_mut(kf_id)?.anchor = Some(SemanticAnchor {
                position: Point3::from(position),
                noise,
            });
        }
        g.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservationRecord {
    point_id: u64,
    u: f64,
    v: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum GraphRecord {
    Keyframe {
        id: u64,
        pose: PoseRecord,
        fixed: bool,
        observations: Vec<ObservationRecord>,
    },
    MapPoint {
        id: u64,
        position: [f64; 3],
        fixed: bool,
    },
    Anchor {
        keyframe_id: u64,
        position: [f64; 3],
        covariance: Vec<f64>,
    },
}

/// Restart odometry at `kf_id`: the keyframe takes `anchor_pose` and is held
/// fixed, and every factor attached to earlier keyframes is dropped along
/// with points that lose all their observations.
pub fn apply_reinitialization(graph: &FactorGraph, kf_id: u64, anchor_pose: &Pose) -> Result<FactorGraph, OptimError> {
    let start = graph
        .keyframes
        .iter()
        .position(|k| k.id == kf_id)
        .ok_or(OptimError::UnknownKeyframe(kf_id))?;
    let mut keyframes: Vec<Keyframe> = graph.keyframes[start..].to_vec();
    keyframes[0].pose = *anchor_pose;
    keyframes[0].fixed = true;
    let observed: BTreeSet<u64> = keyframes
        .iter()
        .flat_map(|k| k.observations.iter().map(|o| o.point_id))
        .collect();
    let points = graph
        .points
        .iter()
        .filter(|(id, _)| observed.contains(id))
        .map(|(id, p)| (*id, *p))
        .collect();
    Ok(FactorGraph {
        keyframes,
        points,
        ..graph.clone()
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::{project, so3_exp};
    use nalgebra::{Matrix2, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_camera() -> Intrinsics {
        Intrinsics::new(1.0, 1.0, 0.0, 0.0, 10, 10, 0.0).unwrap()
    }

    #[test]
    fn single_factor_squared_norm() {
        let mut g = FactorGraph::new(unit_camera());
        g.pixel_kernel = RobustKernel::None;
        g.add_point(MapPoint {
            id: 1,
            position: Point3::new(0.0, 0.0, 1.0),
            fixed: false,
        })
        .unwrap();
        let mut kf = Keyframe::new(0, Pose::identity());
        kf.fixed = true;
        kf.observations.push(Observation {
            point_id: 1,
            pixel: Pixel::new(3.0, 4.0),
        });
        g.add_keyframe(kf).unwrap();
        assert_eq!(g.objective().unwrap().value, 25.0);
    }

    #[test]
    fn gauge_and_reference_errors() {
        let mut g = FactorGraph::new(unit_camera());
        g.add_keyframe(Keyframe::new(0, Pose::identity())).unwrap();
        assert!(matches!(g.objective(), Err(OptimError::GaugeUnconstrained)));
        g.set_anchor(0, Point3::zeros()).unwrap();
        assert!(g.objective().is_ok());
        g.keyframes[0].observations.push(Observation {
            point_id: 9,
            pixel: Pixel::new(0.0, 0.0),
        });
        assert!(matches!(g.objective(), Err(OptimError::UnknownMapPoint { keyframe: 0, point: 9 })));
        assert!(matches!(g.set_anchor(4, Point3::zeros()), Err(OptimError::UnknownKeyframe(4))));
        assert!(g.add_keyframe(Keyframe::new(0, Pose::identity())).is_err());
    }

    #[test]
    fn behind_camera_factor_is_dropped_and_counted() {
        let mut g = FactorGraph::new(unit_camera());
        g.add_point(MapPoint {
            id: 1,
            position: Point3::new(0.0, 0.0, -1.0),
            fixed: false,
        })
        .unwrap();
        let mut kf = Keyframe::new(0, Pose::identity());
        kf.fixed = true;
        kf.observations.push(Observation {
            point_id: 1,
            pixel: Pixel::new(3.0, 4.0),
        });
        g.add_keyframe(kf).unwrap();
        let o = g.objective().unwrap();
        assert_eq!(o.value, 0.0);
        assert_eq!(o.dropped_factors, 1);
    }

    pub(crate) fn random_graph(rng: &mut ChaCha8Rng, n_kf: usize, n_pts: usize) -> FactorGraph {
        let intr = Intrinsics::uhd_90deg();
        let mut g = FactorGraph::new(intr);
        for i in 0..n_pts {
            g.add_point(MapPoint {
                id: 100 + i as u64,
                position: Point3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(15.0..60.0),
                ),
                fixed: false,
            })
            .unwrap();
        }
        for k in 0..n_kf {
            let pose = Pose::from_center(
                so3_exp(&Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02))),
                Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), k as f64),
            );
            let mut kf = Keyframe::new(k as u64, pose);
            kf.fixed = k == 0;
            for p in g.points.values() {
                let px = project(&intr, &pose.transform_point(&p.position)).unwrap();
                kf.observations.push(Observation {
                    point_id: p.id,
                    pixel: Pixel::new(px.u + rng.random_range(-5.0..5.0), px.v + rng.random_range(-5.0..5.0)),
                });
            }
            if k % 3 == 2 {
                kf.anchor = Some(SemanticAnchor {
                    position: pose.center() + Vector3::new(rng.random_range(-2.0..2.0), 0.3, -0.1),
                    noise: g.anchor_noise,
                });
            }
            g.add_keyframe(kf).unwrap();
        }
        g
    }

    #[test]
    fn objective_matches_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let g = random_graph(&mut rng, 4, 12);
            let sigma_inv = Matrix2::identity();
            let s_inv = nalgebra::Matrix3::from_diagonal(&Vector3::new(4.0, 4.0, 1.0));
            let huber = |s: f64, k: f64| if s <= k * k { s } else { 2.0 * k * s.sqrt() - k * k };
            let mut oracle = 0.0;
            for kf in &g.keyframes {
                let (r, t) = (kf.pose.rotation(), kf.pose.translation());
                for o in &kf.observations {
                    let p = g.points[&o.point_id].position;
                    let pc = r * p + t;
                    let u = g.intrinsics.fx * pc.x / pc.z + g.intrinsics.cx;
                    let v = g.intrinsics.fy * pc.y / pc.z + g.intrinsics.cy;
                    let e = nalgebra::Vector2::new(o.pixel.u - u, o.pixel.v - v);
                    oracle += huber((e.transpose() * sigma_inv * e)[0], 2.0);
                }
                if let Some(a) = &kf.anchor {
                    let c = -(r.transpose() * t);
                    let e = a.position - c;
                    oracle += huber((e.transpose() * s_inv * e)[0], 1.0);
                }
            }
            let got = g.objective().unwrap().value;
            assert!((got - oracle).abs() <= 1e-9 * oracle.max(1.0), "{got} vs {oracle}");
        }
    }

    #[test]
    fn reinitialize_only_keyframe() {
        let mut g = FactorGraph::new(unit_camera());
        g.add_keyframe(Keyframe::new(5, Pose::identity())).unwrap();
        let anchor = Pose::from_center(so3_exp(&Vector3::new(0.0, 0.0, 0.2)), Point3::new(4.0, 5.0, 6.0));
        let out = apply_reinitialization(&g, 5, &anchor).unwrap();
        assert_eq!(out.keyframes.len(), 1);
        assert!(out.keyframes[0].fixed);
        assert_eq!(out.keyframes[0].pose, anchor);
        assert!(matches!(apply_reinitialization(&g, 6, &anchor), Err(OptimError::UnknownKeyframe(6))));
    }

    #[test]
    fn reinitialize_mid_sequence_keeps_suffix_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = random_graph(&mut rng, 7, 10);
        // Thin observations so some points live only on the prefix.
        for (k, kf) in g.keyframes.iter_mut().enumerate() {
            kf.observations.retain(|o| !(o.point_id as usize + k).is_multiple_of(3));
        }
        let kf_id = 3;
        let oracle: usize = g
            .keyframes
            .iter()
            .filter(|k| k.id >= kf_id)
            .map(|k| k.observations.len() + usize::from(k.anchor.is_some()))
            .sum();
        let pose = g.keyframe(kf_id).unwrap().pose;
        let out = apply_reinitialization(&g, kf_id, &pose).unwrap();
        assert_eq!(out.factor_count(), oracle);
        assert!(out.validate().is_ok());
        let kf = out.keyframe(kf_id).unwrap();
        assert!(kf.fixed);
        assert_eq!(kf.pose, pose);
        assert!(!g.keyframe(kf_id).unwrap().fixed);
    }

    #[test]
    fn dump_and_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = random_graph(&mut rng, 5, 8);
        let mut buf = Vec::new();
        g.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains(r#""kind":"keyframe""#));
        assert!(text.contains(r#""kind":"map_point""#) && text.contains(r#""kind":"anchor""#));
        let back = FactorGraph::read_jsonl(&buf[..], &FactorGraph::new(g.intrinsics)).unwrap();
        assert_eq!(back, g);
    }
}
