//! Mass-spring plate pushed by a descending rigid circle.
//!
//! The plate is an `n × n` grid of unit-mass nodes joined by structural and
//! crossed diagonal springs of stiffness `k`, with the bottom row pinned. A circular
//! collider, represented by a ring of external nodes, moves straight down
//! onto the top edge and pushes through a penalty contact force. Everything
//! lives in the unit square.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeKind, NodeKind, Topology};
use crate::tensor::Tensor;
use crate::trial::{Trial, TrialInputs};

/// Node feature width: one-hot `[free, pinned, collider]`.
pub const NODE_FEATURES: usize = 3;

/// Number of ring nodes on the bottom arc that are linked to the top row.
const CONTACT_ARC: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColliderConfig {
    pub nodes: usize,
    pub radius_range: [f64; 2],
    pub x_range: [f64; 2],
    pub speed_range: [f64; 2],
    /// Initial clearance between collider and plate top.
    pub gap: f64,
    pub contact_stiffness: f64,
}

impl Default for ColliderConfig {
    fn default() -> Self {
        ColliderConfig {
            nodes: 16,
            radius_range: [0.06, 0.12],
            x_range: [0.3, 0.7],
            speed_range: [0.1, 0.2],
            gap: 0.01,
            contact_stiffness: 2000.0,
        }
    }
}

/// Physical constants of one task. `stiffness` is the hidden parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpringWorld {
    pub grid: usize,
    pub spacing: f64,
    pub origin: [f64; 2],
    pub mass: f64,
    pub stiffness: f64,
    /// Damping along each spring, per unit relative speed.
    pub spring_damping: f64,
    /// Velocity-proportional drag per unit mass.
    pub drag: f64,
    pub gravity: f64,
    pub frame_dt: f64,
    pub substeps: usize,
    pub horizon: usize,
    pub collider: ColliderConfig,
}

impl Default for SpringWorld {
    fn default() -> Self {
        SpringWorld {
            grid: 9,
            spacing: 0.075,
            origin: [0.2, 0.05],
            mass: 1.0,
            stiffness: 632.0,
            spring_damping: 2.0,
            drag: 2.0,
            gravity: 1.5,
            frame_dt: 0.02,
            substeps: 20,
            horizon: 50,
            collider: ColliderConfig::default(),
        }
    }
}

/// Per-trial variation: collider size, horizontal position and speed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSetup {
    pub radius: f64,
    pub x_center: f64,
    pub speed: f64,
}

/// Positions and velocities of the deformable nodes, `[N][2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateState {
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
}

#[derive(Clone, Debug)]
struct Spring {
    a: usize,
    b: usize,
    rest: f64,
}

impl SpringWorld {
    pub fn num_deformable(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("spacing", self.spacing),
            ("mass", self.mass),
            ("stiffness", self.stiffness),
            ("frame_dt", self.frame_dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.grid < 2 || self.substeps == 0 || self.collider.nodes < CONTACT_ARC {
            return Err(Error::Config("grid ≥ 2, substeps ≥ 1 and ≥ 5 collider nodes required".into()));
        }
        Ok(())
    }

    fn node(&self, row: usize, col: usize) -> usize {
        row * self.grid + col
    }

    pub fn rest_positions(&self) -> Vec<[f64; 2]> {
        (0..self.grid)
            .flat_map(|row| {
                (0..self.grid).map(move |col| {
                    [
                        self.origin[0] + col as f64 * self.spacing,
                        self.origin[1] + row as f64 * self.spacing,
                    ]
                })
            })
            .collect()
    }

    pub fn is_pinned(&self, node: usize) -> bool {
        node < self.grid
    }

    fn springs(&self) -> Vec<Spring> {
        let g = self.grid;
        let mut out = Vec::new();
        let diag = self.spacing * std::f64::consts::SQRT_2;
        for row in 0..g {
            for col in 0..g {
                let a = self.node(row, col);
                if col + 1 < g {
                    out.push(Spring { a, b: self.node(row, col + 1), rest: self.spacing });
                }
                if row + 1 < g {
                    out.push(Spring { a, b: self.node(row + 1, col), rest: self.spacing });
                }
                if row + 1 < g && col + 1 < g {
                    out.push(Spring { a, b: self.node(row + 1, col + 1), rest: diag });
                    out.push(Spring { a: self.node(row, col + 1), b: self.node(row + 1, col), rest: diag });
                }
            }
        }
        out
    }

    fn top_y(&self) -> f64 {
        self.origin[1] + (self.grid - 1) as f64 * self.spacing
    }

    /// Ring-node angles, node 0 at the bottom.
    fn ring_angle(&self, j: usize) -> f64 {
        -std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * j as f64 / self.collider.nodes as f64
    }

    /// Fixed graph shared by every trial: plate springs, collider ring edges,
    /// and world edges from the collider's bottom arc to the plate's top row.
    pub fn topology(&self) -> Result<Topology> {
        self.validate()?;
        let n = self.num_deformable();
        let m = self.collider.nodes;
        let mut kinds = vec![NodeKind::Deformable; n];
        kinds.extend(std::iter::repeat(NodeKind::External).take(m));
        let mut edges: Vec<_> = self.springs().iter().map(|s| (s.a, s.b, EdgeKind::Mesh, s.rest)).collect();
        let r_nom = 0.5 * (self.collider.radius_range[0] + self.collider.radius_range[1]);
        let chord = 2.0 * r_nom * (std::f64::consts::PI / m as f64).sin();
        for j in 0..m {
            edges.push((n + j, n + (j + 1) % m, EdgeKind::Mesh, chord));
        }
        let half = CONTACT_ARC / 2;
        for off in 0..CONTACT_ARC {
            let j = (m + off - half) % m;
            for col in 0..self.grid {
                edges.push((n + j, self.node(self.grid - 1, col), EdgeKind::World, 0.0));
            }
        }
        Topology::new(kinds, &edges)
    }

    /// Static node features for all nodes, `[N + N_ext, 3]`.
    pub fn node_features(&self) -> Tensor<f32> {
        let n = self.num_deformable();
        let total = n + self.collider.nodes;
        Tensor::from_fn(vec![total, NODE_FEATURES], |i| {
            let (node, c) = (i / NODE_FEATURES, i % NODE_FEATURES);
            let kind = if node >= n {
                2
            } else if self.is_pinned(node) {
                1
            } else {
                0
            };
            (kind == c) as u8 as f32
        })
    }

    pub fn sample_setup(&self, rng: &mut impl Rng) -> TrialSetup {
        let c = &self.collider;
        TrialSetup {
            radius: rng.gen_range(c.radius_range[0]..=c.radius_range[1]),
            x_center: rng.gen_range(c.x_range[0]..=c.x_range[1]),
            speed: rng.gen_range(c.speed_range[0]..=c.speed_range[1]),
        }
    }

    /// Collider center at time `t`.
    pub fn collider_center(&self, setup: &TrialSetup, t: f64) -> [f64; 2] {
        [
            setup.x_center,
            self.top_y() + self.collider.gap + setup.radius - setup.speed * t,
        ]
    }

    fn ring(&self, setup: &TrialSetup, t: f64) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        let c = self.collider_center(setup, t);
        (0..self.collider.nodes)
            .map(|j| {
                let a = self.ring_angle(j);
                ([c[0] + setup.radius * a.cos(), c[1] + setup.radius * a.sin()], [0.0, -setup.speed])
            })
            .unzip()
    }

    /// Total mechanical energy of the plate: kinetic, spring and gravity.
    pub fn energy(&self, state: &PlateState) -> f64 {
        let kinetic: f64 = state.vel.iter().map(|v| 0.5 * self.mass * (v[0] * v[0] + v[1] * v[1])).sum();
        let gravity: f64 = state.pos.iter().map(|p| self.mass * self.gravity * p[1]).sum();
        let spring: f64 = self
            .springs()
            .iter()
            .map(|s| {
                let (pa, pb) = (state.pos[s.a], state.pos[s.b]);
                let len = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
                0.5 * self.stiffness * (len - s.rest).powi(2)
            })
            .sum();
        kinetic + gravity + spring
    }

    fn forces(&self, springs: &[Spring], state: &PlateState, collider: Option<([f64; 2], f64)>, f: &mut [[f64; 2]]) {
        for (fi, v) in f.iter_mut().zip(&state.vel) {
            *fi = [-self.drag * self.mass * v[0], -self.mass * self.gravity - self.drag * self.mass * v[1]];
        }
        for s in springs {
            let (pa, pb) = (state.pos[s.a], state.pos[s.b]);
            let d = [pb[0] - pa[0], pb[1] - pa[1]];
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if len == 0.0 {
                continue;
            }
            let u = [d[0] / len, d[1] / len];
            let (va, vb) = (state.vel[s.a], state.vel[s.b]);
            let rel = (vb[0] - va[0]) * u[0] + (vb[1] - va[1]) * u[1];
            let mag = self.stiffness * (len - s.rest) + self.spring_damping * rel;
            for k in 0..2 {
                f[s.a][k] += mag * u[k];
                f[s.b][k] -= mag * u[k];
            }
        }
        if let Some((c, radius)) = collider {
            for (fi, p) in f.iter_mut().zip(&state.pos) {
                let d = [p[0] - c[0], p[1] - c[1]];
                let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
                if dist < radius && dist > 0.0 {
                    let push = self.collider.contact_stiffness * (radius - dist) / dist;
                    fi[0] += push * d[0];
                    fi[1] += push * d[1];
                }
            }
        }
    }

    /// Advances one frame with `substeps` semi-implicit Euler steps.
    /// `collider` is the trial setup and frame start time, or `None` for a
    /// free plate.
    pub fn step_frame(&self, state: &mut PlateState, collider: Option<(&TrialSetup, f64)>) {
        let springs = self.springs();
        let h = self.frame_dt / self.substeps as f64;
        let mut f = vec![[0.0; 2]; state.pos.len()];
        for s in 0..self.substeps {
            let contact = collider.map(|(setup, t0)| (self.collider_center(setup, t0 + s as f64 * h), setup.radius));
            self.forces(&springs, state, contact, &mut f);
            for (i, fi) in f.iter().enumerate() {
                if self.is_pinned(i) {
                    continue;
                }
                for k in 0..2 {
                    state.vel[i][k] += h * fi[k] / self.mass;
                    state.pos[i][k] += h * state.vel[i][k];
                }
            }
        }
    }

    pub fn rest_state(&self) -> PlateState {
        let pos = self.rest_positions();
        let vel = vec![[0.0; 2]; pos.len()];
        PlateState { pos, vel }
    }

    /// Simulates one trial with the given collider setup.
    pub fn simulate_setup(&self, setup: &TrialSetup) -> Result<Trial<f32>> {
        self.validate()?;
        let n = self.num_deformable();
        let m = self.collider.nodes;
        let horizon = self.horizon;
        let mut state = self.rest_state();
        let flat = |v: &[[f64; 2]]| v.iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect::<Vec<f32>>();
        let p0 = Tensor::new(vec![n, 2], flat(&state.pos))?;
        let v0 = Tensor::new(vec![n, 2], flat(&state.vel))?;
        let mut p_ext = Vec::with_capacity((horizon + 1) * m * 2);
        let mut v_ext = Vec::with_capacity((horizon + 1) * m * 2);
        let mut y_p = Vec::with_capacity(horizon * n * 2);
        let mut y_v = Vec::with_capacity(horizon * n * 2);
        for t in 0..=horizon {
            let time = t as f64 * self.frame_dt;
            let (rp, rv) = self.ring(setup, time);
            p_ext.extend(flat(&rp));
            v_ext.extend(flat(&rv));
            if t == horizon {
                break;
            }
            self.step_frame(&mut state, Some((setup, time)));
            let bad = state.pos.iter().position(|p| p.iter().any(|c| !c.is_finite() || c.abs() > 10.0));
            if let Some(node) = bad {
                return Err(Error::Unstable(format!(
                    "node {node} left the box at frame {} (k = {}, dt = {}, substeps = {})",
                    t + 1,
                    self.stiffness,
                    self.frame_dt,
                    self.substeps
                )));
            }
            y_p.extend(flat(&state.pos));
            y_v.extend(flat(&state.vel));
        }
        Ok(Trial {
            x: TrialInputs {
                p0,
                v0,
                p_ext: Tensor::new(vec![horizon + 1, m, 2], p_ext)?,
                v_ext: Tensor::new(vec![horizon + 1, m, 2], v_ext)?,
                h: self.node_features(),
            },
            y_p: Tensor::new(vec![horizon, n, 2], y_p)?,
            y_v: Tensor::new(vec![horizon, n, 2], y_v)?,
        })
    }

    /// Samples a collider setup from `seed` and simulates it.
    pub fn simulate_trial(&self, seed: u64) -> Result<Trial<f32>> {
        let setup = self.sample_setup(&mut ChaCha8Rng::seed_from_u64(seed));
        self.simulate_setup(&setup)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_displacement(trial: &Trial<f32>) -> f64 {
        let p0 = trial.x.p0.data();
        trial
            .y_p
            .data()
            .chunks_exact(p0.len())
            .flat_map(|frame| frame.iter().zip(p0).map(|(a, b)| (a - b).abs() as f64))
            .fold(0.0, f64::max)
    }

    fn mean_deformation(trial: &Trial<f32>) -> f64 {
        let p0 = trial.x.p0.data();
        let mut total = 0.0;
        let mut count = 0usize;
        for frame in trial.y_p.data().chunks_exact(p0.len()) {
            for (a, b) in frame.chunks_exact(2).zip(p0.chunks_exact(2)) {
                total += (((a[0] - b[0]) as f64).powi(2) + ((a[1] - b[1]) as f64).powi(2)).sqrt();
                count += 1;
            }
        }
        total / count as f64
    }

    fn hovering() -> TrialSetup {
        TrialSetup {
            radius: 0.08,
            x_center: 0.5,
            speed: 0.0,
        }
    }

    #[test]
    fn topology_counts() {
        let w = SpringWorld::default();
        let t = w.topology().unwrap();
        assert_eq!(t.num_deformable(), 81);
        assert_eq!(t.num_external(), 16);
        // 272 plate springs, 16 ring edges, 5 × 9 world edges, both directions
        assert_eq!(t.num_edges(), 2 * (272 + 16 + 45));
        assert!(t.isolated_nodes().is_empty());
    }

    #[test]
    fn zero_gravity_without_contact_is_static() {
        let w = SpringWorld {
            gravity: 0.0,
            horizon: 10,
            ..SpringWorld::default()
        };
        let tr = w.simulate_setup(&hovering()).unwrap();
        for frame in tr.y_p.data().chunks_exact(tr.x.p0.numel()) {
            assert_eq!(frame, tr.x.p0.data());
        }
        assert!(tr.y_v.max_abs() < 1e-12);
    }

    #[test]
    fn identical_seeds_give_identical_trials() {
        let w = SpringWorld {
            horizon: 10,
            ..SpringWorld::default()
        };
        assert_eq!(w.simulate_trial(9).unwrap(), w.simulate_trial(9).unwrap());
        assert_ne!(w.simulate_trial(9).unwrap(), w.simulate_trial(10).unwrap());
    }

    #[test]
    fn stiffer_plates_sag_less_and_settle() {
        let mut prev = f64::INFINITY;
        for k in [200.0, 632.0, 2000.0] {
            let w = SpringWorld {
                stiffness: k,
                horizon: 400,
                ..SpringWorld::default()
            };
            let tr = w.simulate_setup(&hovering()).unwrap();
            let disp = max_displacement(&tr);
            assert!(disp < prev, "k = {k}: {disp} vs {prev}");
            prev = disp;
            let v = tr.y_v.narrow_rows(399, 1).unwrap();
            assert!(v.max_abs() < 1e-2 * tr.y_v.max_abs(), "k = {k}: residual speed {}", v.max_abs());
        }
    }

    #[test]
    fn contact_deformation_decreases_with_stiffness() {
        let setup = TrialSetup {
            radius: 0.09,
            x_center: 0.45,
            speed: 0.15,
        };
        let disps: Vec<f64> = [200.0, 356.0, 632.0, 1125.0, 2000.0]
            .iter()
            .map(|&k| {
                let w = SpringWorld {
                    stiffness: k,
                    ..SpringWorld::default()
                };
                max_displacement(&w.simulate_setup(&setup).unwrap())
            })
            .collect();
        assert!(disps.windows(2).all(|p| p[1] < p[0]), "{disps:?}");
    }

    #[test]
    fn time_averaged_deformation_decreases_with_stiffness() {
        let base = SpringWorld::default();
        for seed in 0..4 {
            let setup = base.sample_setup(&mut ChaCha8Rng::seed_from_u64(seed));
            let means: Vec<f64> = [200.0, 356.0, 632.0, 1125.0, 2000.0]
                .iter()
                .map(|&k| mean_deformation(&SpringWorld { stiffness: k, ..base.clone() }.simulate_setup(&setup).unwrap()))
                .collect();
            assert!(means.windows(2).all(|p| p[1] < p[0]), "seed {seed}: {means:?}");
        }
    }

    #[test]
    fn free_plate_energy_never_increases() {
        for k in [200.0, 2000.0] {
            let w = SpringWorld {
                stiffness: k,
                ..SpringWorld::default()
            };
            let mut state = w.rest_state();
            let mut e = w.energy(&state);
            for frame in 0..w.horizon {
                w.step_frame(&mut state, None);
                let next = w.energy(&state);
                assert!(next <= e + 1e-6 * e.abs(), "k = {k}, frame {frame}: {e} -> {next}");
                e = next;
            }
        }
    }

    #[test]
    fn collider_deforms_the_plate() {
        let w = SpringWorld::default();
        let setup = TrialSetup {
            radius: 0.1,
            x_center: 0.5,
            speed: 0.2,
        };
        let tr = w.simulate_setup(&setup).unwrap();
        let free = w.simulate_setup(&hovering()).unwrap();
        let pushed = tr.y_p.data().iter().zip(free.y_p.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(pushed > 0.05, "collider moved the plate by {pushed}");
        assert!(tr.y_p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn unstable_settings_are_reported() {
        let w = SpringWorld {
            stiffness: 1e7,
            substeps: 1,
            horizon: 20,
            ..SpringWorld::default()
        };
        assert!(matches!(w.simulate_trial(1), Err(Error::Unstable(_))));
    }
}
