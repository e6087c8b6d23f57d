//! Deterministic 2D block-pick environment with proprio and grid-vision
//! modalities, a scripted expert, and visual perturbation injectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const VISION_GRID: usize = 16;
pub const ACTION_DIM: usize = 3;
pub const PROPRIO_DIM: usize = 3;
pub const VISION_DIM: usize = VISION_GRID * VISION_GRID;

pub const STEP_CLIP: f64 = 0.05;
pub const GRASP_RADIUS: f64 = 0.04;
pub const DEFAULT_SUCCESS_RADIUS: f64 = 0.04;
pub const DEFAULT_MAX_STEPS: usize = 120;
pub const EXPERT_JITTER_STD: f64 = 0.004;
pub const MIN_SEPARATION: f64 = 0.1;

const BLOCK_INTENSITY: f64 = 1.0;
const GRIPPER_INTENSITY: f64 = 0.75;
const GOAL_INTENSITY: f64 = 0.5;
const DISTRACTOR_INTENSITY: f64 = 0.3;
const BORDER_INTENSITY: f64 = 0.2;
const HOME_POSE: [f64; 2] = [0.5, 0.1];

/// Placement area for block and goal, centered in the unit arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArenaScale {
    S,
    M,
    L,
}

impl ArenaScale {
    /// (x, y) half-extents of the placement box.
    pub fn half_extents(self) -> (f64, f64) {
        match self {
            ArenaScale::S => (0.075, 0.10),
            ArenaScale::M => (0.175, 0.225),
            ArenaScale::L => (0.275, 0.375),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ArenaScale::S => "s",
            ArenaScale::M => "m",
            ArenaScale::L => "l",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "s" => Ok(ArenaScale::S),
            "m" => Ok(ArenaScale::M),
            "l" => Ok(ArenaScale::L),
            other => Err(Error::invalid(format!("unknown arena scale {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    None,
    Color,
    Distractor,
    Occlusion,
}

/// Visual-stream perturbation; proprio is never touched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    /// Replacement block intensity for `color`.
    pub color_value: f64,
    /// Bright-cell count for `distractor`, resampled each episode.
    pub distractor_count: usize,
    /// Steps [start, end], inclusive, during which the vision grid is zeroed.
    pub occlusion_start: usize,
    pub occlusion_end: usize,
}

impl Perturbation {
    pub fn none() -> Self {
        Perturbation {
            kind: PerturbationKind::None,
            color_value: 0.25,
            distractor_count: 6,
            occlusion_start: 0,
            occlusion_end: DEFAULT_MAX_STEPS,
        }
    }

    pub fn color(value: f64) -> Self {
        Perturbation {
            kind: PerturbationKind::Color,
            color_value: value,
            ..Perturbation::none()
        }
    }

    pub fn distractor(count: usize) -> Self {
        Perturbation {
            kind: PerturbationKind::Distractor,
            distractor_count: count,
            ..Perturbation::none()
        }
    }

    pub fn occlusion(start: usize, end: usize) -> Self {
        Perturbation {
            kind: PerturbationKind::Occlusion,
            occlusion_start: start,
            occlusion_end: end,
            ..Perturbation::none()
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            PerturbationKind::None => "none",
            PerturbationKind::Color => "color",
            PerturbationKind::Distractor => "distractor",
            PerturbationKind::Occlusion => "occlusion",
        }
    }

    /// Named perturbation with its default parameters; occlusion covers the
    /// whole episode.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Perturbation::none()),
            "color" => Ok(Perturbation::color(0.25)),
            "distractor" => Ok(Perturbation::distractor(6)),
            "occlusion" => Ok(Perturbation::occlusion(0, DEFAULT_MAX_STEPS)),
            other => Err(Error::invalid(format!("unknown perturbation {other:?}"))),
        }
    }

    pub fn validate(&self, max_steps: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.color_value) {
            return Err(Error::invalid("color_value must be in [0, 1]"));
        }
        if self.occlusion_start > self.occlusion_end || self.occlusion_end > max_steps {
            return Err(Error::invalid("occlusion interval must lie within [0, max_steps]"));
        }
        Ok(())
    }
}

/// Per-step observation: privileged state stays internal, policies see this.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedObs {
    /// gripper x, gripper y, closed flag.
    pub proprio: Vec<f64>,
    /// Row-major G x G intensities in [0, 1].
    pub vision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub gripper: [f64; 2],
    pub closed: bool,
    pub block: [f64; 2],
    pub goal: [f64; 2],
    pub held: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EnvConfig {
    pub scale: ArenaScale,
    pub perturbation: Perturbation,
    pub max_steps: usize,
    pub success_radius: f64,
}

impl EnvConfig {
    pub fn new(scale: ArenaScale, perturbation: Perturbation) -> Self {
        EnvConfig {
            scale,
            perturbation,
            max_steps: DEFAULT_MAX_STEPS,
            success_radius: DEFAULT_SUCCESS_RADIUS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockPickEnv {
    config: EnvConfig,
    state: EnvState,
    distractors: Vec<usize>,
    step_count: usize,
    done: bool,
    succeeded: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[cfg(test)]
fn cell(p: f64) -> usize {
    ((p * VISION_GRID as f64) as usize).min(VISION_GRID - 1)
}

#[cfg(test)]
fn cell_index(pos: [f64; 2]) -> usize {
    cell(pos[1]) * VISION_GRID + cell(pos[0])
}

/// Bilinear intensity splat over the 2x2 cells around `pos`, additive.
/// Subcell position stays linearly decodable, so the grid carries more
/// information than its nominal resolution.
fn splat(vision: &mut [f64], pos: [f64; 2], intensity: f64) {
    let n = VISION_GRID as f64;
    let fx = (pos[0].clamp(0.0, 1.0) * n - 0.5).clamp(0.0, n - 1.0);
    let fy = (pos[1].clamp(0.0, 1.0) * n - 0.5).clamp(0.0, n - 1.0);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(VISION_GRID - 1), (y0 + 1).min(VISION_GRID - 1));
    let (wx, wy) = (fx - x0 as f64, fy - y0 as f64);
    vision[y0 * VISION_GRID + x0] += intensity * (1.0 - wx) * (1.0 - wy);
    vision[y0 * VISION_GRID + x1] += intensity * wx * (1.0 - wy);
    vision[y1 * VISION_GRID + x0] += intensity * (1.0 - wx) * wy;
    vision[y1 * VISION_GRID + x1] += intensity * wx * wy;
}

impl BlockPickEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.perturbation.validate(config.max_steps)?;
        Ok(BlockPickEnv {
            config,
            state: EnvState {
                gripper: HOME_POSE,
                closed: false,
                block: [0.5, 0.5],
                goal: [0.5, 0.5],
                held: false,
            },
            distractors: Vec::new(),
            step_count: 0,
            done: false,
            succeeded: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn succeeded(&self) -> bool {
        self.succeeded
    }

    fn place(&self, rng: &mut Rng) -> [f64; 2] {
        let (hx, hy) = self.config.scale.half_extents();
        [
            rng.uniform_in(0.5 - hx, 0.5 + hx),
            rng.uniform_in(0.5 - hy, 0.5 + hy),
        ]
    }

    /// Place block and goal (minimum separation), return the home pose, and
    /// resample distractor cells for the episode.
    pub fn reset(&mut self, rng: &mut Rng) -> RenderedObs {
        let block = self.place(rng);
        let goal = loop {
            let g = self.place(rng);
            if dist(g, block) >= MIN_SEPARATION {
                break g;
            }
        };
        self.state = EnvState {
            gripper: HOME_POSE,
            closed: false,
            block,
            goal,
            held: false,
        };
        self.distractors.clear();
        if self.config.perturbation.kind == PerturbationKind::Distractor {
            // distractors are clutter objects inside the arena; the border
            // frame is part of the fixture, not object space
            let interior = VISION_GRID - 2;
            for _ in 0..self.config.perturbation.distractor_count {
                let i = rng.index_in(0, interior * interior);
                self.distractors
                    .push((i / interior + 1) * VISION_GRID + i % interior + 1);
            }
        }
        self.step_count = 0;
        self.done = false;
        self.succeeded = false;
        self.render()
    }

    pub fn render(&self) -> RenderedObs {
        let s = &self.state;
        let proprio = vec![s.gripper[0], s.gripper[1], if s.closed { 1.0 } else { 0.0 }];
        let p = &self.config.perturbation;
        let occluded = p.kind == PerturbationKind::Occlusion
            && self.step_count >= p.occlusion_start
            && self.step_count <= p.occlusion_end;
        let mut vision = vec![0.0f64; VISION_DIM];
        if !occluded {
            // always-lit arena border: constant context that occlusion
            // removes, like losing the whole camera frame
            for i in 0..VISION_GRID {
                for j in [i, (VISION_GRID - 1) * VISION_GRID + i, i * VISION_GRID, i * VISION_GRID + VISION_GRID - 1] {
                    vision[j] = BORDER_INTENSITY;
                }
            }
            let block_intensity = if p.kind == PerturbationKind::Color {
                p.color_value
            } else {
                BLOCK_INTENSITY
            };
            for &c in &self.distractors {
                vision[c] += DISTRACTOR_INTENSITY;
            }
            splat(&mut vision, s.goal, GOAL_INTENSITY);
            splat(&mut vision, s.block, block_intensity);
            splat(&mut vision, s.gripper, GRIPPER_INTENSITY);
        }
        RenderedObs { proprio, vision }
    }

    /// Apply one (dx, dy, gripper command) action. Motion is clipped to
    /// STEP_CLIP; command > 0.5 closes. Success requires the block released
    /// within success_radius of the goal.
    pub fn step(&mut self, action: &[f64]) -> Result<(RenderedObs, bool, bool)> {
        if self.done {
            return Err(Error::Contract("step after episode end".into()));
        }
        if action.len() != ACTION_DIM {
            return Err(Error::invalid("action must be (dx, dy, gripper)"));
        }
        let (mut dx, mut dy) = (action[0], action[1]);
        let norm = (dx * dx + dy * dy).sqrt();
        if norm > STEP_CLIP {
            dx *= STEP_CLIP / norm;
            dy *= STEP_CLIP / norm;
        }
        let s = &mut self.state;
        s.gripper[0] = (s.gripper[0] + dx).clamp(0.0, 1.0);
        s.gripper[1] = (s.gripper[1] + dy).clamp(0.0, 1.0);
        s.closed = action[2] > 0.5;
        if s.closed {
            if !s.held && dist(s.gripper, s.block) < GRASP_RADIUS {
                s.held = true;
            }
        } else {
            s.held = false;
        }
        if s.held {
            s.block = s.gripper;
        }
        self.step_count += 1;
        let success =
            !self.state.held && dist(self.state.block, self.state.goal) < self.config.success_radius;
        if success {
            self.succeeded = true;
        }
        self.done = success || self.step_count >= self.config.max_steps;
        Ok((self.render(), self.done, success))
    }
}

/// Privileged scripted expert: approach, grasp, carry, release. Motion is
/// clipped to STEP_CLIP with small jitter for demonstration diversity.
pub fn expert_action(state: &EnvState, rng: &mut Rng) -> [f64; 3] {
    let approach_tol = 0.02;
    let release_tol = 0.02;
    if !state.held {
        if dist(state.gripper, state.block) < approach_tol {
            return [0.0, 0.0, 1.0]; // close on the block
        }
        let mut d = [
            state.block[0] - state.gripper[0] + EXPERT_JITTER_STD * rng.normal(),
            state.block[1] - state.gripper[1] + EXPERT_JITTER_STD * rng.normal(),
        ];
        clip_step(&mut d);
        [d[0], d[1], 0.0]
    } else {
        if dist(state.gripper, state.goal) < release_tol {
            return [0.0, 0.0, 0.0]; // release at the goal
        }
        let mut d = [
            state.goal[0] - state.gripper[0] + EXPERT_JITTER_STD * rng.normal(),
            state.goal[1] - state.gripper[1] + EXPERT_JITTER_STD * rng.normal(),
        ];
        clip_step(&mut d);
        [d[0], d[1], 1.0]
    }
}

fn clip_step(d: &mut [f64; 2]) {
    let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if norm > STEP_CLIP {
        d[0] *= STEP_CLIP / norm;
        d[1] *= STEP_CLIP / norm;
    }
}

/// One full episode: per-step observations (recorded before each action),
/// the actions taken, and the outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub observations: Vec<RenderedObs>,
    pub actions: Vec<Vec<f64>>,
    pub success: bool,
    pub perturbation: PerturbationKind,
    pub seed: u64,
}

/// Run the scripted expert for one episode.
pub fn run_expert_episode(config: &EnvConfig, seed: u64) -> Result<EpisodeRecord> {
    let mut rng = Rng::seed(seed);
    let mut env = BlockPickEnv::new(config.clone())?;
    let mut obs = env.reset(&mut rng);
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    loop {
        let a = expert_action(env.state(), &mut rng);
        observations.push(obs);
        actions.push(a.to_vec());
        let (next, done, _) = env.step(&a)?;
        obs = next;
        if done {
            break;
        }
    }
    Ok(EpisodeRecord {
        observations,
        actions,
        success: env.succeeded(),
        perturbation: config.perturbation.kind,
        seed,
    })
}

/// Closed-loop chunked control: the planner sees the last `obs_history`
/// observations (repeat-first padded) and emits a flattened
/// `action_horizon` x 3 chunk, executed open-loop before replanning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub obs_history: usize,
    pub action_horizon: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            obs_history: 2,
            action_horizon: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RolloutSummary {
    pub success_rate: f64,
    pub episodes: usize,
}

/// Roll a chunk-emitting policy for `episodes` episodes with per-episode
/// seeds seed_base..seed_base+episodes. Returns the success fraction and
/// the per-episode records.
pub fn rollout<F>(
    env_config: &EnvConfig,
    control: &ControlConfig,
    episodes: usize,
    seed_base: u64,
    mut plan: F,
) -> Result<(f64, Vec<EpisodeRecord>)>
where
    F: FnMut(&[RenderedObs], &mut Rng) -> Result<Vec<f64>>,
{
    if control.obs_history == 0 || control.action_horizon == 0 {
        return Err(Error::invalid("control horizons must be positive"));
    }
    let mut records = Vec::with_capacity(episodes);
    let mut successes = 0usize;
    for e in 0..episodes {
        let seed = seed_base + e as u64;
        let mut rng = Rng::seed(seed);
        let mut env = BlockPickEnv::new(env_config.clone())?;
        let mut obs = env.reset(&mut rng);
        let mut history: Vec<RenderedObs> = vec![obs.clone(); control.obs_history];
        let mut observations = Vec::new();
        let mut actions = Vec::new();
        'episode: loop {
            let chunk = plan(&history, &mut rng)?;
            if chunk.len() != control.action_horizon * ACTION_DIM {
                return Err(Error::invalid(format!(
                    "planner returned {} values, expected {}",
                    chunk.len(),
                    control.action_horizon * ACTION_DIM
                )));
            }
            for a in chunk.chunks(ACTION_DIM) {
                observations.push(obs.clone());
                actions.push(a.to_vec());
                let (next, done, _) = env.step(a)?;
                obs = next;
                history.remove(0);
                history.push(obs.clone());
                if done {
                    break 'episode;
                }
            }
        }
        if env.succeeded() {
            successes += 1;
        }
        records.push(EpisodeRecord {
            observations,
            actions,
            success: env.succeeded(),
            perturbation: env_config.perturbation.kind,
            seed,
        });
    }
    Ok((successes as f64 / episodes as f64, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(scale: ArenaScale) -> EnvConfig {
        EnvConfig::new(scale, Perturbation::none())
    }

    #[test]
    fn resets_stay_inside_placement_box() {
        let mut env = BlockPickEnv::new(cfg(ArenaScale::S)).unwrap();
        let mut rng = Rng::seed(1);
        let (hx, hy) = ArenaScale::S.half_extents();
        for _ in 0..10_000 {
            env.reset(&mut rng);
            let b = env.state().block;
            let g = env.state().goal;
            for p in [b, g] {
                assert!(p[0] >= 0.5 - hx && p[0] <= 0.5 + hx);
                assert!(p[1] >= 0.5 - hy && p[1] <= 0.5 + hy);
            }
            assert!(dist(b, g) >= MIN_SEPARATION);
        }
    }

    #[test]
    fn distractors_touch_only_vision() {
        let mut plain = BlockPickEnv::new(cfg(ArenaScale::M)).unwrap();
        let mut pert =
            BlockPickEnv::new(EnvConfig::new(ArenaScale::M, Perturbation::distractor(6))).unwrap();
        // same seed: distractor sampling consumes extra draws after placement,
        // so placements agree and proprio must match exactly
        let a = plain.reset(&mut Rng::seed(3));
        let b = pert.reset(&mut Rng::seed(3));
        assert_eq!(a.proprio, b.proprio);
        assert_eq!(plain.state(), pert.state());
        let diffs: Vec<usize> = (0..VISION_DIM).filter(|&i| a.vision[i] != b.vision[i]).collect();
        assert!(!diffs.is_empty());
        for i in diffs {
            // differing cells carry the distractor intensity (unless a scene
            // object overdraws, which max() prevents from dimming)
            assert!(b.vision[i] >= a.vision[i]);
        }
    }

    #[test]
    fn full_occlusion_blanks_vision_every_step() {
        let mut env =
            BlockPickEnv::new(EnvConfig::new(ArenaScale::S, Perturbation::occlusion(0, DEFAULT_MAX_STEPS)))
                .unwrap();
        let mut rng = Rng::seed(4);
        let mut obs = env.reset(&mut rng);
        assert!(obs.vision.iter().all(|&v| v == 0.0));
        for _ in 0..DEFAULT_MAX_STEPS {
            let (next, done, _) = env.step(&[0.01, 0.0, 0.0]).unwrap();
            obs = next;
            assert!(obs.vision.iter().all(|&v| v == 0.0));
            if done {
                break;
            }
        }
    }

    #[test]
    fn windowed_occlusion_blanks_only_the_interval() {
        let mut env =
            BlockPickEnv::new(EnvConfig::new(ArenaScale::S, Perturbation::occlusion(2, 5))).unwrap();
        let mut rng = Rng::seed(5);
        let obs = env.reset(&mut rng);
        assert!(obs.vision.iter().any(|&v| v > 0.0)); // step 0 visible
        let mut blanked = Vec::new();
        for _ in 0..8 {
            let (next, _, _) = env.step(&[0.0, 0.0, 0.0]).unwrap();
            blanked.push(next.vision.iter().all(|&v| v == 0.0));
        }
        // after step() the counter reads 1..=8; blanked for counts 2..=5
        assert_eq!(blanked, vec![false, true, true, true, true, false, false, false]);
    }

    #[test]
    fn inaction_fails_at_max_steps() {
        let mut env = BlockPickEnv::new(cfg(ArenaScale::S)).unwrap();
        let mut rng = Rng::seed(6);
        env.reset(&mut rng);
        let mut steps = 0;
        loop {
            let (_, done, success) = env.step(&[0.0, 0.0, 0.0]).unwrap();
            steps += 1;
            if done {
                assert!(!success);
                break;
            }
        }
        assert_eq!(steps, DEFAULT_MAX_STEPS);
        assert!(matches!(env.step(&[0.0, 0.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn motion_is_clipped() {
        let mut env = BlockPickEnv::new(cfg(ArenaScale::S)).unwrap();
        let mut rng = Rng::seed(7);
        env.reset(&mut rng);
        let before = env.state().gripper;
        env.step(&[10.0, -10.0, 0.0]).unwrap();
        let after = env.state().gripper;
        let moved = dist(before, after);
        assert!(moved <= STEP_CLIP + 1e-12, "moved {moved}");
    }

    #[test]
    fn expert_succeeds_on_all_scales() {
        for scale in [ArenaScale::S, ArenaScale::M, ArenaScale::L] {
            for seed in 0..100 {
                let rec = run_expert_episode(&cfg(scale), seed).unwrap();
                assert!(rec.success, "scale {scale:?} seed {seed} failed");
                assert_eq!(rec.observations.len(), rec.actions.len());
            }
        }
    }

    #[test]
    fn expert_phase_rules() {
        let mut rng = Rng::seed(8);
        let at_block = EnvState {
            gripper: [0.4, 0.4],
            closed: false,
            block: [0.4, 0.4],
            goal: [0.6, 0.6],
            held: false,
        };
        assert_eq!(expert_action(&at_block, &mut rng), [0.0, 0.0, 1.0]);
        let at_goal = EnvState {
            gripper: [0.6, 0.6],
            closed: true,
            block: [0.6, 0.6],
            goal: [0.6, 0.6],
            held: true,
        };
        assert_eq!(expert_action(&at_goal, &mut rng), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn proprio_identical_across_perturbations() {
        let perturbations = [
            Perturbation::none(),
            Perturbation::color(0.25),
            Perturbation::distractor(6),
            Perturbation::occlusion(0, DEFAULT_MAX_STEPS),
        ];
        let mut streams: Vec<Vec<Vec<f64>>> = Vec::new();
        for p in &perturbations {
            let mut env = BlockPickEnv::new(EnvConfig::new(ArenaScale::M, p.clone())).unwrap();
            // dedicated substreams so distractor sampling cannot shift the
            // action noise
            let mut reset_rng = Rng::seed(9).substream(0);
            let mut act_rng = Rng::seed(9).substream(1);
            let mut proprio = vec![env.reset(&mut reset_rng).proprio];
            for _ in 0..20 {
                let a = [
                    0.03 * act_rng.normal(),
                    0.03 * act_rng.normal(),
                    act_rng.uniform(),
                ];
                let (o, done, _) = env.step(&a).unwrap();
                proprio.push(o.proprio);
                if done {
                    break;
                }
            }
            streams.push(proprio);
        }
        for s in &streams[1..] {
            assert_eq!(s, &streams[0]);
        }
    }

    #[test]
    fn physics_deterministic() {
        let run = || {
            let mut env = BlockPickEnv::new(cfg(ArenaScale::L)).unwrap();
            let mut rng = Rng::seed(10);
            env.reset(&mut rng);
            let mut trace = Vec::new();
            for i in 0..50 {
                let a = [0.02 * ((i % 5) as f64 - 2.0), 0.015, if i > 25 { 1.0 } else { 0.0 }];
                let (o, done, _) = env.step(&a).unwrap();
                trace.push((o, env.state().clone()));
                if done {
                    break;
                }
            }
            trace
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn success_monotone_in_radius() {
        // replay one expert action sequence under shrinking/growing radii
        let rec = run_expert_episode(&cfg(ArenaScale::M), 3).unwrap();
        let mut prev_success = false;
        for radius in [0.005, 0.02, 0.04, 0.08, 0.2] {
            let mut config = cfg(ArenaScale::M);
            config.success_radius = radius;
            let mut env = BlockPickEnv::new(config).unwrap();
            env.reset(&mut Rng::seed(3));
            for a in &rec.actions {
                let (_, done, _) = env.step(a).unwrap();
                if done {
                    break;
                }
            }
            assert!(
                env.succeeded() || !prev_success,
                "success not monotone at radius {radius}"
            );
            prev_success = env.succeeded();
        }
        assert!(prev_success); // the largest radius certainly succeeds
    }

    #[test]
    fn rollout_with_expert_planner_succeeds() {
        // privileged planner: peek the env through a shadow copy is not
        // possible; instead decode state from proprio + a shadow environment
        // run in lockstep is overkill. Use single-step chunks from a fresh
        // expert acting on a mirrored env.
        let control = ControlConfig { obs_history: 2, action_horizon: 1 };
        let config = cfg(ArenaScale::S);
        // mirror: rebuild each episode's env from the same seed and step it
        // alongside the rollout
        let mut mirror: Option<BlockPickEnv> = None;
        let mut episode = 0u64;
        let (rate, records) = rollout(&config, &control, 20, 100, |history, rng| {
            if mirror.is_none() {
                let mut env = BlockPickEnv::new(cfg(ArenaScale::S)).unwrap();
                // rollout seeds episodes as seed_base + e and resets first
                let mut r = Rng::seed(100 + episode);
                env.reset(&mut r);
                episode += 1;
                mirror = Some(env);
            }
            let env = mirror.as_mut().unwrap();
            let a = expert_action(env.state(), rng);
            env.step(&a).unwrap();
            if env.done() {
                mirror = None;
            }
            let _ = history;
            Ok(a.to_vec())
        })
        .unwrap();
        assert_eq!(rate, 1.0, "records: {}", records.len());
        assert!(records.iter().all(|r| r.success));
    }

    #[test]
    fn random_policy_rarely_succeeds_on_l() {
        let control = ControlConfig::default();
        let config = cfg(ArenaScale::L);
        let (rate, _) = rollout(&config, &control, 300, 0, |_, rng| {
            Ok((0..control.action_horizon * ACTION_DIM)
                .map(|_| rng.uniform_in(-1.0, 1.0))
                .collect())
        })
        .unwrap();
        assert!(rate < 0.05, "random success rate {rate}");
    }

    #[test]
    fn rollout_is_deterministic() {
        let control = ControlConfig::default();
        let config = EnvConfig::new(ArenaScale::M, Perturbation::distractor(6));
        let run = || {
            rollout(&config, &control, 30, 7, |_, rng| {
                Ok((0..control.action_horizon * ACTION_DIM)
                    .map(|_| 0.05 * rng.normal())
                    .collect())
            })
            .unwrap()
        };
        let (r1, rec1) = run();
        let (r2, rec2) = run();
        assert_eq!(r1, r2);
        assert_eq!(rec1, rec2);
    }

    #[test]
    fn color_perturbation_changes_block_cell_only() {
        let mut plain = BlockPickEnv::new(cfg(ArenaScale::S)).unwrap();
        let mut tinted =
            BlockPickEnv::new(EnvConfig::new(ArenaScale::S, Perturbation::color(0.25))).unwrap();
        let a = plain.reset(&mut Rng::seed(11));
        let b = tinted.reset(&mut Rng::seed(11));
        let diffs: Vec<usize> = (0..VISION_DIM).filter(|&i| a.vision[i] != b.vision[i]).collect();
        // the block splat covers at most 4 cells around its position
        assert!((1..=4).contains(&diffs.len()), "{} cells differ", diffs.len());
        let near = cell_index(plain.state().block);
        for d in &diffs {
            let (dx, dy) = (d % VISION_GRID, d / VISION_GRID);
            let (nx, ny) = (near % VISION_GRID, near / VISION_GRID);
            assert!(dx.abs_diff(nx) <= 1 && dy.abs_diff(ny) <= 1);
        }
        // total intensity difference equals the tint change
        let sum: f64 = (0..VISION_DIM).map(|i| a.vision[i] - b.vision[i]).sum();
        assert!((sum - (1.0 - 0.25)).abs() < 1e-12);
    }
}
