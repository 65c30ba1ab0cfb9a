use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OBS_DIM: usize = 4;
pub const ACT_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Circle {
    /// Whether the segment `a -> b` passes within the radius.
    pub fn hits_segment(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        let d = [b[0] - a[0], b[1] - a[1]];
        let f = [a[0] - self.center[0], a[1] - self.center[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = if len2 > 0.0 {
            (-(f[0] * d[0] + f[1] * d[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let px = f[0] + t * d[0];
        let py = f[1] + t * d[1];
        px * px + py * py < self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AvoidConfig {
    pub start: [f64; 2],
    /// Half-width of the uniform jitter applied to the start height.
    pub start_jitter: f64,
    pub obstacles: Vec<Circle>,
    pub goal_line_x: f64,
    pub top_mode_y: f64,
    pub max_step: f64,
    pub horizon: usize,
}

impl Default for AvoidConfig {
    fn default() -> Self {
        let mut obstacles = Vec::new();
        for x in [0.35, 0.62] {
            for y in [0.35, 0.65] {
                obstacles.push(Circle {
                    center: [x, y],
                    radius: 0.06,
                });
            }
        }
        Self {
            start: [0.05, 0.5],
            start_jitter: 0.02,
            obstacles,
            goal_line_x: 0.9,
            top_mode_y: 0.65,
            max_step: 0.04,
            horizon: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Collision,
    GoalTop,
    GoalOther,
    Timeout,
}

impl Event {
    pub fn name(self) -> &'static str {
        match self {
            Event::Collision => "collision",
            Event::GoalTop => "goal_top",
            Event::GoalOther => "goal_other",
            Event::Timeout => "timeout",
        }
    }

    /// True termination, as opposed to truncation at the horizon.
    pub fn is_terminal(self) -> bool {
        !matches!(self, Event::Timeout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub obs: [f64; OBS_DIM],
    pub reward: f64,
    pub done: bool,
    pub event: Option<Event>,
}

/// Point agent servoing toward commanded target positions in the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct AvoidEnv {
    pub config: AvoidConfig,
    pos: [f64; 2],
    prev_target: [f64; 2],
    t: usize,
    done: bool,
}

impl AvoidEnv {
    pub fn new(config: AvoidConfig) -> Self {
        let start = config.start;
        Self {
            config,
            pos: start,
            prev_target: start,
            t: 0,
            done: false,
        }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> [f64; OBS_DIM] {
        let j = self.config.start_jitter;
        let dy = if j > 0.0 {
            rng.random_range(-j..=j)
        } else {
            0.0
        };
        self.reset_to([self.config.start[0], self.config.start[1] + dy])
    }

    pub fn reset_to(&mut self, pos: [f64; 2]) -> [f64; OBS_DIM] {
        self.pos = pos;
        self.prev_target = pos;
        self.t = 0;
        self.done = false;
        self.obs()
    }

    pub fn obs(&self) -> [f64; OBS_DIM] {
        [
            self.pos[0],
            self.pos[1],
            self.prev_target[0],
            self.prev_target[1],
        ]
    }

    pub fn pos(&self) -> [f64; 2] {
        self.pos
    }

    pub fn elapsed(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Moves toward `target` (world coordinates) by at most `max_step`.
    pub fn step(&mut self, target: [f64; 2]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        if !(target[0].is_finite() && target[1].is_finite()) {
            return Err(Error::NonFinite("env target".into()));
        }
        let c = &self.config;
        let d = [target[0] - self.pos[0], target[1] - self.pos[1]];
        let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let scale = if dist > c.max_step {
            c.max_step / dist
        } else {
            1.0
        };
        let next = [
            (self.pos[0] + scale * d[0]).clamp(0.0, 1.0),
            (self.pos[1] + scale * d[1]).clamp(0.0, 1.0),
        ];
        let prev = self.pos;
        self.pos = next;
        self.prev_target = target;
        self.t += 1;

        let mut event = None;
        if c.obstacles.iter().any(|o| o.hits_segment(prev, next)) {
            event = Some(Event::Collision);
        } else if prev[0] < c.goal_line_x && next[0] >= c.goal_line_x {
            let frac = (c.goal_line_x - prev[0]) / (next[0] - prev[0]);
            let y = prev[1] + frac * (next[1] - prev[1]);
            event = Some(if y >= c.top_mode_y {
                Event::GoalTop
            } else {
                Event::GoalOther
            });
        } else if self.t >= c.horizon {
            event = Some(Event::Timeout);
        }
        self.done = event.is_some();
        Ok(StepOutcome {
            obs: self.obs(),
            reward: if event == Some(Event::GoalTop) {
                1.0
            } else {
                0.0
            },
            done: self.done,
            event,
        })
    }
}
