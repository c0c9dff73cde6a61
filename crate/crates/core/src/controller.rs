//! Discrete-action decode and the PID layer shared by every policy.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("action {0} out of range 0..=8")]
    ActionOutOfRange(u8),
}

/// Low-level vehicle command; construction clamps to the declared ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Control {
    pub throttle: f64,
    pub brake: f64,
    pub steer: f64,
}

impl Control {
    pub fn new(throttle: f64, brake: f64, steer: f64) -> Self {
        Self {
            throttle: throttle.clamp(0.0, 1.0),
            brake: brake.clamp(0.0, 1.0),
            steer: steer.clamp(-1.0, 1.0),
        }
    }

    pub fn coast() -> Self {
        Self {
            throttle: 0.0,
            brake: 0.0,
            steer: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteerCmd {
    Left,
    Straight,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeedCmd {
    Fast,
    Slow,
    Stop,
}

/// One of the nine discrete actions: steer_idx * 3 + speed_idx with
/// steer in {left, straight, right} and speed in {fast, slow, stop}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Action(u8);

impl Action {
    pub fn new(raw: u8) -> Result<Self, ControllerError> {
        if raw > 8 {
            return Err(ControllerError::ActionOutOfRange(raw));
        }
        Ok(Self(raw))
    }

    pub fn from_parts(steer: SteerCmd, speed: SpeedCmd) -> Self {
        let s = match steer {
            SteerCmd::Left => 0,
            SteerCmd::Straight => 1,
            SteerCmd::Right => 2,
        };
        let v = match speed {
            SpeedCmd::Fast => 0,
            SpeedCmd::Slow => 1,
            SpeedCmd::Stop => 2,
        };
        Self(s * 3 + v)
    }

    pub fn index(&self) -> u8 {
        self.0
    }

    pub fn steer(&self) -> SteerCmd {
        match self.0 / 3 {
            0 => SteerCmd::Left,
            1 => SteerCmd::Straight,
            _ => SteerCmd::Right,
        }
    }

    pub fn speed(&self) -> SpeedCmd {
        match self.0 % 3 {
            0 => SpeedCmd::Fast,
            1 => SpeedCmd::Slow,
            _ => SpeedCmd::Stop,
        }
    }

    pub fn all() -> [Action; 9] {
        let mut out = [Action(0); 9];
        for (i, a) in out.iter_mut().enumerate() {
            *a = Action(i as u8);
        }
        out
    }
}

/// PID gains and the target tables; lives in the run config so experiments
/// stay comparable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Steering gain applied to the blended heading error.
    pub ks: f64,
    /// Target speed m/s for fast / slow / stop.
    pub speed_targets: [f64; 3],
    /// Heading offset rad for left / straight / right (left positive).
    pub heading_offsets: [f64; 3],
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            kp: 0.5,
            ki: 0.1,
            kd: 0.05,
            ks: 1.0,
            speed_targets: [5.5, 2.0, 0.0],
            heading_offsets: [0.35, 0.0, -0.35],
        }
    }
}

const INTEGRAL_CLAMP: f64 = 5.0;

/// Speed-error PID plus proportional steering. One instance per rollout.
#[derive(Debug, Clone)]
pub struct PidController {
    pub config: PidConfig,
    integral: f64,
    prev_error: f64,
}

impl PidController {
    pub fn new(config: PidConfig) -> Self {
        Self {
            config,
            integral: 0.0,
            prev_error: 0.0,
        }
    }

    /// (target speed m/s, heading offset rad) for a discrete action.
    pub fn decode(&self, action: Action) -> (f64, f64) {
        let speed = match action.speed() {
            SpeedCmd::Fast => self.config.speed_targets[0],
            SpeedCmd::Slow => self.config.speed_targets[1],
            SpeedCmd::Stop => self.config.speed_targets[2],
        };
        let offset = match action.steer() {
            SteerCmd::Left => self.config.heading_offsets[0],
            SteerCmd::Straight => self.config.heading_offsets[1],
            SteerCmd::Right => self.config.heading_offsets[2],
        };
        (speed, offset)
    }

    /// One control step. `heading_error` is the blended error (discrete
    /// offset plus route-following error), left positive.
    pub fn step(
        &mut self,
        target_speed: f64,
        current_speed: f64,
        heading_error: f64,
        dt: f64,
    ) -> Control {
        debug_assert!(dt > 0.0);
        let error = target_speed - current_speed;
        self.integral = (self.integral + error * dt).clamp(-INTEGRAL_CLAMP, INTEGRAL_CLAMP);
        let derivative = (error - self.prev_error) / dt;
        self.prev_error = error;
        let u = self.config.kp * error + self.config.ki * self.integral + self.config.kd * derivative;
        let (throttle, brake) = if u > 0.0 {
            (u.clamp(0.0, 1.0), 0.0)
        } else {
            (0.0, (-u).clamp(0.0, 1.0))
        };
        let steer = (self.config.ks * heading_error).clamp(-1.0, 1.0);
        Control {
            throttle,
            brake,
            steer,
        }
    }

    /// Decode + blend + step in one call.
    pub fn step_action(
        &mut self,
        action: Action,
        current_speed: f64,
        route_heading_error: f64,
        dt: f64,
    ) -> Control {
        let (target, offset) = self.decode(action);
        self.step(target, current_speed, offset + route_heading_error, dt)
    }

    /// Zeroes the integral and previous error.
    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.prev_error = 0.0;
    }
}
