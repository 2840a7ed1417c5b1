//! Minimum-jerk profiles and the lateral detour used by both the scripted
//! human and the demonstration generator.

/// `10τ³ − 15τ⁴ + 6τ⁵` on `[0, 1]` (clamped outside) with its first two
/// derivatives with respect to `τ`.
pub fn min_jerk(tau: f64) -> (f64, f64, f64) {
    if tau <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if tau >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let t2 = tau * tau;
    let t3 = t2 * tau;
    (
        t3 * (10.0 - 15.0 * tau + 6.0 * t2),
        30.0 * t2 * (1.0 - 2.0 * tau + t2),
        60.0 * tau * (1.0 - 3.0 * tau + 2.0 * t2),
    )
}

/// Lateral offset as a function of path coordinate `s`: rises with a
/// minimum-jerk profile over `[s_obs − r − w, s_obs − r]`, holds
/// `r + margin` until `s_obs + r + margin`, then falls over the next `w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detour {
    pub s_obs: f64,
    pub radius: f64,
    pub margin: f64,
    pub ramp: f64,
}

impl Detour {
    pub fn clearance(&self) -> f64 {
        self.radius + self.margin
    }

    pub fn rise_start(&self) -> f64 {
        self.s_obs - self.radius - self.ramp
    }

    pub fn hold_end(&self) -> f64 {
        self.s_obs + self.radius + self.margin
    }

    pub fn fall_end(&self) -> f64 {
        self.hold_end() + self.ramp
    }

    /// Offset and its derivative with respect to `s`.
    pub fn offset(&self, s: f64) -> (f64, f64) {
        let c = self.clearance();
        let rise_end = self.s_obs - self.radius;
        if s < rise_end {
            let (v, d, _) = min_jerk((s - self.rise_start()) / self.ramp);
            (c * v, c * d / self.ramp)
        } else if s <= self.hold_end() {
            (c, 0.0)
        } else {
            let (v, d, _) = min_jerk((s - self.hold_end()) / self.ramp);
            (c * (1.0 - v), -c * d / self.ramp)
        }
    }
}
