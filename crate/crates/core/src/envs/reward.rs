//! Per-step rewards, all products of smooth box tolerances and therefore
//! bounded to [0, 1].

use super::types::{Domain, RAIL_LIMIT};

/// 1 inside `[lower, upper]`, Gaussian decay outside reaching
/// `value_at_margin` at distance `margin` from the nearest bound.
pub fn tolerance(x: f64, lower: f64, upper: f64, margin: f64, value_at_margin: f64) -> f64 {
    debug_assert!(lower <= upper && margin > 0.0);
    debug_assert!(value_at_margin > 0.0 && value_at_margin < 1.0);
    let dist = if x < lower {
        lower - x
    } else if x > upper {
        x - upper
    } else {
        return 1.0;
    };
    let scale = (-2.0 * value_at_margin.ln()).sqrt();
    let z = dist / margin * scale;
    (-0.5 * z * z).exp()
}

/// Saturated within 0.1 rad of upright, 0.01 at the hanging position.
pub fn pendulum_reward(theta: f64) -> f64 {
    let cos_bound = 0.1f64.cos();
    tolerance(theta.cos(), cos_bound, 1.0, 1.0 + cos_bound, 0.01)
}

/// Upright-angle tolerance times a cart-centering tolerance. Balance keeps a
/// gentler angle falloff than swing-up, which needs shaping reward all the
/// way from the hanging position.
pub fn cartpole_reward(domain: Domain, x: f64, theta: f64) -> f64 {
    let value_at_down = match domain {
        Domain::CartpoleBalance => 0.1,
        Domain::CartpoleSwingup => 0.01,
        Domain::PendulumSwingup => unreachable!("pendulum states use pendulum_reward"),
    };
    let cos_bound = 0.2f64.cos();
    let upright = tolerance(theta.cos(), cos_bound, 1.0, 1.0 + cos_bound, value_at_down);
    let centered = tolerance(x, -0.25, 0.25, RAIL_LIMIT - 0.25, 0.1);
    upright * centered
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_is_one_inside_and_value_at_margin() {
        assert_eq!(tolerance(0.0, -1.0, 1.0, 2.0, 0.05), 1.0);
        assert_eq!(tolerance(1.0, -1.0, 1.0, 2.0, 0.05), 1.0);
        let at_margin = tolerance(3.0, -1.0, 1.0, 2.0, 0.05);
        assert!((at_margin - 0.05).abs() < 1e-12);
        let symmetric = tolerance(-3.0, -1.0, 1.0, 2.0, 0.05);
        assert!((at_margin - symmetric).abs() < 1e-15);
    }

    #[test]
    fn tolerance_decays_monotonically_outside() {
        let mut prev = 1.0;
        for k in 1..40 {
            let v = tolerance(1.0 + 0.1 * k as f64, -1.0, 1.0, 1.5, 0.1);
            assert!(v < prev && v > 0.0);
            prev = v;
        }
    }

    #[test]
    fn pendulum_reward_pins_upright_and_down() {
        assert_eq!(pendulum_reward(0.0), 1.0);
        assert_eq!(pendulum_reward(0.05), 1.0);
        let down = pendulum_reward(std::f64::consts::PI);
        assert!((down - 0.01).abs() < 1e-12);
    }

    #[test]
    fn cartpole_reward_prefers_centered_upright() {
        let best = cartpole_reward(Domain::CartpoleBalance, 0.0, 0.0);
        assert_eq!(best, 1.0);
        let off_center = cartpole_reward(Domain::CartpoleBalance, 1.5, 0.0);
        let tilted = cartpole_reward(Domain::CartpoleBalance, 0.0, 1.0);
        assert!(off_center < best && tilted < best);
        let down_swingup = cartpole_reward(Domain::CartpoleSwingup, 0.0, std::f64::consts::PI);
        assert!(down_swingup > 0.0 && down_swingup < 0.02);
    }
}
