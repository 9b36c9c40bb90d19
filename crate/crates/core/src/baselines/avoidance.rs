//! Reciprocal velocity-obstacle avoidance.
//!
//! Each neighbor contributes a half-plane of permitted velocities, taking
//! half of the responsibility for resolving the conflict. The permitted
//! velocity closest to the preferred one is found with the incremental 2D
//! linear program used by RVO2; when the constraints are infeasible the
//! velocity minimizing the worst penetration is returned instead.

use crate::geom::Vec2;

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentDisk {
    pub position: Vec2,
    pub velocity: Vec2,
}

/// Permitted velocities lie left of the directed line, i.e. where
/// `direction.cross(point - v) <= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlane {
    pub point: Vec2,
    pub direction: Vec2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvoidanceParams {
    /// Seconds of look-ahead.
    pub time_horizon: f64,
    /// Combined radius of two agents, safety margin included.
    pub radius: f64,
    pub max_speed: f64,
    /// Step length used when agents already overlap.
    pub dt: f64,
}

impl AvoidanceParams {
    /// Distance beyond which a neighbor cannot matter within the horizon.
    pub fn reach(&self) -> f64 {
        self.radius + 2.0 * self.max_speed * self.time_horizon
    }
}

pub fn half_plane(me: &AgentDisk, other: &AgentDisk, p: &AvoidanceParams) -> HalfPlane {
    let rel_pos = other.position - me.position;
    let rel_vel = me.velocity - other.velocity;
    let dist_sq = rel_pos.norm_sq();
    let r = p.radius;
    let r_sq = r * r;
    let inv_th = 1.0 / p.time_horizon;

    let (direction, u) = if dist_sq > r_sq {
        let w = rel_vel - rel_pos * inv_th;
        let w_len_sq = w.norm_sq();
        let dot1 = w.dot(rel_pos);
        if dot1 < 0.0 && dot1 * dot1 > r_sq * w_len_sq {
            // Closest point is on the cut-off circle.
            let w_len = w_len_sq.sqrt();
            let unit_w = if w_len > EPS { w * (1.0 / w_len) } else { Vec2::new(1.0, 0.0) };
            (Vec2::new(unit_w.y, -unit_w.x), unit_w * (r * inv_th - w_len))
        } else {
            let leg = (dist_sq - r_sq).sqrt();
            let dir = if rel_pos.cross(w) > 0.0 {
                Vec2::new(rel_pos.x * leg - rel_pos.y * r, rel_pos.x * r + rel_pos.y * leg) * (1.0 / dist_sq)
            } else {
                -(Vec2::new(rel_pos.x * leg + rel_pos.y * r, -rel_pos.x * r + rel_pos.y * leg) * (1.0 / dist_sq))
            };
            (dir, dir * rel_vel.dot(dir) - rel_vel)
        }
    } else {
        let inv_dt = 1.0 / p.dt;
        let w = rel_vel - rel_pos * inv_dt;
        let w_len = w.norm();
        let unit_w = if w_len > EPS { w * (1.0 / w_len) } else { Vec2::new(1.0, 0.0) };
        (Vec2::new(unit_w.y, -unit_w.x), unit_w * (r * inv_dt - w_len))
    };
    HalfPlane { point: me.velocity + u * 0.5, direction }
}

fn violates(line: &HalfPlane, v: Vec2) -> f64 {
    line.direction.cross(line.point - v)
}

fn program1(lines: &[HalfPlane], no: usize, radius: f64, opt: Vec2, dir_opt: bool) -> Option<Vec2> {
    let line = lines[no];
    let dot = line.point.dot(line.direction);
    let disc = dot * dot + radius * radius - line.point.norm_sq();
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let (mut t_left, mut t_right) = (-dot - sq, -dot + sq);
    for other in &lines[..no] {
        let denom = line.direction.cross(other.direction);
        let numer = other.direction.cross(line.point - other.point);
        if denom.abs() <= EPS {
            if numer < 0.0 {
                return None;
            }
            continue;
        }
        let t = numer / denom;
        if denom >= 0.0 {
            t_right = t_right.min(t);
        } else {
            t_left = t_left.max(t);
        }
        if t_left > t_right {
            return None;
        }
    }
    let t = if dir_opt {
        if opt.dot(line.direction) > 0.0 {
            t_right
        } else {
            t_left
        }
    } else {
        line.direction.dot(opt - line.point).clamp(t_left, t_right)
    };
    Some(line.point + line.direction * t)
}

/// Returns the index of the first line that could not be satisfied
/// (`lines.len()` on success) and the best velocity found.
fn program2(lines: &[HalfPlane], radius: f64, opt: Vec2, dir_opt: bool) -> (usize, Vec2) {
    let mut result = if dir_opt {
        opt * radius
    } else if opt.norm_sq() > radius * radius {
        opt.normalized().unwrap_or(Vec2::ZERO) * radius
    } else {
        opt
    };
    for i in 0..lines.len() {
        if violates(&lines[i], result) > 0.0 {
            match program1(lines, i, radius, opt, dir_opt) {
                Some(r) => result = r,
                None => return (i, result),
            }
        }
    }
    (lines.len(), result)
}

fn program3(lines: &[HalfPlane], begin: usize, radius: f64, mut result: Vec2) -> Vec2 {
    let mut distance = 0.0;
    for i in begin..lines.len() {
        if violates(&lines[i], result) <= distance {
            continue;
        }
        let li = lines[i];
        let mut projected = Vec::with_capacity(i);
        for lj in &lines[..i] {
            let det = li.direction.cross(lj.direction);
            let point = if det.abs() <= EPS {
                if li.direction.dot(lj.direction) > 0.0 {
                    continue;
                }
                (li.point + lj.point) * 0.5
            } else {
                li.point + li.direction * (lj.direction.cross(li.point - lj.point) / det)
            };
            let Some(direction) = (lj.direction - li.direction).normalized() else {
                continue;
            };
            projected.push(HalfPlane { point, direction });
        }
        let prev = result;
        let (fail, r) = program2(&projected, radius, Vec2::new(-li.direction.y, li.direction.x), true);
        result = if fail < projected.len() { prev } else { r };
        distance = violates(&li, result);
    }
    result
}

/// Velocity closest to `preferred` that respects every reciprocal
/// half-plane from neighbors within [`AvoidanceParams::reach`].
pub fn avoidance_velocity(me: &AgentDisk, neighbors: &[AgentDisk], preferred: Vec2, params: &AvoidanceParams) -> Vec2 {
    let reach = params.reach();
    let lines: Vec<HalfPlane> =
        neighbors.iter().filter(|n| n.position.distance(me.position) < reach).map(|n| half_plane(me, n, params)).collect();
    if lines.is_empty() {
        return preferred;
    }
    let (fail, result) = program2(&lines, params.max_speed, preferred, false);
    if fail < lines.len() {
        program3(&lines, fail, params.max_speed, result)
    } else {
        result
    }
}
