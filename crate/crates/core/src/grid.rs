//! Discretized state grid for the two-car merge game.

use serde::{Deserialize, Serialize};

/// One evenly spaced grid axis: `count` points starting at `min`, `step` apart.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub step: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(min: f64, step: f64, count: usize) -> Self {
        Self { min, step, count }
    }

    pub fn max(&self) -> f64 {
        self.value(self.count - 1)
    }

    pub fn value(&self, idx: usize) -> f64 {
        self.min + self.step * idx as f64
    }

    /// Nearest grid point, clamped to the axis. Exact ties go to the smaller index.
    pub fn snap(&self, v: f64) -> usize {
        let t = (v - self.min) / self.step;
        if !t.is_finite() || t <= 0.0 {
            return 0;
        }
        // ceil(t - 0.5) rounds half down; the epsilon absorbs float noise around ties.
        let idx = (t - 0.5 - 1e-9).ceil();
        if idx <= 0.0 {
            0
        } else {
            (idx as usize).min(self.count - 1)
        }
    }
}

/// Continuous coordinates of both cars. The human's lateral position is fixed
/// to the centre of the upper lane and so is not stored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalState {
    pub x_r: f64,
    pub y_r: f64,
    pub x_h: f64,
    pub v_r: f64,
    pub v_h: f64,
}

/// A grid state, stored as per-axis indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JointState {
    pub xr: u16,
    pub yr: u16,
    pub xh: u16,
    pub vr: u16,
    pub vh: u16,
}

impl JointState {
    pub fn new(xr: usize, yr: usize, xh: usize, vr: usize, vh: usize) -> Self {
        Self { xr: xr as u16, yr: yr as u16, xh: xh as u16, vr: vr as u16, vh: vh as u16 }
    }
}

/// The product grid x_R × y_R × x_H × v_R × v_H. Both cars share the
/// longitudinal and speed axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x: Axis,
    pub y: Axis,
    pub v: Axis,
}

impl Grid {
    pub fn num_states(&self) -> usize {
        self.x.count * self.y.count * self.x.count * self.v.count * self.v.count
    }

    /// Axis sizes in index order (x_R, y_R, x_H, v_R, v_H).
    pub fn shape(&self) -> [usize; 5] {
        [self.x.count, self.y.count, self.x.count, self.v.count, self.v.count]
    }

    pub fn contains(&self, s: &JointState) -> bool {
        (s.xr as usize) < self.x.count
            && (s.yr as usize) < self.y.count
            && (s.xh as usize) < self.x.count
            && (s.vr as usize) < self.v.count
            && (s.vh as usize) < self.v.count
    }

    #[inline]
    pub fn index(&self, s: &JointState) -> usize {
        let nx = self.x.count;
        let ny = self.y.count;
        let nv = self.v.count;
        (((s.xr as usize * ny + s.yr as usize) * nx + s.xh as usize) * nv + s.vr as usize) * nv
            + s.vh as usize
    }

    #[inline]
    pub fn state(&self, mut idx: usize) -> JointState {
        let nx = self.x.count;
        let ny = self.y.count;
        let nv = self.v.count;
        let vh = idx % nv;
        idx /= nv;
        let vr = idx % nv;
        idx /= nv;
        let xh = idx % nx;
        idx /= nx;
        let yr = idx % ny;
        let xr = idx / ny;
        JointState::new(xr, yr, xh, vr, vh)
    }

    pub fn physical(&self, s: &JointState) -> PhysicalState {
        PhysicalState {
            x_r: self.x.value(s.xr as usize),
            y_r: self.y.value(s.yr as usize),
            x_h: self.x.value(s.xh as usize),
            v_r: self.v.value(s.vr as usize),
            v_h: self.v.value(s.vh as usize),
        }
    }

    pub fn snap(&self, p: &PhysicalState) -> JointState {
        JointState::new(
            self.x.snap(p.x_r),
            self.y.snap(p.y_r),
            self.x.snap(p.x_h),
            self.v.snap(p.v_r),
            self.v.snap(p.v_h),
        )
    }

    /// Lateral position of the human car (centre of the upper lane).
    pub fn human_lateral(&self) -> f64 {
        self.y.max()
    }

    pub fn states(&self) -> impl Iterator<Item = JointState> + '_ {
        (0..self.num_states()).map(move |i| self.state(i))
    }
}
