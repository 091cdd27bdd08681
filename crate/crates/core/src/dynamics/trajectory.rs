use super::state::{Layout, StateView, SystemState};
use super::DriverControl;

/// States and applied gains at every grid node of an integration run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    layout: Layout,
    times: Vec<f64>,
    states: Vec<f64>,
    controls: Vec<DriverControl>,
}

impl Trajectory {
    pub fn with_capacity(layout: Layout, nodes: usize) -> Self {
        Self {
            layout,
            times: Vec::with_capacity(nodes),
            states: Vec::with_capacity(nodes * layout.dim()),
            controls: Vec::with_capacity(nodes * layout.drivers),
        }
    }

    pub fn push(&mut self, t: f64, x: &[f64], controls: &[DriverControl]) {
        debug_assert_eq!(x.len(), self.layout.dim());
        debug_assert_eq!(controls.len(), self.layout.drivers);
        self.times.push(t);
        self.states.extend_from_slice(x);
        self.controls.extend_from_slice(controls);
    }

    /// Appends `other`, skipping its first node when it repeats our last one.
    pub fn append(&mut self, other: &Trajectory) {
        let skip = usize::from(self.times.last() == other.times.first());
        for k in skip..other.len() {
            self.push(other.times[k], other.state(k).data, other.controls(k));
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state(&self, k: usize) -> StateView<'_> {
        let dim = self.layout.dim();
        StateView {
            t: self.times[k],
            layout: self.layout,
            data: &self.states[k * dim..(k + 1) * dim],
        }
    }

    pub fn controls(&self, k: usize) -> &[DriverControl] {
        let m = self.layout.drivers;
        &self.controls[k * m..(k + 1) * m]
    }

    pub fn states(&self) -> impl Iterator<Item = StateView<'_>> + '_ {
        (0..self.len()).map(move |k| self.state(k))
    }

    pub fn final_state(&self) -> SystemState {
        self.state(self.len() - 1).to_owned_state()
    }

    pub fn t_final(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one node")
    }

    /// Trapezoid rule for a function of the node index.
    pub fn trapezoid(&self, mut g: impl FnMut(usize) -> f64) -> f64 {
        let mut acc = 0.0;
        let mut prev = g(0);
        for k in 1..self.len() {
            let cur = g(k);
            acc += 0.5 * (self.times[k] - self.times[k - 1]) * (prev + cur);
            prev = cur;
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_drops_duplicate_node() {
        let l = Layout::new(1, 1);
        let x = vec![0.0; l.dim()];
        let c = [DriverControl::OFF];
        let mut a = Trajectory::with_capacity(l, 2);
        a.push(0.0, &x, &c);
        a.push(1.0, &x, &c);
        let mut b = Trajectory::with_capacity(l, 2);
        b.push(1.0, &x, &c);
        b.push(2.0, &x, &c);
        a.append(&b);
        assert_eq!(a.times(), &[0.0, 1.0, 2.0]);
        assert!((a.trapezoid(|k| a.times()[k]) - 2.0).abs() < 1e-15);
    }
}
