//! Minimal scalar reverse-mode autodiff tape, used to unroll a whole spiking
//! network step by step and differentiate the result without any of the
//! engine's layer-level backward formulas.
//!
//! Two deliberately non-smooth operations mirror the engine's conventions:
//! `spike` fires at value >= threshold and backpropagates the triangular
//! surrogate (1 - 2|v - th| inside the unit window, 0 outside, boundary to
//! 0), and `gate` multiplies by a constant captured at forward time so no
//! gradient flows through the reset indicator.

#[derive(Clone, Copy)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Sqrt(usize),
    Exp(usize),
    Ln(usize),
    Scale(usize, f64),
    AddConst(usize, f64),
    Spike { v: usize, threshold: f64 },
    Gate { x: usize, factor: f64 },
}

pub struct Graph {
    vals: Vec<f64>,
    ops: Vec<Op>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { vals: Vec::new(), ops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn val(&self, id: usize) -> f64 {
        self.vals[id]
    }

    fn push(&mut self, v: f64, op: Op) -> usize {
        self.vals.push(v);
        self.ops.push(op);
        self.vals.len() - 1
    }

    /// Differentiable input; also used for plain constants whose gradient is
    /// simply never read.
    pub fn leaf(&mut self, v: f64) -> usize {
        self.push(v, Op::Leaf)
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        self.push(self.vals[a] + self.vals[b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: usize, b: usize) -> usize {
        self.push(self.vals[a] - self.vals[b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: usize, b: usize) -> usize {
        self.push(self.vals[a] * self.vals[b], Op::Mul(a, b))
    }

    pub fn div(&mut self, a: usize, b: usize) -> usize {
        self.push(self.vals[a] / self.vals[b], Op::Div(a, b))
    }

    pub fn sqrt(&mut self, a: usize) -> usize {
        self.push(self.vals[a].sqrt(), Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: usize) -> usize {
        self.push(self.vals[a].exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: usize) -> usize {
        self.push(self.vals[a].ln(), Op::Ln(a))
    }

    pub fn scale(&mut self, a: usize, c: f64) -> usize {
        self.push(self.vals[a] * c, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: usize, c: f64) -> usize {
        self.push(self.vals[a] + c, Op::AddConst(a, c))
    }

    /// Heaviside step at the threshold (1 at exact equality), surrogate
    /// triangular derivative on the way back.
    pub fn spike(&mut self, v: usize, threshold: f64) -> usize {
        let fired = if self.vals[v] >= threshold { 1.0 } else { 0.0 };
        self.push(fired, Op::Spike { v, threshold })
    }

    /// x times a constant factor captured at forward time; the factor is
    /// opaque to differentiation even if it was derived from graph values.
    pub fn gate(&mut self, x: usize, factor: f64) -> usize {
        self.push(self.vals[x] * factor, Op::Gate { x, factor })
    }

    /// Left-to-right sequential sum.
    pub fn sum(&mut self, ids: &[usize]) -> usize {
        assert!(!ids.is_empty());
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id);
        }
        acc
    }

    pub fn mean(&mut self, ids: &[usize]) -> usize {
        let s = self.sum(ids);
        self.scale(s, 1.0 / ids.len() as f64)
    }

    /// d val(root) / d val(node) for every node, by one reverse sweep.
    pub fn backward(&self, root: usize) -> Vec<f64> {
        let mut grad = vec![0.0; self.vals.len()];
        grad[root] = 1.0;
        for id in (0..self.ops.len()).rev() {
            let g = grad[id];
            if g == 0.0 {
                continue;
            }
            match self.ops[id] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grad[a] += g;
                    grad[b] += g;
                }
                Op::Sub(a, b) => {
                    grad[a] += g;
                    grad[b] -= g;
                }
                Op::Mul(a, b) => {
                    grad[a] += g * self.vals[b];
                    grad[b] += g * self.vals[a];
                }
                Op::Div(a, b) => {
                    grad[a] += g / self.vals[b];
                    grad[b] -= g * self.vals[a] / (self.vals[b] * self.vals[b]);
                }
                Op::Sqrt(a) => grad[a] += g * 0.5 / self.vals[id],
                Op::Exp(a) => grad[a] += g * self.vals[id],
                Op::Ln(a) => grad[a] += g / self.vals[a],
                Op::Scale(a, c) => grad[a] += g * c,
                Op::AddConst(a, _) => grad[a] += g,
                Op::Spike { v, threshold } => {
                    let d = (self.vals[v] - threshold).abs();
                    if d < 0.5 {
                        grad[v] += g * (1.0 - 2.0 * d);
                    }
                }
                Op::Gate { x, factor } => grad[x] += g * factor,
            }
        }
        grad
    }
}
