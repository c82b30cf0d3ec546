//! The scalar tape and its primitive operations.

use crate::error::{Error, Result};

/// Handle to one scalar node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) u32);

/// Sentinel parent index for leaves and constants.
const NONE: u32 = u32::MAX;
/// Sentinel marking a fused dot-product node; its `pa` field indexes
/// [`Tape::dot_segs`] instead of a parent node.
const DOT: u32 = u32::MAX - 1;

#[derive(Debug, Clone, Copy)]
struct Node {
    value: f64,
    /// Local partial with respect to parent `pa`.
    da: f64,
    /// Local partial with respect to parent `pb`.
    db: f64,
    pa: u32,
    pb: u32,
}

/// Snapshot of the tape length, used to rewind to a previous state.
#[derive(Debug, Clone, Copy)]
pub struct TapeMark {
    nodes: usize,
    dot_args: usize,
    dot_segs: usize,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients(Vec<f64>);

impl Gradients {
    pub fn get(&self, v: Var) -> f64 {
        self.0[v.0 as usize]
    }

    pub(crate) fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Recording tape for scalar reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Flattened `(w, x)` operand pairs of dot nodes.
    dot_args: Vec<(u32, u32)>,
    /// `(start, len)` segments into `dot_args`, one per dot node.
    dot_segs: Vec<(u32, u32)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.0 as usize].value
    }

    /// Current position; rewind to it later with [`Tape::reset_to`].
    pub fn mark(&self) -> TapeMark {
        TapeMark { nodes: self.nodes.len(), dot_args: self.dot_args.len(), dot_segs: self.dot_segs.len() }
    }

    /// Drops every node recorded after `mark`. Vars created before the mark
    /// stay valid; anything newer is invalidated.
    pub fn reset_to(&mut self, mark: TapeMark) {
        self.nodes.truncate(mark.nodes);
        self.dot_args.truncate(mark.dot_args);
        self.dot_segs.truncate(mark.dot_segs);
    }

    /// Overwrites the value of a leaf, e.g. to refresh bound parameters after
    /// an optimizer step without rebuilding the tape.
    pub fn set_leaf(&mut self, v: Var, value: f64) {
        let n = &mut self.nodes[v.0 as usize];
        debug_assert!(n.pa == NONE && n.pb == NONE, "set_leaf on a non-leaf node");
        n.value = value;
    }

    fn push(&mut self, value: f64, da: f64, db: f64, pa: u32, pb: u32) -> Var {
        let id = self.nodes.len() as u32;
        debug_assert!(pa == NONE || pa == DOT || pa < id);
        debug_assert!(pb == NONE || pb == DOT || pb < id);
        self.nodes.push(Node { value, da, db, pa, pb });
        Var(id)
    }

    /// A leaf node: an input or parameter the sweep can differentiate against.
    pub fn leaf(&mut self, value: f64) -> Var {
        self.push(value, 0.0, 0.0, NONE, NONE)
    }

    /// A constant; structurally identical to a leaf.
    pub fn constant(&mut self, value: f64) -> Var {
        self.push(value, 0.0, 0.0, NONE, NONE)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, 1.0, 1.0, a.0, b.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, 1.0, -1.0, a.0, b.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        self.push(va * vb, vb, va, a.0, b.0)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if vb == 0.0 {
            return Err(Error::Domain("division by zero".into()));
        }
        Ok(self.push(va / vb, 1.0 / vb, -va / (vb * vb), a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, -1.0, 0.0, a.0, NONE)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x.sin(), x.cos(), 0.0, a.0, NONE)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x.cos(), -x.sin(), 0.0, a.0, NONE)
    }

    pub fn tan(&mut self, a: Var) -> Var {
        let t = self.value(a).tan();
        self.push(t, 1.0 + t * t, 0.0, a.0, NONE)
    }

    pub fn atan(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(x.atan(), 1.0 / (1.0 + x * x), 0.0, a.0, NONE)
    }

    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        let vy = self.value(y);
        let vx = self.value(x);
        let denom = vx * vx + vy * vy;
        if denom == 0.0 {
            return Err(Error::Domain("atan2(0, 0) is undefined".into()));
        }
        Ok(self.push(vy.atan2(vx), vx / denom, -vy / denom, y.0, x.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let e = self.value(a).exp();
        self.push(e, e, 0.0, a.0, NONE)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_nan() || x <= 0.0 {
            return Err(Error::Domain(format!("log of non-positive value {x}")));
        }
        Ok(self.push(x.ln(), 1.0 / x, 0.0, a.0, NONE))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x < 0.0 {
            return Err(Error::Domain(format!("sqrt of negative value {x}")));
        }
        let s = x.sqrt();
        Ok(self.push(s, 0.5 / s, 0.0, a.0, NONE))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).tanh();
        self.push(t, 1.0 - t * t, 0.0, a.0, NONE)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        if x > 0.0 {
            self.push(x, 1.0, 0.0, a.0, NONE)
        } else {
            self.push(0.0, 0.0, 0.0, a.0, NONE)
        }
    }

    /// Hard clip. The partial is 1 strictly inside `(lo, hi)` and 0 outside
    /// or at either boundary.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        debug_assert!(lo <= hi);
        let x = self.value(a);
        let v = x.clamp(lo, hi);
        let grad = if x > lo && x < hi { 1.0 } else { 0.0 };
        self.push(v, grad, 0.0, a.0, NONE)
    }

    /// Fused dot product `sum_i w_i * x_i` as a single scalar-valued node.
    ///
    /// Dense layers use this instead of a chain of `mul`/`add` nodes; the
    /// backward contribution per pair is `g * x_i` into `w_i` and `g * w_i`
    /// into `x_i`, identical to the unfused graph.
    pub fn dot(&mut self, pairs: &[(Var, Var)]) -> Var {
        let mut acc = 0.0;
        let start = self.dot_args.len() as u32;
        for &(w, x) in pairs {
            acc += self.value(w) * self.value(x);
            self.dot_args.push((w.0, x.0));
        }
        let seg = self.dot_segs.len() as u32;
        self.dot_segs.push((start, pairs.len() as u32));
        self.push(acc, 0.0, 0.0, seg, DOT)
    }

    /// Reverse sweep from a scalar root. Fills `grads` (indexed by `Var`)
    /// with `d root / d node` for every node on the tape.
    ///
    /// Nodes reference only earlier nodes, so a single reverse pass is a
    /// valid topological order and cycles cannot occur.
    pub fn backward_into(&self, root: Var, grads: &mut Vec<f64>) {
        grads.clear();
        grads.resize(self.nodes.len(), 0.0);
        grads[root.0 as usize] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            let g = grads[i];
            if g == 0.0 {
                continue;
            }
            let n = self.nodes[i];
            if n.pb == DOT {
                let (start, len) = self.dot_segs[n.pa as usize];
                for &(w, x) in &self.dot_args[start as usize..(start + len) as usize] {
                    grads[w as usize] += g * self.nodes[x as usize].value;
                    grads[x as usize] += g * self.nodes[w as usize].value;
                }
            } else {
                if n.pa != NONE {
                    grads[n.pa as usize] += g * n.da;
                }
                if n.pb != NONE {
                    grads[n.pb as usize] += g * n.db;
                }
            }
        }
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads = Vec::new();
        self.backward_into(root, &mut grads);
        Gradients(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(3.0);
        let y = t.mul(x, x);
        let g = t.backward(y);
        assert_eq!(g.get(x), 6.0);
    }

    #[test]
    fn shared_node_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(1.5);
        let y = t.add(x, x);
        let g = t.backward(y);
        assert_eq!(g.get(x), 2.0);
    }

    #[test]
    fn clamp_subgradient_convention() {
        for (x, expected) in [(0.5, 1.0), (2.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (-3.0, 0.0)] {
            let mut t = Tape::new();
            let v = t.leaf(x);
            let c = t.clamp(v, -1.0, 1.0);
            let g = t.backward(c);
            assert_eq!(g.get(v), expected, "clamp'({x})");
        }
    }

    #[test]
    fn atan_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(1.0);
        let y = t.atan(x);
        let g = t.backward(y);
        assert!((g.get(x) - 0.5).abs() < 1e-15);
    }

    type UnaryCase = (&'static str, Box<dyn Fn(&mut Tape, Var) -> Var>);
    type BinaryCase = (&'static str, Box<dyn Fn(&mut Tape, Var, Var) -> Var>);

    #[test]
    fn primitive_partials_match_finite_differences() {
        let h = 1e-6;
        let cases: Vec<UnaryCase> = vec![
            ("sin", Box::new(|t, x| t.sin(x))),
            ("cos", Box::new(|t, x| t.cos(x))),
            ("tan", Box::new(|t, x| t.tan(x))),
            ("atan", Box::new(|t, x| t.atan(x))),
            ("exp", Box::new(|t, x| t.exp(x))),
            ("log", Box::new(|t, x| t.log(x).unwrap())),
            ("sqrt", Box::new(|t, x| t.sqrt(x).unwrap())),
            ("tanh", Box::new(|t, x| t.tanh(x))),
            ("relu", Box::new(|t, x| t.relu(x))),
            ("neg", Box::new(|t, x| t.neg(x))),
        ];
        for (name, f) in &cases {
            for &x0 in &[0.3, 0.9, 1.7] {
                let eval = |x: f64| {
                    let mut t = Tape::new();
                    let v = t.leaf(x);
                    let y = f(&mut t, v);
                    t.value(y)
                };
                let mut t = Tape::new();
                let v = t.leaf(x0);
                let y = f(&mut t, v);
                let g = t.backward(y).get(v);
                let fd = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
                assert!((g - fd).abs() < 1e-5, "{name} at {x0}: analytic {g}, fd {fd}");
            }
        }
    }

    #[test]
    fn binary_partials_match_finite_differences() {
        let h = 1e-6;
        let cases: Vec<BinaryCase> = vec![
            ("add", Box::new(|t, a, b| t.add(a, b))),
            ("sub", Box::new(|t, a, b| t.sub(a, b))),
            ("mul", Box::new(|t, a, b| t.mul(a, b))),
            ("div", Box::new(|t, a, b| t.div(a, b).unwrap())),
            ("atan2", Box::new(|t, a, b| t.atan2(a, b).unwrap())),
        ];
        for (name, f) in &cases {
            let (a0, b0) = (1.3, 0.7);
            let eval = |a: f64, b: f64| {
                let mut t = Tape::new();
                let va = t.leaf(a);
                let vb = t.leaf(b);
                let y = f(&mut t, va, vb);
                t.value(y)
            };
            let mut t = Tape::new();
            let va = t.leaf(a0);
            let vb = t.leaf(b0);
            let y = f(&mut t, va, vb);
            let g = t.backward(y);
            let fda = (eval(a0 + h, b0) - eval(a0 - h, b0)) / (2.0 * h);
            let fdb = (eval(a0, b0 + h) - eval(a0, b0 - h)) / (2.0 * h);
            assert!((g.get(va) - fda).abs() < 1e-5, "{name} da");
            assert!((g.get(vb) - fdb).abs() < 1e-5, "{name} db");
        }
    }

    #[test]
    fn dot_matches_unfused_graph() {
        let ws = [0.3, -1.2, 2.5];
        let xs = [1.1, 0.4, -0.6];

        let mut t1 = Tape::new();
        let wv: Vec<Var> = ws.iter().map(|&w| t1.leaf(w)).collect();
        let xv: Vec<Var> = xs.iter().map(|&x| t1.leaf(x)).collect();
        let pairs: Vec<(Var, Var)> = wv.iter().copied().zip(xv.iter().copied()).collect();
        let y1 = t1.dot(&pairs);
        let g1 = t1.backward(y1);

        let mut t2 = Tape::new();
        let wv2: Vec<Var> = ws.iter().map(|&w| t2.leaf(w)).collect();
        let xv2: Vec<Var> = xs.iter().map(|&x| t2.leaf(x)).collect();
        let mut acc = t2.constant(0.0);
        for (w, x) in wv2.iter().zip(&xv2) {
            let p = t2.mul(*w, *x);
            acc = t2.add(acc, p);
        }
        let g2 = t2.backward(acc);

        assert!((t1.value(y1) - t2.value(acc)).abs() < 1e-15);
        for i in 0..3 {
            assert!((g1.get(wv[i]) - g2.get(wv2[i])).abs() < 1e-15);
            assert!((g1.get(xv[i]) - g2.get(xv2[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn domain_violations_are_errors_not_nan() {
        let mut t = Tape::new();
        let zero = t.leaf(0.0);
        let neg = t.leaf(-1.0);
        let one = t.leaf(1.0);
        assert!(t.div(one, zero).is_err());
        assert!(t.log(zero).is_err());
        assert!(t.log(neg).is_err());
        assert!(t.sqrt(neg).is_err());
        assert!(t.atan2(zero, zero).is_err());
    }

    #[test]
    fn gradient_is_linear_in_the_root() {
        let mut t = Tape::new();
        let x = t.leaf(0.8);
        let s = t.sin(x);
        let e = t.exp(s);
        let c = t.constant(3.5);
        let scaled = t.mul(c, e);
        let ge = t.backward(e).get(x);
        let gs = t.backward(scaled).get(x);
        assert_eq!(gs, 3.5 * ge);
    }

    #[test]
    fn reset_and_reuse() {
        let mut t = Tape::new();
        let x = t.leaf(2.0);
        let mark = t.mark();
        let y = t.mul(x, x);
        assert_eq!(t.value(y), 4.0);
        t.reset_to(mark);
        assert_eq!(t.len(), 1);
        t.set_leaf(x, 5.0);
        let y2 = t.mul(x, x);
        assert_eq!(t.value(y2), 25.0);
        let g = t.backward(y2);
        assert_eq!(g.get(x), 10.0);
    }
}
