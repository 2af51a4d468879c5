//! Minimal reverse-mode differentiation tape over [`Tensor`] values.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes in creation
//! order (a topological order of the DAG by construction) and replays it
//! once, in reverse, to accumulate exact gradients. Tapes are built per
//! forward pass and discarded after [`Tape::backward`]; nothing is retained
//! across training steps.
//!
//! Every operation is a node with a backward rule. Modules that need
//! bespoke derivatives (basis expansions, batch normalization, dropout)
//! register fused nodes through [`Tape::custom`] with their own analytic
//! rules; the replay machinery treats them identically to the built-ins.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

/// Backward rule of one node: maps the upstream gradient to one gradient
/// tensor per input, in input order.
pub trait BackwardRule {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Result<Vec<Tensor>>;
}

impl<F> BackwardRule for F
where
    F: Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Tensor>>,
{
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Result<Vec<Tensor>> {
        self(grad, inputs, output)
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<usize>,
    rule: Option<Box<dyn BackwardRule>>,
    kind: &'static str,
}

/// Gradients keyed by variable id. Variables the loss does not depend on
/// are absent.
pub type GradMap = HashMap<usize, Tensor>;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        inputs: Vec<usize>,
        rule: Option<Box<dyn BackwardRule>>,
        kind: &'static str,
    ) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            return Err(Error::NonFinite {
                context: format!("output of op `{kind}`"),
            });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs,
            rule,
            kind,
        });
        Ok(Var(id))
    }

    /// Record a leaf value. Leaves have no backward rule; gradient flow
    /// stops (and, for `requires_grad` leaves, accumulates) here. Leaves
    /// carry caller data as-is; finiteness is checked at op boundaries.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            rule: None,
            kind: "leaf",
        });
        Var(id)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn any_requires_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Record an operation with a caller-supplied backward rule.
    ///
    /// The rule must return one gradient per input with the input's exact
    /// shape; replay rejects anything else as a contract violation.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        kind: &'static str,
        rule: Box<dyn BackwardRule>,
    ) -> Result<Var> {
        let requires = self.any_requires_grad(inputs);
        self.push(
            value,
            requires,
            inputs.iter().map(|v| v.0).collect(),
            Some(rule),
            kind,
        )
    }

    /// Single-input convenience wrapper around [`Tape::custom`]. The rule
    /// receives (upstream gradient, input value) and returns the input
    /// gradient.
    pub fn custom_unary(
        &mut self,
        x: Var,
        value: Tensor,
        kind: &'static str,
        rule: impl Fn(&Tensor, &Tensor) -> Tensor + 'static,
    ) -> Result<Var> {
        self.custom(
            &[x],
            value,
            kind,
            Box::new(move |g: &Tensor, ins: &[&Tensor], _out: &Tensor| {
                Ok(vec![rule(g, ins[0])])
            }),
        )
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.custom(
            &[a, b],
            value,
            "matmul",
            Box::new(|g: &Tensor, ins: &[&Tensor], _: &Tensor| {
                let (a, b) = (ins[0], ins[1]);
                let da = g.matmul(&b.transpose())?;
                let db = a.transpose().matmul(g)?;
                Ok(vec![da, db])
            }),
        )
    }

    /// Add a 1 x m bias row to every row of an n x m tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: xv.shape(),
                rhs: bv.shape(),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + bv.get(0, c);
                out.set(r, c, v);
            }
        }
        self.custom(
            &[x, bias],
            out,
            "add_row",
            Box::new(|g: &Tensor, _ins: &[&Tensor], _: &Tensor| {
                let mut db = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let v = db.get(0, c) + g.get(r, c);
                        db.set(0, c, v);
                    }
                }
                Ok(vec![g.clone(), db])
            }),
        )
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        kind: &'static str,
        f: impl Fn(f64, f64) -> f64,
        rule: Box<dyn BackwardRule>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: kind,
                lhs: av.shape(),
                rhs: bv.shape(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.rows(), av.cols(), data)?;
        self.custom(&[a, b], value, kind, rule)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(
            a,
            b,
            "add",
            |x, y| x + y,
            Box::new(|g: &Tensor, _: &[&Tensor], _: &Tensor| Ok(vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(
            a,
            b,
            "sub",
            |x, y| x - y,
            Box::new(|g: &Tensor, _: &[&Tensor], _: &Tensor| {
                Ok(vec![g.clone(), g.map(|v| -v)])
            }),
        )
    }

    /// Hadamard (element-wise) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(
            a,
            b,
            "mul",
            |x, y| x * y,
            Box::new(|g: &Tensor, ins: &[&Tensor], _: &Tensor| {
                let da = Tensor::new(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(ins[1].data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect(),
                )?;
                let db = Tensor::new(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(ins[0].data())
                        .map(|(&gv, &av)| gv * av)
                        .collect(),
                )?;
                Ok(vec![da, db])
            }),
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose();
        self.custom(
            &[x],
            value,
            "transpose",
            Box::new(|g: &Tensor, _: &[&Tensor], _: &Tensor| Ok(vec![g.transpose()])),
        )
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Config("reduce_mean over an empty tensor".into()));
        }
        let n = xv.len() as f64;
        let mean = xv.data().iter().sum::<f64>() / n;
        self.custom(
            &[x],
            Tensor::scalar(mean),
            "reduce_mean",
            Box::new(move |g: &Tensor, ins: &[&Tensor], _: &Tensor| {
                let scale = g.item() / n;
                Ok(vec![Tensor::filled(ins[0].rows(), ins[0].cols(), scale)])
            }),
        )
    }

    pub fn reduce_sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Config("reduce_sum over an empty tensor".into()));
        }
        let total = xv.data().iter().sum::<f64>();
        self.custom(
            &[x],
            Tensor::scalar(total),
            "reduce_sum",
            Box::new(move |g: &Tensor, ins: &[&Tensor], _: &Tensor| {
                Ok(vec![Tensor::filled(ins[0].rows(), ins[0].cols(), g.item())])
            }),
        )
    }

    /// Reverse replay from a scalar loss. Visits nodes in reverse creation
    /// order exactly once and invokes each reachable node's rule once.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.shape() != (1, 1) {
            return Err(Error::Config(format!(
                "backward requires a scalar loss, got {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].clone() else {
                continue;
            };
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let input_values: Vec<&Tensor> =
                node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = rule.backward(&grad, &input_values, &node.value)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Contract(format!(
                    "op `{}` returned {} gradients for {} inputs",
                    node.kind,
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for (&input_id, ig) in node.inputs.iter().zip(input_grads) {
                let input = &self.nodes[input_id];
                if !input.requires_grad {
                    continue;
                }
                if ig.shape() != input.value.shape() {
                    return Err(Error::Contract(format!(
                        "op `{}` produced a gradient of shape {:?} for an input of shape {:?}",
                        node.kind,
                        ig.shape(),
                        input.value.shape()
                    )));
                }
                match &mut grads[input_id] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        let mut map = GradMap::new();
        for (id, grad) in grads.into_iter().enumerate() {
            if let Some(g) = grad {
                if self.nodes[id].requires_grad {
                    map.insert(id, g);
                }
            }
        }
        Ok(map)
    }
}
