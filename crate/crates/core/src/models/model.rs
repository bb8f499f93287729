use super::{build_plan, ModelConfig, Plan, PlanNode};
use crate::error::{Error, Result};
use crate::layers::{Buffer, ForwardCtx, Layer, Param};
use crate::tensor::{streams, Rng, Scalar, Tensor};

/// Skip connection around a branch: `post(branch(x) + shortcut(x))`.
/// An empty shortcut is the identity; an empty branch contributes nothing.
#[derive(Clone, Debug)]
pub struct Residual<T: Scalar> {
    pub name: String,
    pub branch: Vec<Node<T>>,
    pub shortcut: Vec<Node<T>>,
    pub post: Option<Layer<T>>,
}

#[derive(Clone, Debug)]
pub enum Node<T: Scalar> {
    Layer(Layer<T>),
    Residual(Residual<T>),
}

struct Pass<'a> {
    training: bool,
    keep_cache: bool,
    check_finite: bool,
    rng: &'a mut Rng,
}

fn run_layer<T: Scalar>(layer: &mut Layer<T>, x: &Tensor<T>, pass: &mut Pass<'_>) -> Result<Tensor<T>> {
    let mut ctx = ForwardCtx { training: pass.training, keep_cache: pass.keep_cache, rng: pass.rng };
    let y = layer.forward(x, &mut ctx)?;
    if pass.check_finite && !y.all_finite() {
        return Err(Error::Numeric(format!("layer '{}' produced non-finite values", layer.name())));
    }
    Ok(y)
}

fn forward_seq<T: Scalar>(nodes: &mut [Node<T>], x: &Tensor<T>, pass: &mut Pass<'_>) -> Result<Tensor<T>> {
    let mut cur: Option<Tensor<T>> = None;
    for node in nodes.iter_mut() {
        let input = cur.as_ref().unwrap_or(x);
        let out = match node {
            Node::Layer(l) => run_layer(l, input, pass)?,
            Node::Residual(r) => {
                let skip = if r.shortcut.is_empty() { input.clone() } else { forward_seq(&mut r.shortcut, input, pass)? };
                let sum = if r.branch.is_empty() {
                    skip
                } else {
                    let branch = forward_seq(&mut r.branch, input, pass)?;
                    branch.add(&skip).map_err(|e| e.context(format!("residual '{}'", r.name)))?
                };
                match &mut r.post {
                    Some(post) => run_layer(post, &sum, pass)?,
                    None => sum,
                }
            }
        };
        cur = Some(out);
    }
    Ok(cur.unwrap_or_else(|| x.clone()))
}

fn backward_seq<T: Scalar>(nodes: &mut [Node<T>], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = grad.clone();
    for node in nodes.iter_mut().rev() {
        g = match node {
            Node::Layer(l) => l.backward(&g)?,
            Node::Residual(r) => {
                let g_sum = match &mut r.post {
                    Some(post) => post.backward(&g)?,
                    None => g,
                };
                let g_skip = if r.shortcut.is_empty() { g_sum.clone() } else { backward_seq(&mut r.shortcut, &g_sum)? };
                if r.branch.is_empty() {
                    g_skip
                } else {
                    let mut g_branch = backward_seq(&mut r.branch, &g_sum)?;
                    g_branch.add_assign(&g_skip)?;
                    g_branch
                }
            }
        };
    }
    Ok(g)
}

fn visit<'a, T: Scalar>(nodes: &'a [Node<T>], f: &mut dyn FnMut(&'a Layer<T>)) {
    for node in nodes {
        match node {
            Node::Layer(l) => f(l),
            Node::Residual(r) => {
                visit(&r.branch, f);
                visit(&r.shortcut, f);
                if let Some(p) = &r.post {
                    f(p);
                }
            }
        }
    }
}

fn visit_mut<T: Scalar>(nodes: &mut [Node<T>], f: &mut dyn FnMut(&mut Layer<T>)) {
    for node in nodes {
        match node {
            Node::Layer(l) => f(l),
            Node::Residual(r) => {
                visit_mut(&mut r.branch, f);
                visit_mut(&mut r.shortcut, f);
                if let Some(p) = &mut r.post {
                    f(p);
                }
            }
        }
    }
}

fn instantiate<T: Scalar>(plan: &[PlanNode], rng: &mut Rng) -> Result<Vec<Node<T>>> {
    plan.iter()
        .map(|n| {
            Ok(match n {
                PlanNode::Layer { name, spec } => Node::Layer(Layer::new(name.clone(), spec.clone(), rng)?),
                PlanNode::Residual { name, branch, shortcut, post } => Node::Residual(Residual {
                    name: name.clone(),
                    branch: instantiate(branch, rng)?,
                    shortcut: instantiate(shortcut, rng)?,
                    post: post
                        .as_ref()
                        .map(|(pn, ps)| Layer::new(pn.clone(), ps.clone(), rng))
                        .transpose()?,
                }),
            })
        })
        .collect()
}

/// A built network: layer graph, parameter registry and the dropout stream.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    plan: Plan,
    nodes: Vec<Node<T>>,
    dropout_rng: Rng,
}

impl<T: Scalar> Model<T> {
    /// Builds the architecture named in `config`, initializing weights from
    /// the `init` stream of `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::from_plan(build_plan(config)?, seed)
    }

    pub fn from_plan(plan: Plan, seed: u64) -> Result<Self> {
        let mut rng = Rng::for_stream(seed, streams::INIT, 0);
        let nodes = instantiate(&plan.nodes, &mut rng)?;
        let model = Model { plan, nodes, dropout_rng: Rng::for_stream(seed, streams::DROPOUT, 0) };
        let mut names: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate parameter names in model plan".into()));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.plan.config
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node<T>] {
        &mut self.nodes
    }

    pub fn dropout_rng(&self) -> &Rng {
        &self.dropout_rng
    }

    pub fn set_dropout_rng(&mut self, rng: Rng) {
        self.dropout_rng = rng;
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let c = self.plan.config.input_channels;
        if x.rank() != 5 || x.shape()[1] != c {
            return Err(Error::Shape(format!(
                "model expects a [N, {c}, D, H, W] batch, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn run(&mut self, x: &Tensor<T>, training: bool, keep_cache: bool, check_finite: bool) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut pass = Pass { training, keep_cache, check_finite, rng: &mut self.dropout_rng };
        forward_seq(&mut self.nodes, x, &mut pass)
    }

    /// Forward pass returning sigmoid scores `[N, 1]`, caching for backward.
    /// `training` selects batch statistics and active dropout.
    pub fn forward(&mut self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        self.run(x, training, true, false)
    }

    /// Inference-mode scores without retaining intermediates.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, false, false, false)
    }

    /// Re-runs a forward pass and names the first layer whose output is not
    /// finite. Dropout draws are taken from a copy of the stream.
    pub fn find_non_finite_layer(&mut self, x: &Tensor<T>, training: bool) -> Option<String> {
        let saved = self.dropout_rng.clone();
        let res = self.run(x, training, false, true);
        self.dropout_rng = saved;
        match res {
            Err(e) => Some(e.to_string()),
            Ok(y) if !y.all_finite() => Some("model output".into()),
            Ok(_) => None,
        }
    }

    /// Backpropagates `dL/dscores` and accumulates parameter gradients.
    pub fn backward(&mut self, grad_scores: &Tensor<T>) -> Result<Tensor<T>> {
        backward_seq(&mut self.nodes, grad_scores)
    }

    pub fn zero_grad(&mut self) {
        visit_mut(&mut self.nodes, &mut |l| l.zero_grad());
    }

    pub fn clear_cache(&mut self) {
        visit_mut(&mut self.nodes, &mut |l| l.clear_cache());
    }

    pub fn layers(&self) -> Vec<&Layer<T>> {
        let mut out = Vec::new();
        visit(&self.nodes, &mut |l| out.push(l));
        out
    }

    /// Trainable parameters in registry order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        visit(&self.nodes, &mut |l| out.extend(l.params().iter()));
        out
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut Param<T>)) {
        visit_mut(&mut self.nodes, &mut |l| l.params_mut().iter_mut().for_each(&mut f));
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut out = Vec::new();
        visit(&self.nodes, &mut |l| out.extend(l.buffers().iter()));
        out
    }

    pub fn for_each_buffer_mut(&mut self, mut f: impl FnMut(&mut Buffer<T>)) {
        visit_mut(&mut self.nodes, &mut |l| l.buffers_mut().iter_mut().for_each(&mut f));
    }

    /// Replaces a parameter or buffer value by name.
    pub fn set_tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let mut slot: Option<Tensor<T>> = Some(value);
        let mut err = None;
        let mut assign = |n: &str, target: &mut Tensor<T>| {
            if n == name {
                if let Some(v) = slot.take() {
                    if v.shape() != target.shape() {
                        err = Some(Error::Shape(format!(
                            "tensor '{name}' has shape {:?}, got {:?}",
                            target.shape(),
                            v.shape()
                        )));
                    } else {
                        *target = v;
                    }
                }
            }
        };
        visit_mut(&mut self.nodes, &mut |l| {
            for p in l.params_mut() {
                assign(&p.name, &mut p.value);
            }
            for b in l.buffers_mut() {
                assign(&b.name, &mut b.value);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if slot.is_some() {
            return Err(Error::State(format!("model has no tensor named '{name}'")));
        }
        Ok(())
    }

    /// Same network in another precision: parameters, buffers and the
    /// dropout stream are converted, caches are dropped.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        fn conv<T: Scalar, U: Scalar>(nodes: &[Node<T>]) -> Vec<Node<U>> {
            nodes.iter().map(|n| match n {
                Node::Layer(l) => Node::Layer(l.cast()),
                Node::Residual(r) => Node::Residual(Residual {
                    name: r.name.clone(),
                    branch: conv(&r.branch),
                    shortcut: conv(&r.shortcut),
                    post: r.post.as_ref().map(|p| p.cast()),
                }),
            }).collect()
        }
        Model { plan: self.plan.clone(), nodes: conv(&self.nodes), dropout_rng: self.dropout_rng.clone() }
    }

    /// Copy of the network with every residual branch removed, leaving only
    /// skip paths (and post activations).
    pub fn without_residual_branches(&self) -> Self {
        fn strip<T: Scalar>(nodes: &mut [Node<T>]) {
            for n in nodes {
                if let Node::Residual(r) = n {
                    r.branch.clear();
                    strip(&mut r.shortcut);
                }
            }
        }
        let mut out = self.clone();
        strip(&mut out.nodes);
        out
    }
}
