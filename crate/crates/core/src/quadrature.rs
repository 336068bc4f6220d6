//! Gauss-Legendre rules mapped onto the open unit interval.

use gauss_quad::GaussLegendre;

pub const DEFAULT_NODES: usize = 64;

/// Nodes and weights on `(0, 1)`. Endpoints are never evaluated.
#[derive(Debug, Clone)]
pub struct Quadrature {
    nodes: Vec<(f64, f64)>,
}

impl Quadrature {
    pub fn gauss_legendre(n: usize) -> Self {
        let rule = GaussLegendre::new(n.max(2)).expect("degree >= 2");
        let mut nodes: Vec<(f64, f64)> =
            rule.as_node_weight_pairs().iter().map(|&(x, w)| (0.5 * (x + 1.0), 0.5 * w)).collect();
        nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self { nodes }
    }

    pub fn nodes(&self) -> &[(f64, f64)] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `\int_0^1 f(s) ds`, summed in node order.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes.iter().map(|&(s, w)| w * f(s)).sum()
    }
}

impl Default for Quadrature {
    fn default() -> Self {
        Self::gauss_legendre(DEFAULT_NODES)
    }
}
