//! Ready-made network symbols.

use alloc::format;
use alloc::string::ToString;

use crate::error::GraphError;
use crate::symbol::Symbol;

/// `data -> [FullyConnected(h) -> relu]* -> FullyConnected(classes) ->
/// SoftmaxOutput`. The data variable carries the hint `(0, in_dim)`.
pub fn mlp(in_dim: usize, hidden: &[usize], classes: usize) -> Result<Symbol, GraphError> {
    let mut s = Symbol::variable_with_hint("data", &[0, in_dim])?;
    for &h in hidden {
        let nh = h.to_string();
        s = Symbol::apply("FullyConnected", &[("num_hidden", &nh)], &[&s])?;
        s = Symbol::apply("Activation", &[("act_type", "relu")], &[&s])?;
    }
    let nc = format!("{classes}");
    s = Symbol::apply("FullyConnected", &[("num_hidden", &nc)], &[&s])?;
    Symbol::apply("SoftmaxOutput", &[], &[&s])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_layer_mlp_arguments() {
        let s = mlp(784, &[64], 10).unwrap();
        assert_eq!(
            s.list_arguments(),
            ["data", "fc1_weight", "fc1_bias", "fc2_weight", "fc2_bias", "label"]
        );
    }
}
