"""Regularized and dense polynomial networks on a small numpy autodiff engine."""
from .autograd import Parameter, Tensor, backward, no_grad
from .blocks import (DegreeReport, Network, NetworkSpec, PolyBlockSpec, build_network, ccp_block_forward,
                     desk_conv_spec, mlp_chain_spec, ncp_block_forward, parameter_count, symbolic_degree)
from .regularization import InitSpec, NormKind

__all__ = [
    "Parameter", "Tensor", "backward", "no_grad",
    "DegreeReport", "Network", "NetworkSpec", "PolyBlockSpec", "build_network", "ccp_block_forward",
    "desk_conv_spec", "mlp_chain_spec", "ncp_block_forward", "parameter_count", "symbolic_degree",
    "InitSpec", "NormKind",
]
__version__ = "0.1.0"
