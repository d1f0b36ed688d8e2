"""Polynomial blocks, network composition and degree accounting.

An NCP step computes

    x_n = (Phi H_n z) * (Psi J_n x_{n-1} + k_n) * prod_tau (rho_tau out_tau) + x_{n-1}

with ``*`` the Hadamard product, starting from ``x_1 = z`` (or a linear
projection of ``z`` when the widths differ). The product over ``tau`` runs
over the dense inputs of the block and is empty for plain chains. A CCP
step drops the J/k branch: ``x_n = (Phi H_n z) * x_{n-1} + x_{n-1}`` with
``x_1 = H_1 z``. Blocks are chained, each block's output feeding the next,
so degrees multiply.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .module import Module
from .regularization import InitSpec, NormKind, dropblock, init_parameter, make_norm, mean_subtract

IDENTITY = NormKind("identity")


@dataclass
class PolyBlockSpec:
    variant: str = "ncp"
    steps: int = 1
    in_dim: int = 2
    out_dim: int = 2
    phi_norm: NormKind = IDENTITY
    psi_norm: NormKind = IDENTITY
    use_bias_branch: Optional[bool] = None
    dense_inputs: tuple = ()
    rho_learnable: bool = True
    kernel_size: int = 3
    stride: int = 1
    stage: int = 0

    def __post_init__(self):
        if self.variant not in ("ncp", "ccp"):
            raise ValueError(f"unknown block variant {self.variant!r}")
        if self.use_bias_branch is None:
            self.use_bias_branch = self.variant == "ncp"
        self.dense_inputs = tuple(int(i) for i in self.dense_inputs)
        if self.steps < 1:
            raise ValueError("a block needs at least one recursive step")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("block widths must be positive")
        if self.variant == "ccp" and (self.use_bias_branch or self.psi_norm.kind != "identity"):
            raise ValueError("CCP blocks have no J/k branch: use_bias_branch must be False and psi identity")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass
class NetworkSpec:
    blocks: List[PolyBlockSpec]
    num_classes: int
    mode: str = "mlp"
    pool_between: bool = False
    pool_size: int = 2
    dropblock_size: int = 3
    dropblock_keep: float = 1.0

    def validate(self) -> None:
        if self.mode not in ("mlp", "conv"):
            raise ValueError(f"unknown network mode {self.mode!r}")
        if not self.blocks:
            raise ValueError("a network needs at least one block")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.mode == "mlp" and (self.pool_between or self.dropblock_keep < 1):
            raise ValueError("pooling and DropBlock need conv mode")
        if not 0 < self.dropblock_keep <= 1:
            raise ValueError("dropblock_keep must lie in (0, 1]")
        for i, block in enumerate(self.blocks):
            if i and block.in_dim != self.blocks[i - 1].out_dim:
                raise ValueError(f"block {i} expects width {block.in_dim} but block {i - 1} "
                                 f"produces {self.blocks[i - 1].out_dim}")
            for tau in block.dense_inputs:
                if not 0 <= tau < i:
                    raise ValueError(f"block {i} has dense input {tau}; indices must be in [0, {i})")
            if self.mode == "mlp" and block.stride != 1:
                raise ValueError("stride is a conv-mode option")


@dataclass
class DegreeReport:
    per_block: List[int]
    total: int


# ---------------------------------------------------------------------------
# functional block forward passes
# ---------------------------------------------------------------------------

def _linear(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    if x.ndim == 2:
        return ag.matmul(x, w)
    return ag.conv2d(x, w, stride=stride, padding=w.shape[-1] // 2)


def _bias(x: Tensor, b: Tensor) -> Tensor:
    return x + b.reshape((1, -1) if x.ndim == 2 else (1, -1, 1, 1))


def _norm_fn(norms: Optional[Mapping], key: str, kind: NormKind) -> Callable:
    if norms is not None and key in norms:
        return norms[key]
    if kind.kind == "identity":
        return lambda x, training=False: x
    if kind.kind == "mean_subtract":
        return lambda x, training=False: mean_subtract(x)
    raise ValueError(f"norm {key!r} of kind {kind.kind!r} needs a layer instance")


def _dense_factor(params: Mapping, spec: PolyBlockSpec, prev_outputs: Sequence[Tensor],
                  like: Tensor) -> Optional[Tensor]:
    if len(prev_outputs) != len(spec.dense_inputs):
        raise ag.DimensionError(f"block expects {len(spec.dense_inputs)} dense inputs, "
                                f"got {len(prev_outputs)}")
    factor = None
    for tau, out in zip(spec.dense_inputs, prev_outputs):
        if out.ndim == 4 and out.shape[2] != like.shape[2]:
            ratio = out.shape[2] // like.shape[2]
            if ratio < 1 or out.shape[2] != ratio * like.shape[2]:
                raise ag.DimensionError(f"dense input {tau} of spatial size {out.shape[2:]} cannot be "
                                        f"pooled to {like.shape[2:]}")
            out = ag.max_pool2d(out, ratio, ratio)
        adapter = params.get(f"adapt{tau}")
        if adapter is not None:
            out = _linear(out, adapter)
        if out.shape != like.shape:
            raise ag.DimensionError(f"dense input {tau} has shape {out.shape}, block state has {like.shape}")
        rho = params.get(f"rho{tau}")
        term = out if rho is None else out * rho
        factor = term if factor is None else ag.hadamard(factor, term)
    return factor


def ncp_block_forward(z: Tensor, params: Mapping[str, Tensor], spec: PolyBlockSpec,
                      prev_outputs: Sequence[Tensor] = (), norms: Optional[Mapping] = None,
                      training: bool = False) -> Tensor:
    """Run the NCP recursion of one block.

    ``params`` maps ``H{n}``, ``J{n}``, ``k{n}`` (n = 2..steps+1), plus
    optional ``proj``, ``rho{tau}`` and ``adapt{tau}``. Linear maps are
    ``(in, out)`` matrices for 2-D inputs and ``(out, in, k, k)`` kernels for
    4-D inputs. ``norms`` maps ``phi{n}``/``psi{n}`` to callables; identity and
    mean subtraction need no layer.
    """
    if spec.variant != "ncp":
        raise ValueError("ncp_block_forward needs an NCP block spec")
    if prev_outputs and not spec.dense_inputs:
        raise ValueError("prev_outputs given to a block without dense inputs")
    x = _linear(z, params["proj"], spec.stride) if "proj" in params else z
    for n in range(2, spec.steps + 2):
        phi = _norm_fn(norms, f"phi{n}", spec.phi_norm)
        psi = _norm_fn(norms, f"psi{n}", spec.psi_norm)
        left = phi(_linear(z, params[f"H{n}"], spec.stride), training)
        right = psi(_linear(x, params[f"J{n}"]), training)
        if spec.use_bias_branch:
            right = _bias(right, params[f"k{n}"])
        term = ag.hadamard(left, right)
        if spec.dense_inputs:
            term = ag.hadamard(term, _dense_factor(params, spec, prev_outputs, term))
        x = term + x
    return x


def ccp_block_forward(z: Tensor, params: Mapping[str, Tensor], spec: PolyBlockSpec,
                      prev_outputs: Sequence[Tensor] = (), norms: Optional[Mapping] = None,
                      training: bool = False) -> Tensor:
    """Run the regularized CCP recursion: x_1 = H_1 z, x_n = (Phi H_n z) * x_{n-1} + x_{n-1}."""
    if spec.variant != "ccp":
        raise ValueError("ccp_block_forward needs a CCP block spec")
    x = _linear(z, params["H1"], spec.stride)
    for n in range(2, spec.steps + 2):
        phi = _norm_fn(norms, f"phi{n}", spec.phi_norm)
        term = ag.hadamard(phi(_linear(z, params[f"H{n}"], spec.stride), training), x)
        if spec.dense_inputs:
            term = ag.hadamard(term, _dense_factor(params, spec, prev_outputs, term))
        x = term + x
    return x


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class PolyBlock(Module):
    def __init__(self, spec: PolyBlockSpec, index: int, conv: bool, init: InitSpec,
                 rng: np.random.Generator, dense_widths: Mapping[int, int]):
        super().__init__()
        self.spec, self.index, self.conv = spec, index, conv
        self.norms: Dict[str, Module] = {}
        d, r, k = spec.in_dim, spec.out_dim, spec.kernel_size

        def lin_shape(fan_in, fan_out, ksize):
            return (fan_out, fan_in, ksize, ksize) if conv else (fan_in, fan_out)

        def new(name, shape, m_n):
            self.add_parameter(name, init_parameter(shape, init, m_n, rng), init=init)

        if spec.variant == "ccp":
            shape = lin_shape(d, r, k)
            for n in range(1, spec.steps + 2):
                new(f"H{n}", shape, int(np.prod(shape)))
        else:
            if d != r or spec.stride != 1:
                shape = lin_shape(d, r, 1)
                new("proj", shape, int(np.prod(shape)))
            h_shape, j_shape = lin_shape(d, r, k), lin_shape(r, r, k)
            m_n = int(np.prod(h_shape) + np.prod(j_shape) + (r if spec.use_bias_branch else 0))
            for n in range(2, spec.steps + 2):
                new(f"H{n}", h_shape, m_n)
                new(f"J{n}", j_shape, m_n)
                if spec.use_bias_branch:
                    new(f"k{n}", (r,), m_n)
        for n in range(2, spec.steps + 2):
            self.norms[f"phi{n}"] = self.add_child(f"phi{n}", make_norm(spec.phi_norm, r))
            if spec.variant == "ncp":
                self.norms[f"psi{n}"] = self.add_child(f"psi{n}", make_norm(spec.psi_norm, r))
        self._fixed: Dict[str, Tensor] = {}
        for tau in spec.dense_inputs:
            if spec.rho_learnable:
                self.add_parameter(f"rho{tau}", np.ones(()))
            else:
                self._fixed[f"rho{tau}"] = Tensor(np.ones(()))
            if dense_widths[tau] != r:
                shape = lin_shape(dense_widths[tau], r, 1)
                new(f"adapt{tau}", shape, int(np.prod(shape)))

    def param_map(self) -> Dict[str, Tensor]:
        out = dict(self._fixed)
        out.update(self._params)
        return out

    def __call__(self, z: Tensor, prev_outputs: Sequence[Tensor] = (), training: bool = False) -> Tensor:
        forward = ncp_block_forward if self.spec.variant == "ncp" else ccp_block_forward
        params = self.param_map()
        try:
            return forward(z, params, self.spec, prev_outputs, self.norms, training)
        except ag.NumericError as exc:
            raise ag.NumericError(f"numeric overflow in block {self.index}: {exc}") from exc


class Network(Module):
    """Sequential product of polynomial blocks followed by a linear head."""

    def __init__(self, spec: NetworkSpec, init: InitSpec, seed: int = 0, dtype=np.float64):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.init = init
        self.dtype = np.dtype(dtype)
        rng_init, rng_drop = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
        self.dropblock_rng = rng_drop
        conv = spec.mode == "conv"
        widths = {i: b.out_dim for i, b in enumerate(spec.blocks)}
        self.blocks: List[PolyBlock] = []
        for i, bspec in enumerate(spec.blocks):
            self.blocks.append(self.add_child(f"block{i}", PolyBlock(bspec, i, conv, init, rng_init, widths)))
        head = Module()
        feat = spec.blocks[-1].out_dim
        shape = (feat, spec.num_classes)
        head.add_parameter("B", init_parameter(shape, init, int(np.prod(shape)), rng_init), init=init)
        head.add_parameter("theta", np.zeros(spec.num_classes))
        self.head = self.add_child("head", head)
        self.last_stage = max(b.stage for b in spec.blocks)
        names = [name for name, _ in self.named_parameters()]
        if len(names) != len(set(names)):
            raise ValueError("parameter names are not unique")
        for name, p in self.named_parameters():
            p.name = name
            p.data = p.data.astype(self.dtype)
        for block in self.blocks:
            for key, t in block._fixed.items():
                t.data = t.data.astype(self.dtype)

    def parameters(self) -> Dict[str, ag.Parameter]:
        return dict(self.named_parameters())

    def buffers(self) -> Dict[str, np.ndarray]:
        return dict(self.named_buffers())

    def block_outputs(self, x: Tensor, training: bool = False,
                      rng: Optional[np.random.Generator] = None) -> List[Tensor]:
        """Outputs of every block (before DropBlock/pooling)."""
        return self._run(x, training, rng)[1]

    def _run(self, x: Tensor, training: bool, rng):
        if not isinstance(x, Tensor) or x.dtype != self.dtype:
            x = Tensor(x.data if isinstance(x, Tensor) else x, dtype=self.dtype)
        spec = self.spec
        rng = self.dropblock_rng if rng is None else rng
        outs: List[Tensor] = []
        h = x
        for i, block in enumerate(self.blocks):
            y = block(h, [outs[t] for t in block.spec.dense_inputs], training)
            outs.append(y)
            if training and spec.dropblock_keep < 1 and block.spec.stage != self.last_stage:
                y = dropblock(y, spec.dropblock_size, spec.dropblock_keep, True, rng)
            if spec.pool_between and i < len(self.blocks) - 1:
                y = ag.max_pool2d(y, spec.pool_size, spec.pool_size)
            h = y
        if h.ndim == 4:
            h = h.mean(axis=(2, 3))
        B, theta = self.head._params["B"], self.head._params["theta"]
        logits = _bias(ag.matmul(h, B), theta)
        return logits, outs

    def forward(self, x, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self._run(x, training, rng)[0]

    __call__ = forward

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({f"buffer:{name}": b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        for key, value in state.items():
            if key.startswith("buffer:"):
                self.set_buffer(key[len("buffer:"):], value)
            elif key in params:
                if params[key].shape != np.shape(value):
                    raise ValueError(f"shape mismatch for {key}: {params[key].shape} vs {np.shape(value)}")
                params[key].data = np.array(value, dtype=params[key].dtype)
            else:
                raise KeyError(f"unknown parameter {key!r} in state")


def build_network(spec: NetworkSpec, init: Optional[InitSpec] = None, seed: int = 0,
                  dtype=np.float64) -> Network:
    """Validate ``spec`` and instantiate every parameter deterministically from ``seed``."""
    spec.validate()
    return Network(spec, init or InitSpec(), seed, dtype)


def symbolic_degree(spec: NetworkSpec) -> DegreeReport:
    """Exact total degree in the raw input at each block output.

    Norm maps count as degree-preserving linear maps. A block whose input has
    degree d starts from state degree d and every step adds d plus the
    degrees of its dense inputs.
    """
    degrees: List[int] = []
    d_in = 1
    for block in spec.blocks:
        dense = sum(degrees[t] for t in block.dense_inputs)
        state = d_in
        for _ in range(block.steps):
            state = state + d_in + dense
        degrees.append(state)
        d_in = state
    return DegreeReport(per_block=degrees, total=degrees[-1])


def parameter_count(network: Network) -> int:
    return int(sum(p.size for _, p in network.named_parameters()))


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def mlp_chain_spec(n_blocks: int, in_dim: int, width: int, num_classes: int, steps: int = 1,
                   dense: bool = False, variant: str = "ncp", phi: NormKind = IDENTITY,
                   psi: NormKind = IDENTITY) -> NetworkSpec:
    """Fully connected chain; with ``dense`` every block consumes all earlier outputs."""
    blocks = []
    for i in range(n_blocks):
        blocks.append(PolyBlockSpec(
            variant=variant, steps=steps, in_dim=in_dim if i == 0 else width, out_dim=width,
            phi_norm=phi, psi_norm=psi if variant == "ncp" else IDENTITY,
            dense_inputs=tuple(range(i)) if dense else ()))
    return NetworkSpec(blocks=blocks, num_classes=num_classes, mode="mlp")


def desk_conv_spec(kind: str = "rpolynet", widths=(16, 32, 64), blocks_per_stage=1, in_channels: int = 3,
                   num_classes: int = 10, steps: int = 1, ibn_ratio: float = 0.8,
                   dropblock_size: int = 3, dropblock_keep: float = 0.9) -> NetworkSpec:
    """Three-stage conv network of polynomial blocks.

    ``kind`` is one of:

    * ``rpolynet``: IBN/BN branch norms, max pooling between blocks, DropBlock
      on all but the last stage.
    * ``pinet``: identity norms, strided first block per stage, no pooling or
      DropBlock.
    * ``dpolynet``: like ``rpolynet`` with iterative normalization on the
      state branch, dense connections to every earlier block and one block
      fewer in the last stage.
    """
    if kind not in ("rpolynet", "pinet", "dpolynet"):
        raise ValueError(f"unknown network kind {kind!r}")
    if isinstance(blocks_per_stage, int):
        counts = [blocks_per_stage] * len(widths)
    else:
        counts = list(blocks_per_stage)
    if kind == "dpolynet" and counts[-1] > 1:
        counts[-1] -= 1
    last = len(widths) - 1
    blocks: List[PolyBlockSpec] = []
    prev = in_channels
    for stage, (width, count) in enumerate(zip(widths, counts)):
        for j in range(count):
            if kind == "pinet":
                phi = psi = IDENTITY
            else:
                phi = NormKind("ibn", ratio=ibn_ratio) if stage < last else NormKind("batch")
                psi = NormKind("iter") if kind == "dpolynet" else NormKind("batch")
            stride = 2 if kind == "pinet" and stage > 0 and j == 0 else 1
            index = len(blocks)
            blocks.append(PolyBlockSpec(
                variant="ncp", steps=steps, in_dim=prev, out_dim=width, phi_norm=phi, psi_norm=psi,
                dense_inputs=tuple(range(index)) if kind == "dpolynet" else (),
                stride=stride, stage=stage))
            prev = width
    regularized = kind != "pinet"
    return NetworkSpec(blocks=blocks, num_classes=num_classes, mode="conv", pool_between=regularized,
                       dropblock_size=dropblock_size,
                       dropblock_keep=dropblock_keep if regularized else 1.0)
