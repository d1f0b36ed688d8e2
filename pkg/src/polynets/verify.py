"""Independent oracles for the polynomial networks.

* finite-difference gradient checks against the autodiff engine;
* degree tests by forward differences along random lines;
* exact monomial expansion of tiny networks (symbolic propagation of
  coefficient arrays, or a tensor-grid Vandermonde solve);
* a straight-line numpy re-implementation of the Pi-Nets recursion.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import convolve

from . import autograd as ag
from .autograd import Tensor
from .blocks import (Network, PolyBlockSpec, build_network, desk_conv_spec, mlp_chain_spec,
                     ncp_block_forward, parameter_count, symbolic_degree)
from .regularization import InitSpec, NormKind


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: Dict[str, float]
    tolerance: float
    coords_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def failures(self) -> List[str]:
        return [name for name, err in self.per_param.items() if not err < self.tolerance]


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], step: float = 1e-5,
               tolerance: float = 1e-5, max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare autodiff gradients of the scalar ``f()`` with central differences.

    ``f`` is re-evaluated after perturbing ``params[name].data`` in place, so it
    must read the parameters afresh and be deterministic. For parameters with
    more than ``max_coords`` entries a random subset of coordinates is checked.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    ag.zero_grad(params.values())
    ag.backward(f())
    per_param: Dict[str, float] = {}
    checked = 0
    with ag.no_grad():
        for name, p in params.items():
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            worst = 0.0
            for i in coords:
                saved = flat[i]
                flat[i] = saved + step
                up = f().item()
                flat[i] = saved - step
                down = f().item()
                flat[i] = saved
                numeric = (up - down) / (2 * step)
                a = analytic.reshape(-1)[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
            per_param[name] = worst
            checked += len(coords)
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, tolerance, checked)


# ---------------------------------------------------------------------------
# degree annihilation
# ---------------------------------------------------------------------------

@dataclass
class DegreeTestReport:
    claimed_degree: int
    annihilation_residual: float
    witness_residual: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.annihilation_residual < self.tolerance and self.witness_residual > self.tolerance

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"


def _check_polynomial(network: Network) -> None:
    if network.spec.mode != "mlp" or network.spec.pool_between:
        raise ValueError("degree oracles need an mlp-mode network without pooling")
    for block in network.spec.blocks:
        for kind in (block.phi_norm, block.psi_norm):
            if not kind.is_polynomial:
                raise ValueError(f"norm kind {kind.kind!r} is not polynomial in the input")


def _as_function(network) -> Tuple[Callable[[np.ndarray], np.ndarray], int]:
    if isinstance(network, Network):
        _check_polynomial(network)

        def fn(z):
            with ag.no_grad():
                return network(Tensor(z), training=False).data
        return fn, network.spec.blocks[0].in_dim
    fn, dim = network
    return fn, dim


def degree_annihilation(network, claimed_degree: int, trials: int = 3,
                        rng: Optional[np.random.Generator] = None, tol: float = 1e-6,
                        max_abs: float = 1e12, t_range: float = 8.0) -> DegreeTestReport:
    """Test that the network is a polynomial of total degree exactly ``claimed_degree``.

    Along random lines ``t -> z0 + t v`` the projected output is sampled at
    ``d + 2`` equispaced points. The order-(d+1) forward difference must vanish
    and the order-d difference must not; both are divided by the largest
    sampled magnitude. The grid spans ``[-t_range, t_range]`` and is halved
    until every sample stays below ``max_abs``; a wide grid lets the leading
    term dominate so the witness is not swamped by low-order terms.
    ``network`` is a :class:`Network` or a pair
    ``(fn, input_dim)`` with ``fn`` mapping an (m, input_dim) array to outputs.
    """
    fn, dim = _as_function(network)
    rng = np.random.default_rng(0) if rng is None else rng
    d = int(claimed_degree)
    worst_annihilation, weakest_witness = 0.0, math.inf
    for _ in range(trials):
        z0, v = rng.normal(size=dim), rng.normal(size=dim)
        u = None
        scale = t_range
        for _attempt in range(30):
            t = scale * np.linspace(-1.0, 1.0, d + 2)
            try:
                with np.errstate(over="raise", invalid="raise"):
                    out = np.asarray(fn(z0[None, :] + t[:, None] * v[None, :]), dtype=np.float64)
            except (ag.NumericError, FloatingPointError):
                out = None
            if out is not None and np.all(np.isfinite(out)) and np.abs(out).max() < max_abs:
                break
            scale *= 0.5
        else:
            raise ag.NumericError(f"network overflows along every tried line segment (last scale {scale:g})")
        out = out.reshape(len(t), -1)
        if u is None:
            u = rng.normal(size=out.shape[1])
        f = out @ u
        top = np.abs(f).max()
        if top == 0:
            worst_annihilation = max(worst_annihilation, 0.0)
            weakest_witness = 0.0
            continue
        annihilation = abs(np.diff(f, n=d + 1)[0]) / top
        witness = np.abs(np.diff(f, n=d)).max() / top if d > 0 else top / top
        worst_annihilation = max(worst_annihilation, annihilation)
        weakest_witness = min(weakest_witness, witness)
    return DegreeTestReport(d, float(worst_annihilation), float(weakest_witness), tol)


# ---------------------------------------------------------------------------
# monomial expansion
# ---------------------------------------------------------------------------

class PolyVec:
    """A vector of multivariate polynomials stored as dense coefficient arrays.

    ``coefs[f][a1, ..., an]`` is the coefficient of ``z1^a1 ... zn^an`` in
    feature ``f``.
    """

    def __init__(self, coefs: np.ndarray):
        self.coefs = coefs

    @classmethod
    def variables(cls, n: int) -> "PolyVec":
        coefs = np.zeros((n,) + (2,) * n)
        for i in range(n):
            index = [i] + [0] * n
            index[1 + i] = 1
            coefs[tuple(index)] = 1.0
        return cls(coefs)

    @property
    def features(self) -> int:
        return self.coefs.shape[0]

    def _padded(self, shape) -> np.ndarray:
        pad = [(0, 0)] + [(0, s - e) for s, e in zip(shape, self.coefs.shape[1:])]
        return np.pad(self.coefs, pad)

    def __add__(self, other: "PolyVec") -> "PolyVec":
        shape = tuple(max(a, b) for a, b in zip(self.coefs.shape[1:], other.coefs.shape[1:]))
        return PolyVec(self._padded(shape) + other._padded(shape))

    def linear(self, w: np.ndarray) -> "PolyVec":
        """Apply ``x -> x @ w`` with ``w`` of shape (in, out)."""
        return PolyVec(np.tensordot(w.T, self.coefs, axes=1))

    def affine(self, matrix: np.ndarray, offset: np.ndarray) -> "PolyVec":
        """Apply ``x -> matrix x + offset`` along the feature axis."""
        out = np.tensordot(matrix, self.coefs, axes=1)
        out[(slice(None),) + (0,) * (out.ndim - 1)] += offset
        return PolyVec(out)

    def add_constant(self, b: np.ndarray) -> "PolyVec":
        out = self.coefs.copy()
        out[(slice(None),) + (0,) * (out.ndim - 1)] += b
        return PolyVec(out)

    def scale(self, s: float) -> "PolyVec":
        return PolyVec(self.coefs * s)

    def __mul__(self, other: "PolyVec") -> "PolyVec":
        if self.features != other.features:
            raise ag.DimensionError("feature counts differ")
        return PolyVec(np.stack([convolve(a, b, method="direct") for a, b in zip(self.coefs, other.coefs)]))

    def degree(self, rel_tol: float = 0.0) -> int:
        mag = np.abs(self.coefs).max(axis=0)
        threshold = rel_tol * mag.max()
        totals = np.indices(mag.shape).sum(axis=0)
        nonzero = mag > threshold
        return int(totals[nonzero].max()) if nonzero.any() else 0

    def evaluate(self, z: np.ndarray) -> np.ndarray:
        """Values at the rows of ``z`` (m x n); returns m x features."""
        z = np.atleast_2d(z)
        out = np.zeros((z.shape[0], self.features))
        for index in itertools.product(*(range(e) for e in self.coefs.shape[1:])):
            c = self.coefs[(slice(None),) + index]
            if not np.any(c):
                continue
            mono = np.prod([z[:, i] ** p for i, p in enumerate(index)], axis=0)
            out += mono[:, None] * c[None, :]
        return out


@dataclass
class Expansion:
    output: PolyVec
    block_outputs: List[PolyVec] = field(default_factory=list)
    method: str = "symbolic"

    @property
    def rel_tol(self) -> float:
        return 0.0 if self.method == "symbolic" else 1e-9

    @property
    def degree(self) -> int:
        return self.output.degree(self.rel_tol)

    @property
    def block_degrees(self) -> List[int]:
        return [b.degree(self.rel_tol) for b in self.block_outputs]

    def coefficient_map(self, feature: int = 0, rel_tol: float = 0.0) -> Dict[tuple, float]:
        coefs = self.output.coefs[feature]
        cut = rel_tol * np.abs(coefs).max()
        return {tuple(int(i) for i in idx): float(coefs[idx]) for idx in zip(*np.nonzero(np.abs(coefs) > cut))}

    def evaluate(self, z: np.ndarray) -> np.ndarray:
        return self.output.evaluate(z)


def _frozen(block, key: str, width: int):
    layer = block.norms.get(key)
    if layer is None:
        return np.eye(width), np.zeros(width)
    return layer.frozen_affine(width)


def symbolic_expand(network: Network) -> Expansion:
    """Propagate exact coefficient arrays through every block and the head."""
    _check_polynomial(network)
    spec = network.spec
    z = PolyVec.variables(spec.blocks[0].in_dim)
    outs: List[PolyVec] = []
    h = z
    for block in network.blocks:
        bs = block.spec
        p = {name: t.data.astype(np.float64) for name, t in block.param_map().items()}
        r = bs.out_dim
        if bs.variant == "ncp":
            x = h.linear(p["proj"]) if "proj" in p else h
        else:
            x = h.linear(p["H1"])
        for n in range(2, bs.steps + 2):
            left = h.linear(p[f"H{n}"]).affine(*_frozen(block, f"phi{n}", r))
            if bs.variant == "ncp":
                right = x.linear(p[f"J{n}"]).affine(*_frozen(block, f"psi{n}", r))
                if bs.use_bias_branch:
                    right = right.add_constant(p[f"k{n}"])
                term = left * right
            else:
                term = left * x
            for tau in bs.dense_inputs:
                o = outs[tau]
                if f"adapt{tau}" in p:
                    o = o.linear(p[f"adapt{tau}"])
                term = term * o.scale(float(p[f"rho{tau}"]))
            x = term + x
        outs.append(x)
        h = x
    head = network.head._params
    logits = h.linear(head["B"].data.astype(np.float64)).add_constant(head["theta"].data.astype(np.float64))
    return Expansion(logits, outs, "symbolic")


def vandermonde_expand(fn: Callable[[np.ndarray], np.ndarray], dim: int, degree: int) -> PolyVec:
    """Recover coefficients from values on a Chebyshev tensor grid (exponents up to ``degree`` per variable)."""
    m = degree + 1
    nodes = np.cos(np.pi * (np.arange(m) + 0.5) / m)
    grid = np.stack(np.meshgrid(*([nodes] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    values = np.asarray(fn(grid), dtype=np.float64).reshape((m,) * dim + (-1,))
    vinv = np.linalg.inv(np.vander(nodes, m, increasing=True))
    coefs = values
    for axis in range(dim):
        coefs = np.moveaxis(np.tensordot(vinv, coefs, axes=([1], [axis])), 0, axis)
    return PolyVec(np.moveaxis(coefs, -1, 0))


def monomial_expand(network: Network, method: str = "auto", check_points: int = 100,
                    rng: Optional[np.random.Generator] = None, rel_tol: float = 1e-8) -> Expansion:
    """Exact monomial coefficients of a tiny mlp-mode network.

    ``auto`` tries the Vandermonde solve when input dim <= 3 and degree <= 8
    and falls back to symbolic propagation when the recovered polynomial does
    not reproduce the network at ``check_points`` random points.
    """
    _check_polynomial(network)
    dim = network.spec.blocks[0].in_dim
    bound = symbolic_degree(network.spec).total
    rng = np.random.default_rng(0) if rng is None else rng
    if method == "symbolic" or (method == "auto" and (dim > 3 or bound > 8)):
        return symbolic_expand(network)

    def fn(z):
        with ag.no_grad():
            return network(Tensor(z), training=False).data

    poly = vandermonde_expand(fn, dim, bound)
    points = rng.uniform(-1, 1, size=(check_points, dim))
    expected = fn(points)
    err = np.abs(poly.evaluate(points) - expected).max() / max(np.abs(expected).max(), 1e-300)
    if err < rel_tol or method == "vandermonde":
        return Expansion(poly, [], "vandermonde")
    return symbolic_expand(network)


def expansion_error(network: Network, expansion: Expansion, points: int = 100,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Max relative deviation between the expansion and the network at random points."""
    rng = np.random.default_rng(1) if rng is None else rng
    z = rng.uniform(-1, 1, size=(points, network.spec.blocks[0].in_dim))
    with ag.no_grad():
        direct = network(Tensor(z), training=False).data
    return float(np.abs(expansion.evaluate(z) - direct).max() / np.abs(direct).max())


# ---------------------------------------------------------------------------
# Pi-Nets equivalence
# ---------------------------------------------------------------------------

def pinet_reference(z: np.ndarray, H: Sequence[np.ndarray], J: Sequence[np.ndarray],
                    K: Sequence[np.ndarray], k: Sequence[np.ndarray]) -> np.ndarray:
    """Straight-line Pi-Nets recursion x_n = (z H_n) * (x_{n-1} J_n + K_n^T k_n) + x_{n-1}, x_1 = z."""
    x = z
    for Hn, Jn, Kn, kn in zip(H, J, K, k):
        x = (z @ Hn) * (x @ Jn + Kn.T @ kn) + x
    return x


def random_pinet_params(dim: int, steps: int, rng: np.random.Generator, rank: int = 3) -> dict:
    return {
        "H": [rng.normal(size=(dim, dim)) for _ in range(steps)],
        "J": [rng.normal(size=(dim, dim)) for _ in range(steps)],
        "K": [rng.normal(size=(rank, dim)) for _ in range(steps)],
        "k": [rng.normal(size=rank) for _ in range(steps)],
    }


def pinet_equivalence(block_params: Mapping[str, Sequence[np.ndarray]], z: np.ndarray,
                      phi: NormKind = NormKind("identity"), psi: NormKind = NormKind("identity")) -> float:
    """Max |R-PolyNets block - Pi-Nets reference| for shared parameters.

    The bias branch K^T k of the reference is collapsed into the block's
    single bias vector.
    """
    steps = len(block_params["H"])
    dim = np.shape(z)[-1]
    spec = PolyBlockSpec(steps=steps, in_dim=dim, out_dim=dim, phi_norm=phi, psi_norm=psi)
    params = {}
    for i in range(steps):
        n = i + 2
        params[f"H{n}"] = Tensor(block_params["H"][i])
        params[f"J{n}"] = Tensor(block_params["J"][i])
        params[f"k{n}"] = Tensor(block_params["K"][i].T @ block_params["k"][i])
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    with ag.no_grad():
        ours = ncp_block_forward(Tensor(z), params, spec).data
    ref = pinet_reference(z, block_params["H"], block_params["J"], block_params["K"], block_params["k"])
    return float(np.abs(ours - ref).max())


# ---------------------------------------------------------------------------
# suites (used by the CLI and the acceptance tests)
# ---------------------------------------------------------------------------

@dataclass
class SuiteRow:
    suite: str
    case: str
    expected: str
    measured: float
    passed: bool


def _warm_up(network: Network, rng: np.random.Generator, shape) -> None:
    """Populate running statistics with a few training-mode passes."""
    with ag.no_grad():
        for _ in range(3):
            network(rng.normal(size=shape), training=True)


def _grad_case(network: Network, input_shape, rng: np.random.Generator, max_coords: int) -> GradCheckReport:
    _warm_up(network, rng, input_shape)
    x = rng.uniform(-1, 1, size=input_shape)
    k = network.spec.num_classes
    targets = rng.dirichlet(np.ones(k), size=input_shape[0])

    def f():
        return ag.softmax_cross_entropy(network(Tensor(x), training=False), targets)

    return grad_check(f, network.parameters(), step=1e-5, tolerance=1e-5, max_coords=max_coords, rng=rng)


def grad_cases(seed: int = 0):
    """(name, network, input_shape) for every block variant checked by the gradient suite."""
    bn, ms, it = NormKind("batch"), NormKind("mean_subtract"), NormKind("iter")
    cases = []
    for steps in (1, 2, 3):
        spec = mlp_chain_spec(2, 3, 4, 3, steps=steps, phi=bn, psi=it)
        cases.append((f"ncp steps={steps} (mlp, BN/IterNorm)", spec, (6, 3)))
    for steps in (2, 3):
        spec = mlp_chain_spec(2, 3, 4, 3, steps=steps, variant="ccp", phi=ms)
        cases.append((f"ccp steps={steps} (mlp, mean-subtract)", spec, (6, 3)))
    for n_dense in (1, 2):
        spec = mlp_chain_spec(n_dense + 1, 3, 4, 3, dense=True, phi=bn, psi=bn)
        cases.append((f"dense inputs={n_dense} (mlp, BN)", spec, (6, 3)))
    conv = desk_conv_spec("rpolynet", widths=(3, 4), in_channels=2, num_classes=3, dropblock_keep=1.0)
    cases.append(("ncp conv (IBN/BN, pooling)", conv, (2, 2, 6, 6)))
    dconv = desk_conv_spec("dpolynet", widths=(3, 4), in_channels=2, num_classes=3, dropblock_keep=1.0)
    cases.append(("dense conv (IBN/IterNorm, pooled adapters)", dconv, (2, 2, 6, 6)))
    return [(name, build_network(spec, InitSpec("xavier"), seed=seed + i), shape)
            for i, (name, spec, shape) in enumerate(cases)]


def run_grad_suite(seed: int = 0, max_coords: int = 8) -> List[SuiteRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for name, network, shape in grad_cases(seed):
        report = _grad_case(network, shape, rng, max_coords)
        rows.append(SuiteRow("grad", name, "rel err < 1e-5", report.max_rel_error, report.passed))
    return rows


def plain_chain(n_blocks: int, seed: int, phi: NormKind = NormKind("identity")) -> Network:
    return build_network(mlp_chain_spec(n_blocks, 2, 3, 2, phi=phi), InitSpec("xavier"), seed=seed)


def dense_chain(n_blocks: int, seed: int) -> Network:
    return build_network(mlp_chain_spec(n_blocks, 2, 3, 2, dense=True), InitSpec("xavier"), seed=seed)


def run_degree_suite(seed: int = 0, tol: float = 1e-6) -> List[SuiteRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for b in (1, 2, 3):
        net = plain_chain(b, seed + b)
        for d, should_pass in ((2 ** b, True), (2 ** b - 1, False)):
            rep = degree_annihilation(net, d, trials=3, rng=rng, tol=tol)
            measured = rep.annihilation_residual
            rows.append(SuiteRow("degree", f"plain chain B={b}, claim {d}",
                                 "pass" if should_pass else "fail", measured, rep.passed == should_pass))
    net = plain_chain(2, seed + 10, phi=NormKind("mean_subtract"))
    rep = degree_annihilation(net, 4, trials=3, rng=rng, tol=tol)
    rows.append(SuiteRow("degree", "plain chain B=2 mean-subtract, claim 4", "pass",
                         rep.annihilation_residual, rep.passed))
    net = dense_chain(2, seed + 20)
    for d, should_pass in ((6, True), (5, False)):
        rep = degree_annihilation(net, d, trials=3, rng=rng, tol=tol)
        rows.append(SuiteRow("degree", f"dense chain B=2, claim {d}", "pass" if should_pass else "fail",
                             rep.annihilation_residual, rep.passed == should_pass))
    net = dense_chain(3, seed + 30)
    found = monomial_expand(net, method="symbolic").block_degrees
    rows.append(SuiteRow("degree", f"dense chain B=3 per-block degrees {found}", "[2, 6, 20]",
                         float(found[-1]), found == [2, 6, 20]))
    r_net = build_network(desk_conv_spec("rpolynet", blocks_per_stage=2), seed=seed)
    d_net = build_network(desk_conv_spec("dpolynet", blocks_per_stage=2), seed=seed)
    r_count, d_count = parameter_count(r_net), parameter_count(d_net)
    rows.append(SuiteRow("degree", f"params D-PolyNet {d_count} < R-PolyNet {r_count}", "D < R",
                         float(d_count), d_count < r_count))
    return rows


def run_equivalence_suite(seed: int = 0, draws: int = 100) -> List[SuiteRow]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(draws):
        steps = 1 + i % 3
        params = random_pinet_params(4, steps, rng)
        worst = max(worst, pinet_equivalence(params, rng.uniform(-1, 1, size=(5, 4))))
    rows = [SuiteRow("equivalence", f"identity norms, {draws} draws", "dev < 1e-12", worst, worst < 1e-12)]
    params = random_pinet_params(4, 2, rng)
    dev = pinet_equivalence(params, rng.uniform(-1, 1, size=(5, 4)), phi=NormKind("mean_subtract"))
    rows.append(SuiteRow("equivalence", "mean-subtract phi (negative control)", "dev > 0", dev, dev > 1e-6))
    return rows


SUITES = {"grad": run_grad_suite, "degree": run_degree_suite, "equivalence": run_equivalence_suite}
