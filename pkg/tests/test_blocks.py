import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polynets import autograd as ag
from polynets.autograd import Tensor
from polynets.blocks import (NetworkSpec, PolyBlockSpec, build_network, ccp_block_forward, desk_conv_spec,
                             mlp_chain_spec, ncp_block_forward, parameter_count, symbolic_degree)
from polynets.regularization import NormKind

EYE = Tensor(np.eye(2))
ZERO = Tensor(np.zeros(2))


def identity_ncp(steps=1):
    params = {}
    for n in range(2, steps + 2):
        params.update({f"H{n}": EYE, f"J{n}": EYE, f"k{n}": ZERO})
    return params


def run(fn, z, params, spec, prev=()):
    with ag.no_grad():
        return fn(Tensor(np.atleast_2d(z)), params, spec, [Tensor(np.atleast_2d(p)) for p in prev]).data[0]


# --- NCP -------------------------------------------------------------------

def test_ncp_identity_hand_case():
    np.testing.assert_array_equal(run(ncp_block_forward, [1.0, 2.0], identity_ncp(), PolyBlockSpec()), [2, 6])


def test_ncp_mean_subtract_phi_hand_case():
    spec = PolyBlockSpec(phi_norm=NormKind("mean_subtract"))
    np.testing.assert_allclose(run(ncp_block_forward, [1.0, 2.0], identity_ncp(), spec), [0.5, 3.0])


def test_ncp_dense_hand_case():
    params = dict(identity_ncp(), rho0=Tensor(np.ones(())))
    spec = PolyBlockSpec(dense_inputs=(0,))
    np.testing.assert_array_equal(run(ncp_block_forward, [2.0, 6.0], params, spec, prev=[[2.0, 6.0]]), [10, 222])


def test_ncp_bilinear_term_is_homogeneous():
    rng = np.random.default_rng(0)
    spec = PolyBlockSpec(in_dim=3, out_dim=3, use_bias_branch=False)
    params = {"H2": Tensor(rng.normal(size=(3, 3))), "J2": Tensor(rng.normal(size=(3, 3)))}
    z = rng.normal(size=3)
    for a in (-2.0, 0.5, 3.0):
        # remove the skip path so only the bilinear term remains
        scaled = run(ncp_block_forward, a * z, params, spec) - a * z
        np.testing.assert_allclose(scaled, a ** 2 * (run(ncp_block_forward, z, params, spec) - z), rtol=1e-12)


def test_ncp_shape_mismatch():
    params = {"H2": Tensor(np.eye(3)), "J2": EYE, "k2": ZERO}
    with pytest.raises(ag.DimensionError):
        run(ncp_block_forward, [1.0, 2.0], params, PolyBlockSpec())


def test_ncp_prev_outputs_without_dense_inputs():
    with pytest.raises(ValueError):
        run(ncp_block_forward, [1.0, 2.0], identity_ncp(), PolyBlockSpec(), prev=[[1.0, 1.0]])


# --- CCP -------------------------------------------------------------------

def ccp_params(steps, h=EYE):
    params = {"H1": EYE}
    params.update({f"H{n}": h for n in range(2, steps + 2)})
    return params


def test_ccp_hand_cases():
    np.testing.assert_array_equal(run(ccp_block_forward, [1.0, 2.0], ccp_params(1), PolyBlockSpec("ccp")), [2, 6])
    np.testing.assert_array_equal(
        run(ccp_block_forward, [1.0, 2.0], ccp_params(1, Tensor(np.zeros((2, 2)))), PolyBlockSpec("ccp")), [1, 2])
    spec = PolyBlockSpec("ccp", steps=2, in_dim=1, out_dim=1)
    one = Tensor(np.eye(1))
    assert run(ccp_block_forward, [2.0], {"H1": one, "H2": one, "H3": one}, spec).tolist() == [18]


def test_ccp_spec_rejects_bias_branch():
    with pytest.raises(ValueError):
        PolyBlockSpec("ccp", use_bias_branch=True)
    with pytest.raises(ValueError):
        PolyBlockSpec("ccp", psi_norm=NormKind("batch"))


# --- network construction ------------------------------------------------

def test_build_is_deterministic_and_names_unique():
    spec = mlp_chain_spec(3, 2, 4, 2, dense=True)
    a, b = build_network(spec, seed=5), build_network(spec, seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.name == na
        np.testing.assert_array_equal(pa.data, pb.data)
    names = [n for n, _ in a.named_parameters()]
    assert len(names) == len(set(names))
    assert "block0.H2" in names and "head.B" in names and "block2.rho1" in names


def test_inconsistent_spec_is_rejected():
    blocks = [PolyBlockSpec(in_dim=2, out_dim=4), PolyBlockSpec(in_dim=3, out_dim=4)]
    with pytest.raises(ValueError, match="block 1"):
        build_network(NetworkSpec(blocks, 2))
    with pytest.raises(ValueError):
        build_network(NetworkSpec([PolyBlockSpec(dense_inputs=(0,))], 2))
    with pytest.raises(ValueError):
        build_network(NetworkSpec([PolyBlockSpec()], 2, mode="mlp", pool_between=True))


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_block_overflow_names_the_block():
    net = build_network(mlp_chain_spec(2, 2, 2, 2), seed=0)
    for name, p in net.parameters().items():
        if name.startswith("block1."):
            p.data[...] = 1e200
    with pytest.raises(ag.NumericError, match="block 1"):
        net(np.ones((1, 2)))


def test_parameter_counts():
    head_only = build_network(mlp_chain_spec(1, 64, 64, 10))
    head = {n: p for n, p in head_only.named_parameters() if n.startswith("head.")}
    assert sum(p.size for p in head.values()) == 650
    assert parameter_count(build_network(mlp_chain_spec(1, 4, 4, 2))) == 46


def test_dense_variant_has_fewer_parameters():
    r = build_network(desk_conv_spec("rpolynet", blocks_per_stage=2), dtype=np.float32)
    d = build_network(desk_conv_spec("dpolynet", blocks_per_stage=2), dtype=np.float32)
    assert parameter_count(d) < parameter_count(r)


def test_conv_network_shapes_and_modes():
    for kind in ("rpolynet", "pinet", "dpolynet"):
        net = build_network(desk_conv_spec(kind, widths=(4, 6, 8), blocks_per_stage=2), seed=1)
        x = np.random.default_rng(2).normal(size=(3, 3, 32, 32))
        out = net(x, training=True, rng=np.random.default_rng(3))
        assert out.shape == (3, 10) and np.all(np.isfinite(out.data))
        with ag.no_grad():
            np.testing.assert_array_equal(net(x).data, net(x).data)


def test_state_dict_round_trip():
    spec = desk_conv_spec("rpolynet", widths=(4, 4, 4))
    a = build_network(spec, seed=1)
    a(np.random.default_rng(0).normal(size=(4, 3, 8, 8)), training=True)
    b = build_network(spec, seed=2)
    b.load_state_dict(a.state_dict())
    x = np.random.default_rng(1).normal(size=(2, 3, 8, 8))
    np.testing.assert_array_equal(a(x).data, b(x).data)


# --- degree accounting -----------------------------------------------------

@pytest.mark.parametrize("blocks,total", [(1, 2), (3, 8), (8, 256), (10, 1024)])
def test_plain_chain_degree(blocks, total):
    report = symbolic_degree(mlp_chain_spec(blocks, 2, 3, 2))
    assert report.total == total == 2 ** blocks
    assert report.per_block == [2 ** (i + 1) for i in range(blocks)]


def test_dense_chain_degree_recurrence():
    assert symbolic_degree(mlp_chain_spec(3, 2, 3, 2, dense=True)).per_block == [2, 6, 20]
    # D_i = 2 D_{i-1} + sum of earlier degrees, D_0 = 1
    degrees = [1]
    for _ in range(5):
        degrees.append(2 * degrees[-1] + sum(degrees[1:]))
    assert symbolic_degree(mlp_chain_spec(5, 2, 3, 2, dense=True)).per_block == degrees[1:]


def test_steps_add_input_degree():
    assert symbolic_degree(mlp_chain_spec(1, 2, 2, 2, steps=3)).total == 4
    assert symbolic_degree(mlp_chain_spec(2, 2, 2, 2, steps=2)).per_block == [3, 9]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.data())
def test_adding_dense_inputs_never_lowers_degree(n_blocks, steps, data):
    spec = mlp_chain_spec(n_blocks, 2, 2, 2, steps=steps)
    before = symbolic_degree(spec)
    i = data.draw(st.integers(0, n_blocks - 1))
    extra = data.draw(st.sets(st.integers(0, max(i - 1, 0)), max_size=i)) if i else set()
    spec.blocks[i].dense_inputs = tuple(sorted(extra))
    after = symbolic_degree(spec)
    assert after.total >= before.total
    assert all(b > a for a, b in zip(after.per_block, after.per_block[1:]))
    assert after.total == after.per_block[-1]
