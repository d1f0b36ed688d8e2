"""Degree bookkeeping for chains of polynomial blocks.

Each plain block with one step squares the degree of its input, so B blocks
give degree 2**B. Dense connections add earlier outputs into every Hadamard
product and grow the degree faster. Three independent views agree: the
symbolic count, finite-difference annihilation and an exact expansion.
"""
import numpy as np

from polynets.blocks import mlp_chain_spec, symbolic_degree
from polynets.verify import degree_annihilation, dense_chain, monomial_expand, plain_chain

print("symbolic degree of plain chains")
for blocks in (1, 2, 3, 8, 10):
    print(f"  {blocks:2d} blocks -> {symbolic_degree(mlp_chain_spec(blocks, 2, 4, 2)).total}")

print("\nannihilation: the (d+1)-th difference along a random line vanishes, the d-th does not")
for blocks in (1, 2, 3):
    net = plain_chain(blocks, seed=blocks)
    d = 2 ** blocks
    exact = degree_annihilation(net, d, rng=np.random.default_rng(0))
    lower = degree_annihilation(net, d - 1, rng=np.random.default_rng(0))
    print(f"  B={blocks}: claim {d} {'holds' if exact.passed else 'fails'}, claim {d - 1} "
          f"{'holds' if lower.passed else 'fails'}")

net = dense_chain(3, seed=2)
exp = monomial_expand(net, method="symbolic")
print(f"\ndense 3-chain, exact per-block degrees from the expansion: {exp.block_degrees}")
print(f"symbolic count for the same chain: {list(symbolic_degree(mlp_chain_spec(3, 2, 4, 2, dense=True)).per_block)}")

top = exp.coefficient_map(feature=0)
print(f"output feature 0 has {len(top)} nonzero monomials; a few of the highest order:")
for powers, coef in sorted(top.items(), key=lambda kv: -sum(kv[0]))[:4]:
    print(f"  z1^{powers[0]} z2^{powers[1]}: {coef:+.3e}")
