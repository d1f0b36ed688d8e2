"""Activation-free polynomial networks solving XOR.

XOR is the classic task a linear model cannot fit. The label is the sign of
z1 * z2, a degree-2 function, so a single polynomial block already suffices.
A three-block chain (degree 8) also fits it once the step size is modest.
"""
from polynets.blocks import build_network, mlp_chain_spec, symbolic_degree
from polynets.data import synth_dataset
from polynets.regularization import NormKind
from polynets.train import TrainConfig, evaluate, fit

bn = NormKind("batch")
train = synth_dataset("xor", 400, 0.1, seed=0)
test = synth_dataset("xor", 200, 0.1, seed=1)

for blocks, lr in ((1, 0.1), (3, 0.01)):
    spec = mlp_chain_spec(blocks, 2, 8, 2, phi=bn, psi=bn)
    net = build_network(spec, seed=0)
    rows = fit(net, train, TrainConfig(lr0=lr, batch_size=64, epochs=100, seed=0))
    first = next((r.epoch for r in rows if r.train_acc >= 0.95), None)
    print(f"{blocks} block(s), degree {symbolic_degree(spec).total}, lr {lr}")
    print(f"  epoch 0 train acc {rows[0].train_acc:.3f}, first >= 0.95 at epoch {first}")
    print(f"  final train loss {rows[-1].train_loss:.4f}, held-out acc {evaluate(net, test)[1]:.3f}")
