"""Train a two-state value function and check it against the grid oracle.

Uses a reduced batch (K = 2000) so it finishes in about a minute.
"""
import numpy as np

from mfcdgm import Architecture, MfcpSpec, TrainingConfig, evaluate, train
from mfcdgm.model import recover_control
from mfcdgm.oracle.forward import evaluate_cost, network_policy
from mfcdgm.oracle.grid import solve_grid_hjb
from mfcdgm.simplex import distance_to_boundary

spec = MfcpSpec(d=2)
arch = Architecture(d=2)
cfg = TrainingConfig(samples=2000, epochs=200, lr=3e-3, seed=0)


def progress(report):
    if report.epoch % 50 == 0:
        print(f"epoch {report.epoch:4d}  pde {report.pde_loss:.4f}  terminal {report.terminal_loss:.4f}")


result = train(spec, arch, cfg, progress=progress)
theta = result.theta

# grid oracle on the chart [0, 1]; compare away from the boundary
grid = solve_grid_hjb(spec, n_steps=800, h=0.005)
nodes = grid.nodes()
inner = distance_to_boundary(nodes) >= 0.05
gaps = []
for k in range(0, len(grid.times), 40):
    v = evaluate(arch, theta, grid.times[k], nodes[inner], need_grad=False).value
    gaps.append(np.abs(v - grid.node_values(k)[inner]).max())
print(f"interior sup gap to grid oracle: {max(gaps):.4f}")

# value and recovered feedback rates at a few states
for m1 in (0.2, 0.5, 0.8):
    m = np.array([m1, 1 - m1])
    dual = evaluate(arch, theta, 0.0, m[:-1])
    rates = recover_control(spec, dual, 0.0, m)
    print(f"m = ({m1:.1f}, {1 - m1:.1f})  V ~ {dual.value:.4f}  grid {grid.value_at(0.0, m[:-1])[0]:.4f}"
          f"  rate 1->2 {rates[0, 1]:.3f}  rate 2->1 {rates[1, 0]:.3f}")

# closing the loop: the cost actually paid under the recovered control
m0 = np.array([0.8, 0.2])
print("cost under network control from (0.8, 0.2):", round(float(evaluate_cost(spec, m0, network_policy(spec, arch, theta))), 4))
