"""The independent oracles on their own: grid HJB, trajectory optimization, N agents."""
import numpy as np

from mfcdgm.model import MfcpSpec
from mfcdgm.oracle.forward import evaluate_cost, optimize_open_loop, zero_policy
from mfcdgm.oracle.grid import solve_grid_hjb
from mfcdgm.oracle.nagent import simulate_n_agents

spec = MfcpSpec(d=2)
grid = solve_grid_hjb(spec, n_steps=800, h=0.005)

# backward induction vs open-loop trajectory optimization
for m1 in (0.5, 0.7, 0.9):
    m0 = np.array([m1, 1 - m1])
    cost, _ = optimize_open_loop(spec, m0, iterations=300)
    print(f"V(0, ({m1}, {1 - m1:.1f})): grid {grid.value_at(0.0, m0[:-1])[0]:.4f}  trajectory {cost:.4f}")

# closed-loop policy from the grid gradient
m0 = np.array([0.8, 0.2])
print("grid policy cost from (0.8, 0.2):", round(float(evaluate_cost(spec, m0, grid.policy())), 4))

# N agents under the grid policy approach the mean-field cost
policy = grid.policy()
for N in (10, 100, 1000):
    res = simulate_n_agents(spec, policy, N, m0, reps=40, seed=N)
    print(f"N = {N:5d}: J^N = {res.mean:.4f} +- {res.stderr:.4f}")

# without control the empirical measure just stays put (quantized start)
res = simulate_n_agents(spec, zero_policy(2), 50, m0, reps=5, seed=0, initial="quantized")
print("zero policy, quantized start:", res.mean, "exact", evaluate_cost(spec, m0, zero_policy(2)))

# three states: symmetric problem, value at the barycenter
grid3 = solve_grid_hjb(MfcpSpec(d=3), n_steps=180, h=1 / 30)
print("d = 3, V(0, barycenter):", round(float(grid3.value_at(0.0, [1 / 3, 1 / 3])[0]), 4))
