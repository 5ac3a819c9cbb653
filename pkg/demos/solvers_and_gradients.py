"""
ODE solvers and the three gradient engines
==========================================

Measures solver convergence orders, then differentiates a tiny ODE-RNN
with direct backpropagation, the checkpointed adjoint and the continuous
adjoint.
"""

import math

import numpy as np

from odernn.models import build_model
from odernn.odesolve import SolverConfig, convergence_order, integrate
from odernn.training import loss_and_gradients

decay = lambda h, t: -h  # noqa: E731
exact = lambda t: np.array([math.exp(-t)])  # noqa: E731
for method, step in (("euler", 0.01), ("rk4", 0.2)):
    order, steps, errs = convergence_order(decay, exact, method, np.array([1.0]), base_step=step, halvings=4)
    print(f"{method}: measured order {order:.3f}")

h1, traj = integrate(decay, np.array([1.0]), 0.0, 1.0, SolverConfig("rk45", rtol=1e-8, atol=1e-8))
print(f"rk45: x(1) = {h1[0]:.9f} (exact {math.exp(-1):.9f}) in {traj.n_steps} steps, {traj.rejected} rejected")

# a 1x2 CSI matrix, hidden size 4
model = build_model("ode-rnn", 1, 2, seed=1, hidden=4, dyn_hidden=(5,), csi_scale=0.7)
rng = np.random.default_rng(0)
obs = rng.normal(size=(3, 3, 4))
times = np.tile([0.0, 1e-3, 2.5e-3, 3e-3], (3, 1))
targets = rng.normal(size=(3, 4))

euler = SolverConfig("euler", step=4e-4)
direct = loss_and_gradients(model, obs, times, targets, euler, "direct")
ckpt = loss_and_gradients(model, obs, times, targets, euler, "checkpoint-adjoint")
print("checkpoint adjoint bitwise equal to direct:",
      all(np.array_equal(direct.grads[k], ckpt.grads[k]) for k in direct.grads))

fine = loss_and_gradients(model, obs, times, targets, SolverConfig("rk4", step=2e-5), "direct")
adj = loss_and_gradients(model, obs, times, targets, SolverConfig("rk45", rtol=1e-8, atol=1e-8), "adjoint")
worst = max(np.linalg.norm(adj.grads[k] - fine.grads[k]) / np.linalg.norm(fine.grads[k]) for k in fine.grads)
print(f"continuous adjoint vs direct: worst relative difference {worst:.1e}")
