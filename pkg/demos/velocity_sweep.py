"""
A small velocity sweep
======================

Runs the sweep machinery end to end on a reduced grid and writes the CSV
and JSON result files.  Raise ``n_samples`` and ``steps`` for a real run;
the command line equivalent is ``odernn sweep spec.json --out results``.
"""

import tempfile

from odernn.evaluation import SweepSpec, run_velocity_sweep
from odernn.odesolve import SolverConfig
from odernn.training import TrainConfig

spec = SweepSpec(variable="velocity", grid=[5.0, 40.0], models=["ode-rnn", "lstm"], seeds=[0, 1],
                 n_samples=200, n_t=4, n_c=8, hidden=16, dyn_hidden=(32,),
                 train=TrainConfig(steps=150, batch_size=20, lr=2e-3, solver=SolverConfig("rk4")))
out = tempfile.mkdtemp()
result = run_velocity_sweep(spec, out_dir=out)
for a in result.aggregates():
    print(f"{a['model']:8s} v={a['value']:5.1f} m/s  median NMSE {a['median']:.3f} over {a['n']} seeds")
print("files:", result.write(out))
