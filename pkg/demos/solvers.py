"""Planted sparse recovery with both solvers.

A Gaussian design with unit-norm columns hides a 10-sparse weight vector.
ROMP is told the sparsity; the L1 solver is not. Both should find the
planted vector, ROMP much faster.
"""
import time

import numpy as np

from voxrecon.sparse import SolverConfig, design_matrix, l1_admm_solve, romp_solve

rng = np.random.default_rng(0)
A = rng.standard_normal((128, 512))
A /= np.linalg.norm(A, axis=0)
X = design_matrix(A)
w = np.zeros(513)
support = np.sort(rng.choice(512, 10, replace=False))
w[support] = rng.standard_normal(10)
y = X @ w

for name, fn, cfg in [("romp", romp_solve, SolverConfig(sparsity_k=10)),
                      ("l1_admm", l1_admm_solve, SolverConfig(solver="l1_admm"))]:
    t = time.perf_counter()
    sw = fn(X, y, cfg)
    dt = time.perf_counter() - t
    err = np.linalg.norm(sw.to_dense() - w) / np.linalg.norm(w)
    print(f"{name:8s} support ok: {np.array_equal(sw.voxel_support, support)}  "
          f"rel. error {err:.1e}  {dt * 1e3:.1f} ms  converged: {sw.converged}")
