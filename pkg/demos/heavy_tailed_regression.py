"""Student-t versus Gaussian predictive on a regression task with outliers.

Fits the same NNGP kernel twice: once with a fixed readout variance
(PointMass, the plain NNGP) and once with an inverse-gamma prior on it.
The inverse-gamma fit is done exactly and again by importance sampling
to show the two agree.

Run: python demos/heavy_tailed_regression.py
"""

import numpy as np
from scipy import stats

from tpnngp import NetworkConfig
from tpnngp import workflows as wf

rng = np.random.default_rng(0)
x = rng.uniform(-3, 3, (300, 1))
y = np.sin(2 * x[:, 0]) + 0.1 * stats.t.rvs(df=1.5, size=300, random_state=rng)
ds = wf.dataset_from_arrays(x, y, seed=0)

net = NetworkConfig(depth=2, activation="relu", input_dim=1)
for prior, inference in [("point:1", "exact"), ("invgamma:2,2", "exact"), ("invgamma:2,2", "is:100000")]:
    cfg = wf.ExperimentConfig(network=net, prior=prior, inference=inference, noise_variance=0.05)
    metrics, _ = wf.run_regression(cfg, ds)
    print(f"{prior:14s} {inference:10s} test NLL {metrics['nll']:.4f}  RMSE {metrics['rmse']:.4f}")
