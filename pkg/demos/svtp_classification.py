"""Sparse variational t-process versus SVGP on a two-class toy problem.

Both models share the NNGP kernel and inducing-point setup; the t-process
additionally learns an inverse-gamma posterior over the kernel scale.

Run: python demos/svtp_classification.py  (under a minute)
"""

import numpy as np

from tpnngp import NetworkConfig
from tpnngp import svi

rng = np.random.default_rng(3)
n = 300
labels = rng.integers(0, 2, n)
angle = rng.uniform(0, np.pi, n)
x = np.column_stack([np.cos(angle) + labels, np.sin(angle) * (1 - 2 * labels) + 0.5 * labels])
x += 0.15 * rng.standard_normal(x.shape)
x_tr, y_tr, x_te, y_te = x[:200], labels[:200], x[200:], labels[200:]
cfg = NetworkConfig(depth=2, activation="relu", input_dim=2)

for model in ("svgp", "svtp"):
    conf = svi.SviConfig(model=model, n_inducing=20, batch_size=200, n_mc=16, steps=600, learning_rate=0.01, seed=0)
    res = svi.fit(x_tr, y_tr, conf, cfg, n_classes=2)
    pred = svi.predict(res.state, x_te, cfg, rng=np.random.default_rng(0))
    acc = np.mean(np.argmax(pred.probs, axis=1) == y_te)
    print(f"{model}: final ELBO {res.trace[-1][1]:.2f}  test accuracy {acc:.3f}")
    if model == "svtp":
        a, b = res.state.scale_post
        print(f"      scale posterior InvGamma({a:.2f}, {b:.2f}), predictive dof {pred.dof:.2f}")
