"""Dataset handling, experiment configuration and the end-to-end workflows."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import linalg, stats

from . import distributions as dist
from . import finitenet as fn
from . import impsampling, posterior, svi
from .kernels import GramKind, GramPair, NetworkConfig, nngp_gram, ntk_gram

__all__ = [
    "ConfigError",
    "Dataset",
    "load_csv",
    "dataset_from_arrays",
    "ExperimentConfig",
    "parse_inference",
    "sin_task",
    "run_regression",
    "run_classification_sv",
    "run_verify",
    "lemma_b3_report",
    "export_kernel",
    "load_kernel",
    "run_grid",
    "BURR_GRID",
    "worker_count",
]

BURR_GRID = (0.5, 1.0, 2.0, 3.0, 4.0)
MISSING = {"", "na", "nan", "?", "null", "none"}
_SPLITS = {"train": 0, "val": 1, "test": 2}


class ConfigError(ValueError):
    """Bad configuration, flags or input file."""


def worker_count() -> int:
    raw = os.environ.get("TPNNGP_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError as err:
        raise ConfigError(f"TPNNGP_THREADS must be an integer, got {raw!r}") from err


# data ------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Standardized features and targets with a fixed permutation split.

    ``targets`` are standardized for regression and one-hot for
    classification (``labels`` then holds class indices).
    """

    features: np.ndarray
    targets: np.ndarray
    split: tuple
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0
    kind: str = "regression"
    labels: np.ndarray | None = None
    source_hash: str = ""

    def __post_init__(self):
        idx = np.concatenate(self.split)
        if idx.size != self.features.shape[0] or np.unique(idx).size != idx.size:
            raise ValueError("splits must be disjoint and cover every row")

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.targets.shape[1] if self.kind == "classification" else 0

    def part(self, name):
        i = _SPLITS[name]
        rows = self.split[i]
        y = self.labels[rows] if self.kind == "classification" else self.targets[rows]
        return self.features[rows], y

    def raw_targets(self, name):
        return self.part(name)[1] * self.y_std + self.y_mean


def _split_sizes(n, ratios):
    if len(ratios) != 3 or min(ratios) < 0 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_tr = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return n_tr, n_val, n - n_tr - n_val


def _standardize(a, rows):
    mean = a[rows].mean(axis=0)
    std = a[rows].std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (a - mean) / std, mean, std


def load_csv(path, target=None, ratios=(0.8, 0.1, 0.1), seed=0, kind="regression") -> Dataset:
    """Read a header-first numeric CSV.

    ``target`` is a column name or integer index (default: last column).
    Rows with missing cells are dropped with a warning.  Features, and for
    regression the target, are standardized with training-split statistics.
    """
    path = Path(path)
    try:
        text = path.read_bytes()
        rows = list(csv.reader(text.decode().splitlines()))
    except (OSError, UnicodeDecodeError) as err:
        raise ConfigError(f"cannot read {path}: {err}") from err
    if len(rows) < 2:
        raise ConfigError(f"{path} has no data rows")
    header, body = [h.strip() for h in rows[0]], [r for r in rows[1:] if r]
    if target is None:
        col = len(header) - 1
    elif isinstance(target, int) or str(target).lstrip("-").isdigit():
        col = int(target) % len(header)
    elif target in header:
        col = header.index(target)
    else:
        raise ConfigError(f"target column {target!r} not in {header}")
    keep, dropped = [], 0
    for r in body:
        if len(r) != len(header):
            raise ConfigError(f"ragged row in {path}: {r}")
        if any(v.strip().lower() in MISSING for v in r):
            dropped += 1
            continue
        keep.append(r)
    if dropped:
        warnings.warn(f"dropped {dropped} rows with missing values from {path.name}", stacklevel=2)
    try:
        y_raw = np.array([float(r[col]) for r in keep])
    except ValueError as err:
        raise ConfigError(f"target column {header[col]!r} is not numeric") from err
    try:
        x_raw = np.array([[float(v) for j, v in enumerate(r) if j != col] for r in keep], dtype=float)
    except ValueError as err:
        raise ConfigError(f"non-numeric feature in {path}: {err}") from err
    if len(keep) < 3:
        raise ConfigError("need at least three complete rows")
    x_raw = x_raw.reshape(len(keep), len(header) - 1)
    return _build(x_raw, y_raw, ratios, seed, kind, hashlib.sha256(text).hexdigest()[:16])


def dataset_from_arrays(x, y, ratios=(0.8, 0.1, 0.1), seed=0, kind="regression") -> Dataset:
    """Build a :class:`Dataset` from in-memory arrays with the same policy as :func:`load_csv`."""
    x = np.asarray(x, dtype=float)
    x = x.reshape(len(x), -1)
    y = np.asarray(y, dtype=float).ravel()
    digest = hashlib.sha256(np.ascontiguousarray(np.c_[x, y]).tobytes()).hexdigest()[:16]
    return _build(x, y, ratios, seed, kind, digest)


def _build(x_raw, y_raw, ratios, seed, kind, digest):
    n = len(y_raw)
    n_tr, n_val, _ = _split_sizes(n, ratios)
    perm = np.random.default_rng(seed).permutation(n)
    split = (np.sort(perm[:n_tr]), np.sort(perm[n_tr : n_tr + n_val]), np.sort(perm[n_tr + n_val :]))
    x, xm, xs = _standardize(x_raw, split[0])
    if kind == "classification":
        classes, labels = np.unique(y_raw, return_inverse=True)
        onehot = np.eye(classes.size)[labels]
        return Dataset(x, onehot, split, xm, xs, kind=kind, labels=labels, source_hash=digest)
    if kind != "regression":
        raise ConfigError(f"unknown dataset kind {kind!r}")
    ym, ys = float(y_raw[split[0]].mean()), float(y_raw[split[0]].std())
    ys = ys if ys > 0 else 1.0
    return Dataset(x, (y_raw - ym) / ys, split, xm, xs, ym, ys, kind, source_hash=digest)


# configuration -----------------------------------------------------------------


def parse_inference(spec: str):
    """``exact``, ``is:N``, ``svgp`` or ``svtp`` -> (kind, N or None)."""
    spec = str(spec).strip().lower()
    if spec in ("exact", "svgp", "svtp", "is"):
        return (spec, 10_000 if spec == "is" else None)
    if spec.startswith("is:"):
        try:
            n = int(float(spec[3:]))
        except ValueError as err:
            raise ConfigError(f"cannot parse inference {spec!r}") from err
        if n < 2:
            raise ConfigError("importance sampling needs N >= 2")
        return ("is", n)
    raise ConfigError(f"unknown inference {spec!r}; use exact, is:N, svgp or svtp")


_DEFAULT_OPTIONS = {
    "width": 512,
    "n_nets": 1000,
    "gd_c": 0.5,
    "gd_max_steps": 100_000,
    "gd_tol": 1e-8,
    "test_x": 0.0,
    "ks_alpha": 0.01,
    "negative_control": False,
    "lemma_samples": 100_000,
    "ntk_widths": [512, 2048],
    "n_inducing": 64,
    "batch_size": 128,
    "n_mc": 8,
    "steps": 1000,
    "learning_rate": 1e-2,
    "scale_prior": [2.0, 2.0],
    "predict_mc": 256,
    "ratios": [0.8, 0.1, 0.1],
    "target": None,
    "grid": list(BURR_GRID),
    "grid_weight_variance": None,
    "grid_bias_variance": None,
    "grid_depth": None,
    "grid_noise": None,
    "evaluate_split": "test",
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a workflow needs; serializes to canonical JSON.

    JSON schema (all keys optional)::

        {"network": {"depth", "activation", "weight_variance", "bias_variance"},
         "prior": "invgamma:a,b" | "burr:c,k" | "point:s",
         "inference": "exact" | "is:N" | "svgp" | "svtp",
         "noise_variance": float or null, "seed": int,
         "options": {...workflow options...}}
    """

    network: NetworkConfig = NetworkConfig()
    prior: str = "invgamma:2,2"
    inference: str = "exact"
    noise_variance: float | None = None
    seed: int = 0
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            prior = dist.parse_prior(self.prior)
        except ValueError as err:
            raise ConfigError(str(err)) from err
        kind, _ = parse_inference(self.inference)
        if kind == "exact" and not isinstance(prior, (dist.InvGamma, dist.PointMass)):
            raise ConfigError("exact inference requires an invgamma or point prior")
        if self.noise_variance is not None and self.noise_variance < 0:
            raise ConfigError("noise_variance must be non-negative")
        unknown = set(self.options) - set(_DEFAULT_OPTIONS)
        if unknown:
            raise ConfigError(f"unknown options {sorted(unknown)}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")

    def opt(self, name):
        return self.options.get(name, _DEFAULT_OPTIONS[name])

    @property
    def scale_prior(self) -> dist.ScalePrior:
        return dist.parse_prior(self.prior)

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "prior": self.scale_prior.spec(),
            "inference": self.inference,
            "noise_variance": self.noise_variance,
            "seed": int(self.seed),
            "options": {k: self.opt(k) for k in sorted(_DEFAULT_OPTIONS)},
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict, **overrides):
        raw = dict(raw)
        unknown = set(raw) - {"network", "prior", "inference", "noise_variance", "seed", "options"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        net = dict(raw.get("network", {}))
        net_over = overrides.pop("network", None) or {}
        net.update(net_over)
        try:
            network = NetworkConfig(**net)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad network config: {err}") from err
        options = dict(raw.get("options", {}))
        options.update(overrides.pop("options", None) or {})
        fields = {k: raw[k] for k in ("prior", "inference", "noise_variance", "seed") if k in raw}
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return cls(network=network, options=options, **fields)

    @classmethod
    def from_json(cls, path, **overrides):
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw, **overrides)


def _network_for(cfg: ExperimentConfig, input_dim: int) -> NetworkConfig:
    return replace(cfg.network, input_dim=input_dim)


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


# regression ----------------------------------------------------------------------


def _gram_for(ds, cfg, eval_split, gram=None):
    x_tr, _ = ds.part("train")
    x_ev, _ = ds.part(eval_split)
    if gram is not None:
        return gram
    return nngp_gram(x_tr, x_ev, _network_for(cfg, ds.input_dim))


def _with_test_noise(gram, eps):
    return GramPair(gram.k_trtr, gram.k_tetr, gram.k_tete + eps * np.eye(gram.n_test), gram.kind)


def regression_scores(cfg: ExperimentConfig, ds: Dataset, eval_split="test", gram=None):
    """Per-point standardized-scale log densities and predictive locations.

    Returns ``(logp, loc, scale, dof)``; ``scale``/``dof`` describe the marginal
    t (dof ``inf`` for a Gaussian); for importance sampling they are ``nan``.
    """
    if ds.kind != "regression":
        raise ConfigError("regression workflow needs a regression dataset")
    x_tr, y_tr = ds.part("train")
    x_ev, y_ev = ds.part(eval_split)
    gram = _gram_for(ds, cfg, eval_split, gram)
    task = posterior.RegressionTask(x_tr, y_tr, x_ev, cfg.noise_variance)
    eps = task.noise(gram)
    prior = cfg.scale_prior
    kind, n_is = parse_inference(cfg.inference)
    if kind == "exact":
        obs = _with_test_noise(gram, eps)
        if isinstance(prior, dist.PointMass):
            rt = posterior.readout_train_limit(task, obs, prior)
            loc = rt.conditional_mean
            scale = np.sqrt(prior.s * np.clip(np.diag(rt.conditional_cov_factor), 0.0, None))
            with np.errstate(divide="ignore", invalid="ignore"):
                logp = stats.norm.logpdf(y_ev, loc, scale)
            return logp, loc, scale, np.full_like(loc, np.inf)
        mvt = posterior.bayes_posterior(task, obs, prior)
        # a noiseless fit evaluated on its own inputs has zero scale up to rounding
        scale = np.sqrt(np.clip(np.diag(mvt.scale), 0.0, None))
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = stats.t.logpdf(y_ev, mvt.dof, mvt.loc, scale)
        return logp, mvt.loc, scale, np.full_like(mvt.loc, mvt.dof)
    if kind == "is":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
        st = impsampling.precompute(task, gram)
        logp = impsampling.log_predictive(task, gram, prior, y_ev, n_is, rng, st=st)
        nan = np.full_like(st.mean_te, np.nan)
        return logp, st.mean_te, nan, nan
    raise ConfigError(f"inference {cfg.inference!r} is not a regression method")


def run_regression(cfg: ExperimentConfig, ds: Dataset, out_dir=None, gram=None, eval_split=None):
    """Test NLL (nats per point, raw target scale) and RMSE.

    The NLL on the standardized scale is shifted by ``log y_std`` (the
    change-of-variables Jacobian).
    """
    eval_split = eval_split or cfg.opt("evaluate_split")
    logp, loc, scale, dof = regression_scores(cfg, ds, eval_split, gram)
    y_raw = ds.raw_targets(eval_split)
    pred = loc * ds.y_std + ds.y_mean
    metrics = {
        "workflow": "regress",
        "split": eval_split,
        "n_eval": int(y_raw.size),
        "nll": float(-np.mean(logp) + math.log(ds.y_std)),
        "rmse": float(np.sqrt(np.mean((pred - y_raw) ** 2))),
        "prior": cfg.scale_prior.spec(),
        "inference": cfg.inference,
        "config_hash": cfg.digest(),
        "data_hash": ds.source_hash,
    }
    rows = [
        (int(i), float(y), float(p), float(s * ds.y_std), float(d), float(lp - math.log(ds.y_std)))
        for i, y, p, s, d, lp in zip(ds.split[_SPLITS[eval_split]], y_raw, pred, scale, dof, logp)
    ]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "metrics.json", metrics)
        with open(out / "predictions.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "y", "loc", "scale", "dof", "logpdf"])
            for r in rows:
                w.writerow([r[0]] + [repr(v) for v in r[1:]])
    return metrics, rows


# classification ---------------------------------------------------------------


def run_classification_sv(cfg: ExperimentConfig, ds: Dataset, out_dir=None):
    """Fit SVGP or SVTP on the training split and score the test split."""
    if ds.kind != "classification":
        raise ConfigError("classify-sv needs a classification dataset (--target with class labels)")
    kind, _ = parse_inference(cfg.inference)
    if kind not in ("svgp", "svtp"):
        raise ConfigError("classify-sv needs --inference svgp or svtp")
    net = _network_for(cfg, ds.input_dim)
    scfg = svi.SviConfig(
        model=kind,
        n_inducing=int(cfg.opt("n_inducing")),
        batch_size=int(cfg.opt("batch_size")),
        n_mc=int(cfg.opt("n_mc")),
        steps=int(cfg.opt("steps")),
        learning_rate=float(cfg.opt("learning_rate")),
        scale_prior=tuple(cfg.opt("scale_prior")),
        seed=int(cfg.seed),
    )
    x_tr, y_tr = ds.part("train")
    x_te, y_te = ds.part("test")
    res = svi.fit(x_tr, y_tr, scfg, net, n_classes=ds.n_classes)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    pred = svi.predict(res.state, x_te, net, n_mc=int(cfg.opt("predict_mc")), rng=rng)
    p_true = np.clip(pred.probs[np.arange(len(y_te)), y_te], 1e-300, None)
    metrics = {
        "workflow": "classify-sv",
        "model": kind,
        "n_test": int(len(y_te)),
        "nll": float(-np.mean(np.log(p_true))),
        "accuracy": float(np.mean(pred.probs.argmax(axis=1) == y_te)),
        "final_elbo": float(res.trace[-1][1]) if res.trace else None,
        "scale_post": list(res.state.scale_post) if res.state.scale_post else None,
        "config_hash": cfg.digest(),
        "data_hash": ds.source_hash,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "metrics.json", metrics)
        svi.write_trace_csv(out / "trace.csv", res.trace)
        with open(out / "predictions.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "label"] + [f"p{c}" for c in range(ds.n_classes)])
            for i, lab, p in zip(ds.split[2], y_te, pred.probs):
                w.writerow([int(i), int(lab)] + [repr(float(v)) for v in p])
    return metrics, res


# theorem verification ------------------------------------------------------------


def sin_task(test_x=0.0) -> posterior.RegressionTask:
    """Ten noiseless ``sin`` observations on a two-sided geometric grid.

    Points ``+-geomspace(0.03, 3, 5)`` keep the NTK gram well conditioned
    so that full gradient descent converges in about a thousand steps.
    """
    pos = np.geomspace(0.03, 3.0, 5)
    x = np.concatenate([-pos[::-1], pos])
    return posterior.RegressionTask(x, np.sin(x), np.atleast_1d(float(test_x)), noise_variance=0.0)


def _reference(mix: posterior.MixturePredictive, j=0, dof_shift=0.0):
    """Frozen scipy marginal of coordinate ``j``."""
    prior = mix.prior
    var = float(mix.conditional_cov_factor[j, j])
    loc = float(mix.conditional_mean[j])
    if isinstance(prior, dist.InvGamma):
        return stats.t(df=2 * prior.a + dof_shift, loc=loc, scale=math.sqrt(prior.b / prior.a * var))
    if isinstance(prior, dist.PointMass):
        return stats.norm(loc=loc, scale=math.sqrt(prior.s * var))
    raise ConfigError("verify needs an invgamma or point prior for the closed-form reference")


def _prior_member(args):
    net_cfg, width, prior, seed, i, x = args
    net = fn.sample_net(net_cfg, width, prior, seed=seed, index=i)
    return fn.forward(net, x)[0]


def _readout_member(args):
    net_cfg, width, prior, seed, i, task = args
    net = fn.sample_net(net_cfg, width, prior, seed=seed, index=i)
    return fn.train_readout_closed_form(net, task, np.inf).f_te


def _gd_member(args):
    net_cfg, width, prior, seed, i, task, c, steps, tol = args
    net = fn.sample_net(net_cfg, width, prior, fn.Parameterization.NTK, seed=seed, index=i)
    res = fn.train_full_gd(net, task, steps=steps, c=c, tol=tol)
    return fn.forward(res.net, task.x_te)[0], res.n_steps, res.converged


def _map(func, items, workers):
    if workers <= 1:
        return [func(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(func, items, chunksize=max(1, len(items) // (4 * workers))))


def _ks_report(theorem, samples, ref, alpha, extra=None):
    res = stats.kstest(samples, ref.cdf)
    report = {
        "theorem": theorem,
        "n_samples": int(len(samples)),
        "ks_statistic": float(res.statistic),
        "p_value": float(res.pvalue),
        "alpha": alpha,
        "pass": bool(res.pvalue > alpha),
    }
    report.update(extra or {})
    return report


def run_verify(cfg: ExperimentConfig, theorem: str, out_dir=None):
    """Compare a finite-network or sampling experiment with its limit law.

    ``theorem``: ``prior``, ``readout``, ``fullgd``, ``lemmab3`` or ``ntkkernel``.
    Options ``width``, ``n_nets``, ``gd_c`` and ``negative_control`` (reference
    dof ``2a + 1``) shape the run.
    """
    theorem = theorem.lower().replace("-", "").replace("_", "")
    alpha = float(cfg.opt("ks_alpha"))
    shift = 1.0 if cfg.opt("negative_control") else 0.0
    prior = cfg.scale_prior
    net_cfg = _network_for(cfg, 1)
    width, n_nets, seed = int(cfg.opt("width")), int(cfg.opt("n_nets")), int(cfg.seed)
    workers = worker_count()
    task = sin_task(cfg.opt("test_x"))
    samples_table = None
    if theorem == "prior":
        gram = nngp_gram(task.x_te, None, net_cfg)
        mix = posterior.prior_limit(gram, prior)
        outs = np.concatenate(_map(_prior_member, [(net_cfg, width, prior, seed, i, task.x_te) for i in range(n_nets)], workers))
        report = _ks_report("prior", outs, _reference(mix, 0, shift), alpha)
        samples_table = outs[:, None]
    elif theorem == "readout":
        gram = nngp_gram(task.x_tr, task.x_te, net_cfg)
        mix = posterior.readout_train_limit(task, gram, prior)
        outs = np.concatenate(_map(_readout_member, [(net_cfg, width, prior, seed, i, task) for i in range(n_nets)], workers))
        report = _ks_report("readout", outs, _reference(mix, 0, shift), alpha)
        samples_table = outs[:, None]
    elif theorem == "fullgd":
        g_k = nngp_gram(task.x_tr, task.x_te, net_cfg)
        g_t = ntk_gram(task.x_tr, task.x_te, net_cfg)
        mix = posterior.ntk_train_limit(task, g_k, g_t, prior)
        args = [
            (net_cfg, width, prior, seed, i, task, float(cfg.opt("gd_c")), int(cfg.opt("gd_max_steps")), float(cfg.opt("gd_tol")))
            for i in range(n_nets)
        ]
        res = _map(_gd_member, args, workers)
        outs = np.concatenate([r[0] for r in res])
        steps = np.array([r[1] for r in res])
        extra = {"median_steps": float(np.median(steps)), "all_converged": bool(all(r[2] for r in res))}
        report = _ks_report("fullgd", outs, _reference(mix, 0, shift), alpha, extra)
        samples_table = outs[:, None]
    elif theorem == "lemmab3":
        if not isinstance(prior, dist.InvGamma):
            raise ConfigError("lemmab3 needs an invgamma prior")
        n = int(cfg.opt("lemma_samples"))
        sigma = nngp_gram(task.x_tr[:3], None, net_cfg).k_trtr
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        mix = dist.scale_mixture_sample(prior, np.zeros(3), sigma, n, rng)
        mvt = dist.MvtParams(2 * prior.a + shift, np.zeros(3), prior.b / prior.a * sigma)
        ref = dist.mvt_sample(mvt, n, rng)
        report = lemma_b3_report(mix, ref, sigma, alpha)
        samples_table = np.c_[mix, ref]
    elif theorem == "ntkkernel":
        x = task.x_tr
        theta = ntk_gram(x, None, net_cfg).k_trtr
        rows = {}
        for w in cfg.opt("ntk_widths"):
            errs = []
            for i in range(min(n_nets, 20)):
                net = fn.sample_net(net_cfg, int(w), dist.PointMass(1.0), fn.Parameterization.NTK, seed=seed, index=i)
                errs.append(np.max(np.abs(fn.empirical_ntk(net, x) - theta)) / np.max(np.abs(theta)))
            rows[int(w)] = float(np.mean(errs))
        ws = sorted(rows)
        slope = float(np.polyfit(np.log(ws), np.log([rows[w] for w in ws]), 1)[0]) if len(ws) > 1 else float("nan")
        report = {
            "theorem": "ntkkernel",
            "mean_max_relative_error": {str(k): v for k, v in rows.items()},
            "log_log_slope": slope,
            "pass": bool(len(ws) > 1 and -0.8 < slope < -0.2),
        }
        samples_table = np.array([[w, rows[w]] for w in ws])
    else:
        raise ConfigError(f"unknown theorem {theorem!r}")
    report.update({"prior": prior.spec(), "negative_control": bool(shift), "config_hash": cfg.digest()})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "metrics.json", report)
        if theorem == "lemmab3":
            with open(out / "samples.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["sample", "source", "coordinate", "value"])
                for i, row in enumerate(samples_table):
                    for j, val in enumerate(row):
                        w.writerow([i, "mixture" if j < 3 else "mvt", j % 3, repr(float(val))])
        elif theorem == "ntkkernel":
            with open(out / "samples.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["width", "mean_max_relative_error"])
                for wdt, err in samples_table:
                    w.writerow([int(wdt), repr(float(err))])
        else:
            fn.write_samples_csv(out / "samples.csv", samples_table)
    return report


def lemma_b3_report(mix, ref, sigma, alpha=0.01):
    """Two-sample KS on every coordinate and on the Mahalanobis radius.

    Each of the ``d + 1`` tests runs at ``alpha / (d + 1)`` (Bonferroni) and
    the verdict passes only if all do.
    """
    mix, ref = np.atleast_2d(mix), np.atleast_2d(ref)
    d = mix.shape[1]
    chol = dist.robust_cholesky(np.atleast_2d(sigma))

    def radius(s):
        return np.sum(linalg.solve_triangular(chol, s.T, lower=True) ** 2, axis=0)

    tests = [stats.ks_2samp(mix[:, j], ref[:, j]) for j in range(d)]
    tests.append(stats.ks_2samp(radius(mix), radius(ref)))
    level = alpha / len(tests)
    pvals = [float(t.pvalue) for t in tests]
    return {
        "theorem": "lemmab3",
        "n_samples": int(mix.shape[0]),
        "ks_statistic": float(max(t.statistic for t in tests)),
        "p_value": float(min(pvals)),
        "p_values": pvals,
        "alpha": alpha,
        "pass": bool(min(pvals) > level),
    }


# kernel export ---------------------------------------------------------------------


def _write_matrix(path, a):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.atleast_2d(a):
            w.writerow([repr(float(v)) for v in row])


def _read_matrix(path, shape):
    with open(path, newline="") as fh:
        rows = [[float(v) for v in r] for r in csv.reader(fh) if r]
    return np.array(rows, dtype=float).reshape(shape)


def export_kernel(cfg: ExperimentConfig, ds: Dataset, kind="nngp", out_dir=".", eval_split="test"):
    """Write train/eval gram blocks as CSV plus a JSON sidecar.

    The sidecar records the config, its SHA-256, the data hash and the
    block shapes; values are written with ``repr`` so they round-trip exactly.
    """
    kind = GramKind(kind)
    x_tr, _ = ds.part("train")
    x_ev, _ = ds.part(eval_split)
    net = _network_for(cfg, ds.input_dim)
    gram = (nngp_gram if kind is GramKind.NNGP else ntk_gram)(x_tr, x_ev, net)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blocks = {"trtr": gram.k_trtr, "tetr": gram.k_tetr, "tete": gram.k_tete}
    files = {}
    for name, block in blocks.items():
        fname = f"kernel_{kind.value}_{name}.csv"
        _write_matrix(out / fname, block)
        files[name] = {"file": fname, "shape": list(block.shape)}
    sidecar = {
        "kind": kind.value,
        "eval_split": eval_split,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "data_hash": ds.source_hash,
        "blocks": files,
    }
    path = out / f"kernel_{kind.value}.json"
    _dump_json(path, sidecar)
    return path, gram


def load_kernel(sidecar_path) -> GramPair:
    sidecar_path = Path(sidecar_path)
    meta = json.loads(sidecar_path.read_text())
    parts = {
        name: _read_matrix(sidecar_path.parent / info["file"], tuple(info["shape"]))
        for name, info in meta["blocks"].items()
    }
    return GramPair(parts["trtr"], parts["tetr"], parts["tete"], GramKind(meta["kind"]))


# hyperparameter grid ----------------------------------------------------------------


def _grid_priors(prior, values):
    if isinstance(prior, dist.InvGamma):
        return [f"invgamma:{a:g},{b:g}" for a in values for b in values]
    if isinstance(prior, dist.BurrXII):
        return [f"burr:{c:g},{k:g}" for c in values for k in values]
    return [f"point:{s:g}" for s in values]


def run_grid(cfg: ExperimentConfig, ds: Dataset, out_dir=None):
    """Select prior and network hyperparameters by validation NLL, then score test once."""
    values = [float(v) for v in cfg.opt("grid")]
    net = cfg.network
    wv = cfg.opt("grid_weight_variance") or [net.weight_variance]
    bv = cfg.opt("grid_bias_variance") or [net.bias_variance]
    depths = cfg.opt("grid_depth") or [net.depth]
    noises = cfg.opt("grid_noise") or [cfg.noise_variance]
    table = []
    best = None
    for d in depths:
        for w in wv:
            for b in bv:
                ncfg = replace(net, depth=int(d), weight_variance=float(w), bias_variance=float(b), input_dim=ds.input_dim)
                x_tr, _ = ds.part("train")
                x_val, _ = ds.part("val")
                gram = nngp_gram(x_tr, x_val, ncfg)
                for noise in noises:
                    for spec in _grid_priors(cfg.scale_prior, values):
                        trial = replace(cfg, network=ncfg, prior=spec, noise_variance=noise)
                        logp, *_ = regression_scores(trial, ds, "val", gram)
                        nll = float(-np.mean(logp) + math.log(ds.y_std))
                        row = {"depth": int(d), "weight_variance": float(w), "bias_variance": float(b), "noise_variance": noise, "prior": spec, "val_nll": nll}
                        table.append(row)
                        if best is None or nll < best[0]:
                            best = (nll, trial)
    chosen = best[1]
    metrics, rows = run_regression(chosen, ds, eval_split="test")
    summary = {
        "workflow": "grid",
        "best": {"prior": chosen.scale_prior.spec(), "network": chosen.network.to_dict(), "noise_variance": chosen.noise_variance, "val_nll": best[0]},
        "test_nll": metrics["nll"],
        "test_rmse": metrics["rmse"],
        "n_trials": len(table),
        "config_hash": cfg.digest(),
        "data_hash": ds.source_hash,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "metrics.json", summary)
        with open(out / "grid.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(table[0]))
            w.writeheader()
            w.writerows(table)
    return summary, table
