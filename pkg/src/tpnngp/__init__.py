"""Scale mixtures of neural network Gaussian processes.

Modules
-------
kernels        closed-form NNGP and NTK recursions
distributions  multivariate t and priors on the readout variance
posterior      infinite-width limits and exact t-process posteriors
impsampling    importance sampling for general scale priors
svi            SVGP / SVTP for softmax likelihoods
finitenet      finite-width networks used as empirical oracles
workflows      datasets, configs and the command-line workflows
"""

from .distributions import BurrXII, InvGamma, MvtParams, PointMass, parse_prior
from .kernels import Activation, GramPair, NetworkConfig, nngp_gram, ntk_gram
from .posterior import RegressionTask, bayes_posterior, ntk_train_limit, prior_limit, readout_train_limit

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "BurrXII",
    "GramPair",
    "InvGamma",
    "MvtParams",
    "NetworkConfig",
    "PointMass",
    "RegressionTask",
    "bayes_posterior",
    "nngp_gram",
    "ntk_gram",
    "ntk_train_limit",
    "parse_prior",
    "prior_limit",
    "readout_train_limit",
]
