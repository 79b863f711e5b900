"""Hand-built models and datasets shared by the test modules."""

import numpy as np

from deepiv.core import ParameterSet
from deepiv.data import Dataset
from deepiv.outcome import OutcomeModel
from deepiv.treatment import TreatmentModel


def make_data(p, z, x=None, y=None):
    n = len(p)
    x = np.empty((n, 0)) if x is None else np.asarray(x, dtype=float).reshape(n, -1)
    z = np.asarray(z, dtype=float).reshape(n, -1)
    y = np.zeros(n) if y is None else y
    return Dataset(x, z, p, y, [f"x{i}" for i in range(x.shape[1])], [f"z{i}" for i in range(z.shape[1])])


def normal_treatment(mu=0.0, sigma=1.0, n_x=0, n_z=1):
    """Treatment model whose density is N(mu, sigma^2) whatever the inputs."""
    w = np.zeros((3, n_x + n_z))
    b = np.array([0.0, mu, np.log(np.expm1(sigma - 1e-3))])
    return TreatmentModel(ParameterSet([w], [b], ["identity"]), "mixture", 1,
                          [f"x{i}" for i in range(n_x)], [f"z{i}" for i in range(n_z)],
                          np.zeros(n_x + n_z), np.ones(n_x + n_z))


def linear_outcome(theta=1.0, bias=0.0):
    """``h(p) = theta * p + bias`` with no covariates and identity scaling."""
    net = ParameterSet([np.array([[theta]])], [np.array([bias])], ["identity"])
    return OutcomeModel(net, [], np.zeros(0), np.ones(0))
