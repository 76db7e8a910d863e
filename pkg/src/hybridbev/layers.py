"""Conv-BatchNorm-ReLU blocks shared by the camera refinement, radar encoder and fusion."""
from __future__ import annotations

from typing import Tuple

import numpy as np

from . import tensor as T
from .params import Params


def init_cbr(rng: np.random.Generator, cin: int, cout: int, k: int = 3) -> Params:
    return {
        "w": rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k)),
        "b": np.zeros(cout),
        "gamma": np.ones(cout),
        "beta": np.zeros(cout),
        "mean": np.zeros(cout),
        "var": np.ones(cout),
    }


# running statistics are fixed buffers, never optimised
BUFFERS = ("mean", "var")


def cbr_forward(x: np.ndarray, p: Params) -> Tuple[np.ndarray, tuple]:
    """3x3 (or kxk) conv with same-padding, inference batch norm, relu."""
    k = p["w"].shape[-1]
    pad = (k - 1) // 2
    z = T.conv2d(x, p["w"], p["b"], 1, pad)
    n = T.batchnorm(z, p["gamma"], p["beta"], p["mean"], p["var"])
    return T.relu(n), (x, z, n, p)


def cbr_backward(dout: np.ndarray, cache) -> Tuple[np.ndarray, Params]:
    x, z, n, p = cache
    k = p["w"].shape[-1]
    dn = T.relu_backward(dout, n)
    dz, dgamma, dbeta = T.batchnorm_backward(dn, z, p["gamma"], p["mean"], p["var"])
    dx, dw, db = T.conv2d_backward(dz, x, p["w"], 1, (k - 1) // 2)
    return dx, {"w": dw, "b": db, "gamma": dgamma, "beta": dbeta}


def cbr_block(x: np.ndarray, params: Params) -> np.ndarray:
    return cbr_forward(x, params)[0]
