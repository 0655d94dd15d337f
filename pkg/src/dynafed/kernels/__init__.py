"""Hot MLP kernels used by local training, finetuning and evaluation.

The Cython extension ``_mlp`` is used when it was built; otherwise the
numpy implementation in ``_fallback`` is used.  Set ``DYNAFED_BACKEND`` to
``python`` or ``compiled`` to force a choice (``compiled`` raises if the
extension is missing).
"""
import os
from types import SimpleNamespace

import numpy as np

from . import _fallback

try:
    from . import _mlp as _compiled
except ImportError:  # extension not built
    _compiled = None

HAVE_COMPILED = _compiled is not None


def get_backend(name: str = "auto"):
    if name == "python":
        mod = _fallback
    elif name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        mod = _compiled
    elif name == "auto":
        mod = _compiled if _compiled is not None else _fallback
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    label = "compiled" if mod is _compiled else "python"
    return SimpleNamespace(
        name=label,
        mlp_logits=mod.mlp_logits,
        mlp_loss_grad=mod.mlp_loss_grad,
        adam_step=mod.adam_step,
    )


_active = get_backend(os.environ.get("DYNAFED_BACKEND", "auto"))
BACKEND = _active.name


def sizes_array(layer_sizes) -> np.ndarray:
    return np.ascontiguousarray(layer_sizes, dtype=np.int64)


def mlp_logits(params, sizes, X):
    return _active.mlp_logits(params, sizes, np.ascontiguousarray(X, dtype=np.float64))


def mlp_loss_grad(params, sizes, X, T, grad):
    return _active.mlp_loss_grad(
        params,
        sizes,
        np.ascontiguousarray(X, dtype=np.float64),
        np.ascontiguousarray(T, dtype=np.float64),
        grad,
    )


def adam_step(params, grad, m, v, t, lr, beta1, beta2, eps):
    _active.adam_step(params, grad, m, v, int(t), float(lr), float(beta1), float(beta2), float(eps))
