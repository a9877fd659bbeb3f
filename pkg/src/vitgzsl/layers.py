"""Module container, linear layers and weight initializers."""

import warnings

import numpy as np
from scipy.stats import truncnorm

from .diffnum import Parameter, gradcheck, linear
from .errors import DimMismatch, MissingTensor


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) truncated to two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def fan_in_normal(rng, shape):
    """Normal with variance 1/fan_in, fan_in being the first axis."""
    return rng.standard_normal(shape) / np.sqrt(shape[0])


class Module:
    """Parameters and child modules are discovered from instance attributes.

    Lists of modules are supported; names are dotted paths such as
    ``blocks.0.attn_q.weight``.
    """

    def _slots(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, self, key
            elif isinstance(value, Module):
                yield from value._slots(f"{prefix}{key}.")
            elif isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
                for i, child in enumerate(value):
                    yield from child._slots(f"{prefix}{key}.{i}.")

    def named_parameters(self):
        return {name: getattr(owner, attr) for name, owner, attr in self._slots()}

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: np.array(p.data, copy=True) for name, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        """Validate every tensor first, then assign; never leaves a partial model."""
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise MissingTensor(f"missing tensors: {', '.join(missing)}")
        for name, p in params.items():
            if tuple(np.shape(state[name])) != p.shape:
                raise DimMismatch(f"{name}: file shape {np.shape(state[name])} != model shape {p.shape}")
        extra = sorted(k for k in set(state) - set(params) if not k.startswith("meta."))
        if extra:
            warnings.warn(f"ignoring unknown tensors: {', '.join(extra)}", stacklevel=2)
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.data.dtype)
            p.zero_grad()


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` of shape (in, out)."""

    def __init__(self, n_in, n_out, rng=None, init="fan_in", bias=True, dtype=np.float32):
        if init == "zeros" or rng is None:
            w = np.zeros((n_in, n_out))
        elif init == "trunc_normal":
            w = trunc_normal(rng, (n_in, n_out))
        elif init == "fan_in":
            w = fan_in_normal(rng, (n_in, n_out))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w, "weight", dtype)
        self.bias = Parameter(np.zeros(n_out), "bias", dtype) if bias else None

    @property
    def n_in(self):
        return self.weight.shape[0]

    @property
    def n_out(self):
        return self.weight.shape[1]

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


def gradcheck_module(loss_fn, module, eps=1e-5, names=None):
    """Run :func:`gradcheck` on each parameter of ``module`` in turn.

    ``loss_fn()`` must rebuild the scalar loss from the module's current
    parameters.  Returns ``{name: max relative error}``.
    """
    results = {}
    for name, owner, attr in module._slots():
        if names is not None and name not in names:
            continue
        original = getattr(owner, attr)

        def f(x, owner=owner, attr=attr, original=original):
            setattr(owner, attr, x)
            try:
                return loss_fn()
            finally:
                setattr(owner, attr, original)

        results[name] = gradcheck(f, original, eps)
    return results
