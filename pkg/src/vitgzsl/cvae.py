"""Conditional VAE over image features given class attributes."""

from dataclasses import dataclass

import numpy as np

from . import diffnum as dn
from .dataset import TaintAudit
from .diffnum import Adam, Tape
from .errors import ShapeMismatch, UnseenClassInBatch, UntrainedModel
from .layers import Linear, Module


@dataclass
class LatentGaussian:
    mu: dn.Tensor
    log_var: dn.Tensor


def kl_standard_normal(mu, log_var):
    """KL(N(mu, diag(exp(log_var))) || N(0, I)) summed over latent dims,
    averaged over rows."""
    mu, log_var = dn.as_tensor(mu), dn.as_tensor(log_var)
    per = mu * mu + dn.exp(log_var) - 1.0 - log_var
    total = per.sum(axis=-1) * 0.5
    return total.mean()


class ConditionalVAE(Module):
    """Encoder ``[x, a] -> hidden -> (mu, log_var)``, decoder ``[z, a] -> hidden -> x``.

    Both are one-hidden-layer MLPs with leaky ReLU.  ``recon`` selects the
    reconstruction reduction: ``"mean"`` (squared error averaged over all
    elements) or ``"sum"`` (summed over feature dims, averaged over rows).
    """

    def __init__(self, feature_dim, attr_dim, hidden=256, latent_dim=16, recon="mean", rng=None, dtype=np.float32):
        if recon not in ("sum", "mean"):
            raise ValueError("recon must be 'sum' or 'mean'")
        self.recon = recon
        self.enc_hidden = Linear(feature_dim + attr_dim, hidden, rng, dtype=dtype)
        self.enc_mu = Linear(hidden, latent_dim, rng, dtype=dtype)
        self.enc_log_var = Linear(hidden, latent_dim, rng, dtype=dtype)
        self.dec_hidden = Linear(latent_dim + attr_dim, hidden, rng, dtype=dtype)
        self.dec_out = Linear(hidden, feature_dim, rng, dtype=dtype)
        self.trained = False

    @property
    def feature_dim(self):
        return self.dec_out.n_out

    @property
    def attr_dim(self):
        return self.dec_hidden.n_in - self.latent_dim

    @property
    def latent_dim(self):
        return self.enc_mu.n_out

    def _check(self, x, a, width, what):
        if x.shape[-1] != width:
            raise ShapeMismatch(f"{what} width {x.shape[-1]} != {width}")
        if a.shape[-1] != self.attr_dim:
            raise ShapeMismatch(f"attribute width {a.shape[-1]} != {self.attr_dim}")

    def encode(self, x, a):
        x, a = dn.as_tensor(x), dn.as_tensor(a)
        self._check(x, a, self.feature_dim, "feature")
        h = dn.leaky_relu(self.enc_hidden(dn.concat([x, a], axis=-1)))
        return LatentGaussian(self.enc_mu(h), self.enc_log_var(h))

    def decode(self, z, a):
        z, a = dn.as_tensor(z), dn.as_tensor(a)
        self._check(z, a, self.latent_dim, "latent")
        return self.dec_out(dn.leaky_relu(self.dec_hidden(dn.concat([z, a], axis=-1))))

    def elbo_loss(self, x, a, rng=None, noise=None):
        """Reconstruction error plus KL to the standard normal prior.

        ``noise`` fixes the reparameterization sample (shape of mu); otherwise
        it is drawn from ``rng``.  Returns ``(loss, {"recon", "kl"})``.
        """
        g = self.encode(x, a)
        z = reparameterize(g, rng, noise)
        diff = self.decode(z, a) - x
        sq = diff * diff
        recon = sq.sum(axis=-1).mean() if self.recon == "sum" else sq.mean()
        kl = kl_standard_normal(g.mu, g.log_var)
        return recon + kl, {"recon": recon.item(), "kl": kl.item()}


def reparameterize(g, rng=None, noise=None):
    """``z = mu + exp(log_var / 2) * eps`` with ``eps ~ N(0, I)`` held constant."""
    if noise is None:
        if rng is None:
            raise ValueError("reparameterize needs a generator or an explicit noise sample")
        noise = rng.standard_normal(g.mu.shape)
    return g.mu + dn.exp(g.log_var * 0.5) * np.asarray(noise)


def train_cvae(model, features, attributes, labels, seen_classes, epochs=100, lr=1e-3, batch_size=64, rng=None, tags=None, audit=None):
    """Fit the CVAE on seen-class (feature, attribute) pairs; returns the
    per-epoch mean (loss, recon, kl)."""
    labels = np.asarray(labels)
    unseen = np.setdiff1d(np.unique(labels), seen_classes)
    if unseen.size:
        raise UnseenClassInBatch(f"classes {unseen.tolist()} are not seen classes")
    if tags is not None:
        (audit or TaintAudit()).admit("cvae", tags)
    rng = np.random.default_rng(0) if rng is None else rng
    features = np.asarray(features, dtype=np.float64)
    attributes = np.asarray(attributes, dtype=np.float64)
    opt = Adam(model.parameters(), lr=lr)
    n = len(labels)
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            opt.zero_grad()
            with Tape() as tape:
                loss, parts = model.elbo_loss(features[idx], attributes[idx], rng)
                tape.backward(loss)
            opt.step()
            sums += len(idx) * np.array([loss.item(), parts["recon"], parts["kl"]])
        history.append(tuple(sums / n))
    model.trained = True
    return history


def sample_unseen_features(model, attribute, n, rng):
    """Decode ``n`` latent draws ``z ~ N(0, I)`` conditioned on one attribute."""
    if not model.trained:
        raise UntrainedModel("the CVAE decoder has not been trained")
    a = np.asarray(getattr(attribute, "values", attribute), dtype=np.float64)
    if n == 0:
        return np.zeros((0, model.feature_dim))
    z = rng.standard_normal((n, model.latent_dim))
    with dn.no_tape():
        return model.decode(z, np.broadcast_to(a, (n, a.shape[-1]))).data
