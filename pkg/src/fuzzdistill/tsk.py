"""First-order TSK fuzzy classifier: Gaussian antecedents, affine consequents.

For input x (D,) and rules r = 1..R::

    log mu[r, d] = -(x_d - c[r, d])^2 / (2 sigma[r, d]^2)
    log f[r]     = sum_d log mu[r, d]          (product T-norm)
    fbar         = softmax(log f)              (normalized firing)
    Y[r]         = A[r] @ x + b[r]             (rule consequents, C each)
    logits       = sum_r fbar[r] Y[r]
    probs        = softmax(logits)

Firing strengths are only ever handled in log space. With D = 64 the
product of memberships underflows float64 long before training ends.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from .container import read_container, write_container
from .errors import DimensionError, FormatError, ValidationError
from .pca import PcaTransform

log = logging.getLogger(__name__)

SIGMA_CLAMP = 1e-3
CHECKPOINT_KIND = "tsk-student"
CHECKPOINT_FORMAT = 1

PARAM_NAMES = ("centers", "sigmas", "consequent_A", "consequent_b")


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def membership_log(x_d, c, sigma):
    """Log of the Gaussian membership of ``x_d`` in a set centered at ``c``."""
    return -((x_d - c) ** 2) / (2.0 * sigma ** 2)


@dataclass
class TskModel:
    centers: np.ndarray  # (R, D)
    sigmas: np.ndarray  # (R, D)
    consequent_A: np.ndarray  # (R, C, D)
    consequent_b: np.ndarray  # (R, C)

    def __post_init__(self):
        r, d = self.centers.shape
        if self.sigmas.shape != (r, d):
            raise DimensionError(f"sigmas {self.sigmas.shape} != centers {(r, d)}")
        if self.consequent_A.ndim != 3 or self.consequent_A.shape[0] != r or self.consequent_A.shape[2] != d:
            raise DimensionError(f"consequent_A has shape {self.consequent_A.shape}")
        if self.consequent_b.shape != self.consequent_A.shape[:2]:
            raise DimensionError(f"consequent_b has shape {self.consequent_b.shape}")
        if np.any(self.sigmas <= 0):
            raise ValidationError("sigmas must be strictly positive")

    @classmethod
    def from_antecedents(cls, centers, sigmas, n_classes):
        """Zero consequents, so the untrained model predicts a uniform distribution."""
        centers = np.array(centers, dtype=np.float64)
        sigmas = np.maximum(np.array(sigmas, dtype=np.float64), SIGMA_CLAMP)
        r, d = centers.shape
        return cls(centers, sigmas, np.zeros((r, n_classes, d)), np.zeros((r, n_classes)))

    @property
    def dims(self):
        r, c, d = self.consequent_A.shape
        return r, d, c

    @property
    def n_rules(self):
        return self.centers.shape[0]

    @property
    def n_inputs(self):
        return self.centers.shape[1]

    @property
    def n_classes(self):
        return self.consequent_b.shape[1]

    def n_params(self):
        r, d, c = self.dims
        return r * (2 * d + c * d + c)

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return TskModel(*(getattr(self, name).copy() for name in PARAM_NAMES))

    def clamp_sigmas(self, floor=SIGMA_CLAMP):
        low = self.sigmas < floor
        if low.any():
            log.debug("clamping %d sigma entries to %g", int(low.sum()), floor)
            np.maximum(self.sigmas, floor, out=self.sigmas)
        return int(low.sum())

    def predict_proba(self, x):
        return forward(self, x).probs

    def predict(self, x):
        return np.argmax(forward(self, x).logits, axis=-1)


@dataclass
class ForwardTrace:
    """Intermediate quantities of one forward pass.

    Arrays carry a leading batch axis when the input was a batch and no
    batch axis for a single sample.
    """

    x: np.ndarray
    log_memberships: np.ndarray  # (R, D)
    log_firing: np.ndarray  # (R,)
    norm_firing: np.ndarray  # (R,)
    rule_outputs: np.ndarray  # (R, C)
    logits: np.ndarray  # (C,)
    probs: np.ndarray  # (C,)


@dataclass
class TskGradients:
    centers: np.ndarray
    sigmas: np.ndarray
    consequent_A: np.ndarray
    consequent_b: np.ndarray

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def forward(model: TskModel, x) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != model.n_inputs:
        raise DimensionError(f"model expects {model.n_inputs} inputs, got shape {x.shape}")

    log_mu = membership_log(xb[:, None, :], model.centers[None], model.sigmas[None])
    log_f = log_mu.sum(axis=2)
    fbar = softmax(log_f, axis=1)
    rule_out = np.einsum("rcd,bd->brc", model.consequent_A, xb) + model.consequent_b[None]
    logits = np.einsum("br,brc->bc", fbar, rule_out)
    probs = softmax(logits, axis=1)

    if single:
        return ForwardTrace(x, log_mu[0], log_f[0], fbar[0], rule_out[0], logits[0], probs[0])
    return ForwardTrace(xb, log_mu, log_f, fbar, rule_out, logits, probs)


def backward(model: TskModel, x, dL_dlogits, trace: ForwardTrace) -> TskGradients:
    """Gradients of a loss with respect to every parameter, given dL/dlogits.

    For a batch the gradients are summed over samples; scale ``dL_dlogits``
    beforehand to get a mean.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(dL_dlogits, dtype=np.float64)
    if x.ndim == 1:
        x, g = x[None], g[None]
        fbar, rule_out = trace.norm_firing[None], trace.rule_outputs[None]
    else:
        fbar, rule_out = trace.norm_firing, trace.rule_outputs
    b, r = fbar.shape
    c = g.shape[1]

    weighted = fbar[:, :, None] * g[:, None, :]  # (B, R, C)
    grad_b = weighted.sum(axis=0)
    grad_A = (weighted.reshape(b, r * c).T @ x).reshape(r, c, x.shape[1])

    # softmax backward: d log f_r = fbar_r (s_r - sum_k fbar_k s_k), s_r = g . Y_r
    s = np.einsum("bc,brc->br", g, rule_out)
    dlogf = fbar * (s - np.sum(fbar * s, axis=1, keepdims=True))

    diff = x[:, None, :] - model.centers[None]  # (B, R, D)
    inv_var = 1.0 / model.sigmas ** 2
    grad_c = np.einsum("br,brd->rd", dlogf, diff) * inv_var
    grad_sigma = np.einsum("br,brd->rd", dlogf, diff * diff) * inv_var / model.sigmas
    return TskGradients(grad_c, grad_sigma, grad_A, grad_b)


def save_checkpoint(path, model: TskModel, pca: PcaTransform | None = None, meta=None):
    arrays = dict(model.params())
    if pca is not None:
        arrays["pca_mean"] = pca.mean
        arrays["pca_components"] = pca.components
        arrays["pca_explained_variance"] = pca.explained_variance
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    header_meta = {"format": CHECKPOINT_FORMAT, "dims": list(model.dims), "meta": meta or {}}
    write_container(path, CHECKPOINT_KIND, arrays, header_meta)


def load_checkpoint(path):
    """Return ``(model, pca_or_None, meta)``."""
    _, arrays, header_meta = read_container(path, CHECKPOINT_KIND)
    if header_meta.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: student checkpoint format {header_meta.get('format')}")
    model = TskModel(*(arrays[name] for name in PARAM_NAMES))
    pca = None
    if "pca_mean" in arrays:
        pca = PcaTransform(
            arrays["pca_mean"], arrays["pca_components"], arrays["pca_explained_variance"]
        )
    return model, pca, header_meta["meta"]
