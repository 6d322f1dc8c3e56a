"""Two-point estimation, scalar clipping, noise injection, update rules.

The scalar channel works on per-sample loss differences: each is divided by
the smoothing parameter (2*lambda by default, plain lambda selectable),
clipped to [-C, +C], averaged over the batch, and privatized with a single
scalar Gaussian draw.  The device then descends along the regenerated
perturbation direction scaled by that one number, which is the whole reason
the downlink payload is 4 bytes instead of an embedding-sized vector.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolStateError
from .model import PerturbRecord, head_gradient, head_mean_loss, perturb_in_place

TWO_LAMBDA = "two_lambda"
ONE_LAMBDA = "one_lambda"


@dataclass
class ZoConfig:
    lam: float
    divisor_mode: str = TWO_LAMBDA
    clip_c: float = 1.0
    sigma_dp: float = 0.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"smoothing parameter must be positive, got {self.lam}")
        if self.clip_c <= 0:
            raise ValueError(f"clipping threshold must be positive, got {self.clip_c}")
        if self.sigma_dp < 0:
            raise ValueError(f"noise scale must be nonnegative, got {self.sigma_dp}")
        if self.divisor_mode not in (TWO_LAMBDA, ONE_LAMBDA):
            raise ValueError(f"unknown divisor mode {self.divisor_mode!r}")

    @property
    def divisor(self):
        return 2.0 * self.lam if self.divisor_mode == TWO_LAMBDA else self.lam


@dataclass
class ScalarFeedback:
    """The privatized scalar sent downlink, with its noise draw recorded."""

    delta: float
    noise: float
    round: int = -1
    device_id: int = -1


def two_point_delta(f_plus, f_minus, cfg):
    """Finite-difference scalar (f+ - f-) / divisor."""
    if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
        raise ValueError(f"non-finite loss evaluations: {f_plus}, {f_minus}")
    return (f_plus - f_minus) / cfg.divisor


def clip_scalar(delta, clip_c):
    """Symmetric clamp to [-C, +C]; identity inside the range."""
    if delta > clip_c:
        return clip_c
    if delta < -clip_c:
        return -clip_c
    return delta


def privatize_batch(deltas, cfg, stream, round_idx=-1, device_id=-1):
    """Mean of clipped per-sample deltas plus one scalar Gaussian draw.

    The noise is a single real regardless of batch size, embedding width,
    or model dimension; it is never a vector.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.ndim != 1 or deltas.shape[0] == 0:
        raise ValueError("privatize_batch needs a nonempty 1-D batch of deltas")
    clipped = np.clip(deltas, -cfg.clip_c, cfg.clip_c)
    noise = stream.gaussian(cfg.sigma_dp)
    return ScalarFeedback(
        delta=float(clipped.mean()) + noise,
        noise=noise,
        round=round_idx,
        device_id=device_id,
    )


def device_apply_feedback(model_params, fb, eta, record, sampler):
    """w <- w - eta * delta * u(seed); u regenerated, never transmitted."""
    if record.current_offset != 0:
        raise ProtocolStateError(
            f"feedback applied at offset {record.current_offset}, params must "
            "be restored to offset 0 first"
        )
    if eta < 0:
        raise ValueError(f"learning rate must be nonnegative, got {eta}")
    coeff = -eta * fb.delta
    if coeff != 0.0:
        sampler.add_scaled(record.seed, coeff, model_params.values)


def server_zo_step(head, concat_embeddings, labels, cfg, eta0, stream, sampler):
    """One zeroth-order descent step on the head parameters.

    Perturbs w0 in place by +/- cfg.lam along a fresh direction, evaluates
    the mean loss twice, and descends along the same direction scaled by the
    two-point difference.  cfg.lam here is the server's own smoothing
    parameter; clip/noise fields are not used by the server update.
    """
    if concat_embeddings.shape[0] == 0:
        raise ProtocolStateError("server step needs a populated embedding batch")
    seed = stream.next_seed()
    record = PerturbRecord(seed=seed, lam=cfg.lam)
    perturb_in_place(head.params, record, +1, sampler)
    f_plus = head_mean_loss(head, concat_embeddings, labels)
    perturb_in_place(head.params, record, -1, sampler)
    f_minus = head_mean_loss(head, concat_embeddings, labels)
    perturb_in_place(head.params, record, 0, sampler)
    delta = two_point_delta(f_plus, f_minus, cfg)
    coeff = -eta0 * delta
    if coeff != 0.0:
        sampler.add_scaled(seed, coeff, head.params.values)
    return delta


def server_fo_step(head, concat_embeddings, labels, eta0):
    """One exact-gradient descent step on the head parameters."""
    if concat_embeddings.shape[0] == 0:
        raise ProtocolStateError("server step needs a populated embedding batch")
    if eta0 == 0:
        return
    grad = head_gradient(head, concat_embeddings, labels)
    dtype = head.params.dtype
    # saturate a runaway update well inside the dtype range so that later
    # forward products stay finite even if the run is diverging
    lim = float(np.sqrt(np.finfo(dtype).max))
    stepped = head.params.values.astype(np.float64) - eta0 * grad
    head.params.values[:] = np.clip(stepped, -lim, lim).astype(dtype)


def zo_gradient_estimate(objective, params, lam, stream):
    """g = [(f(w + lam*u) - f(w - lam*u)) / (2*lam)] * u for one sphere draw.

    Library form of the estimator over a plain flat vector; materializes the
    direction (the in-place training path does not).
    """
    if lam <= 0:
        raise ValueError(f"smoothing parameter must be positive, got {lam}")
    w = np.asarray(params, dtype=np.float64)
    u = stream.sphere(w.shape[0])
    f_plus = float(objective(w + lam * u))
    f_minus = float(objective(w - lam * u))
    if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
        raise ValueError("objective returned a non-finite value at a perturbed point")
    return ((f_plus - f_minus) / (2.0 * lam)) * u
