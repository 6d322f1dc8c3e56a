"""Device embedding models, the server head, and in-place perturbation.

All trainable state lives in a single flat vector per party (``FlatParams``).
Perturbing a model for a two-point evaluation shifts that vector in place by
``lambda * u`` where the direction u is regenerated from an 8-byte seed, so
training never allocates a second model-sized buffer.  The restore after a
perturb cycle is float-exact only up to rounding; tests pin the tolerance
(1e-5 relative for float32 storage, 1e-9 for float64).
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import alloctrack
from .backend import kernels
from .errors import FormatError

KIND_LINEAR = "linear"
KIND_MLP1 = "mlp1"
KIND_SERVER_HEAD = "server_head"

_KIND_CODES = {KIND_LINEAR: 0, KIND_MLP1: 1, KIND_SERVER_HEAD: 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

_CKPT_MAGIC = b"DPZVPAR1"


def param_count(kind, shape_meta):
    if kind == KIND_LINEAR:
        n_in, n_out = shape_meta
        return n_out * n_in + n_out
    if kind in (KIND_MLP1, KIND_SERVER_HEAD):
        n_in, n_hid, n_out = shape_meta
        return n_hid * n_in + n_hid + n_out * n_hid + n_out
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass
class FlatParams:
    """A party's trainable parameters as one contiguous vector."""

    values: np.ndarray
    model_kind: str
    shape_meta: tuple

    def __post_init__(self):
        expected = param_count(self.model_kind, self.shape_meta)
        if self.values.ndim != 1 or self.values.shape[0] != expected:
            raise ValueError(
                f"{self.model_kind} with meta {self.shape_meta} needs "
                f"{expected} parameters, got shape {self.values.shape}"
            )

    @property
    def dim(self):
        return self.values.shape[0]

    @property
    def dtype(self):
        return self.values.dtype

    def views(self):
        """Weight/bias arrays as views into the flat vector (no copies)."""
        v = self.values
        if self.model_kind == KIND_LINEAR:
            n_in, n_out = self.shape_meta
            k = n_out * n_in
            return v[:k].reshape(n_out, n_in), v[k:]
        n_in, n_hid, n_out = self.shape_meta
        a = n_hid * n_in
        b = a + n_hid
        c = b + n_out * n_hid
        return (
            v[:a].reshape(n_hid, n_in),
            v[a:b],
            v[b:c].reshape(n_out, n_hid),
            v[c:],
        )


@dataclass
class DeviceModel:
    params: FlatParams
    input_dim: int
    embed_dim: int


@dataclass
class ServerHead:
    params: FlatParams
    concat_dim: int
    num_classes: int


@dataclass
class PerturbRecord:
    """Tracks where a parameter vector sits in units of lambda * u(seed)."""

    seed: int
    lam: float
    current_offset: int = 0


# -- initialization -----------------------------------------------------------


def _init_layer(stream, n_out, n_in, dtype):
    bound = 1.0 / np.sqrt(n_in)
    w = stream.uniforms(n_out * n_in, -bound, bound).astype(dtype)
    b = stream.uniforms(n_out, -bound, bound).astype(dtype)
    return w, b


def init_device_model(kind, input_dim, embed_dim, stream, hidden=None, dtype=np.float32):
    if kind == KIND_LINEAR:
        meta = (input_dim, embed_dim)
        w, b = _init_layer(stream, embed_dim, input_dim, dtype)
        flat = np.concatenate([w, b])
    elif kind == KIND_MLP1:
        if hidden is None:
            raise ValueError("mlp1 device model needs a hidden width")
        meta = (input_dim, hidden, embed_dim)
        w1, b1 = _init_layer(stream, hidden, input_dim, dtype)
        w2, b2 = _init_layer(stream, embed_dim, hidden, dtype)
        flat = np.concatenate([w1, b1, w2, b2])
    else:
        raise ValueError(f"unsupported device model kind {kind!r}")
    return DeviceModel(FlatParams(flat, kind, meta), input_dim, embed_dim)


def init_server_head(concat_dim, hidden, num_classes, stream, dtype=np.float32):
    meta = (concat_dim, hidden, num_classes)
    w1, b1 = _init_layer(stream, hidden, concat_dim, dtype)
    w2, b2 = _init_layer(stream, num_classes, hidden, dtype)
    flat = np.concatenate([w1, b1, w2, b2])
    return ServerHead(FlatParams(flat, KIND_SERVER_HEAD, meta), concat_dim, num_classes)


# -- operations ---------------------------------------------------------------


def forward_embedding(model, batch_features):
    """Embedding rows for a feature batch; deterministic given the params."""
    X = np.ascontiguousarray(batch_features, dtype=model.params.dtype)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ValueError(
            f"feature width {X.shape} does not match input_dim {model.input_dim}"
        )
    alloctrack.record("device.embed", X.shape[0] * model.embed_dim)
    if model.params.model_kind == KIND_LINEAR:
        W, b = model.params.views()
        return kernels.linear_forward(X, W, b)
    W1, b1, W2, b2 = model.params.views()
    return kernels.mlp1_forward(X, W1, b1, W2, b2)


def perturb_in_place(params, record, target_offset, sampler):
    """Shift params to ``target_offset`` lambda-units along u(record.seed).

    The direction is regenerated chunk by chunk; no second parameter buffer
    is allocated (verified by the allocation hook in tests).
    """
    if record.current_offset not in (-1, 0, 1) or target_offset not in (-1, 0, 1):
        raise ValueError("perturb offsets must be in {-1, 0, +1}")
    step = target_offset - record.current_offset
    if step != 0:
        sampler.add_scaled(record.seed, step * record.lam, params.values)
    record.current_offset = target_offset


def _check_head_batch(head, concat_embeddings, labels):
    H = np.ascontiguousarray(concat_embeddings)
    y = np.ascontiguousarray(labels, dtype=np.int64)
    if H.ndim != 2 or H.shape[1] != head.concat_dim:
        raise ValueError(
            f"embedding width {H.shape} does not match concat_dim {head.concat_dim}"
        )
    if y.ndim != 1 or y.shape[0] != H.shape[0]:
        raise ValueError("labels must align with embedding rows")
    if y.size and (y.min() < 0 or y.max() >= head.num_classes):
        raise ValueError(f"labels must lie in [0, {head.num_classes})")
    return H, y


def head_loss(head, concat_embeddings, labels):
    """Per-sample softmax cross-entropy losses (float64)."""
    H, y = _check_head_batch(head, concat_embeddings, labels)
    W1, b1, W2, b2 = head.params.views()
    return kernels.head_losses(H, W1, b1, W2, b2, y)


def head_mean_loss(head, concat_embeddings, labels):
    H, y = _check_head_batch(head, concat_embeddings, labels)
    W1, b1, W2, b2 = head.params.views()
    return kernels.head_mean_loss(H, W1, b1, W2, b2, y)


def head_gradient(head, concat_embeddings, labels):
    """Analytic gradient of the mean loss w.r.t. the flat head params."""
    flat, _ = head_gradient_with_inputs(head, concat_embeddings, labels)
    return flat


def head_logits(head, concat_embeddings):
    """Raw class scores of the head (float64), used for evaluation."""
    H = np.ascontiguousarray(concat_embeddings, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != head.concat_dim:
        raise ValueError(
            f"embedding width {H.shape} does not match concat_dim {head.concat_dim}"
        )
    W1, b1, W2, b2 = head.params.views()
    z1 = H @ W1.T.astype(np.float64) + b1.astype(np.float64)
    np.maximum(z1, 0, out=z1)
    return z1 @ W2.T.astype(np.float64) + b2.astype(np.float64)


def apply_embedding_gradient(model, batch_features, embed_grads, eta):
    """Descend via the chain rule from per-sample embedding gradients.

    ``embed_grads`` rows are d(mean loss)/d(embedding row) as produced by
    :func:`head_gradient_with_inputs`; the update is exactly one SGD step on
    the composite objective, which is what the first-order baseline does.
    """
    if eta == 0:
        return
    X = np.ascontiguousarray(batch_features, dtype=np.float64)
    g = np.ascontiguousarray(embed_grads, dtype=np.float64)
    if g.shape != (X.shape[0], model.embed_dim):
        raise ValueError("embedding gradient shape does not match the batch")
    p = model.params

    def apply(target, grad):
        # f64 update saturated well inside the storage dtype's range
        # (sqrt of max), so a diverging first-order run keeps every later
        # forward product finite instead of overflowing to inf/nan
        lim = float(np.sqrt(np.finfo(p.dtype).max))
        stepped = target.astype(np.float64) - eta * grad
        target[:] = np.clip(stepped, -lim, lim).astype(p.dtype)

    if p.model_kind == KIND_LINEAR:
        W, b = p.views()
        apply(W, g.T @ X)
        apply(b, g.sum(axis=0))
        return
    W1, b1, W2, b2 = p.views()
    z1 = X @ W1.T.astype(np.float64) + b1.astype(np.float64)
    a1 = np.maximum(z1, 0)
    dz1 = (g @ W2.astype(np.float64)) * (z1 > 0)
    apply(W2, g.T @ a1)
    apply(b2, g.sum(axis=0))
    apply(W1, dz1.T @ X)
    apply(b1, dz1.sum(axis=0))


def head_gradient_with_inputs(head, concat_embeddings, labels):
    """(flat param gradient, per-sample input gradients).

    The second element is what the first-order baseline sends back to a
    device: rows are d(mean loss)/d(embedding row).
    """
    H, y = _check_head_batch(head, concat_embeddings, labels)
    W1, b1, W2, b2 = head.params.views()
    gW1, gb1, gW2, gb2, gH = kernels.head_grads(H, W1, b1, W2, b2, y)
    flat = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
    return flat, gH


# -- checkpoint format --------------------------------------------------------
#
# Fixed little-endian layout per parameter record:
#   8s  magic "DPZVPAR1"
#   B   dtype code (4 = float32, 8 = float64)
#   B   kind code (0 linear, 1 mlp1, 2 server_head)
#   H   number of shape-meta entries
#   (I per meta entry)
#   Q   parameter count
#   raw little-endian values
# A checkpoint file is a u32 record count followed by (i32 party id, record).


def _pack_params(params):
    code = 4 if params.dtype == np.float32 else 8
    head = struct.pack(
        "<8sBBH",
        _CKPT_MAGIC,
        code,
        _KIND_CODES[params.model_kind],
        len(params.shape_meta),
    )
    meta = struct.pack(f"<{len(params.shape_meta)}I", *params.shape_meta)
    count = struct.pack("<Q", params.dim)
    dt = "<f4" if code == 4 else "<f8"
    return head + meta + count + params.values.astype(dt).tobytes()


def _unpack_params(buf, offset):
    base = struct.calcsize("<8sBBH")
    if len(buf) < offset + base:
        raise FormatError("truncated checkpoint record")
    magic, code, kind_code, n_meta = struct.unpack_from("<8sBBH", buf, offset)
    if magic != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if code not in (4, 8) or kind_code not in _CODE_KINDS:
        raise FormatError("unknown dtype or kind code in checkpoint")
    offset += base
    meta = struct.unpack_from(f"<{n_meta}I", buf, offset)
    offset += 4 * n_meta
    (dim,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    nbytes = dim * code
    if len(buf) < offset + nbytes:
        raise FormatError("truncated checkpoint values")
    dt = "<f4" if code == 4 else "<f8"
    values = np.frombuffer(buf, dtype=dt, count=dim, offset=offset).copy()
    offset += nbytes
    params = FlatParams(
        values.astype(np.float32 if code == 4 else np.float64),
        _CODE_KINDS[kind_code],
        tuple(meta),
    )
    return params, offset


def save_checkpoint(path, party_params):
    """Write {party id -> FlatParams} to the documented fixed layout."""
    parts = [struct.pack("<I", len(party_params))]
    for pid in sorted(party_params):
        parts.append(struct.pack("<i", pid))
        parts.append(_pack_params(party_params[pid]))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise FormatError("truncated checkpoint file")
    (count,) = struct.unpack_from("<I", buf, 0)
    offset = 4
    out = {}
    for _ in range(count):
        if len(buf) < offset + 4:
            raise FormatError("truncated checkpoint file")
        (pid,) = struct.unpack_from("<i", buf, offset)
        offset += 4
        out[pid], offset = _unpack_params(buf, offset)
    return out
