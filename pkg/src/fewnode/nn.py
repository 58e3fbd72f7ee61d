"""Dense numeric kernels: encoders, heads, losses, and their gradients.

Everything runs in float64 with hand-derived reverse-mode gradients; the
computation graph is fixed (two-layer graph convolution -> linear
classifier / two-layer predictor), so each forward records a slim trace
with exactly the arrays its backward pass needs.

Batched forms operate on zero-padded stacks of ego subgraphs: a padded
row has no features and no edges, so it contributes nothing to any
output or gradient, which keeps padding mathematically invisible.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

THETA_KEYS = ("enc_w1", "enc_w2", "cls_w", "cls_b", "pred_w1", "pred_b1", "pred_w2", "pred_b2")
PHI_KEYS = ("enc_w1", "enc_w2")

NORM_EPS = 1e-12  # cosine denominators below this are treated as degenerate


@dataclass(frozen=True)
class Dims:
    features: int
    hidden: int
    predictor_hidden: int
    n_classes: int


@dataclass(eq=False)
class ParamSet:
    """Trainable parameters, split into the main group (encoder + classifier
    + predictor) and the target-encoder group. The groups never share arrays."""

    dims: Dims
    theta: dict[str, np.ndarray]
    phi: dict[str, np.ndarray]

    def copy(self) -> "ParamSet":
        return ParamSet(
            dims=self.dims,
            theta={k: v.copy() for k, v in self.theta.items()},
            phi={k: v.copy() for k, v in self.phi.items()},
        )


def init_params(feature_dim: int, hidden: int, predictor_hidden: int, n_classes: int, seed: int) -> ParamSet:
    """Glorot-uniform weights (limit sqrt(6/(fan_in+fan_out))), zero biases."""
    if min(feature_dim, hidden, predictor_hidden, n_classes) <= 0:
        raise ValueError("all dimensions must be positive")
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    theta = {
        "enc_w1": glorot(feature_dim, hidden),
        "enc_w2": glorot(hidden, hidden),
        "cls_w": glorot(hidden, n_classes),
        "cls_b": np.zeros(n_classes),
        "pred_w1": glorot(hidden, predictor_hidden),
        "pred_b1": np.zeros(predictor_hidden),
        "pred_w2": glorot(predictor_hidden, hidden),
        "pred_b2": np.zeros(hidden),
    }
    phi = {
        "enc_w1": glorot(feature_dim, hidden),
        "enc_w2": glorot(hidden, hidden),
    }
    return ParamSet(Dims(feature_dim, hidden, predictor_hidden, n_classes), theta, phi)


def zero_grads(keys=THETA_KEYS, like: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(like[k]) for k in keys} if like else {}


def normalize_adjacency(adj: np.ndarray) -> np.ndarray:
    """Symmetric renormalization with self-loops: (D+I)^-1/2 (A+I) (D+I)^-1/2."""
    n = adj.shape[-1]
    scale = 1.0 / np.sqrt(adj.sum(axis=-1) + 1.0)
    return (adj + np.eye(n)) * scale[..., :, None] * scale[..., None, :]


@dataclass(eq=False)
class EncodeTrace:
    """Cached activations for the encoder backward pass."""

    ax: np.ndarray          # (B, n, d)  A_hat @ X
    back_mask: np.ndarray   # (B, n, h)  relu'(H1) times the scaled dropout mask
    ahat_center: np.ndarray  # (B, n)    center row of A_hat (symmetric, = center column)
    ah1_center: np.ndarray  # (B, h)     center row of A_hat @ H1_dropped
    w2: np.ndarray


def encode_batch(
    w1: np.ndarray,
    w2: np.ndarray,
    a_hat: np.ndarray,
    x: np.ndarray,
    ax: np.ndarray | None = None,
    *,
    dropout: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, EncodeTrace]:
    """Two-layer graph convolution over a padded ego batch.

    Returns the center-row embeddings (B, h). Dropout (train mode only)
    hits the first hidden layer with inverted scaling, consuming one
    uniform draw of shape (B, n, h) from `rng`.
    """
    if x.shape[-1] != w1.shape[0]:
        raise ValueError(f"feature dim {x.shape[-1]} does not match weights ({w1.shape[0]})")
    if ax is None:
        ax = a_hat @ x
    h1 = ax @ w1
    relu_mask = h1 > 0
    h1 = np.where(relu_mask, h1, 0.0)
    if train and dropout > 0.0:
        if rng is None:
            raise ValueError("dropout in train mode needs a generator")
        keep = 1.0 - dropout
        drop = (rng.random(h1.shape) < keep) / keep
        back_mask = relu_mask * drop
        h1 = h1 * drop
    else:
        back_mask = relu_mask.astype(np.float64)
    # only each center's row of the second layer is consumed, so the full
    # (B,n,n)@(B,n,h) product collapses to a weighted row sum
    ahat_center = a_hat[..., 0, :]
    ah1_center = np.einsum("bj,bjh->bh", ahat_center, h1)
    centers = ah1_center @ w2
    trace = EncodeTrace(
        ax=ax,
        back_mask=back_mask,
        ahat_center=ahat_center,
        ah1_center=ah1_center,
        w2=w2,
    )
    return centers, trace


def encode_backprop(trace: EncodeTrace, d_centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (d_w1, d_w2) of a scalar loss given d(center embeddings).

    The upstream gradient touches only each item's center row, so the
    second-layer backward collapses to outer products with the center
    column of A_hat.
    """
    d_w2 = trace.ah1_center.T @ d_centers
    g = d_centers @ trace.w2.T                                   # (B, h)
    d_h1 = trace.ahat_center[..., :, None] * g[..., None, :]     # (B, n, h)
    d_h1pre = d_h1 * trace.back_mask
    d_w1 = np.einsum("bnd,bnh->dh", trace.ax, d_h1pre)
    return d_w1, d_w2


def encode(
    enc_w1: np.ndarray,
    enc_w2: np.ndarray,
    ego,
    dropout: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, EncodeTrace]:
    """Encode a single ego subgraph; returns the center embedding and trace."""
    a_hat = normalize_adjacency(ego.adjacency)[None]
    x = ego.features[None]
    centers, trace = encode_batch(enc_w1, enc_w2, a_hat, x, dropout=dropout, train=train, rng=rng)
    return centers[0], trace


def classify(theta: dict[str, np.ndarray], h: np.ndarray) -> np.ndarray:
    """Unnormalized class scores h @ W + b; works on single rows or batches."""
    return h @ theta["cls_w"] + theta["cls_b"]


@dataclass(eq=False)
class PredictorTrace:
    h: np.ndarray
    relu_mask: np.ndarray
    z1: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


def predict_head(theta: dict[str, np.ndarray], h: np.ndarray) -> tuple[np.ndarray, PredictorTrace]:
    """Two-layer projection relu(h W1 + b1) W2 + b2 used against the target view."""
    a1 = h @ theta["pred_w1"] + theta["pred_b1"]
    relu_mask = a1 > 0
    z1 = np.where(relu_mask, a1, 0.0)
    p = z1 @ theta["pred_w2"] + theta["pred_b2"]
    return p, PredictorTrace(h=h, relu_mask=relu_mask, z1=z1,
                             w1=theta["pred_w1"], w2=theta["pred_w2"])


def predict_head_backprop(trace: PredictorTrace, d_p: np.ndarray):
    """Returns (d_pred_w1, d_pred_b1, d_pred_w2, d_pred_b2, d_h)."""
    d_p = np.atleast_2d(d_p)
    z1 = np.atleast_2d(trace.z1)
    h = np.atleast_2d(trace.h)
    d_w2 = z1.T @ d_p
    d_b2 = d_p.sum(axis=0)
    d_z1 = d_p @ trace.w2.T
    d_a1 = d_z1 * np.atleast_2d(trace.relu_mask)
    d_w1 = h.T @ d_a1
    d_b1 = d_a1.sum(axis=0)
    d_h = d_a1 @ trace.w1.T
    return d_w1, d_b1, d_w2, d_b2, d_h


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(scores: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Loss -log softmax(scores)[label] and its gradient softmax - onehot."""
    loss, d = softmax_cross_entropy_batch(scores[None], np.array([label]))
    return loss, d[0]


def softmax_cross_entropy_batch(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed cross-entropy over rows; gradient w.r.t. the score matrix."""
    n = scores.shape[-1]
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"label out of range 0..{n - 1}")
    z = scores - scores.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    idx = np.arange(len(labels))
    loss = float(np.sum(lse - z[idx, labels]))
    d = softmax(scores)
    d[idx, labels] -= 1.0
    return loss, d


def cosine_loss(p: np.ndarray, q: np.ndarray):
    """Negative cosine similarity with gradients for both vectors.

    Either vector with norm below 1e-12 makes the pair degenerate: the
    contribution and both gradients are zero.
    """
    total, dp, dq = cosine_loss_batch(p[None], q[None])
    return total, dp[0], dq[0]


def cosine_loss_batch(p: np.ndarray, q: np.ndarray):
    """Summed negative cosine over rows; returns (loss, d_p, d_q)."""
    np_ = np.linalg.norm(p, axis=-1)
    nq = np.linalg.norm(q, axis=-1)
    ok = (np_ > NORM_EPS) & (nq > NORM_EPS)
    sn_p = np.where(ok, np_, 1.0)
    sn_q = np.where(ok, nq, 1.0)
    cos = np.where(ok, (p * q).sum(axis=-1) / (sn_p * sn_q), 0.0)
    loss = float(-cos.sum())
    scale = ok / (sn_p * sn_q)
    d_p = (cos / sn_p**2)[..., None] * p - scale[..., None] * q
    d_q = (cos / sn_q**2)[..., None] * q - scale[..., None] * p
    d_p[~ok] = 0.0
    d_q[~ok] = 0.0
    return loss, d_p, d_q


def grad_check(
    loss_and_grad,
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    coords_per_tensor: int = 200,
    seed: int = 0,
) -> float:
    """Worst central-difference error over a seeded coordinate subsample.

    `loss_and_grad(params) -> (loss, grads)` must be deterministic in its
    randomness (keyed streams, not shared state). The returned figure is
    |fd - analytic| / max(|fd|, |analytic|, 1e-6); the floor keeps noise
    on near-zero coordinates from registering as relative error.
    """
    _, grads = loss_and_grad(params)
    worst = 0.0
    for name in sorted(params):
        tensor = params[name]
        coords = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))
        ).permutation(tensor.size)[: min(coords_per_tensor, tensor.size)]
        gradient = grads[name]
        for c in coords:
            idx = np.unravel_index(c, tensor.shape)
            orig = tensor[idx]
            tensor[idx] = orig + eps
            lo_plus, _ = loss_and_grad(params)
            tensor[idx] = orig - eps
            lo_minus, _ = loss_and_grad(params)
            tensor[idx] = orig
            if not (np.isfinite(lo_plus) and np.isfinite(lo_minus)):
                raise FloatingPointError(f"non-finite loss while probing {name}[{c}]")
            fd = (lo_plus - lo_minus) / (2.0 * eps)
            an = gradient[idx]
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, err)
    return worst


# --- checkpoint container -------------------------------------------------
#
# Deterministic flat binary: magic, little-endian uint64 header length,
# JSON header (dims + tensor names/shapes in fixed order), then raw
# little-endian float64 payloads. No timestamps, so identical parameters
# serialize to identical bytes.

_MAGIC = b"FNPARAM1"


def save_params(path, params: ParamSet) -> None:
    tensors = [("theta/" + k, params.theta[k]) for k in THETA_KEYS]
    tensors += [("phi/" + k, params.phi[k]) for k in PHI_KEYS]
    header = {
        "dims": {
            "features": params.dims.features,
            "hidden": params.dims.hidden,
            "predictor_hidden": params.dims.predictor_hidden,
            "n_classes": params.dims.n_classes,
        },
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path) -> ParamSet:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        tensors: dict[str, np.ndarray] = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").astype(np.float64)
            tensors[spec["name"]] = data.reshape(shape)
    dims = Dims(**{
        "features": header["dims"]["features"],
        "hidden": header["dims"]["hidden"],
        "predictor_hidden": header["dims"]["predictor_hidden"],
        "n_classes": header["dims"]["n_classes"],
    })
    theta = {k: tensors["theta/" + k] for k in THETA_KEYS}
    phi = {k: tensors["phi/" + k] for k in PHI_KEYS}
    return ParamSet(dims=dims, theta=theta, phi=phi)
