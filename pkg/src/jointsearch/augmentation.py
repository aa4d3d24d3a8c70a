"""Augmentation search space: operations, learnable parameters, policies.

A policy is a sequence of ``K`` slots. Slot ``k`` picks an operation from
``softmax(pi[k])``, an apply flag from ``sigmoid(prob_logits[k, op])`` and a
magnitude bin from ``softmax(delta[k, op])``. The bin is drawn even when the
flag is off, so a sampled :class:`Policy` always carries all three fields.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

N_MAGNITUDE_BINS = 10
DEFAULT_CAP = 10**6


@dataclass(frozen=True)
class AugOpKind:
    id: int
    name: str
    lo: float
    hi: float
    unit: str

    @property
    def uses_magnitude(self) -> bool:
        return self.unit != "none"

    def magnitude(self, bin_index: int, n_bins: int = N_MAGNITUDE_BINS) -> float:
        """Real magnitude of a bin: uniform spacing from ``lo`` (bin 0) to ``hi`` (last bin)."""
        if n_bins == 1:
            return self.lo
        return self.lo + (self.hi - self.lo) * bin_index / (n_bins - 1)


AUG_OPS: tuple[AugOpKind, ...] = (
    AugOpKind(0, "shear_x", -0.3, 0.3, "shear"),
    AugOpKind(1, "shear_y", -0.3, 0.3, "shear"),
    AugOpKind(2, "translate_x", -0.45, 0.45, "fraction_of_width"),
    AugOpKind(3, "translate_y", -0.45, 0.45, "fraction_of_width"),
    AugOpKind(4, "rotate", -30.0, 30.0, "degrees"),
    AugOpKind(5, "auto_contrast", 0.0, 0.0, "none"),
    AugOpKind(6, "invert", 0.0, 0.0, "none"),
    AugOpKind(7, "equalize", 0.0, 0.0, "none"),
    AugOpKind(8, "solarize", 1.0, 0.0, "threshold"),
    AugOpKind(9, "posterize", 8.0, 4.0, "bits"),
    AugOpKind(10, "contrast", 0.1, 1.9, "factor"),
    AugOpKind(11, "color", 0.1, 1.9, "factor"),
    AugOpKind(12, "brightness", 0.1, 1.9, "factor"),
    AugOpKind(13, "sharpness", 0.1, 1.9, "factor"),
    AugOpKind(14, "cutout", 0.0, 0.6, "fraction_of_width"),
)
AUG_OP_NAMES = tuple(op.name for op in AUG_OPS)


class PolicySpaceTooLarge(ValueError):
    def __init__(self, cardinality: int, cap: int):
        self.cardinality = cardinality
        self.cap = cap
        super().__init__(f"policy space has {cardinality} outcomes, above the cap of {cap}")


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


@dataclass
class AugParams:
    """Learnable augmentation parameters (also used as the container for their gradients)."""

    pi: np.ndarray
    prob_logits: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        self.prob_logits = np.asarray(self.prob_logits, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.float64)
        k, n = self.pi.shape
        if k < 1 or self.prob_logits.shape != (k, n) or self.delta.shape[:2] != (k, n) or self.delta.ndim != 3:
            raise ValueError(
                f"inconsistent AugParams shapes: pi {self.pi.shape}, prob_logits "
                f"{self.prob_logits.shape}, delta {self.delta.shape}"
            )

    @classmethod
    def initial(cls, k: int = 2, n_ops: int = len(AUG_OPS), n_bins: int = N_MAGNITUDE_BINS, prob_logit: float = 0.0):
        """Uniform sampling weights and magnitudes, apply probability ``sigmoid(prob_logit)``."""
        return cls(np.zeros((k, n_ops)), np.full((k, n_ops), float(prob_logit)), np.zeros((k, n_ops, n_bins)))

    @classmethod
    def random(cls, rng: np.random.Generator, k: int = 2, n_ops: int = len(AUG_OPS), n_bins: int = N_MAGNITUDE_BINS, scale: float = 1.0):
        return cls(
            rng.normal(0, scale, (k, n_ops)), rng.normal(0, scale, (k, n_ops)), rng.normal(0, scale, (k, n_ops, n_bins))
        )

    @property
    def k(self) -> int:
        return self.pi.shape[0]

    @property
    def n_ops(self) -> int:
        return self.pi.shape[1]

    @property
    def n_bins(self) -> int:
        return self.delta.shape[2]

    @property
    def size(self) -> int:
        return self.pi.size + self.prob_logits.size + self.delta.size

    def op_probs(self) -> np.ndarray:
        return _softmax(self.pi, axis=1)

    def apply_probs(self) -> np.ndarray:
        return _sigmoid(self.prob_logits)

    def magnitude_probs(self) -> np.ndarray:
        return _softmax(self.delta, axis=2)

    def restricted(self, n_ops: int | None = None, n_bins: int | None = None) -> "AugParams":
        """The sub-space over the first ``n_ops`` operations and ``n_bins`` bins."""
        n_ops = self.n_ops if n_ops is None else n_ops
        n_bins = self.n_bins if n_bins is None else n_bins
        return AugParams(self.pi[:, :n_ops].copy(), self.prob_logits[:, :n_ops].copy(), self.delta[:, :n_ops, :n_bins].copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.pi.ravel(), self.prob_logits.ravel(), self.delta.ravel()])

    def like(self, vector: np.ndarray) -> "AugParams":
        """Reshape a flat vector (as produced by :meth:`flat`) to this layout."""
        a, b = self.pi.size, self.prob_logits.size
        vector = np.asarray(vector)
        return AugParams(
            vector[:a].reshape(self.pi.shape),
            vector[a : a + b].reshape(self.prob_logits.shape),
            vector[a + b :].reshape(self.delta.shape),
        )

    def zeros_like(self) -> "AugParams":
        return AugParams(np.zeros_like(self.pi), np.zeros_like(self.prob_logits), np.zeros_like(self.delta))

    def copy(self) -> "AugParams":
        return AugParams(self.pi.copy(), self.prob_logits.copy(), self.delta.copy())

    def coordinate_labels(self) -> list[str]:
        labels = [f"pi[{k},{o}]" for k in range(self.k) for o in range(self.n_ops)]
        labels += [f"prob[{k},{o}]" for k in range(self.k) for o in range(self.n_ops)]
        labels += [f"delta[{k},{o},{m}]" for k in range(self.k) for o in range(self.n_ops) for m in range(self.n_bins)]
        return labels

    def magnitude_mask(self) -> np.ndarray:
        """Boolean mask over :meth:`flat` coordinates that belong to ``delta``."""
        mask = np.zeros(self.size, dtype=bool)
        mask[self.pi.size + self.prob_logits.size :] = True
        return mask


@dataclass(frozen=True)
class PolicySlot:
    op: int
    apply: int
    bin: int


@dataclass(frozen=True)
class Policy:
    slots: tuple[PolicySlot, ...]

    @classmethod
    def of(cls, *triples: tuple[int, int, int]) -> "Policy":
        return cls(tuple(PolicySlot(int(o), int(y), int(m)) for o, y, m in triples))

    def __len__(self) -> int:
        return len(self.slots)

    def __iter__(self):
        return iter(self.slots)

    def describe(self) -> str:
        parts = []
        for s in self.slots:
            name = AUG_OP_NAMES[s.op] if s.op < len(AUG_OP_NAMES) else f"op{s.op}"
            parts.append(f"{name}(bin={s.bin})" if s.apply else f"skip:{name}")
        return " -> ".join(parts)


@dataclass
class PolicyBatch:
    """``n`` sampled policies as integer arrays of shape (n, K)."""

    ops: np.ndarray
    applies: np.ndarray
    bins: np.ndarray

    def __len__(self) -> int:
        return self.ops.shape[0]

    def __getitem__(self, i: int) -> Policy:
        return Policy.of(*zip(self.ops[i], self.applies[i], self.bins[i]))


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs)
    return np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), probs.size - 1)


def sample_policies(params: AugParams, rng: np.random.Generator, n: int) -> PolicyBatch:
    """Draw ``n`` independent policies.

    Three uniform blocks of shape (n, K) are consumed in a fixed order (ops,
    apply flags, bins), so the stream position after a call depends only on ``n``.
    """
    k = params.k
    u_op, u_apply, u_bin = rng.random((n, k)), rng.random((n, k)), rng.random((n, k))
    op_p, ap_p, mag_p = params.op_probs(), params.apply_probs(), params.magnitude_probs()
    ops = np.empty((n, k), dtype=np.int64)
    bins = np.empty((n, k), dtype=np.int64)
    for kk in range(k):
        ops[:, kk] = _inverse_cdf(op_p[kk], u_op[:, kk])
        for o in range(params.n_ops):
            sel = ops[:, kk] == o
            if sel.any():
                bins[sel, kk] = _inverse_cdf(mag_p[kk, o], u_bin[sel, kk])
    applies = (u_apply < ap_p[np.arange(k)[None, :], ops]).astype(np.int64)
    return PolicyBatch(ops, applies, bins)


def sample_policy(params: AugParams, rng: np.random.Generator) -> Policy:
    return sample_policies(params, rng, 1)[0]


def _check_indices(params: AugParams, ops, bins):
    ops, bins = np.asarray(ops), np.asarray(bins)
    if ops.size and (ops.min() < 0 or ops.max() >= params.n_ops):
        raise IndexError(f"operation index out of range [0, {params.n_ops})")
    if bins.size and (bins.min() < 0 or bins.max() >= params.n_bins):
        raise IndexError(f"magnitude bin out of range [0, {params.n_bins})")


def policy_log_prob(params: AugParams, policy: Policy) -> tuple[float, AugParams]:
    """Exact ``log p(policy)`` and its gradient w.r.t. every augmentation parameter.

    log p = sum_k log softmax(pi_k)[o_k] + (1 - y_k) log(1 - p_k)
                  + y_k (log p_k + log softmax(delta_{k,o_k})[m_k])

    with ``p_k = sigmoid(prob_logits[k, o_k])``. The magnitude term only enters
    for applied slots.
    """
    if len(policy) != params.k:
        raise ValueError(f"policy has {len(policy)} slots, parameters have {params.k}")
    ops = [s.op for s in policy]
    bins = [s.bin for s in policy]
    _check_indices(params, ops, bins)
    grad = params.zeros_like()
    logp = 0.0
    log_pi = _log_softmax(params.pi, axis=1)
    for k, s in enumerate(policy):
        o, y, m = s.op, s.apply, s.bin
        logp += log_pi[k, o]
        grad.pi[k] = -np.exp(log_pi[k])
        grad.pi[k, o] += 1.0
        z = params.prob_logits[k, o]
        p = float(_sigmoid(z))
        if y:
            log_delta = _log_softmax(params.delta[k, o])
            logp += float(_log_sigmoid(z)) + log_delta[m]
            grad.prob_logits[k, o] = 1.0 - p
            grad.delta[k, o] = -np.exp(log_delta)
            grad.delta[k, o, m] += 1.0
        else:
            logp += float(_log_sigmoid(-z))
            grad.prob_logits[k, o] = -p
    return float(logp), grad


def policy_scores(params: AugParams, batch: PolicyBatch, constant_magnitude_grad: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`policy_log_prob` over a batch.

    Returns ``(log_probs (n,), grads (n, params.size))`` with gradients in the
    :meth:`AugParams.flat` layout.

    ``constant_magnitude_grad`` swaps the magnitude block of the score for a
    constant 1 on the applied op's bins. It exists only to build the biased
    ablation that treats non-differentiable magnitudes as having unit gradient;
    the search never sets it.
    """
    _check_indices(params, batch.ops, batch.bins)
    n, k = batch.ops.shape
    n_ops, n_bins = params.n_ops, params.n_bins
    rows = np.arange(n)[:, None]
    slot = np.arange(k)[None, :]
    cell = slot * n_ops + batch.ops  # (slot, op) position in the flat pi / prob blocks
    log_pi = _log_softmax(params.pi, axis=1)
    z = params.prob_logits.ravel()[cell]
    p = _sigmoid(z)
    log_delta = _log_softmax(params.delta, axis=2).reshape(-1, n_bins)[cell]  # (n, k, bins)
    y = batch.applies.astype(np.float64)
    log_m = np.take_along_axis(log_delta, batch.bins[..., None], axis=2)[..., 0]
    logp = (log_pi.ravel()[cell] + y * (_log_sigmoid(z) + log_m) + (1 - y) * _log_sigmoid(-z)).sum(axis=1)

    a = params.pi.size
    grads = np.zeros((n, params.size))
    grads[:, :a] = -np.exp(log_pi).ravel()
    grads[rows, cell] += 1.0
    grads[rows, a + cell] = y - p
    if constant_magnitude_grad:
        block = np.ones((n, k, n_bins))
    else:
        block = -np.exp(log_delta)
        block[rows, slot, batch.bins] += 1.0
    cols = 2 * a + cell[..., None] * n_bins + np.arange(n_bins)
    grads[rows[..., None], cols] = block * y[..., None]
    return logp, grads


def policy_space_size(k: int, n_ops: int, n_bins: int) -> int:
    return (n_ops * 2 * n_bins) ** k


def enumerate_policy_arrays(params: AugParams, cap: int = DEFAULT_CAP) -> tuple[PolicyBatch, np.ndarray]:
    """Every (op, apply, bin) record for every slot and its joint sampling probability.

    The probability of a record includes the bin draw even when the slot is not
    applied, so the table sums to one; marginalizing the unused bin recovers
    :func:`policy_log_prob`.
    """
    k, n_ops, n_bins = params.k, params.n_ops, params.n_bins
    size = policy_space_size(k, n_ops, n_bins)
    if size > cap:
        raise PolicySpaceTooLarge(size, cap)
    per_slot = np.array(list(itertools.product(range(n_ops), (0, 1), range(n_bins))), dtype=np.int64)
    op_p, ap_p, mag_p = params.op_probs(), params.apply_probs(), params.magnitude_probs()
    slot_probs = []
    for kk in range(k):
        o, y, m = per_slot.T
        slot_probs.append(op_p[kk, o] * np.where(y == 1, ap_p[kk, o], 1 - ap_p[kk, o]) * mag_p[kk, o, m])
    idx = np.array(list(itertools.product(range(len(per_slot)), repeat=k)), dtype=np.int64).reshape(-1, k)
    records = per_slot[idx]  # (P, k, 3)
    probs = np.ones(len(idx))
    for kk in range(k):
        probs = probs * slot_probs[kk][idx[:, kk]]
    batch = PolicyBatch(records[..., 0].copy(), records[..., 1].copy(), records[..., 2].copy())
    return batch, probs


def enumerate_policy_space(
    params: AugParams, n_ops: int | None = None, n_bins: int | None = None, cap: int = DEFAULT_CAP
) -> list[tuple[Policy, float]]:
    """Exhaustive list of policies with probabilities, optionally over a restricted sub-space."""
    if n_ops is not None or n_bins is not None:
        params = params.restricted(n_ops, n_bins)
    batch, probs = enumerate_policy_arrays(params, cap)
    return [(batch[i], float(probs[i])) for i in range(len(batch))]


# --------------------------------------------------------------------------- transforms
#
# All transforms take a float batch (B, C, H, W) in [0, 1] and return a new
# array. Geometric ones resample bilinearly around the image centre with zero
# fill outside the source image.


def _affine(batch: np.ndarray, matrix: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Resample with ``input = matrix @ (output - centre) + centre + shift`` in (row, col)."""
    h, w = batch.shape[2:]
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    full = np.eye(4)
    full[2:, 2:] = matrix
    offset = np.zeros(4)
    offset[2:] = centre - matrix @ centre + shift
    out = ndimage.affine_transform(batch, full, offset=offset, order=1, mode="constant", cval=0.0, prefilter=False)
    return out.astype(batch.dtype, copy=False)


def shear_x(batch, s):
    if s == 0:
        return batch.copy()
    return _affine(batch, np.array([[1.0, 0.0], [s, 1.0]]), np.zeros(2))


def shear_y(batch, s):
    if s == 0:
        return batch.copy()
    return _affine(batch, np.array([[1.0, s], [0.0, 1.0]]), np.zeros(2))


def translate_x(batch, frac):
    if frac == 0:
        return batch.copy()
    return _affine(batch, np.eye(2), np.array([0.0, -frac * batch.shape[3]]))


def translate_y(batch, frac):
    if frac == 0:
        return batch.copy()
    return _affine(batch, np.eye(2), np.array([-frac * batch.shape[2], 0.0]))


def rotate(batch, degrees):
    """Counter-clockwise rotation by ``degrees`` about the image centre."""
    if degrees == 0:
        return batch.copy()
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    # (row, col) with rows growing downwards: output offsets map back to input
    # offsets through this matrix for an on-screen counter-clockwise turn
    return _affine(batch, np.array([[c, s], [-s, c]]), np.zeros(2))


def auto_contrast(batch, _=None):
    lo = batch.min(axis=(2, 3), keepdims=True)
    hi = batch.max(axis=(2, 3), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1)
    return np.where(span > 0, (batch - lo) / safe, batch)


def invert(batch, _=None):
    return 1.0 - batch


def equalize(batch, _=None):
    """Per-channel histogram equalization over 256 grey levels."""
    levels = np.clip(np.round(batch * 255), 0, 255).astype(np.int64)
    out = np.empty_like(batch)
    b, c = batch.shape[:2]
    for i in range(b):
        for ch in range(c):
            q = levels[i, ch]
            hist = np.bincount(q.ravel(), minlength=256)
            nonzero = hist[hist > 0]
            step = (nonzero.sum() - nonzero[-1]) // 255 if nonzero.size else 0
            if step == 0:
                out[i, ch] = q / 255.0
                continue
            lut = (np.concatenate([[0], np.cumsum(hist)[:-1]]) + step // 2) // step
            out[i, ch] = np.clip(lut, 0, 255)[q] / 255.0
    return out


def solarize(batch, threshold):
    """Invert pixels whose 8-bit level is at least ``256 * threshold``."""
    return np.where(batch * 255 >= 256 * threshold, 1.0 - batch, batch)


def posterize(batch, bits):
    bits = int(round(bits))
    shift = 8 - bits
    q = np.clip(np.floor(batch * 255), 0, 255).astype(np.int64)
    return ((q >> shift) << shift) / 255.0


def _grey(batch):
    if batch.shape[1] == 3:
        w = np.array([0.299, 0.587, 0.114], dtype=batch.dtype)
        return np.einsum("bchw,c->bhw", batch, w)[:, None]
    return batch.mean(axis=1, keepdims=True)


def _blend(degenerate, batch, factor):
    return degenerate + factor * (batch - degenerate)


def contrast(batch, factor):
    mean = _grey(batch).mean(axis=(2, 3), keepdims=True)
    return _blend(mean, batch, factor)


def color(batch, factor):
    return _blend(_grey(batch), batch, factor)


def brightness(batch, factor):
    return batch * factor


def sharpness(batch, factor):
    kernel = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0
    smooth = batch.copy()
    h, w = batch.shape[2:]
    acc = np.zeros(batch.shape[:2] + (h - 2, w - 2))
    for i in range(3):
        for j in range(3):
            acc += kernel[i, j] * batch[:, :, i : i + h - 2, j : j + w - 2]
    smooth[:, :, 1:-1, 1:-1] = acc
    return _blend(smooth, batch, factor)


CUTOUT_FILL = 0.5


def cutout_mask(h: int, w: int, frac: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of a square of side ``round(frac * w)`` placed uniformly inside the image."""
    side = int(round(frac * w))
    mask = np.zeros((h, w), dtype=bool)
    side = min(side, h, w)
    if side <= 0:
        return mask
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    mask[top : top + side, left : left + side] = True
    return mask


def cutout(batch, frac, rngs: Sequence[np.random.Generator]):
    out = batch.copy()
    h, w = batch.shape[2:]
    for i, r in enumerate(rngs):
        out[i][:, cutout_mask(h, w, frac, r)] = CUTOUT_FILL
    return out


_TRANSFORMS = {
    "shear_x": shear_x,
    "shear_y": shear_y,
    "translate_x": translate_x,
    "translate_y": translate_y,
    "rotate": rotate,
    "auto_contrast": auto_contrast,
    "invert": invert,
    "equalize": equalize,
    "solarize": solarize,
    "posterize": posterize,
    "contrast": contrast,
    "color": color,
    "brightness": brightness,
    "sharpness": sharpness,
}


def apply_op(batch: np.ndarray, op: int, value: float, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    name = AUG_OPS[op].name
    if name == "cutout":
        out = cutout(batch, value, rngs)
    else:
        out = _TRANSFORMS[name](batch, value)
    return np.clip(out, 0.0, 1.0).astype(batch.dtype, copy=False)


def image_rngs(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Counter-derived per-image streams: image ``i`` sees the same stream however the batch is split."""
    base = int(rng.integers(0, 2**63 - 1))
    return [np.random.default_rng([base, i]) for i in range(n)]


def apply_policy(
    policy: Policy,
    batch: np.ndarray,
    rng: np.random.Generator | None = None,
    n_bins: int = N_MAGNITUDE_BINS,
    rngs: Sequence[np.random.Generator] | None = None,
) -> np.ndarray:
    """Apply the applied slots of ``policy`` in order to every image of ``batch``.

    Per-image randomness comes from ``rngs`` if given, else from streams
    derived from ``rng`` by :func:`image_rngs`.
    """
    if rngs is None:
        rngs = image_rngs(rng, batch.shape[0])
    out = batch
    for slot in policy:
        if not slot.apply:
            continue
        value = AUG_OPS[slot.op].magnitude(slot.bin, n_bins)
        out = apply_op(out, slot.op, value, rngs)
    return out if out is not batch else batch.copy()


def apply_fixed(batch: np.ndarray, ops: Iterable[tuple[int, float]], rng: np.random.Generator) -> np.ndarray:
    """Apply ``(op, real magnitude)`` pairs in order."""
    rngs = image_rngs(rng, batch.shape[0])
    out = batch
    for op, value in ops:
        out = apply_op(out, op, value, rngs)
    return out if out is not batch else batch.copy()
