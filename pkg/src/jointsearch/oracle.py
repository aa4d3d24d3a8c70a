"""Exact and finite-difference references for the augmentation-gradient estimator.

Toy problems pair an enumerable policy space with analytic losses, so every
expectation over policies is a finite sum. The mixed partial of the expected
training loss is computed by two routes that share no code with the
estimator: a complex-step derivative of the enumerated weight gradient, and
a product-rule derivative of every policy probability. The estimator's own
score function is only ever used on the right-hand side of a comparison.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .augmentation import AugParams, Policy, PolicyBatch, enumerate_policy_arrays, policy_scores, sample_policies
from .autodiff import Tape, Variable
from .search import SamplerConfig, grad_gamma

TrainFn = Callable[[np.ndarray, PolicyBatch], tuple[np.ndarray, np.ndarray]]
ValFn = Callable[[np.ndarray], tuple[float, np.ndarray]]

Z_THRESHOLD = 4.0
MAX_OUTCOMES = 10**6
_COMPLEX_STEP = 1e-30


@dataclass
class ToyProblem:
    """Analytic losses over a restricted policy space.

    ``train(theta, batch)`` returns per-policy losses ``(P,)`` and weight
    gradients ``(P, d)``; ``val(theta)`` returns the validation loss and its
    gradient. ``aug`` fixes the space layout and the default evaluation point.
    """

    name: str
    theta: np.ndarray
    aug: AugParams
    train: TrainFn
    val: ValFn
    affine_val: bool = False

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.ndim != 1 or not 1 <= self.theta.size <= 10:
            raise ValueError(f"toy weights must be a vector of 1..10 coordinates, got shape {self.theta.shape}")


# ----------------------------------------------------------------------------- probabilities


def _split(layout: AugParams, v: np.ndarray):
    a, b = layout.pi.size, layout.prob_logits.size
    return v[:a].reshape(layout.pi.shape), v[a : a + b].reshape(layout.prob_logits.shape), v[a + b :].reshape(layout.delta.shape)


def _softmax(x, axis=-1):
    e = np.exp(x - x.real.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _factors(layout: AugParams, v: np.ndarray, batch: PolicyBatch) -> np.ndarray:
    """Per-record probability factors ``(P, K, 3)``: op choice, apply flag, bin choice.

    Accepts complex parameter vectors so the complex-step route can reuse it.
    """
    pi, z, delta = _split(layout, v)
    op_p, ap, mag = _softmax(pi, 1), _sigmoid(z), _softmax(delta, 2)
    slot = np.arange(layout.k)[None, :]
    o, y, m = batch.ops, batch.applies, batch.bins
    f_op = op_p[slot, o]
    f_apply = np.where(y == 1, ap[slot, o], 1 - ap[slot, o])
    f_bin = mag[slot, o, m]
    return np.stack([f_op, f_apply, f_bin], axis=2)


def joint_probabilities(layout: AugParams, v: np.ndarray, batch: PolicyBatch) -> np.ndarray:
    return _factors(layout, v, batch).prod(axis=(1, 2))


def probability_jacobian(layout: AugParams, v: np.ndarray, batch: PolicyBatch) -> np.ndarray:
    """``d p(record) / d gamma`` of shape ``(P, size)`` by the product rule over factors."""
    pi, z, delta = _split(layout, np.asarray(v, dtype=np.float64))
    op_p, ap, mag = _softmax(pi, 1), _sigmoid(z), _softmax(delta, 2)
    fac = _factors(layout, v, batch).reshape(len(batch), -1)  # (P, 3K)
    n_f = fac.shape[1]
    others = np.stack([np.prod(np.delete(fac, j, axis=1), axis=1) for j in range(n_f)], axis=1)
    k_, n_ops, n_bins = layout.k, layout.n_ops, layout.n_bins
    off_z, off_d = pi.size, pi.size + z.size
    jac = np.zeros((len(batch), layout.size))
    rows = np.arange(len(batch))
    for k in range(k_):
        o, y, m = batch.ops[:, k], batch.applies[:, k], batch.bins[:, k]
        # op factor: d softmax(pi_k)[o] / d pi_k[j] = s_o (1[o=j] - s_j)
        s = op_p[k]
        d_op = -s[o][:, None] * s[None, :]
        d_op[rows, o] += s[o]
        jac[:, k * n_ops : (k + 1) * n_ops] += d_op * others[:, 3 * k][:, None]
        # apply factor: +-sigmoid'(z[k, o])
        a = ap[k, o]
        d_apply = np.where(y == 1, 1.0, -1.0) * a * (1 - a)
        jac[rows, off_z + k * n_ops + o] += d_apply * others[:, 3 * k + 1]
        # bin factor over delta[k, o, :]
        q = mag[k, o]  # (P, bins)
        qm = q[rows, m]
        d_bin = -qm[:, None] * q
        d_bin[rows, m] += qm
        cols = off_d + (k * n_ops + o)[:, None] * n_bins + np.arange(n_bins)[None, :]
        np.add.at(jac, (rows[:, None], cols), d_bin * others[:, 3 * k + 2][:, None])
    return jac


# ----------------------------------------------------------------------------- exact expectations


@dataclass
class ExpectedLoss:
    value: float
    grad_gamma: np.ndarray  # (size,)
    grad_theta: np.ndarray  # (d,)
    mixed: np.ndarray  # (size, d), complex-step route
    mixed_product_rule: np.ndarray  # (size, d)
    score_form: np.ndarray  # (size, d), expectation of grad_theta L * grad_gamma log p
    prob_sum: float
    outcomes: int


def _space(toy: ToyProblem, aug: AugParams | None, cap: int):
    aug = toy.aug if aug is None else aug
    batch, _ = enumerate_policy_arrays(aug, cap)
    return aug, batch


def exact_expected_training_loss(toy: ToyProblem, aug: AugParams | None = None, cap: int = MAX_OUTCOMES) -> ExpectedLoss:
    """Enumerate the policy space at ``aug`` and return the expected training loss with its derivatives."""
    aug, batch = _space(toy, aug, cap)
    v = aug.flat()
    p = joint_probabilities(aug, v, batch)
    values, grads = toy.train(toy.theta, batch)
    jac = probability_jacobian(aug, v, batch)

    mixed = np.empty((aug.size, toy.theta.size))
    for c in range(aug.size):
        shifted = v.astype(np.complex128)
        shifted[c] += 1j * _COMPLEX_STEP
        mixed[c] = (joint_probabilities(aug, shifted, batch) @ grads).imag / _COMPLEX_STEP

    _, scores = policy_scores(aug, batch)
    return ExpectedLoss(
        value=float(p @ values),
        grad_gamma=jac.T @ values,
        grad_theta=p @ grads,
        mixed=mixed,
        mixed_product_rule=jac.T @ grads,
        score_form=(scores * p[:, None]).T @ grads,
        prob_sum=float(math.fsum(p)),
        outcomes=len(batch),
    )


def exact_hypergradient(toy: ToyProblem, aug: AugParams | None = None, eta: float = 0.1, cap: int = MAX_OUTCOMES) -> np.ndarray:
    """Gradient in gamma of ``L_val(theta - eta * grad_theta E[L_train])`` by the chain rule."""
    exp = exact_expected_training_loss(toy, aug, cap)
    _, g_val = toy.val(toy.theta - eta * exp.grad_theta)
    return -eta * exp.mixed @ g_val


def unrolled_objective(toy: ToyProblem, gamma: np.ndarray, eta: float, aug: AugParams | None = None, cap: int = MAX_OUTCOMES) -> float:
    """The validation loss after one exact expected-gradient step, as a function of the flat gamma."""
    layout, batch = _space(toy, aug, cap)
    p = joint_probabilities(layout, np.asarray(gamma, dtype=np.float64), batch)
    _, grads = toy.train(toy.theta, batch)
    value, _ = toy.val(toy.theta - eta * (p @ grads))
    return float(value)


def finite_difference_hypergradient(toy: ToyProblem, aug: AugParams | None = None, eta: float = 0.1, h: float = 1e-5) -> np.ndarray:
    aug = toy.aug if aug is None else aug
    v = aug.flat()
    out = np.empty_like(v)
    for c in range(v.size):
        e = np.zeros_like(v)
        e[c] = h
        out[c] = (unrolled_objective(toy, v + e, eta, aug) - unrolled_objective(toy, v - e, eta, aug)) / (2 * h)
    return out


def exact_estimator_mean(toy: ToyProblem, m: int, aug: AugParams | None = None, eta: float = 0.1, cap: int = MAX_OUTCOMES) -> np.ndarray:
    """Exact expectation of the sampled estimator with ``m`` policies per virtual step.

    Enumerates all ordered ``m``-tuples of records. It differs from
    :func:`exact_hypergradient` only through the curvature of the validation
    loss, because the virtual step is taken with the sampled policies.
    """
    aug, batch = _space(toy, aug, cap)
    p = joint_probabilities(aug, aug.flat(), batch)
    _, grads = toy.train(toy.theta, batch)
    _, scores = policy_scores(aug, batch)
    n = len(batch)
    if n**m > cap:
        raise ValueError(f"{n}^{m} policy tuples exceed the enumeration cap {cap}")
    total = np.zeros(aug.size)
    for tup in itertools.product(range(n), repeat=m):
        idx = np.array(tup)
        weight = float(np.prod(p[idx]))
        if weight == 0.0:
            continue
        _, g_val = toy.val(toy.theta - eta * grads[idx].mean(axis=0))
        dots = grads[idx] @ g_val
        total += weight * (-eta / m) * (dots @ scores[idx])
    return total


# ----------------------------------------------------------------------------- Monte-Carlo report


class ToyTask:
    """Adapter exposing a toy problem through the search task interface."""

    def __init__(self, toy: ToyProblem):
        self.toy = toy
        self.params = {"theta": Variable(toy.theta.copy(), requires_grad=True, name="theta")}

    def train_loss(self, tape: Tape, params, z, policy: Policy, index: int) -> Variable:
        theta = params["theta"]
        one = PolicyBatch(
            np.array([[s.op for s in policy]]), np.array([[s.apply for s in policy]]), np.array([[s.bin for s in policy]])
        )
        values, grads = self.toy.train(theta.value, one)
        return tape.scalar_fn("toy_train", theta, float(values[0]), grads[0])

    def val_loss(self, tape: Tape, params, z, relaxed=None) -> Variable:
        theta = params["theta"]
        value, grad = self.toy.val(theta.value)
        return tape.scalar_fn("toy_val", theta, float(value), grad)


@dataclass
class BiasReport:
    name: str
    labels: list[str]
    mean: np.ndarray
    std_error: np.ndarray
    exact: np.ndarray
    z: np.ndarray
    draws: int
    magnitude_mask: np.ndarray
    threshold: float = Z_THRESHOLD
    notes: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.z) <= self.threshold))

    def failing(self) -> list[str]:
        return [self.labels[i] for i in np.flatnonzero(np.abs(self.z) > self.threshold)]

    def failing_magnitude(self) -> list[str]:
        return [self.labels[i] for i in np.flatnonzero((np.abs(self.z) > self.threshold) & self.magnitude_mask)]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "draws": self.draws,
            "passed": self.passed,
            "max_abs_z": float(np.max(np.abs(self.z))) if self.z.size else 0.0,
            "coordinates": [
                {"label": lab, "mean": float(mu), "std_error": float(se), "exact": float(ex), "z": float(zz)}
                for lab, mu, se, ex, zz in zip(self.labels, self.mean, self.std_error, self.exact, self.z)
            ],
            **self.notes,
        }


def z_scores(mean: np.ndarray, se: np.ndarray, exact: np.ndarray, atol: float = 1e-12) -> np.ndarray:
    diff = mean - exact
    with np.errstate(divide="ignore", invalid="ignore"):
        z = diff / se
    degenerate = se <= atol
    z[degenerate & (np.abs(diff) <= atol)] = 0.0
    z[degenerate & (np.abs(diff) > atol)] = np.inf
    return z


def estimator_bias_report(
    toy: ToyProblem,
    sampler: SamplerConfig = SamplerConfig(n_arch=1, n_policy=2),
    draws: int = 10**5,
    eta: float = 0.1,
    seed: int = 0,
    constant_magnitude_grad: bool = False,
    task=None,
    exact: np.ndarray | None = None,
) -> BiasReport:
    """Run the real estimator ``draws`` times and z-test each coordinate against the exact hypergradient."""
    if draws < 2:
        raise ValueError("a bias report needs at least 2 draws")
    task = ToyTask(toy) if task is None else task
    aug = toy.aug
    n, m = sampler.n_arch, sampler.n_policy
    per = n * m
    rng = np.random.default_rng(seed)
    pool = sample_policies(aug, rng, draws * per)
    zs = [None] * n
    est = np.empty((draws, aug.size))
    for d in range(draws):
        sl = slice(d * per, (d + 1) * per)
        batch = PolicyBatch(pool.ops[sl], pool.applies[sl], pool.bins[sl])
        est[d] = grad_gamma(task, aug, zs, batch, eta, constant_magnitude_grad=constant_magnitude_grad).grad
    mean = est.mean(axis=0)
    se = est.std(axis=0, ddof=1) / math.sqrt(draws)
    ref = exact_hypergradient(toy, aug, eta) if exact is None else exact
    name = toy.name + (" [constant magnitude score]" if constant_magnitude_grad else "")
    return BiasReport(name, aug.coordinate_labels(), mean, se, ref, z_scores(mean, se, ref), draws, aug.magnitude_mask())


# ----------------------------------------------------------------------------- toys


def _logcosh(r):
    return np.logaddexp(r, -r) - math.log(2.0)


def random_toy(
    rng: np.random.Generator,
    d: int = 3,
    k: int = 2,
    n_ops: int = 3,
    n_bins: int = 2,
    affine_val: bool = True,
    name: str = "random",
    scale: float = 0.8,
) -> ToyProblem:
    """Smooth non-quadratic training loss around a policy-dependent target.

    Applied slots shift the target by a vector chosen by (slot, op, bin);
    skipped slots leave it unchanged, mirroring an image op that is not applied.
    """
    theta = rng.normal(size=d)
    aug = AugParams.random(rng, k, n_ops, n_bins, scale=scale)
    shifts = rng.normal(0, 1, (k, n_ops, n_bins, d))
    curv = rng.uniform(0.5, 2.0, d)
    bend = float(rng.uniform(0.2, 1.0))

    def train(th, batch):
        slot = np.arange(k)[None, :]
        u = (batch.applies[..., None] * shifts[slot, batch.ops, batch.bins]).sum(axis=1)
        r = th[None, :] - u
        return 0.5 * (curv * r * r).sum(axis=1) + bend * _logcosh(r).sum(axis=1), curv * r + bend * np.tanh(r)

    if affine_val:
        c = rng.normal(size=d)

        def val(th):
            return float(c @ th), c.copy()

    else:
        v0 = rng.normal(size=d)
        q = rng.uniform(0.5, 2.0, d)

        def val(th):
            r = th - v0
            return float(0.5 * (q * r * r).sum() + 0.3 * _logcosh(r).sum()), q * r + 0.3 * np.tanh(r)

    return ToyProblem(f"{name} (d={d}, K={k}, ops={n_ops}, bins={n_bins})", theta, aug, train, val, affine_val)


def two_policy_toy(theta: float = 0.7, logits: Sequence[float] = (0.3, -0.4)) -> ToyProblem:
    """Two ops on one slot with one bin: losses ``theta**2`` and ``2*theta``, whether or not applied."""
    aug = AugParams(np.array([list(logits)], dtype=np.float64), np.zeros((1, 2)), np.zeros((1, 2, 1)))

    def train(th, batch):
        first = batch.ops[:, 0] == 0
        t = th[0]
        return np.where(first, t * t, 2 * t), np.where(first, 2 * t, 2.0)[:, None]

    def val(th):
        return float(th[0]), np.ones(1)

    return ToyProblem("two-policy", np.array([theta]), aug, train, val, affine_val=True)


def single_policy_toy(theta: Sequence[float] = (0.4, -1.1)) -> ToyProblem:
    """One op, one bin and a loss that ignores the apply flag: the expectation is the loss itself."""
    aug = AugParams(np.zeros((1, 1)), np.array([[0.3]]), np.zeros((1, 1, 1)))

    def train(th, batch):
        n = len(batch)
        return np.full(n, float(np.sum(th**2) + th[0])), np.tile(2 * th + np.array([1.0] + [0.0] * (th.size - 1)), (n, 1))

    def val(th):
        return float(th.sum()), np.ones_like(th)

    return ToyProblem("single-policy", np.array(theta, dtype=np.float64), aug, train, val, affine_val=True)


def linear_target_toy(rng: np.random.Generator, d: int = 2, n_ops: int = 2) -> tuple[ToyProblem, dict]:
    """Training loss linear in the weights with a per-op slope, validation loss quadratic.

    Returns the toy and the ingredients of its closed-form hypergradient.
    """
    theta = rng.normal(size=d)
    aug = AugParams(rng.normal(size=(1, n_ops)), np.zeros((1, n_ops)), np.zeros((1, n_ops, 1)))
    slopes = rng.normal(size=(n_ops, d))
    offsets = rng.normal(size=n_ops)
    v0 = rng.normal(size=d)
    q = rng.uniform(0.5, 2.0, d)

    def train(th, batch):
        o = batch.ops[:, 0]
        return slopes[o] @ th + offsets[o], slopes[o].copy()

    def val(th):
        r = th - v0
        return float(0.5 * (q * r * r).sum()), q * r

    return ToyProblem("linear-train/quadratic-val", theta, aug, train, val), {"slopes": slopes, "target": v0, "curvature": q}


# ----------------------------------------------------------------------------- autodiff tier


class LinearModelTask:
    """A 2-weight least-squares model whose inputs are shifted by the applied policy slots.

    Losses go through the tape primitives; :meth:`as_toy` gives the same
    problem as analytic closures.
    """

    def __init__(self, rng: np.random.Generator, k: int = 1, n_ops: int = 3, n_bins: int = 2, n_points: int = 6):
        self.x = rng.normal(size=(n_points, 2))
        self.t = rng.normal(size=n_points)
        self.shifts = rng.normal(0, 0.7, (k, n_ops, n_bins, 2))
        self.c = rng.normal(size=2)
        self.aug = AugParams.random(rng, k, n_ops, n_bins, scale=0.8)
        self.params = {"w": Variable(rng.normal(size=(1, 2)), requires_grad=True, name="w")}

    def _inputs(self, ops, applies, bins) -> np.ndarray:
        slot = np.arange(len(ops))
        return self.x + (np.asarray(applies)[:, None] * self.shifts[slot, ops, bins]).sum(axis=0)

    def train_loss(self, tape: Tape, params, z, policy: Policy, index: int) -> Variable:
        xs = self._inputs([s.op for s in policy], [s.apply for s in policy], [s.bin for s in policy])
        pred = tape.linear(Variable(xs), params["w"])
        err = tape.sub(pred, self.t[:, None])
        return tape.mean(tape.square(err))

    def val_loss(self, tape: Tape, params, z, relaxed=None) -> Variable:
        return tape.dot(params["w"], self.c[None, :])

    def as_toy(self) -> ToyProblem:
        n = len(self.t)

        def train(th, batch):
            values, grads = np.empty(len(batch)), np.empty((len(batch), 2))
            for i in range(len(batch)):
                xs = self._inputs(batch.ops[i], batch.applies[i], batch.bins[i])
                r = xs @ th - self.t
                values[i] = r @ r / n
                grads[i] = 2 * xs.T @ r / n
            return values, grads

        def val(th):
            return float(self.c @ th), self.c.copy()

        return ToyProblem("linear model", self.params["w"].value.ravel().copy(), self.aug, train, val, affine_val=True)


# ----------------------------------------------------------------------------- suite


def toy_suite(seed: int = 0, affine_val: bool = True) -> list[ToyProblem]:
    """A fixed family of random toys spanning single and two-slot spaces up to 576 policies."""
    rng = np.random.default_rng([seed, 31])
    shapes = [(3, 1, 3, 3), (4, 2, 3, 2), (2, 2, 2, 2), (5, 1, 4, 4), (3, 2, 4, 3)]
    return [random_toy(rng, d, k, o, b, affine_val=affine_val, name=f"toy{i}") for i, (d, k, o, b) in enumerate(shapes)]


# ----------------------------------------------------------------------------- sampling laws


def plackett_luce_pairs(logits: Sequence[float]) -> dict[tuple[int, int], float]:
    """Probability of each unordered top-2 set under sequential sampling without replacement."""
    w = np.exp(np.asarray(logits, dtype=np.float64) - np.max(logits))
    w = w / w.sum()
    out = {}
    for i, j in itertools.combinations(range(len(w)), 2):
        out[i, j] = w[i] * w[j] / (1 - w[i]) + w[j] * w[i] / (1 - w[j])
    return out


def pair_frequencies(hard: np.ndarray) -> dict[tuple[int, int], float]:
    """Empirical frequency of each selected edge pair in a stack of two-hot rows."""
    idx = np.sort(np.argsort(-hard, axis=-1, kind="stable")[:, :2], axis=1)
    pairs, counts = np.unique(idx, axis=0, return_counts=True)
    return {(int(a), int(b)): c / len(hard) for (a, b), c in zip(pairs, counts)}


# ----------------------------------------------------------------------------- verification suite


@dataclass
class Check:
    name: str
    passed: bool
    detail: dict

    def line(self) -> str:
        shown = ", ".join(f"{k}={_fmt(v)}" for k, v in self.detail.items() if not isinstance(v, (list, dict)))
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {shown}"


def _fmt(v) -> str:
    return f"{v:.3g}" if isinstance(v, float) else str(v)


@dataclass
class Verification:
    checks: list[Check]
    info: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [{"name": c.name, "passed": c.passed, **c.detail} for c in self.checks],
            "info": self.info,
        }

    def lines(self) -> list[str]:
        return [c.line() for c in self.checks]


def check_mixed_partial_identity(toys: Sequence[ToyProblem]) -> Check:
    routes = score = prob = 0.0
    for toy in toys:
        e = exact_expected_training_loss(toy)
        routes = max(routes, float(np.max(np.abs(e.mixed - e.mixed_product_rule))))
        score = max(score, float(np.max(np.abs(e.mixed - e.score_form))))
        prob = max(prob, abs(e.prob_sum - 1.0))
    ok = routes <= 1e-10 and score <= 1e-9 and prob <= 1e-12
    return Check(
        "mixed-partial identity",
        ok,
        {"toys": len(toys), "max_route_gap": routes, "max_score_form_gap": score, "max_prob_sum_error": prob},
    )


def check_finite_differences(toys: Sequence[ToyProblem], eta: float = 0.5) -> Check:
    worst = 0.0
    for toy in toys:
        worst = max(worst, _rel(exact_hypergradient(toy, eta=eta), finite_difference_hypergradient(toy, eta=eta)))
    return Check("hypergradient vs finite differences", worst <= 1e-6, {"toys": len(toys), "max_rel_error": worst})


def _rel(a, b) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def check_normalization(seed: int = 0) -> Check:
    rng = np.random.default_rng([seed, 3])
    worst, sizes = 0.0, []
    for k in (1, 2):
        for n_ops, n_bins in ((3, 2), (4, 3), (15, 1)):
            aug = AugParams.random(rng, k, n_ops, n_bins, scale=2.0)
            _, probs = enumerate_policy_arrays(aug)
            worst = max(worst, abs(float(probs.sum()) - 1.0))
            sizes.append(len(probs))
    return Check("policy probabilities sum to one", worst <= 1e-9, {"spaces": len(sizes), "largest": max(sizes), "max_error": worst})


def check_score_identity(draws: int, seed: int = 0) -> Check:
    rng = np.random.default_rng([seed, 5])
    aug = AugParams.random(rng, 2, 4, 3)
    _, scores = policy_scores(aug, sample_policies(aug, rng, draws))
    mean = scores.mean(axis=0)
    se = scores.std(axis=0, ddof=1) / math.sqrt(draws)
    z = z_scores(mean, se, np.zeros_like(mean))
    return Check("score has zero mean", bool(np.all(np.abs(z) <= Z_THRESHOLD)), {"draws": draws, "max_abs_z": float(np.max(np.abs(z)))})


def check_log_prob_gradient(seed: int = 0, trials: int = 4) -> Check:
    from .augmentation import policy_log_prob, sample_policy
    from .autodiff import numerical_gradient

    rng = np.random.default_rng([seed, 7])
    worst = 0.0
    for _ in range(trials):
        aug = AugParams.random(rng, 2)
        pol = sample_policy(aug, rng)
        vec = aug.flat()
        fd = numerical_gradient(lambda: policy_log_prob(aug.like(vec), pol)[0], vec)
        worst = max(worst, _rel(policy_log_prob(aug, pol)[1].flat(), fd))
    return Check("log-probability gradient vs finite differences", worst <= 1e-6, {"trials": trials, "max_rel_error": worst})


def check_gumbel_ops(draws: int = 10**6, seed: int = 0) -> Check:
    from .supernet import gumbel_sample_ops

    rng = np.random.default_rng([seed, 11])
    logits = rng.normal(size=8)
    hard, _ = gumbel_sample_ops(logits, 1.0, rng, size=(draws,))
    p = np.exp(logits - logits.max())
    gap = float(np.max(np.abs(hard.mean(axis=0) - p / p.sum())))
    return Check("gumbel op frequencies", gap <= 0.01, {"draws": draws, "ops": 8, "max_gap": gap})


def check_gumbel_pairs(draws: int = 10**6, seed: int = 0) -> Check:
    from .supernet import gumbel_sample_edges

    rng = np.random.default_rng([seed, 13])
    logits = rng.normal(size=3)
    hard, _ = gumbel_sample_edges(logits, 1.0, rng, size=(draws,))
    freq = pair_frequencies(hard)
    expected = plackett_luce_pairs(logits)
    gap = max(abs(freq.get(k, 0.0) - v) for k, v in expected.items())
    return Check("edge pair frequencies vs Plackett-Luce", gap <= 0.01, {"draws": draws, "pairs": len(expected), "max_gap": float(gap)})


def check_temperature_invariance(trials: int = 200, seed: int = 0) -> Check:
    from .supernet import gumbel_sample_edges, gumbel_sample_ops

    rng = np.random.default_rng([seed, 17])
    mismatches = 0
    for _ in range(trials):
        logits, noise = rng.normal(size=(14, 8)), rng.gumbel(size=(14, 8))
        t1, t2 = rng.uniform(0.01, 20, 2)
        mismatches += not np.array_equal(gumbel_sample_ops(logits, t1, noise=noise)[0], gumbel_sample_ops(logits, t2, noise=noise)[0])
        mismatches += not np.array_equal(
            gumbel_sample_edges(logits[0, :5], t1, noise=noise[0, :5])[0], gumbel_sample_edges(logits[0, :5], t2, noise=noise[0, :5])[0]
        )
    return Check("hard samples ignore temperature", mismatches == 0, {"trials": trials, "mismatches": mismatches})


def bias_checks(draws: int, seed: int = 0, eta: float = 0.5, sampler: SamplerConfig = SamplerConfig(1, 2)) -> Iterator[Check]:
    """Unbiasedness z-tests on the two-policy toy and the random suite, then the ablated estimator."""
    toys = [two_policy_toy(), *toy_suite(seed)]
    for i, toy in enumerate(toys):
        r = estimator_bias_report(toy, sampler, draws, eta, seed=seed + i)
        yield Check(f"unbiased estimator on {toy.name}", r.passed, {"draws": draws, "max_abs_z": r.to_dict()["max_abs_z"], "failing": r.failing()})
    ablated = toys[1]
    r = estimator_bias_report(ablated, sampler, draws, eta, seed=seed + 1, constant_magnitude_grad=True)
    caught = r.failing_magnitude()
    yield Check(
        f"constant-magnitude ablation rejected on {ablated.name}",
        bool(caught),
        {"draws": draws, "failing_magnitude_coordinates": len(caught), "max_abs_z": r.to_dict()["max_abs_z"]},
    )


def curved_validation_bias(seed: int = 0, eta: float = 0.025, m: int = 2) -> list[dict]:
    """Exact bias of the estimator when the validation loss is curved (informational, not a check)."""
    rows = []
    for toy in toy_suite(seed, affine_val=False)[:3]:
        exact = exact_hypergradient(toy, eta=eta)
        bias = exact_estimator_mean(toy, m, eta=eta) - exact
        rows.append({"toy": toy.name, "eta": eta, "m": m, "bias_norm": float(np.linalg.norm(bias)), "exact_norm": float(np.linalg.norm(exact))})
    return rows


def run_verification(draws: int = 10**5, seed: int = 0, gumbel_draws: int = 10**6, progress: Callable[[Check], None] | None = None) -> Verification:
    """The whole oracle suite; ``progress`` is called after every check."""
    suite = toy_suite(seed)
    curved = toy_suite(seed, affine_val=False)

    def all_checks():
        yield check_mixed_partial_identity(suite + curved)
        yield check_finite_differences(suite + curved)
        yield check_normalization(seed)
        yield check_score_identity(draws, seed)
        yield check_log_prob_gradient(seed)
        yield check_gumbel_ops(gumbel_draws, seed)
        yield check_gumbel_pairs(gumbel_draws, seed)
        yield check_temperature_invariance(seed=seed)
        yield from bias_checks(draws, seed)

    checks = []
    for c in all_checks():
        checks.append(c)
        if progress is not None:
            progress(c)
    return Verification(checks, {"curved_validation_bias": curved_validation_bias(seed)})
