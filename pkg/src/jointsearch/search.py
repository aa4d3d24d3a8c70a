"""Alternating bi-level search over supernet weights, architecture and augmentation parameters.

Each step draws ``N`` architectures and ``M`` policies per architecture, then

* estimates the augmentation gradient with a score-function estimator through
  a one-step unrolled weight update,
* estimates the architecture gradient with straight-through Gumbel samples on
  un-augmented validation data, and
* averages the training gradients over all ``N * M`` samples for the weights.

All updates apply after all gradients of the step have been computed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from . import artifacts
from .augmentation import AUG_OPS, AugParams, Policy, PolicyBatch, apply_policy, image_rngs, policy_scores, sample_policies
from .autodiff import Gradients, Tape, Variable, grad_dot, mean_gradients
from .supernet import (
    KINDS,
    ArchParams,
    ArchSample,
    CellSpec,
    Supernet,
    SupernetConfig,
    mode_sample,
    relax,
    sample_architecture,
    temperature,
)

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "jointsearch.checkpoint"
CHECKPOINT_VERSION = "1.0"
SNAPSHOT_SCHEMA = "jointsearch.search-snapshot"


class SearchDiverged(RuntimeError):
    def __init__(self, where: str, tensor: str):
        super().__init__(f"non-finite values in {tensor} after {where}")
        self.where, self.tensor = where, tensor


@dataclass(frozen=True)
class SamplerConfig:
    n_arch: int = 5
    n_policy: int = 2

    def __post_init__(self):
        if self.n_arch < 1 or self.n_policy < 1:
            raise ValueError(f"sample counts must be >= 1, got N={self.n_arch}, M={self.n_policy}")


@dataclass(frozen=True)
class OptimConfig:
    virtual_lr: float = 0.025
    theta_lr: float = 0.025
    theta_lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    alpha_lr: float = 3e-4
    beta_lr: float = 3e-4
    gamma_lr: float = 3e-3
    adam_betas: tuple[float, float] = (0.5, 0.999)
    warmup_epochs: int = 20
    joint_epochs: int = 30

    def __post_init__(self):
        rates = {k: getattr(self, k) for k in ("virtual_lr", "theta_lr", "alpha_lr", "beta_lr", "gamma_lr")}
        bad = [k for k, v in rates.items() if not v > 0]
        if bad:
            raise ValueError(f"learning rates must be positive: {bad}")
        if self.warmup_epochs < 0 or self.joint_epochs < 0:
            raise ValueError("epoch counts must be non-negative")

    @property
    def epochs(self) -> int:
        return self.warmup_epochs + self.joint_epochs


# ----------------------------------------------------------------------------- estimators


class Task(Protocol):
    """Losses of one step's batches, evaluated at arbitrary weights."""

    params: dict[str, Variable]

    def train_loss(self, tape: Tape, params: Mapping[str, Variable], z, policy: Policy, index: int) -> Variable: ...

    def val_loss(self, tape: Tape, params: Mapping[str, Variable], z, relaxed=None) -> Variable: ...


def virtual_step(params: Mapping[str, Variable], train_grads: Sequence[Gradients], eta: float) -> dict[str, Variable]:
    """``theta - eta * mean(train_grads)`` as fresh leaves; unreached weights are shared, untouched."""
    mean = mean_gradients(train_grads)
    out = {}
    for name, var in params.items():
        g = mean.get(name)
        out[name] = var if g is None else Variable(var.value - eta * g, requires_grad=True, name=name)
    return out


def train_gradients(task: Task, zs: Sequence, policies: PolicyBatch, m: int) -> tuple[list[list[Gradients]], np.ndarray]:
    """Weight gradients of the training loss for policy ``i*m + j`` under architecture ``i``."""
    grads, losses = [], np.zeros((len(zs), m))
    for i, z in enumerate(zs):
        row = []
        for j in range(m):
            idx = i * m + j
            tape = Tape()
            loss = task.train_loss(tape, task.params, z, policies[idx], idx)
            losses[i, j] = float(loss.value)
            row.append(tape.grad(loss, task.params))
        grads.append(row)
    return grads, losses


@dataclass
class GammaEstimate:
    grad: np.ndarray  # flat AugParams layout
    dots: np.ndarray  # (N, M) validation/training gradient inner products
    val_losses: np.ndarray  # (N,) at the virtual weights


def grad_gamma(
    task: Task,
    aug: AugParams,
    zs: Sequence,
    policies: PolicyBatch,
    eta: float,
    train_grads: list[list[Gradients]] | None = None,
    constant_magnitude_grad: bool = False,
) -> GammaEstimate:
    """Score-function estimate of d L_val(theta') / d gamma.

    For architecture ``i`` the virtual weights use that architecture's own
    ``M`` policies; each policy's score is weighted by the inner product of the
    validation gradient at the virtual weights with its training gradient.
    """
    n = len(zs)
    m = len(policies) // n
    if n * m != len(policies):
        raise ValueError(f"{len(policies)} policies cannot be split over {n} architectures")
    if train_grads is None:
        train_grads, _ = train_gradients(task, zs, policies, m)
    _, scores = policy_scores(aug, policies, constant_magnitude_grad)
    dots = np.zeros((n, m))
    val_losses = np.zeros(n)
    for i, z in enumerate(zs):
        virtual = virtual_step(task.params, train_grads[i], eta)
        tape = Tape()
        loss = task.val_loss(tape, virtual, z)
        val_losses[i] = float(loss.value)
        v = tape.grad(loss, virtual)
        for j in range(m):
            dots[i, j] = grad_dot(v, train_grads[i][j])
    grad = (-eta / (n * m)) * (dots.reshape(-1) @ scores)
    return GammaEstimate(grad, dots, val_losses)


def grad_arch(task: Task, arch: ArchParams, zs: Sequence[ArchSample]) -> tuple[Gradients, np.ndarray]:
    """Mean straight-through gradient of the validation loss over the sampled architectures."""
    grads, losses = [], np.zeros(len(zs))
    wrt = arch.variables()
    for i, z in enumerate(zs):
        tape = Tape()
        loss = task.val_loss(tape, task.params, z, relax(tape, arch, z))
        losses[i] = float(loss.value)
        grads.append(tape.grad(loss, wrt))
    return mean_gradients(grads), losses


def grad_theta(task: Task, zs: Sequence, policies: PolicyBatch) -> tuple[Gradients, np.ndarray]:
    """Training gradient averaged over all architecture/policy pairs."""
    m = len(policies) // len(zs)
    grads, losses = train_gradients(task, zs, policies, m)
    return mean_gradients([g for row in grads for g in row]), losses


# ----------------------------------------------------------------------------- optimizers


class Adam:
    def __init__(self, lr: float, betas: tuple[float, float] = (0.5, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name], self.v[name], self.t[name] = np.zeros_like(p), np.zeros_like(p), 0
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            step = self.lr * math.sqrt(1 - b2**t) / (1 - b1**t)
            p -= (step * self.m[name] / (np.sqrt(self.v[name]) + self.eps)).astype(p.dtype)

    def state(self, prefix: str) -> tuple[dict, dict[str, np.ndarray]]:
        arrays = {f"{prefix}/m/{k}": v for k, v in self.m.items()}
        arrays.update({f"{prefix}/v/{k}": v for k, v in self.v.items()})
        return {"t": dict(self.t)}, arrays

    def load(self, prefix: str, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
        self.t = {k: int(v) for k, v in meta["t"].items()}
        self.m = {k: arrays[f"{prefix}/m/{k}"].copy() for k in self.t}
        self.v = {k: arrays[f"{prefix}/v/{k}"].copy() for k in self.t}


class MomentumSGD:
    """Heavy-ball SGD with L2 weight decay; weights without a gradient are left alone."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buf: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            p = params[name]
            d = g + self.weight_decay * p
            if name in self.buf:
                self.buf[name] = self.momentum * self.buf[name] + d
            else:
                self.buf[name] = d.copy()
            p -= (self.lr * self.buf[name]).astype(p.dtype)

    def state(self, prefix: str) -> tuple[dict, dict[str, np.ndarray]]:
        return {"keys": sorted(self.buf)}, {f"{prefix}/buf/{k}": v for k, v in self.buf.items()}

    def load(self, prefix: str, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
        self.buf = {k: arrays[f"{prefix}/buf/{k}"].copy() for k in meta["keys"]}


def clip_by_norm(grads: Gradients, max_norm: float) -> tuple[Gradients, float]:
    norm = grads.norm()
    if max_norm > 0 and norm > max_norm:
        return grads.scaled(max_norm / (norm + 1e-6)), norm
    return grads, norm


def cosine_lr(epoch: int, total: int, start: float, end: float) -> float:
    if total <= 0:
        return start
    return end + 0.5 * (start - end) * (1 + math.cos(math.pi * epoch / total))


# ----------------------------------------------------------------------------- data and task


@dataclass
class SearchData:
    """Raw images in [0, 1]; normalization is applied after augmentation."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    classes: int


def search_data(dataset, seed: int = 0) -> SearchData:
    """Split a dataset's training pool into the weight-training and search-validation halves."""
    train_idx, val_idx = dataset.search_split(seed)
    return SearchData(
        dataset.train_x[train_idx],
        dataset.train_y[train_idx],
        dataset.train_x[val_idx],
        dataset.train_y[val_idx],
        dataset.mean,
        dataset.std,
        dataset.classes,
    )


def normalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray, dtype=np.float32) -> np.ndarray:
    return ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(dtype)


class SupernetTask:
    def __init__(self, net: Supernet, data: SearchData, train_idx, val_idx, stream_seed: int, n_bins: int):
        self.net = net
        self.params = net.params
        self.train_x = data.train_x[train_idx]
        self.train_y = data.train_y[train_idx]
        self.val_x = normalize(data.val_x[val_idx], data.mean, data.std, net.dtype)
        self.val_y = data.val_y[val_idx]
        self.mean, self.std = data.mean, data.std
        self.stream_seed = stream_seed
        self.n_bins = n_bins

    def augmented(self, policy: Policy, index: int) -> np.ndarray:
        rngs = image_rngs(np.random.default_rng([self.stream_seed, index]), len(self.train_x))
        x = apply_policy(policy, self.train_x, rngs=rngs, n_bins=self.n_bins)
        return normalize(x, self.mean, self.std, self.net.dtype)

    def train_loss(self, tape, params, z, policy, index):
        return self.net.loss(tape, self.augmented(policy, index), self.train_y, z, params)

    def val_loss(self, tape, params, z, relaxed=None):
        return self.net.loss(tape, self.val_x, self.val_y, z, params, relaxed)


# ----------------------------------------------------------------------------- loop


@dataclass(frozen=True)
class SearchConfig:
    sampler: SamplerConfig = SamplerConfig()
    optim: OptimConfig = OptimConfig()
    layers: int = 8
    channels: int = 16
    steps: int = 4
    policy_slots: int = 2
    n_bins: int = 10
    tau_start: float = 5.0
    tau_end: float = 0.5
    batch_size: int = 32
    steps_per_epoch: int = 2
    val_eval_size: int = 256
    share_samples: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 2 or self.steps_per_epoch < 1:
            raise ValueError("batch_size must be >= 2 and steps_per_epoch >= 1")
        if not self.tau_start > 0 or not self.tau_end > 0:
            raise ValueError("temperatures must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SearchConfig":
        d = dict(d)
        sampler = SamplerConfig(**d.pop("sampler", {}))
        optim = dict(d.pop("optim", {}))
        if "adam_betas" in optim:
            optim["adam_betas"] = tuple(optim["adam_betas"])
        return cls(sampler=sampler, optim=OptimConfig(**optim), **d)


@dataclass
class SearchState:
    net: Supernet
    arch: ArchParams
    aug: AugParams
    theta_opt: MomentumSGD
    alpha_opt: Adam
    beta_opt: Adam
    gamma_opt: Adam
    rng: np.random.Generator
    epoch: int = 0  # epochs completed
    history: list[dict] = field(default_factory=list)

    def search_arrays(self) -> dict[str, np.ndarray]:
        out = {f"arch/alpha.{k}": self.arch.alpha[k].value for k in KINDS}
        out.update({f"arch/beta.{k}": self.arch.beta[k].value for k in KINDS})
        out.update({"aug/pi": self.aug.pi, "aug/prob_logits": self.aug.prob_logits, "aug/delta": self.aug.delta})
        return out


def init_state(config: SearchConfig, classes: int, in_channels: int = 3) -> SearchState:
    rng = np.random.default_rng(config.seed)
    net_cfg = SupernetConfig(
        layers=config.layers, channels=config.channels, classes=classes, in_channels=in_channels, spec=CellSpec(steps=config.steps)
    )
    net = Supernet(net_cfg, np.random.default_rng([config.seed, 1]), dtype=np.dtype(config.dtype).type)
    arch = net.new_arch_params(np.random.default_rng([config.seed, 2]))
    aug = AugParams.initial(k=config.policy_slots, n_bins=config.n_bins)
    o = config.optim
    return SearchState(
        net=net,
        arch=arch,
        aug=aug,
        theta_opt=MomentumSGD(o.theta_lr, o.momentum, o.weight_decay),
        alpha_opt=Adam(o.alpha_lr, o.adam_betas),
        beta_opt=Adam(o.beta_lr, o.adam_betas),
        gamma_opt=Adam(o.gamma_lr, o.adam_betas),
        rng=rng,
    )


def _check_finite(state: SearchState, where: str) -> None:
    for name, var in state.net.params.items():
        if not np.all(np.isfinite(var.value)):
            raise SearchDiverged(where, f"theta[{name}]")
    for name, var in state.arch.variables().items():
        if not np.all(np.isfinite(var.value)):
            raise SearchDiverged(where, name)
    for name in ("pi", "prob_logits", "delta"):
        if not np.all(np.isfinite(getattr(state.aug, name))):
            raise SearchDiverged(where, f"gamma.{name}")


def policy_statistics(aug: AugParams, sampled: Sequence[PolicyBatch]) -> dict:
    op_p = aug.op_probs()
    entropy = -(op_p * np.log(op_p)).sum(axis=1)
    applied = np.concatenate([b.applies for b in sampled]) if sampled else np.zeros((0, aug.k))
    return {
        "top_ops": [AUG_OPS[o].name if o < len(AUG_OPS) else str(o) for o in op_p.argmax(axis=1).tolist()],
        "top_op_prob": op_p.max(axis=1).tolist(),
        "op_entropy": entropy.tolist(),
        "apply_prob_mean": float(aug.apply_probs().mean()),
        "sampled_apply_rate": float(applied.mean()) if applied.size else 0.0,
    }


def validation_loss(state: SearchState, data: SearchData, config: SearchConfig) -> float:
    """Mean validation loss of the most likely architecture on a fixed validation subset."""
    n = min(config.val_eval_size, len(data.val_x))
    z = mode_sample(state.arch)
    total = 0.0
    for start in range(0, n, config.batch_size):
        sl = slice(start, min(start + config.batch_size, n))
        x = normalize(data.val_x[sl], data.mean, data.std, state.net.dtype)
        loss = state.net.loss(Tape(), x, data.val_y[sl], z)
        total += float(loss.value) * (sl.stop - sl.start)
    return total / n


def _batch_indices(perm: np.ndarray, step: int, size: int) -> np.ndarray:
    idx = np.arange(step * size, (step + 1) * size) % len(perm)
    return perm[idx]


def search_step(
    state: SearchState, data: SearchData, config: SearchConfig, train_idx, val_idx, tau: float, lr: float, eta: float, joint: bool
) -> dict:
    s = config.sampler
    rng = state.rng
    zs = [sample_architecture(state.arch, tau, rng) for _ in range(s.n_arch)]
    policies = sample_policies(state.aug, rng, s.n_arch * s.n_policy)
    stream_seed = int(rng.integers(0, 2**63 - 1))
    task = SupernetTask(state.net, data, train_idx, val_idx, stream_seed, config.n_bins)

    train_grads, train_losses = train_gradients(task, zs, policies, s.n_policy)
    stats = {"train_loss": float(train_losses.mean()), "sampled": policies}

    gamma_grad = None
    if joint:
        est = grad_gamma(task, state.aug, zs, policies, eta, train_grads=train_grads)
        gamma_grad = est.grad
        stats["virtual_val_loss"] = float(est.val_losses.mean())

    arch_zs = zs if config.share_samples else [sample_architecture(state.arch, tau, rng) for _ in range(s.n_arch)]
    arch_grads, val_losses = grad_arch(task, state.arch, arch_zs)
    stats["search_val_loss"] = float(val_losses.mean())

    if config.share_samples:
        theta_grad = mean_gradients([g for row in train_grads for g in row])
    else:
        fresh_z = [sample_architecture(state.arch, tau, rng) for _ in range(s.n_arch)]
        fresh_p = sample_policies(state.aug, rng, s.n_arch * s.n_policy)
        theta_grad, _ = grad_theta(task, fresh_z, fresh_p)
        stats["sampled"] = fresh_p

    theta_grad, theta_norm = clip_by_norm(theta_grad, config.optim.grad_clip)
    stats["grad_norm"] = {
        "theta": theta_norm,
        "alpha": float(np.sqrt(sum(float(np.vdot(g, g)) for n, g in arch_grads.arrays.items() if n.startswith("alpha")))),
        "beta": float(np.sqrt(sum(float(np.vdot(g, g)) for n, g in arch_grads.arrays.items() if n.startswith("beta")))),
        "gamma": float(np.linalg.norm(gamma_grad)) if gamma_grad is not None else 0.0,
    }

    state.theta_opt.lr = lr
    state.theta_opt.step({k: v.value for k, v in state.net.params.items()}, theta_grad.arrays)
    arch_vals = {k: v.value for k, v in state.arch.variables().items()}
    state.alpha_opt.step(arch_vals, {k: g for k, g in arch_grads.arrays.items() if k.startswith("alpha")})
    state.beta_opt.step(arch_vals, {k: g for k, g in arch_grads.arrays.items() if k.startswith("beta")})
    if gamma_grad is not None:
        flat = {"gamma": state.aug.flat()}
        state.gamma_opt.step(flat, {"gamma": gamma_grad})
        new = state.aug.like(flat["gamma"])
        state.aug.pi, state.aug.prob_logits, state.aug.delta = new.pi, new.prob_logits, new.delta
    return stats


def _mean_dicts(records: Sequence[dict]) -> dict:
    return {k: float(np.mean([r[k] for r in records])) for k in records[0]}


def run_epoch(state: SearchState, data: SearchData, config: SearchConfig) -> dict:
    epoch = state.epoch
    total = config.optim.epochs
    joint = epoch >= config.optim.warmup_epochs
    tau = temperature(epoch, total, config.tau_start, config.tau_end)
    o = config.optim
    lr = cosine_lr(epoch, total, o.theta_lr, o.theta_lr_min)
    eta = cosine_lr(epoch, total, o.virtual_lr, o.theta_lr_min * o.virtual_lr / o.theta_lr)
    perm_t = state.rng.permutation(len(data.train_x))
    perm_v = state.rng.permutation(len(data.val_x))
    steps = []
    sampled = []
    for step in range(config.steps_per_epoch):
        where = f"epoch {epoch + 1} step {step + 1}"
        train_idx = _batch_indices(perm_t, step, config.batch_size)
        val_idx = _batch_indices(perm_v, step, config.batch_size)
        out = search_step(state, data, config, train_idx, val_idx, tau, lr, eta, joint)
        _check_finite(state, where)
        sampled.append(out.pop("sampled"))
        norms = out.pop("grad_norm")
        out.update({f"grad_norm_{k}": v for k, v in norms.items()})
        steps.append(out)
    state.epoch += 1
    record = {
        "epoch": state.epoch,
        "phase": "joint" if joint else "warmup",
        "tau": tau,
        "lr": lr,
        "virtual_lr": eta,
        **_mean_dicts(steps),
        "val_loss": validation_loss(state, data, config),
        "policy": policy_statistics(state.aug, sampled),
    }
    state.history.append(record)
    return record


# ----------------------------------------------------------------------------- persistence


def save_checkpoint(state: SearchState, path: Path, config: SearchConfig) -> None:
    arrays = {f"theta/{k}": v.value for k, v in state.net.params.items()}
    arrays.update(state.search_arrays())
    meta = {"epoch": state.epoch, "rng": state.rng.bit_generator.state, "config": config.to_dict(), "optim": {}}
    for prefix, opt in (("opt/theta", state.theta_opt), ("opt/alpha", state.alpha_opt), ("opt/beta", state.beta_opt), ("opt/gamma", state.gamma_opt)):
        m, a = opt.state(prefix)
        meta["optim"][prefix] = m
        arrays.update(a)
    artifacts.write_arrays(path, CHECKPOINT_SCHEMA, CHECKPOINT_VERSION, meta, arrays)


def save_snapshot(state: SearchState, path: Path, record: Mapping) -> None:
    """Per-epoch archive of the search parameters and that epoch's statistics."""
    artifacts.write_arrays(path, SNAPSHOT_SCHEMA, CHECKPOINT_VERSION, {"record": record}, state.search_arrays())


def load_checkpoint(path: Path, classes: int | None = None) -> tuple[SearchState, SearchConfig]:
    meta, arrays = artifacts.read_arrays(path, CHECKPOINT_SCHEMA, CHECKPOINT_VERSION)
    config = SearchConfig.from_dict(meta["config"])
    if classes is None:
        classes = arrays["theta/head.bias"].shape[0]
    in_channels = arrays["theta/stem.conv"].shape[1]
    state = init_state(config, classes, in_channels)
    for k, v in state.net.params.items():
        v.value[...] = arrays[f"theta/{k}"]
    for kind in KINDS:
        state.arch.alpha[kind].value[...] = arrays[f"arch/alpha.{kind}"]
        state.arch.beta[kind].value[...] = arrays[f"arch/beta.{kind}"]
    state.aug = AugParams(arrays["aug/pi"], arrays["aug/prob_logits"], arrays["aug/delta"])
    for prefix, opt in (("opt/theta", state.theta_opt), ("opt/alpha", state.alpha_opt), ("opt/beta", state.beta_opt), ("opt/gamma", state.gamma_opt)):
        opt.load(prefix, meta["optim"][prefix], arrays)
    state.rng.bit_generator.state = meta["rng"]
    state.epoch = int(meta["epoch"])
    return state, config


def _json_line(record: Mapping) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def run_search(
    config: SearchConfig,
    data: SearchData,
    run_dir: Path | None = None,
    resume: bool = False,
    stop_after: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> SearchState:
    """Run (or continue) the two-phase search.

    With ``run_dir`` set, each epoch appends a line to ``metrics.jsonl``, writes
    ``checkpoints/epoch_NNN.npz`` (search parameters and statistics) and
    overwrites ``checkpoints/last.npz`` (full state). ``resume`` continues
    from ``last.npz``. ``stop_after`` ends the run early after that many
    completed epochs, as if interrupted.
    """
    ckpt_dir = metrics_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        ckpt_dir = run_dir / "checkpoints"
        metrics_path = run_dir / "metrics.jsonl"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    last = ckpt_dir / "last.npz" if ckpt_dir else None
    if resume and last is not None and last.exists():
        state, saved = load_checkpoint(last, data.classes)
        if saved != config:
            raise ValueError("checkpoint was written with a different search config")
        lines = metrics_path.read_text().splitlines(keepends=True) if metrics_path.exists() else []
        metrics_path.write_text("".join(lines[: state.epoch]))
        state.history = [json.loads(x) for x in lines[: state.epoch]]
        log.info("resuming after epoch %d", state.epoch)
    else:
        state = init_state(config, data.classes, data.train_x.shape[1])
        if metrics_path is not None:
            metrics_path.write_text("")
    while state.epoch < config.optim.epochs:
        if stop_after is not None and state.epoch >= stop_after:
            break
        record = run_epoch(state, data, config)
        log.info(
            "epoch %d %s tau=%.3f train=%.4f val=%.4f", record["epoch"], record["phase"], record["tau"], record["train_loss"], record["val_loss"]
        )
        if run_dir is not None:
            with metrics_path.open("a") as fh:
                fh.write(_json_line(record))
            save_snapshot(state, ckpt_dir / f"epoch_{state.epoch:03d}.npz", record)
            save_checkpoint(state, last, config)
        if on_epoch is not None:
            on_epoch(record)
    return state
