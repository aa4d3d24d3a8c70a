"""Train a derived architecture from scratch under an augmentation pipeline and report test metrics."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .augmentation import N_MAGNITUDE_BINS, AugParams, apply_policy, cutout, image_rngs, sample_policies
from .autodiff import ShapeError, Tape, Variable
from .data import Dataset
from .derivation import Genotype, PolicyDistribution, sample_final_policy
from .layers import OPS, BatchNorm, FactorizedReduce, Registry, ReLUConvBN, make_op, reduction_layers
from .search import MomentumSGD, clip_by_norm, cosine_lr, normalize

log = logging.getLogger(__name__)

AUGMENTATION_MODES = ("none", "fixed-default", "derived-policy", "random-policy")


class EvalDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    cells: int = 8
    channels: int = 16
    epochs: int = 60
    batch_size: int = 64
    augmentation: str = "derived-policy"
    seed: int = 0
    lr: float = 0.025
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    train_subset: int | None = None
    policy_slots: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.cells < 1 or self.channels < 2 or self.channels % 2 or self.batch_size < 2 or self.epochs < 0:
            raise ValueError(
                f"invalid eval dimensions: cells={self.cells}, channels={self.channels} (even, >= 2), "
                f"batch_size={self.batch_size}, epochs={self.epochs}"
            )
        if self.augmentation not in AUGMENTATION_MODES:
            raise ValueError(f"augmentation must be one of {AUGMENTATION_MODES}, got {self.augmentation!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class EvalCell:
    def __init__(self, reg, prefix, genotype: Genotype, c_pp, c_p, c, reduction, reduction_prev):
        self.kind = "reduce" if reduction else "normal"
        nodes = genotype.nodes(self.kind)
        if reduction_prev:
            self.pre0 = FactorizedReduce(reg, prefix + ".pre0", c_pp, c, track_running=True)
        else:
            self.pre0 = ReLUConvBN(reg, prefix + ".pre0", c_pp, c, 1, 1, 0, track_running=True)
        self.pre1 = ReLUConvBN(reg, prefix + ".pre1", c_p, c, 1, 1, 0, track_running=True)
        self.inputs = []
        for j, node in enumerate(nodes, start=2):
            branch = []
            for k, (src, op) in enumerate(node):
                stride = 2 if reduction and src < 2 else 1
                branch.append((src, make_op(op, reg, f"{prefix}.node{j}.{k}.{op}", c, stride, track_running=True)))
            self.inputs.append(branch)
        self.c_out = len(nodes) * c

    def __call__(self, tape, params, s0, s1, training):
        states = [self.pre0(tape, params, s0, training), self.pre1(tape, params, s1, training)]
        for j, branch in enumerate(self.inputs, start=2):
            out = [op(tape, params, states[src], training) for src, op in branch]
            if out[0].shape != out[1].shape:
                raise ShapeError("eval cell node", out[0].shape, out[1].shape, detail=f"node {j}")
            states.append(tape.add_n(out))
        return tape.concat(states[2:], axis=1)


class EvalNetwork:
    """Stacked discrete cells; every weight lives in ``params`` and no architecture parameters remain."""

    def __init__(self, genotype: Genotype, cells: int, channels: int, classes: int, rng: np.random.Generator, in_channels: int = 3, dtype=np.float32, stem_multiplier: int = 3):
        genotype.validate(OPS)
        self.genotype = genotype
        self.params: dict[str, Variable] = {}
        self.dtype = dtype
        reg = Registry(self.params, rng, dtype)
        c_stem = stem_multiplier * channels
        self.stem_w = reg.conv("stem.conv", c_stem, in_channels, 3)
        self.stem_bn = BatchNorm(reg, "stem.bn", c_stem, track_running=True)
        c_pp, c_p, c_cur = c_stem, c_stem, channels
        reductions = reduction_layers(cells)
        self.cells = []
        reduction_prev = False
        for layer in range(cells):
            reduction = layer in reductions
            if reduction:
                c_cur *= 2
            cell = EvalCell(reg, f"cells.{layer}", genotype, c_pp, c_p, c_cur, reduction, reduction_prev)
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, cell.c_out
        self.head_w, self.head_b = reg.linear("head", classes, c_p)

    def forward(self, tape: Tape, x: np.ndarray, training: bool = True) -> Variable:
        p = self.params
        s = self.stem_bn(tape, p, tape.conv2d(Variable(np.asarray(x, dtype=self.dtype)), p[self.stem_w], padding=1), training)
        s0 = s1 = s
        for cell in self.cells:
            s0, s1 = s1, cell(tape, p, s0, s1, training)
        return tape.linear(tape.global_avg_pool(s1), p[self.head_w], p[self.head_b])

    def parameter_count(self) -> int:
        return int(sum(v.value.size for v in self.params.values()))

    def init_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].value).tobytes())
        return h.hexdigest()


def build_network(genotype: Genotype, config: EvalConfig, classes: int, in_channels: int = 3) -> EvalNetwork:
    rng = np.random.default_rng([config.seed, 11])
    return EvalNetwork(genotype, config.cells, config.channels, classes, rng, in_channels, np.dtype(config.dtype).type)


# ----------------------------------------------------------------------------- pipelines


def default_augment(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random crop from a zero-padded image, horizontal flip, then cutout of half the side."""
    n, _, h, w = batch.shape
    pad = max(1, h // 8)
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = np.empty_like(batch)
    for i in range(n):
        dy, dx = offsets[i]
        img = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return cutout(out, 0.5, image_rngs(rng, n))


def make_pipeline(mode: str, dist: PolicyDistribution | None, slots: int = 2) -> Callable[[np.ndarray, np.random.Generator], np.ndarray]:
    if mode == "none":
        return lambda batch, rng: batch
    if mode == "fixed-default":
        return default_augment
    if mode == "derived-policy":
        if dist is None:
            raise ValueError("derived-policy mode needs a policy distribution")

        def derived(batch, rng):
            policy = sample_final_policy(dist, rng)
            return apply_policy(policy, batch, rng, n_bins=dist.n_bins)

        return derived
    if mode == "random-policy":
        uniform = AugParams.initial(k=slots)

        def random_policy(batch, rng):
            return apply_policy(sample_policies(uniform, rng, 1)[0], batch, rng, n_bins=N_MAGNITUDE_BINS)

        return random_policy
    raise ValueError(f"unknown augmentation mode {mode!r}")


# ----------------------------------------------------------------------------- training


def evaluate_accuracy(net: EvalNetwork, x: np.ndarray, y: np.ndarray, mean, std, batch_size: int = 256) -> tuple[float, float]:
    correct, loss_sum = 0, 0.0
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        tape = Tape()
        logits = net.forward(tape, normalize(x[sl], mean, std, net.dtype), training=False)
        loss_sum += float(tape.cross_entropy(logits, y[sl]).value) * len(y[sl])
        correct += int((logits.value.argmax(axis=1) == y[sl]).sum())
    n = max(len(x), 1)
    return correct / n, loss_sum / n


def train_and_test(
    net: EvalNetwork,
    dataset: Dataset,
    dist: PolicyDistribution | None,
    config: EvalConfig,
    metrics_path: Path | None = None,
) -> dict:
    """Train from scratch, then report test accuracy; per-epoch records go to ``metrics_path``."""
    if len(dataset.test_x) == 0:
        raise ValueError("empty test split")
    pipeline = make_pipeline(config.augmentation, dist, config.policy_slots)
    order_rng = np.random.default_rng([config.seed, 12])
    aug_rng = np.random.default_rng([config.seed, 13])
    train_x, train_y = dataset.train_x, dataset.train_y
    if config.train_subset is not None:
        pick = np.sort(np.random.default_rng([config.seed, 14]).permutation(len(train_x))[: config.train_subset])
        train_x, train_y = train_x[pick], train_y[pick]
    opt = MomentumSGD(config.lr, config.momentum, config.weight_decay)
    steps = len(train_x) // config.batch_size
    if config.epochs and steps == 0:
        raise ValueError(f"training set of {len(train_x)} images is smaller than one batch")
    values = {k: v.value for k, v in net.params.items()}
    records = []
    start = time.perf_counter()
    if metrics_path is not None:
        Path(metrics_path).write_text("")
    for epoch in range(config.epochs):
        opt.lr = cosine_lr(epoch, config.epochs, config.lr, config.lr_min)
        perm = order_rng.permutation(len(train_x))
        losses, correct = [], 0
        for step in range(steps):
            idx = perm[step * config.batch_size : (step + 1) * config.batch_size]
            batch = pipeline(train_x[idx], aug_rng)
            tape = Tape()
            logits = net.forward(tape, normalize(batch, dataset.mean, dataset.std, net.dtype), training=True)
            loss = tape.cross_entropy(logits, train_y[idx])
            if not np.isfinite(loss.value):
                raise EvalDiverged(f"non-finite training loss at epoch {epoch + 1} step {step + 1}")
            grads, _ = clip_by_norm(tape.grad(loss, net.params), config.grad_clip)
            opt.step(values, grads.arrays)
            losses.append(float(loss.value))
            correct += int((logits.value.argmax(axis=1) == train_y[idx]).sum())
        record = {
            "epoch": epoch + 1,
            "lr": opt.lr,
            "train_loss": float(np.mean(losses)),
            "train_accuracy": correct / (steps * config.batch_size),
        }
        records.append(record)
        log.info("eval epoch %d loss=%.4f acc=%.3f", record["epoch"], record["train_loss"], record["train_accuracy"])
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    test_acc, test_loss = evaluate_accuracy(net, dataset.test_x, dataset.test_y, dataset.mean, dataset.std)
    return {
        "augmentation": config.augmentation,
        "seed": config.seed,
        "epochs": config.epochs,
        "test_accuracy": test_acc,
        "test_loss": test_loss,
        "parameter_count": net.parameter_count(),
        "history": records,
        "wall_time_s": time.perf_counter() - start,
    }
