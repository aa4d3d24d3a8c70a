"""Weight-sharing cell supernet with Gumbel-sampled operations and edges.

A sample fixes one operation per edge and two incoming edges per node for each
cell kind; only those ops run. When a relaxation is supplied the forward pass
multiplies every active branch by straight-through coefficients whose value is
exactly 1 but whose gradient flows into the tempered-softmax surrogates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tape, Variable
from .layers import (
    OPS,
    FactorizedReduce,
    Params,
    Registry,
    ReLUConvBN,
    BatchNorm,
    cell_edges,
    make_op,
    node_slices,
    reduction_layers,
)

KINDS = ("normal", "reduce")


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


@dataclass(frozen=True)
class CellSpec:
    steps: int = 4
    ops: tuple[str, ...] = OPS

    def __post_init__(self):
        unknown = [o for o in self.ops if o not in OPS]
        if unknown:
            raise KeyError(f"unknown operations {unknown}")
        if self.steps < 1:
            raise ValueError("a cell needs at least one intermediate node")

    @property
    def edges(self) -> list[tuple[int, int]]:
        return cell_edges(self.steps)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def node_slices(self) -> list[slice]:
        return node_slices(self.steps)


@dataclass
class ArchParams:
    """Operation logits ``alpha[kind]`` (edges x ops) and edge logits ``beta[kind]`` (edges)."""

    alpha: dict[str, Variable]
    beta: dict[str, Variable]
    spec: CellSpec

    @classmethod
    def initial(cls, spec: CellSpec, rng: np.random.Generator, scale: float = 1e-3) -> "ArchParams":
        alpha, beta = {}, {}
        for kind in KINDS:
            alpha[kind] = Variable(scale * rng.standard_normal((spec.n_edges, len(spec.ops))), True, f"alpha.{kind}")
            beta[kind] = Variable(scale * rng.standard_normal(spec.n_edges), True, f"beta.{kind}")
        return cls(alpha, beta, spec)

    def variables(self) -> dict[str, Variable]:
        out = {}
        for kind in KINDS:
            out[f"alpha.{kind}"] = self.alpha[kind]
            out[f"beta.{kind}"] = self.beta[kind]
        return out

    def edge_weights(self, kind: str) -> np.ndarray:
        """softmax(beta) taken separately over each node's incoming edges."""
        b = self.beta[kind].value
        out = np.empty_like(b)
        for sl in self.spec.node_slices:
            out[sl] = _softmax(b[sl])
        return out

    def op_weights(self, kind: str) -> np.ndarray:
        return _softmax(self.alpha[kind].value, axis=1)


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.gumbel(size=shape)


def gumbel_sample_ops(logits, tau: float, rng: np.random.Generator | None = None, noise=None, size=None):
    """Hard one-hot ``A`` and tempered soft ``A~`` over the last axis.

    ``noise`` (broadcastable to ``size + logits.shape``) is drawn from ``rng``
    when omitted.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    if noise is None:
        shape = tuple(size or ()) + logits.shape
        noise = gumbel_noise(rng, shape)
    perturbed = _log_softmax(logits) + noise
    soft = _softmax(perturbed / tau)
    hard = np.zeros_like(soft)
    np.put_along_axis(hard, perturbed.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return hard, soft


def gumbel_sample_edges(logits, tau: float, rng: np.random.Generator | None = None, noise=None, size=None):
    """Two-hot ``B`` (top-2 of the perturbed logits) and tempered soft ``B~``."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 2:
        raise ValueError(f"edge sampling needs at least 2 candidate edges, got {logits.shape[-1]}")
    if noise is None:
        shape = tuple(size or ()) + logits.shape
        noise = gumbel_noise(rng, shape)
    perturbed = _log_softmax(logits) + noise
    soft = _softmax(perturbed / tau)
    # stable descending order so ties go to the lower index
    top2 = np.argsort(-perturbed, axis=-1, kind="stable")[..., :2]
    hard = np.zeros_like(soft)
    np.put_along_axis(hard, top2, 1.0, axis=-1)
    return hard, soft


@dataclass
class KindSample:
    ops: np.ndarray  # (edges,) selected op index on every edge
    edges: np.ndarray  # (edges,) 0/1, two per node
    op_noise: np.ndarray
    edge_noise: np.ndarray

    def one_hot(self, n_ops: int) -> np.ndarray:
        a = np.zeros((len(self.ops), n_ops))
        a[np.arange(len(self.ops)), self.ops] = 1.0
        return a

    def active(self) -> list[int]:
        return np.flatnonzero(self.edges).tolist()


@dataclass
class ArchSample:
    kinds: dict[str, KindSample]
    tau: float

    def __getitem__(self, kind: str) -> KindSample:
        return self.kinds[kind]

    def key(self) -> tuple:
        return tuple((k, tuple(s.ops.tolist()), tuple(s.edges.tolist())) for k, s in sorted(self.kinds.items()))


def sample_architecture(arch: ArchParams, tau: float, rng: np.random.Generator) -> ArchSample:
    """One draw per cell kind, shared by every cell of that kind."""
    kinds = {}
    for kind in KINDS:
        alpha = arch.alpha[kind].value
        beta = arch.beta[kind].value
        op_noise = gumbel_noise(rng, alpha.shape)
        edge_noise = gumbel_noise(rng, beta.shape)
        hard, _ = gumbel_sample_ops(alpha, tau, noise=op_noise)
        edges = np.zeros(len(beta), dtype=np.int64)
        for sl in arch.spec.node_slices:
            b, _ = gumbel_sample_edges(beta[sl], tau, noise=edge_noise[sl])
            edges[sl] = b.astype(np.int64)
        kinds[kind] = KindSample(hard.argmax(axis=1), edges, op_noise, edge_noise)
    return ArchSample(kinds, tau)


@dataclass
class Relaxation:
    """Per-kind straight-through tensors on a tape: op coefficients and per-node edge coefficients."""

    ops: dict[str, Variable]
    edges: dict[str, list[Variable]]
    node_of_edge: list[tuple[int, int]] = field(default_factory=list)

    def coefficient(self, tape: Tape, kind: str, edge: int, op: int) -> Variable:
        node, local = self.node_of_edge[edge]
        a = tape.take(self.ops[kind], (edge, op))
        b = tape.take(self.edges[kind][node], local)
        return tape.mul(a, b)


def relax(tape: Tape, arch: ArchParams, sample: ArchSample, straight_through: bool = True) -> Relaxation:
    """Record the tempered softmaxes of the stored noise.

    With ``straight_through`` the coefficients take the hard values in the
    forward pass; otherwise the soft values themselves are used.
    """
    wrap = tape.straight_through if straight_through else (lambda soft, hard: soft)
    inv_tau = 1.0 / sample.tau
    ops, edges = {}, {}
    node_of_edge = []
    for n, sl in enumerate(arch.spec.node_slices):
        node_of_edge += [(n, k) for k in range(sl.stop - sl.start)]
    for kind in KINDS:
        s = sample[kind]
        a_soft = tape.softmax(tape.scale(tape.add(tape.log_softmax(arch.alpha[kind], axis=1), s.op_noise), inv_tau), axis=1)
        ops[kind] = wrap(a_soft, s.one_hot(len(arch.spec.ops)))
        per_node = []
        for sl in arch.spec.node_slices:
            b = tape.take(arch.beta[kind], sl)
            b_soft = tape.softmax(tape.scale(tape.add(tape.log_softmax(b), s.edge_noise[sl]), inv_tau))
            per_node.append(wrap(b_soft, s.edges[sl]))
        edges[kind] = per_node
    return Relaxation(ops, edges, node_of_edge)


def temperature(epoch: int, total_epochs: int, start: float = 5.0, end: float = 0.5) -> float:
    """Linear anneal from ``start`` at epoch 0 to ``end`` at the last epoch."""
    if total_epochs <= 1:
        return start
    return start + (end - start) * epoch / (total_epochs - 1)


class SearchCell:
    def __init__(self, reg: Registry, prefix: str, spec: CellSpec, c_pp: int, c_p: int, c: int, reduction: bool, reduction_prev: bool):
        self.spec = spec
        self.reduction = reduction
        self.kind = "reduce" if reduction else "normal"
        if reduction_prev:
            self.pre0 = FactorizedReduce(reg, prefix + ".pre0", c_pp, c)
        else:
            self.pre0 = ReLUConvBN(reg, prefix + ".pre0", c_pp, c, 1, 1, 0)
        self.pre1 = ReLUConvBN(reg, prefix + ".pre1", c_p, c, 1, 1, 0)
        self.ops: list[list] = []
        for e, (src, _) in enumerate(spec.edges):
            stride = 2 if reduction and src < 2 else 1
            self.ops.append([make_op(name, reg, f"{prefix}.edge{e}.{name}", c, stride) for name in spec.ops])
        self.c_out = spec.steps * c

    def __call__(self, tape: Tape, params: Params, s0: Variable, s1: Variable, sample: KindSample, relaxed: Relaxation | None):
        active = sample.active()
        edges = self.spec.edges
        used = {edges[e][0] for e in active}
        states: list[Variable | None] = [
            self.pre0(tape, params, s0) if 0 in used else None,
            self.pre1(tape, params, s1) if 1 in used else None,
        ]
        for sl in self.spec.node_slices:
            terms = []
            for e in range(sl.start, sl.stop):
                if not sample.edges[e]:
                    continue
                op = int(sample.ops[e])
                h = self.ops[e][op](tape, params, states[edges[e][0]])
                if relaxed is not None:
                    coef = tape.astype(relaxed.coefficient(tape, self.kind, e, op), h.dtype)
                    h = tape.mul(h, coef)
                terms.append(h)
            shapes = {t.shape for t in terms}
            if len(shapes) != 1:
                raise ShapeError("cell node", *shapes, detail=f"node {len(states)} inputs disagree")
            states.append(tape.add_n(terms))
        return tape.concat(states[2:], axis=1)


@dataclass(frozen=True)
class SupernetConfig:
    layers: int = 8
    channels: int = 16
    classes: int = 4
    in_channels: int = 3
    stem_multiplier: int = 3
    spec: CellSpec = CellSpec()


class Supernet:
    """Stem, stacked search cells and a linear classifier; ``params`` holds every weight."""

    def __init__(self, config: SupernetConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.params: dict[str, Variable] = {}
        reg = Registry(self.params, rng, dtype)
        self.dtype = dtype
        c = config.channels
        c_stem = config.stem_multiplier * c
        self.stem_w = reg.conv("stem.conv", c_stem, config.in_channels, 3)
        self.stem_bn = BatchNorm(reg, "stem.bn", c_stem)
        c_pp, c_p, c_cur = c_stem, c_stem, c
        reductions = reduction_layers(config.layers)
        self.cells: list[SearchCell] = []
        reduction_prev = False
        for layer in range(config.layers):
            reduction = layer in reductions
            if reduction:
                c_cur *= 2
            cell = SearchCell(reg, f"cells.{layer}", config.spec, c_pp, c_p, c_cur, reduction, reduction_prev)
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, cell.c_out
        self.head_w, self.head_b = reg.linear("head", config.classes, c_p)

    @property
    def spec(self) -> CellSpec:
        return self.config.spec

    def new_arch_params(self, rng: np.random.Generator, scale: float = 1e-3) -> ArchParams:
        return ArchParams.initial(self.spec, rng, scale)

    def forward(
        self,
        tape: Tape,
        x,
        sample: ArchSample,
        params: Params | None = None,
        relaxed: Relaxation | None = None,
    ) -> Variable:
        params = self.params if params is None else params
        x = x if isinstance(x, Variable) else Variable(np.asarray(x, dtype=self.dtype))
        s = self.stem_bn(tape, params, tape.conv2d(x, params[self.stem_w], padding=1))
        s0 = s1 = s
        for cell in self.cells:
            s0, s1 = s1, cell(tape, params, s0, s1, sample[cell.kind], relaxed)
        pooled = tape.global_avg_pool(s1)
        return tape.linear(pooled, params[self.head_w], params[self.head_b])

    def loss(self, tape, x, labels, sample, params=None, relaxed=None) -> Variable:
        return tape.cross_entropy(self.forward(tape, x, sample, params, relaxed), labels)

    def parameter_count(self) -> int:
        return int(sum(v.value.size for v in self.params.values()))


def mode_sample(arch: ArchParams) -> ArchSample:
    """The most likely discrete sample: argmax op per edge, top-2 edges per node, no noise."""
    kinds = {}
    for kind in KINDS:
        alpha = arch.alpha[kind].value
        beta = arch.beta[kind].value
        edges = np.zeros(len(beta), dtype=np.int64)
        for sl in arch.spec.node_slices:
            top2 = np.argsort(-beta[sl], kind="stable")[:2]
            edges[sl.start + top2] = 1
        kinds[kind] = KindSample(alpha.argmax(axis=1), edges, np.zeros_like(alpha), np.zeros_like(beta))
    return ArchSample(kinds, 1.0)
