"""Discretize trained search parameters into a genotype and a policy table."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import artifacts
from .augmentation import AUG_OPS, DEFAULT_CAP, AugParams, Policy, PolicyBatch, PolicySpaceTooLarge
from .supernet import KINDS, ArchParams

GENOTYPE_SCHEMA = "jointsearch.genotype"
GENOTYPE_VERSION = "1.0"
POLICY_SCHEMA = "jointsearch.policy"
POLICY_VERSION = "1.0"
EXCLUDED_OPS = ("zero",)


@dataclass(frozen=True)
class Genotype:
    """Per cell kind, per intermediate node, two ``(source node, op name)`` inputs."""

    normal: tuple[tuple[tuple[int, str], ...], ...]
    reduce: tuple[tuple[tuple[int, str], ...], ...]

    def nodes(self, kind: str):
        return getattr(self, kind)

    def validate(self, ops=None) -> None:
        for kind in KINDS:
            for j, inputs in enumerate(self.nodes(kind), start=2):
                if len(inputs) != 2:
                    raise ValueError(f"{kind} node {j} has {len(inputs)} inputs, expected 2")
                for src, op in inputs:
                    if not 0 <= src < j:
                        raise ValueError(f"{kind} node {j} reads node {src}; sources must precede it")
                    if op in EXCLUDED_OPS or (ops is not None and op not in ops):
                        raise ValueError(f"{kind} node {j} uses invalid op {op!r}")

    def to_dict(self) -> dict:
        return {kind: [[[src, op] for src, op in node] for node in self.nodes(kind)] for kind in KINDS}

    @classmethod
    def from_dict(cls, d) -> "Genotype":
        def parse(nodes):
            return tuple(tuple((int(src), str(op)) for src, op in node) for node in nodes)

        g = cls(parse(d["normal"]), parse(d["reduce"]))
        g.validate()
        return g


def derive_architecture(arch: ArchParams) -> Genotype:
    """Top-2 incoming edges by softmax(beta) per node, then the best non-zero op by softmax(alpha).

    Ties go to the lower edge index and the lower op index.
    """
    spec = arch.spec
    usable = [i for i, name in enumerate(spec.ops) if name not in EXCLUDED_OPS]
    if not usable:
        raise ValueError("no candidate operation left after excluding the zero op")
    cells = {}
    for kind in KINDS:
        w_edge = arch.edge_weights(kind)
        w_op = arch.op_weights(kind)
        nodes = []
        for sl in spec.node_slices:
            local = np.argsort(-w_edge[sl], kind="stable")[:2]
            chosen = []
            for e in sorted(sl.start + int(i) for i in local):
                best = usable[int(np.argmax(w_op[e, usable]))]
                chosen.append((spec.edges[e][0], spec.ops[best]))
            nodes.append(tuple(chosen))
        cells[kind] = tuple(nodes)
    return Genotype(cells["normal"], cells["reduce"])


# ----------------------------------------------------------------------------- policies


@dataclass(frozen=True)
class PolicyEntry:
    ops: tuple[int, ...]
    prob: float
    apply_probs: tuple[float, ...]
    bins: tuple[int, ...]
    magnitudes: tuple[float, ...]


@dataclass(frozen=True)
class PolicyDistribution:
    entries: tuple[PolicyEntry, ...]
    n_bins: int

    @property
    def probs(self) -> np.ndarray:
        return np.array([e.prob for e in self.entries])

    def to_dict(self) -> dict:
        return {
            "n_bins": self.n_bins,
            "entries": [
                {
                    "ops": [AUG_OPS[o].name for o in e.ops],
                    "op_ids": list(e.ops),
                    "prob": e.prob,
                    "apply_probs": list(e.apply_probs),
                    "bins": list(e.bins),
                    "magnitudes": list(e.magnitudes),
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d) -> "PolicyDistribution":
        entries = tuple(
            PolicyEntry(
                tuple(int(o) for o in e["op_ids"]),
                float(e["prob"]),
                tuple(float(p) for p in e["apply_probs"]),
                tuple(int(b) for b in e["bins"]),
                tuple(float(m) for m in e["magnitudes"]),
            )
            for e in d["entries"]
        )
        return cls(entries, int(d["n_bins"]))


def derive_policy_distribution(aug: AugParams, cap: int = DEFAULT_CAP) -> PolicyDistribution:
    """Every op sequence with its sampling probability, apply probabilities and argmax magnitudes."""
    size = aug.n_ops**aug.k
    if size > cap:
        raise PolicySpaceTooLarge(size, cap)
    op_p = aug.op_probs()
    ap_p = aug.apply_probs()
    best_bin = aug.magnitude_probs().argmax(axis=2)
    entries = []
    for seq in itertools.product(range(aug.n_ops), repeat=aug.k):
        prob = 1.0
        for k, o in enumerate(seq):
            prob *= float(op_p[k, o])
        bins = tuple(int(best_bin[k, o]) for k, o in enumerate(seq))
        entries.append(
            PolicyEntry(
                tuple(seq),
                prob,
                tuple(float(ap_p[k, o]) for k, o in enumerate(seq)),
                bins,
                tuple(AUG_OPS[o].magnitude(b, aug.n_bins) if o < len(AUG_OPS) else float(b) for o, b in zip(seq, bins)),
            )
        )
    return PolicyDistribution(tuple(entries), aug.n_bins)


def sample_final_policies(dist: PolicyDistribution, rng: np.random.Generator, n: int) -> PolicyBatch:
    """``n`` op sequences by table probability; each slot applies with its own probability at the fixed bin."""
    cdf = np.cumsum(dist.probs)
    u_seq = rng.random(n)
    k = len(dist.entries[0].ops)
    u_apply = rng.random((n, k))
    rows = np.minimum(np.searchsorted(cdf, u_seq * cdf[-1], side="right"), len(cdf) - 1)
    ops = np.array([e.ops for e in dist.entries], dtype=np.int64)[rows]
    bins = np.array([e.bins for e in dist.entries], dtype=np.int64)[rows]
    applies = (u_apply < np.array([e.apply_probs for e in dist.entries])[rows]).astype(np.int64)
    return PolicyBatch(ops, applies, bins)


def sample_final_policy(dist: PolicyDistribution, rng: np.random.Generator) -> Policy:
    return sample_final_policies(dist, rng, 1)[0]


# ----------------------------------------------------------------------------- files


def save_genotype(path: Path | str, genotype: Genotype) -> None:
    artifacts.write_json(path, GENOTYPE_SCHEMA, GENOTYPE_VERSION, {"genotype": genotype.to_dict()})


def load_genotype(path: Path | str) -> Genotype:
    return Genotype.from_dict(artifacts.read_json(path, GENOTYPE_SCHEMA, GENOTYPE_VERSION)["genotype"])


def save_policy(path: Path | str, dist: PolicyDistribution) -> None:
    artifacts.write_json(path, POLICY_SCHEMA, POLICY_VERSION, {"policy": dist.to_dict()})


def load_policy(path: Path | str) -> PolicyDistribution:
    return PolicyDistribution.from_dict(artifacts.read_json(path, POLICY_SCHEMA, POLICY_VERSION)["policy"])
