import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointsearch.artifacts import ArtifactError
from jointsearch.augmentation import AUG_OPS, AugParams, PolicySpaceTooLarge
from jointsearch.autodiff import Variable
from jointsearch.derivation import (
    Genotype,
    PolicyDistribution,
    PolicyEntry,
    derive_architecture,
    derive_policy_distribution,
    load_genotype,
    load_policy,
    sample_final_policies,
    sample_final_policy,
    save_genotype,
    save_policy,
)
from jointsearch.layers import OPS
from jointsearch.supernet import KINDS, ArchParams, CellSpec


def _arch(alpha=None, beta=None, spec=CellSpec()):
    alpha = np.zeros((spec.n_edges, len(spec.ops))) if alpha is None else alpha
    beta = np.zeros(spec.n_edges) if beta is None else beta
    return ArchParams(
        {k: Variable(np.array(alpha, dtype=np.float64)) for k in KINDS},
        {k: Variable(np.array(beta, dtype=np.float64)) for k in KINDS},
        spec,
    )


def _check_genotype(g: Genotype, steps=4):
    for kind in KINDS:
        nodes = g.nodes(kind)
        assert len(nodes) == steps
        for j, node in enumerate(nodes, start=2):
            assert len(node) == 2
            srcs = [s for s, _ in node]
            assert len(set(srcs)) == 2 and all(0 <= s < j for s in srcs)
            assert all(op in OPS and op != "zero" for _, op in node)


class TestArchitecture:
    def test_random_params_always_valid(self):
        rng = np.random.default_rng(0)
        spec = CellSpec()
        for _ in range(10**4):
            arch = ArchParams.initial(spec, rng, scale=3.0)
            _check_genotype(derive_architecture(arch))

    def test_strong_input_edges(self):
        beta = np.zeros(14)
        beta[:2] = 10.0  # node 2's edges from inputs 0 and 1
        g = derive_architecture(_arch(beta=beta))
        assert [s for s, _ in g.normal[0]] == [0, 1]

    def test_dominant_op_everywhere(self):
        alpha = np.zeros((14, len(OPS)))
        alpha[:, OPS.index("sep_conv_5x5")] = 8.0
        g = derive_architecture(_arch(alpha=alpha, beta=np.random.default_rng(1).normal(size=14)))
        assert {op for kind in KINDS for node in g.nodes(kind) for _, op in node} == {"sep_conv_5x5"}

    def test_zero_never_chosen(self):
        alpha = np.zeros((14, len(OPS)))
        alpha[:, OPS.index("zero")] = 20.0
        alpha[:, OPS.index("max_pool_3x3")] = 1.0
        g = derive_architecture(_arch(alpha=alpha))
        assert all(op == "max_pool_3x3" for node in g.normal for _, op in node)

    def test_ties_pick_lower_indices(self):
        g = derive_architecture(_arch())
        for node in g.normal:
            assert [s for s, _ in node] == [0, 1]
            assert all(op == OPS[0] for _, op in node)
        assert derive_architecture(_arch()) == g

    def test_only_zero_is_an_error(self):
        with pytest.raises(ValueError):
            derive_architecture(_arch(spec=CellSpec(ops=("zero",))))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6), st.integers(0, 13), st.floats(0.0, 5.0))
    def test_raising_a_selected_edge_keeps_it(self, seed, edge, bump):
        beta = np.random.default_rng(seed).normal(size=14)
        before = derive_architecture(_arch(beta=beta))
        src, dst = CellSpec().edges[edge]
        selected = src in [s for s, _ in before.normal[dst - 2]]
        beta[edge] += bump
        after = derive_architecture(_arch(beta=beta))
        if selected:
            assert src in [s for s, _ in after.normal[dst - 2]]

    def test_round_trip(self, tmp_path):
        arch = ArchParams.initial(CellSpec(), np.random.default_rng(3), scale=2.0)
        g = derive_architecture(arch)
        save_genotype(tmp_path / "genotype.json", g)
        assert load_genotype(tmp_path / "genotype.json") == g
        first = (tmp_path / "genotype.json").read_bytes()
        save_genotype(tmp_path / "genotype.json", load_genotype(tmp_path / "genotype.json"))
        assert (tmp_path / "genotype.json").read_bytes() == first

    def test_rejects_bad_genotypes(self):
        good = derive_architecture(_arch()).to_dict()
        bad = json.loads(json.dumps(good))
        bad["normal"][0][0] = [2, "sep_conv_3x3"]
        with pytest.raises(ValueError, match="sources must precede"):
            Genotype.from_dict(bad)
        bad = json.loads(json.dumps(good))
        bad["reduce"][1][1] = [0, "zero"]
        with pytest.raises(ValueError, match="invalid op"):
            Genotype.from_dict(bad)

    def test_rejects_unknown_major_version(self, tmp_path):
        path = tmp_path / "genotype.json"
        save_genotype(path, derive_architecture(_arch()))
        doc = json.loads(path.read_text())
        doc["header"]["version"] = "2.0"
        path.write_text(json.dumps(doc))
        with pytest.raises(ArtifactError, match="version"):
            load_genotype(path)


class TestPolicyDistribution:
    def test_single_slot_uniform(self):
        dist = derive_policy_distribution(AugParams.initial(k=1))
        assert len(dist.entries) == 15
        np.testing.assert_allclose(dist.probs, 1 / 15, rtol=0, atol=1e-15)

    def test_two_slot_uniform_sums_to_one(self):
        dist = derive_policy_distribution(AugParams.initial(k=2))
        assert len(dist.entries) == 225
        assert abs(dist.probs.sum() - 1.0) <= 1e-12

    def test_random_params_sum_to_one(self):
        dist = derive_policy_distribution(AugParams.random(np.random.default_rng(4), k=2, scale=2.0))
        assert abs(dist.probs.sum() - 1.0) <= 1e-9

    def test_argmax_magnitude(self):
        aug = AugParams.initial(k=1)
        aug.delta[0, 4, 7] = 3.0  # rotate
        entry = derive_policy_distribution(aug).entries[4]
        assert entry.bins == (7,)
        op = AUG_OPS[4]
        assert entry.magnitudes[0] == pytest.approx(op.lo + (op.hi - op.lo) * 7 / 9)
        assert entry.magnitudes[0] == pytest.approx(16.666666666666664)

    def test_cap(self):
        with pytest.raises(PolicySpaceTooLarge):
            derive_policy_distribution(AugParams.initial(k=3), cap=1000)

    def test_round_trip(self, tmp_path):
        dist = derive_policy_distribution(AugParams.random(np.random.default_rng(5), k=2))
        save_policy(tmp_path / "policy.json", dist)
        again = load_policy(tmp_path / "policy.json")
        assert again == dist
        assert json.loads((tmp_path / "policy.json").read_text())["policy"]["entries"][0]["ops"][0] == AUG_OPS[0].name


class TestFinalSampling:
    def test_single_entry(self):
        dist = PolicyDistribution((PolicyEntry((4, 9), 1.0, (0.5, 0.5), (3, 1), (0.0, 0.0)),), 10)
        batch = sample_final_policies(dist, np.random.default_rng(0), 1000)
        assert np.all(batch.ops == [4, 9]) and np.all(batch.bins == [3, 1])

    def test_certain_application(self):
        aug = AugParams.initial(k=2, prob_logit=60.0)
        dist = derive_policy_distribution(aug)
        assert all(p == 1.0 for e in dist.entries for p in e.apply_probs)
        batch = sample_final_policies(dist, np.random.default_rng(1), 5000)
        assert np.all(batch.applies == 1)

    def test_sequence_frequencies(self):
        aug = AugParams.random(np.random.default_rng(6), k=2, scale=1.0)
        dist = derive_policy_distribution(aug)
        batch = sample_final_policies(dist, np.random.default_rng(7), 10**6)
        codes = batch.ops[:, 0] * aug.n_ops + batch.ops[:, 1]
        freq = np.bincount(codes, minlength=len(dist.entries)) / len(codes)
        expected = np.array([e.prob for e in dist.entries])
        assert np.max(np.abs(freq - expected)) <= 0.01

    def test_apply_rate_follows_sequence_probabilities(self):
        aug = AugParams.initial(k=1)
        aug.prob_logits[0] = np.linspace(-3, 3, 15)
        dist = derive_policy_distribution(aug)
        batch = sample_final_policies(dist, np.random.default_rng(8), 200_000)
        for o in (0, 14):
            sel = batch.ops[:, 0] == o
            assert batch.applies[sel, 0].mean() == pytest.approx(dist.entries[o].apply_probs[0], abs=0.02)

    def test_single_policy_helper(self):
        dist = derive_policy_distribution(AugParams.initial(k=2))
        assert len(sample_final_policy(dist, np.random.default_rng(9))) == 2
