import json

import numpy as np
import pytest

from jointsearch.augmentation import AugParams, cutout_mask
from jointsearch.autodiff import Tape
from jointsearch.data import SyntheticSpec, generate_synthetic
from jointsearch.derivation import Genotype, derive_policy_distribution
from jointsearch.evaluation import (
    EvalConfig,
    EvalDiverged,
    build_network,
    default_augment,
    make_pipeline,
    train_and_test,
)
from jointsearch.layers import reduction_layers


def _uniform_genotype(op: str, steps: int = 4) -> Genotype:
    nodes = tuple(((0, op), (1, op)) for _ in range(steps))
    return Genotype(nodes, nodes)


MIXED = Genotype(
    (
        ((0, "sep_conv_3x3"), (1, "dil_conv_3x3")),
        ((0, "identity"), (2, "sep_conv_5x5")),
        ((1, "max_pool_3x3"), (3, "avg_pool_3x3")),
        ((2, "dil_conv_5x5"), (4, "identity")),
    ),
    (
        ((0, "max_pool_3x3"), (1, "sep_conv_3x3")),
        ((1, "identity"), (2, "dil_conv_3x3")),
        ((0, "avg_pool_3x3"), (3, "sep_conv_5x5")),
        ((3, "identity"), (4, "dil_conv_5x5")),
    ),
)


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic(SyntheticSpec(classes=4, side=8, train=96, test=400), seed=0)


def _identity_count(cells, c, classes, in_channels=3, stem_mult=3, steps=4):
    """Stem, head, the two input projections of every cell, and the strided identities of reduction cells."""
    c_stem = stem_mult * c
    total = c_stem * in_channels * 9 + 2 * c_stem
    c_pp, c_p, c_cur = c_stem, c_stem, c
    red = reduction_layers(cells)
    prev_red = False
    for layer in range(cells):
        r = layer in red
        if r:
            c_cur *= 2
        if prev_red:  # factorized reduce: two half-width 1x1 convs and a batch norm
            total += 2 * (c_pp * (c_cur // 2)) + 2 * c_cur
        else:
            total += c_pp * c_cur + 2 * c_cur
        total += c_p * c_cur + 2 * c_cur
        if r:  # both input edges of every node are strided identities
            total += steps * 2 * (2 * (c_cur * (c_cur // 2)) + 2 * c_cur)
        prev_red = r
        c_pp, c_p = c_p, steps * c_cur
    return total + classes * c_p + classes


class TestBuild:
    def test_identity_genotype_count(self):
        for cells, c in ((3, 4), (8, 16), (5, 8)):
            net = build_network(_uniform_genotype("identity"), EvalConfig(cells=cells, channels=c), classes=4)
            assert net.parameter_count() == _identity_count(cells, c, 4)

    def test_doubling_channels(self):
        def groups(c):
            net = build_network(MIXED, EvalConfig(cells=5, channels=c), classes=4)
            dense = sum(v.value.size for k, v in net.params.items() if v.value.ndim == 4 and k != "stem.conv")
            depth = sum(v.value.size for k, v in net.params.items() if k.endswith(".dw"))
            return dense, depth

        dense1, depth1 = groups(8)
        dense2, depth2 = groups(16)
        assert dense2 == 4 * dense1
        assert depth2 == 2 * depth1

    def test_same_config_same_network(self):
        cfg = EvalConfig(cells=3, channels=4, seed=5)
        a, b = build_network(MIXED, cfg, 4), build_network(MIXED, cfg, 4)
        assert a.parameter_count() == b.parameter_count()
        assert a.init_digest() == b.init_digest()

    def test_init_ignores_augmentation_mode(self):
        digests = {build_network(MIXED, EvalConfig(cells=3, channels=4, augmentation=m), 4).init_digest() for m in ("none", "derived-policy")}
        assert len(digests) == 1

    def test_no_search_parameters(self):
        net = build_network(MIXED, EvalConfig(cells=3, channels=4), 4)
        assert not any(k.startswith(("alpha", "beta")) for k in net.params)

    def test_rejects_invalid_genotype(self):
        with pytest.raises(ValueError):
            build_network(_uniform_genotype("zero"), EvalConfig(cells=3, channels=4), 4)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EvalConfig(channels=5)
        with pytest.raises(ValueError):
            EvalConfig(augmentation="autoaugment")

    def test_forward_shape(self, dataset):
        net = build_network(MIXED, EvalConfig(cells=3, channels=4), 4)
        out = net.forward(Tape(), dataset.train_x[:5], training=False)
        assert out.shape == (5, 4)


class TestPipelines:
    def test_label_shapes_and_range(self, dataset):
        dist = derive_policy_distribution(AugParams.initial())
        x = dataset.train_x[:16]
        for mode in ("none", "fixed-default", "derived-policy", "random-policy"):
            out = make_pipeline(mode, dist)(x, np.random.default_rng(0))
            assert out.shape == x.shape and out.dtype == x.dtype
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_derived_policy_needs_distribution(self):
        with pytest.raises(ValueError):
            make_pipeline("derived-policy", None)

    def test_default_keeps_input(self, dataset):
        x = dataset.train_x[:8].copy()
        default_augment(x, np.random.default_rng(1))
        np.testing.assert_array_equal(x, dataset.train_x[:8])

    def test_cutout_area(self):
        rng = np.random.default_rng(2)
        frac = np.mean([cutout_mask(16, 16, 0.5, rng).mean() for _ in range(10**4)])
        assert abs(frac - 0.25) <= 0.05 * 0.25


class TestTraining:
    def _run(self, dataset, tmp_path=None, **kw):
        cfg = EvalConfig(**{"cells": 2, "channels": 4, "epochs": 1, "batch_size": 16, **kw})
        net = build_network(MIXED, cfg, dataset.classes)
        dist = derive_policy_distribution(AugParams.initial())
        path = None if tmp_path is None else tmp_path / "metrics.jsonl"
        return net, train_and_test(net, dataset, dist, cfg, path)

    def test_zero_epochs_is_chance(self, dataset):
        _, out = self._run(dataset, epochs=0)
        assert abs(out["test_accuracy"] - 0.25) <= 0.05
        assert out["history"] == []

    def test_none_mode_is_deterministic(self, dataset):
        _, a = self._run(dataset, augmentation="none", epochs=2)
        _, b = self._run(dataset, augmentation="none", epochs=2)
        assert a["history"] == b["history"] and a["test_accuracy"] == b["test_accuracy"]

    def test_unapplied_policy_matches_no_augmentation(self, dataset):
        cfg = EvalConfig(cells=2, channels=4, epochs=1, batch_size=16, augmentation="derived-policy")
        never = derive_policy_distribution(AugParams.initial(prob_logit=-60.0))
        out = train_and_test(build_network(MIXED, cfg, 4), dataset, never, cfg)
        _, none = self._run(dataset, augmentation="none")
        assert out["history"][0]["train_loss"] == none["history"][0]["train_loss"]
        assert out["test_accuracy"] == none["test_accuracy"]

    def test_labels_untouched(self, dataset):
        before = dataset.train_y.copy(), dataset.train_x.copy()
        self._run(dataset, augmentation="random-policy")
        np.testing.assert_array_equal(dataset.train_y, before[0])
        np.testing.assert_array_equal(dataset.train_x, before[1])

    def test_metrics_file(self, dataset, tmp_path):
        _, out = self._run(dataset, tmp_path, augmentation="fixed-default", epochs=2)
        lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in lines] == [1, 2]
        assert lines == out["history"]
        assert out["parameter_count"] > 0 and out["wall_time_s"] >= 0

    def test_train_subset(self, dataset):
        _, out = self._run(dataset, train_subset=32)
        assert out["history"][0]["train_accuracy"] <= 1.0

    def test_divergence_aborts(self, dataset):
        cfg = EvalConfig(cells=2, channels=4, epochs=1, batch_size=16, augmentation="none")
        net = build_network(MIXED, cfg, 4)
        net.params["head.weight"].value[:] = np.nan
        with pytest.raises(EvalDiverged, match="epoch 1 step 1"):
            train_and_test(net, dataset, None, cfg)
