"""Acceptance suite: every exit criterion at its stated tolerance.

Each test prints one PASS line (visible with ``pytest -s``); a failing
criterion fails its test. Runtime budgets are asserted alongside the
numeric tolerances.
"""

import math
import time

import numpy as np
import pytest

from padkit.datasyn import SynthConfig, canonical_manifest, synth_dataset
from padkit.diffcore import backward, grad_check
from padkit.dynimg import (
    FrameSequence,
    RankPoolConfig,
    dynamic_image_at,
    prefix_mean,
    rank_pool_fit,
    rank_pool_oracle,
)
from padkit.metrics import ScoredSet, aggregate, rates_at, roc, tpr_at_fpr
from padkit.netgraph import (
    MODALITY_CHANNELS,
    BackboneSpec,
    FusionVariant,
    build_psmm,
    build_sdnet,
    fused_branch_is_isolated,
    model_forward,
    psmm_forward,
    psmm_loss,
    sdnet_forward,
    sdnet_loss,
    shared_tail_is_isolated,
)
from padkit.protocols import SUB_PROTOCOLS, build_split, parse_manifest, validate_split
from padkit.trainer import ClipSampler, TrainConfig, evaluate_entries, train

GRAD_SPEC = BackboneSpec(input_size=8, stem_channels=2, level_channels=(2, 2, 2, 2))
NET_SPEC = BackboneSpec(input_size=16, stem_channels=3, level_channels=(3, 4, 5, 6))
E2E_SPEC = BackboneSpec(input_size=16, stem_channels=4, level_channels=(4, 8, 12, 16))


def _report(n, text):
    print(f"\n[PASS] criterion {n}: {text}")


@pytest.fixture(scope="module")
def corpus60(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_corpus")
    cfg = SynthConfig(subjects_per_ethnicity=60, clip_len=12, frame_size=16, seed=42)
    manifest_path, entries = synth_dataset(cfg, out)
    return out, entries


def test_criterion_1_rank_pooling_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    trials = 0
    for _ in range(55):
        k = int(rng.choice([3, 5, 7]))
        dim = int(rng.choice([1, 2]))
        frames = rng.normal(scale=rng.uniform(0.2, 2.0), size=(k, 1, 1, dim))
        v = prefix_mean(FrameSequence(frames))
        fit = rank_pool_fit(v, RankPoolConfig(window=k))
        ora = rank_pool_oracle(v)
        assert np.abs(fit.data - ora.data).max() <= 1e-3
        trials += 1
    v = prefix_mean(FrameSequence(np.array([0.0, 1.0, 2.0])))
    d = rank_pool_fit(v, RankPoolConfig(window=3)).data.ravel()[0]
    assert abs(d - 2.0 / 3.0) <= 1e-3
    elapsed = time.time() - t0
    assert elapsed < 10.0
    _report(1, f"solver matches grid oracle on {trials} instances, "
               f"hand instance d=2/3 ({elapsed:.1f}s)")


def test_criterion_2_rank_pooling_symmetry_suite():
    t0 = time.time()
    rng = np.random.default_rng(7)
    trials = 0
    for _ in range(250):    # negation antisymmetry
        k = int(rng.choice([3, 5, 7]))
        frames = rng.normal(size=(k, 1, 1, int(rng.choice([1, 2]))))
        cfg = RankPoolConfig(window=k)
        pos = rank_pool_fit(prefix_mean(FrameSequence(frames)), cfg)
        neg = rank_pool_fit(prefix_mean(FrameSequence(-frames)), cfg)
        assert np.abs(pos.data + neg.data).max() <= 1e-6
        trials += 2
    for _ in range(250):    # shift invariance
        k = int(rng.choice([3, 5, 7]))
        frames = rng.normal(size=(k, 1, 1, 2))
        shift = float(rng.uniform(-10, 10))
        cfg = RankPoolConfig(window=k)
        base = rank_pool_fit(prefix_mean(FrameSequence(frames)), cfg)
        moved = rank_pool_fit(prefix_mean(FrameSequence(frames + shift)), cfg)
        assert np.abs(base.data - moved.data).max() <= 1e-8
        trials += 2
    for _ in range(250):    # constant-window collapse, exactly zero
        k = int(rng.choice([3, 5, 7]))
        frame = rng.normal(size=(1, 2, 2, 1))
        frames = np.repeat(frame, k, axis=0)
        out = rank_pool_fit(prefix_mean(FrameSequence(frames)), RankPoolConfig(window=k))
        assert np.all(out.data == 0.0)
        trials += 1
    for _ in range(250):    # objective monotonicity per accepted iteration
        k = int(rng.choice([3, 5, 7]))
        frames = rng.normal(size=(k, 2, 2, 1))
        out = rank_pool_fit(prefix_mean(FrameSequence(frames)), RankPoolConfig(window=k))
        assert np.all(np.diff(np.array(out.objective_trace)) <= 0.0)
        trials += 1
    elapsed = time.time() - t0
    assert elapsed < 30.0
    _report(2, f"{trials} randomized symmetry/monotonicity trials ({elapsed:.1f}s)")


def test_criterion_3_gradient_correctness():
    t0 = time.time()
    worst = 0.0
    for seed in (0, 1, 2):
        rng = np.random.default_rng(100 + seed)

        sd = build_sdnet(GRAD_SPEC, "color", seed=seed)
        for k in sd.graph.params:
            if "/head/" in k:
                sd.graph.params[k] = 0.3 * rng.normal(size=sd.graph.params[k].shape)
        feed = {sd.input_nodes[("color", "static")]: rng.uniform(size=(8, 8, 3)),
                sd.input_nodes[("color", "dynamic")]: rng.uniform(size=(8, 8, 3)),
                sd.label_node: np.asarray(1.0)}
        err = grad_check(sd.graph, feed, sd.total_loss_node, epsilon=1e-5)
        assert err <= 1e-4
        worst = max(worst, err)

        psmm = build_psmm(GRAD_SPEC, FusionVariant.PSMM, seed=seed)
        for k in psmm.graph.params:
            if "/head/" in k:
                psmm.graph.params[k] = 0.3 * rng.normal(size=psmm.graph.params[k].shape)
        feed = {psmm.label_node: np.asarray(0.0)}
        for m in psmm.modalities:
            c = MODALITY_CHANNELS[m]
            feed[psmm.input_nodes[(m, "static")]] = rng.uniform(size=(8, 8, c))
            feed[psmm.input_nodes[(m, "dynamic")]] = rng.uniform(size=(8, 8, c))
        err = grad_check(psmm.graph, feed, psmm.total_loss_node, epsilon=1e-5)
        assert err <= 1e-4
        worst = max(worst, err)
    elapsed = time.time() - t0
    assert elapsed < 300.0
    _report(3, f"max relative gradient error {worst:.2e} over 3 seeds ({elapsed:.0f}s)")


def test_criterion_4_fusion_topology_identities():
    rng = np.random.default_rng(4)

    # (a) loss additivity is exact for both loss layers
    sd_logits = {f"color/{k}": rng.normal(size=2) for k in ("s", "d", "f", "sdf")}
    bundle = sdnet_loss(sd_logits, 0, "color")
    acc = bundle.components["color/s"]
    for k in ("color/d", "color/f", "color/sdf"):
        acc = acc + bundle.components[k]
    assert bundle.per_modality["color"] == acc

    psmm = build_psmm(NET_SPEC, FusionVariant.PSMM, seed=5)
    inputs = {m: (rng.uniform(size=(16, 16, MODALITY_CHANNELS[m])),
                  rng.uniform(size=(16, 16, MODALITY_CHANNELS[m])))
              for m in psmm.modalities}
    state, logits = psmm_forward(psmm, inputs, label=1)
    full = psmm_loss(psmm, logits, 1)
    acc = full.whole
    for m in psmm.modalities:
        acc = acc + full.per_modality[m]
    assert full.total == acc

    # (b) the shared branch output at level 1 is exactly zero
    assert np.all(state.shared[1] == 0.0)

    # (c) zeroed shared branch reduces every modality to its standalone network
    ablated = build_psmm(NET_SPEC, FusionVariant.PSMM, seed=6)
    for name, p in ablated.graph.params.items():
        if name.startswith("shared/"):
            ablated.graph.params[name] = np.zeros_like(p)
    _, fused_logits = psmm_forward(ablated, inputs)
    for m in ablated.modalities:
        lone = build_sdnet(NET_SPEC, m, seed=1)
        lone.set_params({k: ablated.graph.params[k] for k in lone.graph.params})
        _, lone_logits = sdnet_forward(lone, inputs[m][0], inputs[m][1])
        for key in (f"{m}/s", f"{m}/d", f"{m}/f", f"{m}/sdf"):
            np.testing.assert_array_equal(lone_logits[key], fused_logits[key])

    # (d) no static-dynamic map reaches either fusion exchange
    assert fused_branch_is_isolated(psmm)
    assert shared_tail_is_isolated(psmm)

    # (e) untrained heads sit at exact class indifference
    assert abs(full.total - 13 * math.log(2)) < 1e-12
    sdn = build_sdnet(NET_SPEC, "color", seed=7)
    _, lg = sdnet_forward(sdn, inputs["color"][0], inputs["color"][1])
    assert abs(sdnet_loss(lg, 0, "color").total - 4 * math.log(2)) < 1e-12

    _report(4, "loss additivity, zero shared level 1, zero-shared ablation, "
               "hybrid-branch isolation, ln2 identities")


def test_criterion_5_protocol_fixture_suite():
    t0 = time.time()
    expected = {
        "1_1": (600, 1800, 300, 900), "1_2": (600, 1800, 300, 900),
        "1_3": (600, 1800, 300, 900),
        "2_1": (1800, 3600, 900, 1800), "2_2": (1800, 1800, 900, 900),
        "3_1": (600, 1800, 300, 900), "3_2": (600, 1800, 300, 900),
        "3_3": (600, 1800, 300, 900),
        "4_1": (600, 600, 300, 300), "4_2": (600, 600, 300, 300),
        "4_3": (600, 600, 300, 300),
    }
    manifest = canonical_manifest()
    assert len([e for e in manifest if not e.is_3d]) == 18000
    for sub_id in SUB_PROTOCOLS:
        split = build_split(manifest, sub_id)
        report = validate_split(split)
        assert report.ok, (sub_id, report.violations)
        got = (report.counts["train_real"], report.counts["train_fake"],
               report.counts["valid_real"], report.counts["valid_fake"])
        assert got == expected[sub_id], sub_id
    elapsed = time.time() - t0
    assert elapsed < 10.0
    _report(5, f"all 11 sub-protocols reproduce the canonical full-scale "
               f"train/valid counts with disjoint subjects ({elapsed:.1f}s)")


def test_criterion_6_metrics_suite():
    t0 = time.time()
    rng = np.random.default_rng(6)

    for _ in range(200):   # exact ACER identity at random thresholds
        n = int(rng.integers(4, 60))
        scores = rng.uniform(size=n)
        bona = rng.uniform(size=n) < 0.5
        bona[0], bona[1] = True, False
        apcer, bpcer, acer = rates_at(ScoredSet(scores, bona), float(rng.uniform()))
        assert acer == (apcer + bpcer) / 2.0

    for _ in range(1000):  # ROC monotone with correct endpoints
        n = int(rng.integers(2, 50))
        scores = rng.uniform(size=n)
        bona = rng.uniform(size=n) < 0.5
        bona[0], bona[-1] = True, False
        curve = roc(ScoredSet(scores, bona))
        assert (curve.fpr[0], curve.tpr[0]) == (0.0, 0.0)
        assert (curve.fpr[-1], curve.tpr[-1]) == (1.0, 1.0)
        assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)

    scores = rng.uniform(size=10_000)
    bona = rng.uniform(size=10_000) < 0.4
    s = ScoredSet(scores, bona)
    curve = roc(s)
    pos, neg = scores[bona], scores[~bona]
    for target in (1e-2, 0.1, 0.3):
        best = 0.0
        for thr in np.concatenate(([np.inf], np.unique(scores)[::-1], [-np.inf])):
            if (neg >= thr).mean() <= target:
                best = max(best, (pos >= thr).mean())
        assert tpr_at_fpr(curve, target) == best

    agg = aggregate([{"acer": 0.006}, {"acer": 0.044}, {"acer": 0.015}])
    mean, std = agg["acer"]
    assert round(100 * mean, 1) == 2.2
    assert round(100 * std, 1) == 2.0

    elapsed = time.time() - t0
    assert elapsed < 30.0
    _report(6, f"ACER identity, 1000 ROC property draws, exhaustive "
               f"TPR@FPR sweep, reference aggregate row ({elapsed:.1f}s)")


def _train_and_score(model, split, root, tcfg):
    sampler = ClipSampler(split.train, root, model.modalities,
                          E2E_SPEC.input_size, tcfg)
    train(model, sampler, tcfg)
    rows = evaluate_entries(model, split.test, root, E2E_SPEC.input_size, tcfg, "1_1")
    scored = ScoredSet(np.array([r[1] for r in rows]),
                       np.array([r[2] for r in rows]))
    return rates_at(scored, 0.5)[2]


def test_criterion_7_end_to_end_learning_sanity(corpus60):
    t0 = time.time()
    root, entries = corpus60
    split = build_split(entries, "1_1", include_3d=False)

    psmm = build_psmm(E2E_SPEC, FusionVariant.PSMM, seed=0)
    psmm_cfg = TrainConfig(epochs=12, lr=3e-3, decay_epochs=(9,), batch_size=16,
                           seed=0, samples_per_video=3)
    psmm_acer = _train_and_score(psmm, split, root, psmm_cfg)
    assert psmm_acer <= 0.10

    trio_cfg = TrainConfig(epochs=18, lr=3e-3, decay_epochs=(14,), batch_size=16,
                           seed=0, samples_per_video=3)
    acers = {}
    for branches in ("s", "d", "sd"):
        model = build_sdnet(E2E_SPEC, "color", branches=branches, seed=0)
        acers[branches] = _train_and_score(model, split, root, trio_cfg)
    assert acers["sd"] <= min(acers["s"], acers["d"]), acers

    elapsed = time.time() - t0
    assert elapsed < 1800.0
    _report(7, f"fusion model test ACER {100 * psmm_acer:.2f}%; ablation "
               f"s/d/sd = {100 * acers['s']:.1f}/{100 * acers['d']:.1f}/"
               f"{100 * acers['sd']:.1f}% ({elapsed:.0f}s)")


def test_criterion_8_bitwise_determinism(tmp_path):
    t0 = time.time()

    # corpus synthesis
    cfg = SynthConfig(subjects_per_ethnicity=5, clip_len=10, frame_size=12, seed=9)
    m1, e1 = synth_dataset(cfg, tmp_path / "a")
    m2, _ = synth_dataset(cfg, tmp_path / "b")
    assert m1.read_bytes() == m2.read_bytes()
    clip = e1[0].path
    assert ((tmp_path / "a" / clip).read_bytes()
            == (tmp_path / "b" / clip).read_bytes())

    # split construction is a pure function of the manifest
    entries = parse_manifest(m1)
    s1 = build_split(entries, "1_1")
    s2 = build_split(entries, "1_1")
    assert s1.train == s2.train and s1.test == s2.test

    # rank pooling
    rng = np.random.default_rng(1)
    frames = rng.normal(size=(9, 4, 4, 1))
    d1 = dynamic_image_at(FrameSequence(frames), 8, RankPoolConfig(window=7))
    d2 = dynamic_image_at(FrameSequence(frames), 8, RankPoolConfig(window=7))
    np.testing.assert_array_equal(d1.data, d2.data)

    # training losses and final parameters
    split = build_split(entries, "1_1", include_3d=False)
    runs = []
    for _ in range(2):
        model = build_sdnet(BackboneSpec(input_size=12, stem_channels=2,
                                         level_channels=(2, 3, 3, 4)),
                            "color", seed=3)
        tcfg = TrainConfig(epochs=2, lr=1e-3, decay_epochs=(), batch_size=4,
                           seed=5, samples_per_video=1)
        sampler = ClipSampler(split.train, tmp_path / "a", ("color",), 12, tcfg)
        result = train(model, sampler, tcfg)
        rows = evaluate_entries(model, split.valid, tmp_path / "a", 12, tcfg, "1_1")
        runs.append(([r["loss"] for r in result.log],
                     {k: v.copy() for k, v in result.params.items()},
                     [r[1] for r in rows]))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])
    assert runs[0][2] == runs[1][2]

    elapsed = time.time() - t0
    _report(8, f"synthesis, splits, pooling, training and scoring are "
               f"bitwise reproducible under fixed seeds ({elapsed:.1f}s)")
