from dataclasses import replace

import numpy as np
import pytest

from mgrgcl.clustering import ClusteringConfig
from mgrgcl.dataset import SynthConfig, generate_synthetic_pair
from mgrgcl.errors import InvalidConfig
from mgrgcl.mgr import forward
from mgrgcl.pipeline import (
    MemoryConfig,
    RunConfig,
    adapt,
    class_indices,
    extract_mega_features,
    make_params,
    mega_features,
    run_variant,
    train_source,
)
from mgrgcl.training import SamplerConfig

SMALL = SynthConfig(num_identities=12, samples_per_identity=8, cameras=4, map_shape=(8, 6, 6), seed=3)


@pytest.fixture(scope="module")
def pair():
    return generate_synthetic_pair(SMALL)


def _cfg(**kw):
    base = RunConfig(supervised_epochs=3, unsupervised_rounds=2, iterations_per_round=5,
                     sampler=SamplerConfig(4, 4), seed=1)
    return replace(base, **kw)


def _fresh(pair, cfg):
    _, k = class_indices(pair.source.identities)
    return make_params(cfg, SMALL.map_shape[0], k)


def _same(a, b):
    return a.tensors.keys() == b.tensors.keys() and all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


def test_zero_epochs_is_noop(pair):
    cfg = _cfg(supervised_epochs=0)
    p = _fresh(pair, cfg)
    before = p.copy()
    _, history = train_source(pair.source, p, cfg)
    assert history == [] and _same(p, before)


def test_source_training_deterministic(pair):
    cfg = _cfg()
    a, ha = train_source(pair.source, _fresh(pair, cfg), cfg)
    b, hb = train_source(pair.source, _fresh(pair, cfg), cfg)
    assert _same(a, b) and ha == hb


def test_one_epoch_on_default_source_lowers_loss():
    full = generate_synthetic_pair(SynthConfig())
    cfg = RunConfig(supervised_epochs=1)
    _, k = class_indices(full.source.identities)
    _, history = train_source(full.source, make_params(cfg, 32, k), cfg)
    losses = history[0]["batch_losses"]
    assert np.mean(losses[-3:]) < np.mean(losses[:3])


def test_mega_features_shapes_and_norms(pair):
    cfg = _cfg()
    p = _fresh(pair, cfg)
    maps = pair.target.sample_maps()
    one, _ = mega_features(maps[:1], p)
    assert one.shape == (1, 3 * p.d_g + 10 * p.d_p)
    feats = extract_mega_features(pair.target, p)
    np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-12)
    raw = extract_mega_features(pair.target, p, normalize=False)
    loop = np.stack([forward(m.astype(np.float64), p).mega for m in maps])
    np.testing.assert_allclose(raw, loop, atol=1e-12)
    centred, mean = mega_features(maps, p, normalize=False, center=True)
    np.testing.assert_allclose(centred.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(mean, loop.mean(axis=0), atol=1e-12)


def test_adapt_reports_and_frozen_heads(pair):
    cfg = _cfg()
    p, _ = train_source(pair.source, _fresh(pair, cfg), cfg)
    before = p.copy()
    p, reports = adapt(pair.target, p, cfg)
    assert len(reports) == 2
    for r in reports:
        assert r.status == "ok"
        assert r.memory_entries == r.num_groups == len(r.group_sizes)
        assert r.P == min(cfg.sampler.P, r.num_groups)
        assert np.isfinite(r.mean_loss)
    for k in p.tensors:
        same = np.array_equal(p.tensors[k], before.tensors[k])
        assert same == k.startswith("classifier.")


def test_one_iter_runs_one_round(pair):
    cfg = _cfg(variant="one_iter", unsupervised_rounds=5)
    _, reports = adapt(pair.target, _fresh(pair, cfg), cfg)
    assert len(reports) == 1


def test_adapt_with_frozen_memory(pair):
    cfg = _cfg(memory=MemoryConfig(momentum=1.0, temperature=0.2), unsupervised_rounds=1)
    _, reports = adapt(pair.target, _fresh(pair, cfg), cfg)
    assert np.isfinite(reports[0].mean_loss)


def test_all_noise_round_is_skipped(pair):
    cfg = _cfg(clustering=ClusteringConfig(1e-9, 4), unsupervised_rounds=2)
    p = _fresh(pair, cfg)
    before = p.copy()
    p, reports = adapt(pair.target, p, cfg)
    assert [r.status for r in reports] == ["skipped_all_noise"] * 2
    assert reports[0].noise == len(pair.target) and reports[0].mean_loss is None
    assert _same(p, before)


def test_few_groups_lower_p(pair):
    cfg = _cfg(sampler=SamplerConfig(40, 2), unsupervised_rounds=1)
    _, reports = adapt(pair.target, _fresh(pair, cfg), cfg)
    assert reports[0].num_groups < 40
    assert reports[0].P == reports[0].num_groups


def test_variants(pair):
    base = _cfg()
    only = run_variant(replace(base, variant="mgr_only"), pair)
    src, _ = train_source(pair.source, _fresh(pair, base), base)
    assert only.adapted is None and only.reports == [] and _same(only.params, src)
    no_hv = run_variant(replace(base, variant="mgr_no_hv"), pair)
    assert no_hv.params.mega_dim == 3 * no_hv.params.d_g
    no_h = run_variant(replace(base, variant="mgr_no_h"), pair)
    assert len(no_h.params.part_names) == 5
    full_a = run_variant(base, pair)
    full_b = run_variant(base, pair)
    assert full_a.final.mAP == full_b.final.mAP and _same(full_a.params, full_b.params)
    assert full_a.adapted is not None and len(full_a.reports) == 2


def test_run_config_validation():
    with pytest.raises(InvalidConfig, match="run.variant"):
        RunConfig(variant="nope").validate()
    with pytest.raises(InvalidConfig, match="run.clustering.eps"):
        RunConfig(clustering=ClusteringConfig(-1.0)).validate()
    with pytest.raises(InvalidConfig, match="run.memory.temperature"):
        RunConfig(memory=MemoryConfig(0.2, 0.0)).validate()
