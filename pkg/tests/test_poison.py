import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trojanscope import poison
from trojanscope.data import LabeledSet
from trojanscope.errors import ConfigError, PoisoningDegenerateError, TriggerSpecError
from trojanscope.poison import LabelMapping, PoisonConfig, TriggerSpec


def _set(n, c=5, shape=(1, 8, 8), seed=0):
    rng = np.random.default_rng(seed)
    return LabeledSet(rng.uniform(size=(n,) + shape), np.arange(n) % c)


def test_patch_side_from_area():
    assert poison.patch_side(TriggerSpec(area_fraction=0.0319), 28, 28) == 5
    assert poison.patch_side(TriggerSpec(area_fraction=0.0001), 28, 28) == 1
    with pytest.raises(TriggerSpecError):
        poison.patch_side(TriggerSpec(area_fraction=0.1), 1, 100)


def test_identity_filter_leaves_image():
    img = np.random.default_rng(0).uniform(size=(3, 6, 6)).astype(np.float32)
    spec = TriggerSpec("filter", "channel_scale", scale=(1, 1, 1), shift=(0, 0, 0))
    np.testing.assert_array_equal(poison.stamp_trigger(img, spec), img)


def test_fixed_square_replaces_exact_pixels():
    spec = TriggerSpec("patch", "square", area_fraction=0.0319, color=(1.0,), location=(0, 0))
    out = poison.stamp_trigger(np.zeros((1, 28, 28)), spec)
    assert out.sum() == 25 and out[0, :5, :5].min() == 1.0


def test_filter_is_clamped_and_input_untouched():
    img = np.full((3, 4, 4), 0.8, dtype=np.float32)
    spec = TriggerSpec("filter", "channel_shift", scale=(1, 1, 1), shift=(0.5, 0.0, -0.9))
    out = poison.stamp_trigger(img, spec)
    assert out[0].max() == 1.0 and out[2].min() == 0.0
    np.testing.assert_allclose(out[1], 0.8)
    assert img.max() == np.float32(0.8)


@pytest.mark.parametrize("pattern", poison.PATCH_PATTERNS)
def test_patterns_are_binary_masks(pattern):
    m = poison.patch_pattern(TriggerSpec(pattern=pattern, pattern_seed=3), 5)
    assert m.shape == (5, 5) and set(np.unique(m)) <= {0.0, 1.0} and m.any()


def test_trigger_spec_validation():
    with pytest.raises(TriggerSpecError):
        TriggerSpec(pattern="spiral")
    with pytest.raises(TriggerSpecError):
        TriggerSpec(area_fraction=0.2)
    with pytest.raises(TriggerSpecError):
        TriggerSpec(family="blend")
    with pytest.raises(TriggerSpecError):
        poison.stamp_trigger(np.zeros((1, 8, 8)), TriggerSpec(area_fraction=0.1, location=(6, 0)))
    with pytest.raises(TriggerSpecError):
        poison.stamp_trigger(np.zeros((1, 8, 8)), TriggerSpec())


def test_label_mapping_examples():
    assert poison.map_label(3, poison.m2o(10, 7)) == 7
    assert poison.map_label(7, poison.m2o(10, 7)) == 7
    shift = LabelMapping("M2M", 10, permutation=poison.shift_permutation(10))
    assert poison.map_label(9, shift) == 0
    part = ("to_target", "to_target", "unchanged", "permuted", "permuted", "unchanged")
    mixed = LabelMapping("Mixed", 6, target=5, permutation=(0, 1, 2, 4, 3, 5), partition=part)
    assert [poison.map_label(y, mixed) for y in range(6)] == [5, 5, 2, 4, 3, 5]
    assert not mixed.changes(2) and mixed.changes(0)


def test_mapping_validation():
    with pytest.raises(ConfigError):
        LabelMapping("M2M", 3, permutation=(0, 2, 1))
    with pytest.raises(ConfigError):
        LabelMapping("M2O", 3, target=3)
    with pytest.raises(ConfigError):
        poison.random_mapping("O2O", 3, np.random.default_rng(0))


def test_mixed_needs_four_classes():
    with pytest.raises(ConfigError):
        poison.mixed(3, np.random.default_rng(0))


@given(st.integers(4, 10), st.integers(0, 2 ** 31))
def test_mixed_mapping_structure(c, seed):
    m = poison.mixed(c, np.random.default_rng(seed))
    roles = list(m.partition)
    assert roles[m.target] == "unchanged"
    assert roles.count("to_target") == max(1, round(c / 3))
    permuted = [y for y in range(c) if roles[y] == "permuted"]
    assert sorted(m.permutation[y] for y in permuted) == permuted
    assert all(m.permutation[y] != y for y in permuted)


@given(st.integers(2, 12), st.integers(0, 2 ** 31))
def test_m2m_is_fixed_point_free_bijection(c, seed):
    m = poison.m2m(c, np.random.default_rng(seed))
    mapped = [poison.map_label(y, m) for y in range(c)]
    assert sorted(mapped) == list(range(c)) and all(a != b for a, b in zip(mapped, range(c)))


@given(st.integers(2, 12), st.integers(0, 11), st.integers(0, 11))
def test_m2o_idempotent(c, target, y):
    m = poison.m2o(c, target % c)
    y = y % c
    assert poison.map_label(poison.map_label(y, m), m) == poison.map_label(y, m)


def _cfg(ratio=0.15, noise=0.0, seed=0, kind="M2O", area=0.05, pattern="checkerboard"):
    mapping = {"M2O": poison.m2o(5, 1), "M2M": poison.m2m(5),
               "Mixed": poison.mixed(5, np.random.default_rng(0))}[kind]
    return PoisonConfig(TriggerSpec(pattern=pattern, area_fraction=area), mapping, ratio, noise, seed)


def test_exact_poison_count_example():
    train, _ = poison.poison_dataset(_set(1000), _cfg(0.15))
    assert int(train.meta["poisoned_mask"].sum()) == 150 and len(train) == 1000


def test_degenerate_poisoning():
    with pytest.raises(PoisoningDegenerateError):
        poison.poison_dataset(_set(5), _cfg(0.15))
    with pytest.raises(ConfigError):
        _cfg(0.0)
    with pytest.raises(ConfigError):
        _cfg(0.6)


def test_poisoning_is_deterministic():
    ds = _set(300)
    a, ea = poison.poison_dataset(ds, _cfg(seed=4, noise=0.05), ds)
    b, eb = poison.poison_dataset(ds, _cfg(seed=4, noise=0.05), ds)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.meta["poisoned_mask"], b.meta["poisoned_mask"])
    np.testing.assert_array_equal(ea.images, eb.images)


@settings(max_examples=40, deadline=None)
@given(st.integers(7, 400), st.floats(0.02, 0.5), st.integers(0, 2 ** 31),
       st.sampled_from(poison.PATCH_PATTERNS), st.sampled_from(poison.MAPPING_KINDS))
def test_poisoning_properties(n, ratio, seed, pattern, kind):
    if ratio * n < 1:
        return
    ds = _set(n, seed=seed % 1000)
    cfg = _cfg(ratio, 0.0, seed, kind, pattern=pattern)
    train, _ = poison.poison_dataset(ds, cfg)
    mask = train.meta["poisoned_mask"]
    assert int(mask.sum()) == math.floor(ratio * n + 0.5)
    assert train.images.min() >= 0 and train.images.max() <= 1
    np.testing.assert_array_equal(train.images[~mask], ds.images[~mask])
    np.testing.assert_array_equal(train.labels[~mask], ds.labels[~mask])
    np.testing.assert_array_equal(train.labels[mask], poison.map_labels(ds.labels[mask], cfg.mapping))
    s = poison.patch_side(cfg.trigger, 8, 8)
    diff = train.images[mask] != ds.images[mask]
    assert diff.reshape(len(diff), -1).sum(axis=1).max() <= s * s
    # every change sits inside one s x s window
    for d in diff[:, 0]:
        rows, cols = np.nonzero(d)
        if rows.size:
            assert rows.max() - rows.min() < s and cols.max() - cols.min() < s


def test_noise_stays_in_range_and_applies_everywhere():
    ds = _set(200)
    train, _ = poison.poison_dataset(ds, _cfg(0.1, noise=0.2, seed=2))
    assert train.images.min() >= 0 and train.images.max() <= 1
    clean = ~train.meta["poisoned_mask"]
    assert np.abs(train.images[clean] - ds.images[clean]).max() <= 0.2 + 1e-6
    assert np.any(train.images[clean] != ds.images[clean])


def test_trigger_eval_labels_and_mixed_exclusion():
    ds = _set(100)
    cfg = _cfg(kind="Mixed")
    _, ev = poison.poison_dataset(ds, cfg, ds)
    assert ev.split_tag == "trigger_eval"
    assert all(cfg.mapping.changes(int(y)) for y in ev.source_labels)
    np.testing.assert_array_equal(ev.labels, poison.map_labels(ev.source_labels, cfg.mapping))
    _, ev2 = poison.poison_dataset(ds, _cfg(kind="M2O"), ds)
    assert len(ev2) == 100


def test_config_round_trip_and_template_draw():
    rng = np.random.default_rng(0)
    tmpl = poison.PoisonTemplate()
    for kind in poison.MAPPING_KINDS:
        cfg = tmpl.draw(kind, 5, 1, rng)
        assert 0.15 <= cfg.ratio <= 0.20 and 0.01 <= cfg.trigger.area_fraction <= 0.03
        assert PoisonConfig.from_dict(cfg.to_dict()) == cfg
    filt = poison.random_trigger(rng, 3, families=("filter",))
    assert filt.family == "filter" and TriggerSpec.from_dict(filt.to_dict()) == filt
