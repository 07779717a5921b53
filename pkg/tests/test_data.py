import numpy as np
import pytest

from robustfuse.data import (IR_THRESHOLD, VIS_THRESHOLD, SceneSpec, best_single_channel_iou, generate_dataset,
                             make_splits, oracle_predict)
from robustfuse.seg import miou


def test_generation_is_deterministic():
    a = generate_dataset(SceneSpec(seed=7), 16)
    b = generate_dataset(SceneSpec(seed=7), 16)
    assert a.hash() == b.hash()
    assert generate_dataset(SceneSpec(seed=8), 16).hash() != a.hash()


def test_value_ranges_and_label_variety():
    d = generate_dataset(SceneSpec(seed=1), 64)
    assert d.x.dtype == np.float32 and d.x.shape == (64, 1, 32, 32)
    for arr in (d.x, d.y):
        assert arr.min() >= 0 and arr.max() <= 1
    assert all(len(np.unique(z)) >= 2 for z in d.z)
    assert set(np.unique(d.z)) == {0, 1, 2, 3}


def test_noise_free_intensity_contract():
    d = generate_dataset(SceneSpec(seed=3, noise=0.0, blobs=(1, 1)), 32)
    blob = (d.z == 1) | (d.z == 3)
    assert d.x[:, 0][blob].min() >= 0.8
    assert d.x[:, 0][~blob].max() <= 0.3


def test_oracle_is_perfect_and_ir_alone_is_not():
    d = generate_dataset(SceneSpec(seed=2), 128)
    _, m = miou(oracle_predict(d.x, d.y), d.z, 4)
    assert m == 1.0
    # thresholds leave a margin to both intensity populations
    assert d.x[:, 0][(d.z == 1) | (d.z == 3)].min() > IR_THRESHOLD
    assert d.y[:, 0][(d.z == 2) | (d.z == 3)].min() > VIS_THRESHOLD
    assert best_single_channel_iou(d.x, d.z, 3) < 0.75


def test_best_single_channel_iou_on_a_separable_toy():
    ch = np.array([0.1, 0.2, 0.8, 0.9])
    z = np.array([0, 0, 1, 1])
    assert best_single_channel_iou(ch, z, 1) == 1.0
    assert best_single_channel_iou(ch, z, 0) == 1.0  # reversed direction
    assert best_single_channel_iou(np.zeros(4), z, 1) == 0.5


@pytest.mark.parametrize("kw", [dict(size=4), dict(num_classes=3), dict(blobs=(2, 1)), dict(stripes=(0, 1)),
                                dict(illumination=(0.5, 1.0)), dict(noise=0.5)])
def test_invalid_specs(kw):
    with pytest.raises(ValueError):
        generate_dataset(SceneSpec(**kw), 4)


def test_splits_are_disjoint_streams_and_json_round_trip():
    s = SceneSpec(seed=4)
    sp = make_splits(s, 8, 4, 4)
    assert len({d.hash() for d in sp.values()}) == 3
    assert SceneSpec.from_json(s.to_json()) == s
    with pytest.raises(ValueError):
        generate_dataset(s, 0)


def test_dataset_batching():
    d = generate_dataset(SceneSpec(seed=5), 10)
    sizes = [len(b) for b in d.batches(4)]
    assert sizes == [4, 4, 2]
    shuffled = np.concatenate([b.z for b in d.batches(4, shuffle_seed=1)])
    assert sorted(map(bytes, shuffled)) == sorted(map(bytes, d.z))
