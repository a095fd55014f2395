import numpy as np
import pytest

from synthbalance.benchmark import (
    BenchmarkConfig,
    generate,
    hue_distance,
    mean_hue,
    render_lesion,
    write_benchmark,
)
from synthbalance.data import load_manifest


def test_split_counts_and_ids():
    cfg = BenchmarkConfig(image_side=16, n_majority=40, n_minority=10, seed=1)
    train, test = generate(cfg)
    assert train.class_counts == {"benign": 28, "malignant": 7}
    assert test.class_counts == {"benign": 12, "malignant": 3}
    assert not set(train.ids) & set(test.ids)
    assert train[0].image.values.shape == (16, 16, 3)


def test_generation_is_deterministic():
    cfg = BenchmarkConfig(image_side=16, n_majority=6, n_minority=3, seed=4)
    a, b = generate(cfg), generate(cfg)
    assert a[0].ids == b[0].ids
    assert all(x.image.equals(y.image) for x, y in zip(a[0], b[0]))


def test_zero_gap_classes_share_a_distribution():
    cfg = BenchmarkConfig(image_side=16, domain_gap=0.0)
    # same (seed, index) but different class keys: different draws, same law
    b = render_lesion(0, 0, cfg)
    assert b.shape == (16, 16, 3) and 0 <= b.min() and b.max() <= 255


def test_hue_gap_is_monotone():
    hues = []
    for gap in (0.0, 0.5, 1.0):
        cfg = BenchmarkConfig(image_side=32, n_majority=40, n_minority=40, domain_gap=gap, train_fraction=1.0)
        train, _ = generate(cfg)
        hues.append(np.mean([mean_hue(s.image.values) for s in train.with_label(1)]))
    benign = np.mean([mean_hue(s.image.values) for s in train.with_label(0)])
    dists = [hue_distance(h, benign) for h in hues]
    assert dists[0] < dists[1] < dists[2]


def test_mean_hue_of_pure_colours():
    red = np.zeros((4, 4, 3))
    red[..., 0] = 200
    assert mean_hue(red) == pytest.approx(0.0, abs=1e-9)
    green = np.zeros((4, 4, 3))
    green[..., 1] = 200
    assert mean_hue(green) == pytest.approx(120.0, abs=1e-9)
    assert hue_distance(350.0, 10.0) == pytest.approx(20.0)


def test_write_benchmark_is_loadable(tmp_path):
    cfg = BenchmarkConfig(image_side=16, n_majority=4, n_minority=2)
    train_dir, test_dir = write_benchmark(cfg, tmp_path)
    ds = load_manifest(train_dir / "manifest.csv", train_dir)
    assert ds.class_counts == {"benign": 3, "malignant": 1}


def test_config_validation():
    with pytest.raises(ValueError):
        BenchmarkConfig(n_majority=5, n_minority=10)
    with pytest.raises(ValueError):
        BenchmarkConfig(domain_gap=1.5)
