import csv

import numpy as np
import pytest
import torch

from synthbalance.classifier import ClassifierSpec, build_classifier, images_tensor
from synthbalance.data import ImageTensor
from synthbalance.explain import cam_from_gradients, export_features, grad_cam, heat_colormap, write_saliency

from conftest import make_dataset


def bilinear_oracle(img, out_h, out_w):
    """Half-pixel-centre bilinear resize written with explicit loops."""
    in_h, in_w = img.shape
    out = np.zeros((out_h, out_w))
    for y in range(out_h):
        sy = max((y + 0.5) * in_h / out_h - 0.5, 0.0)
        y0 = min(int(np.floor(sy)), in_h - 1)
        y1 = min(y0 + 1, in_h - 1)
        fy = sy - y0
        for x in range(out_w):
            sx = max((x + 0.5) * in_w / out_w - 0.5, 0.0)
            x0 = min(int(np.floor(sx)), in_w - 1)
            x1 = min(x0 + 1, in_w - 1)
            fx = sx - x0
            out[y, x] = (
                (1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1]
            )
    return out


def cam_oracle(act, grad, out_size):
    c, h, w = act.shape
    weights = [sum(grad[k, i, j] for i in range(h) for j in range(w)) / (h * w) for k in range(c)]
    cam = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            cam[i, j] = max(0.0, sum(weights[k] * act[k, i, j] for k in range(c)))
    if (h, w) != tuple(out_size):
        cam = np.maximum(bilinear_oracle(cam, *out_size), 0.0)
    return cam / cam.max() if cam.max() > 0 else cam


@pytest.mark.parametrize("seed", range(5))
def test_cam_matches_direct_summation(seed):
    rng = np.random.default_rng(seed)
    act = rng.normal(size=(5, 3, 4))
    grad = rng.normal(size=(5, 3, 4))
    out = (9, 13)
    np.testing.assert_allclose(cam_from_gradients(act, grad, out), cam_oracle(act, grad, out), atol=1e-9)


def test_cam_all_negative_gives_zero_map():
    act = np.ones((2, 3, 3))
    grad = -np.ones((2, 3, 3))
    cam = cam_from_gradients(act, grad, (6, 6))
    assert cam.shape == (6, 6) and not cam.any()


def test_cam_shape_mismatch():
    with pytest.raises(ValueError):
        cam_from_gradients(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)), (3, 3))


def test_grad_cam_gradients_match_hand_derivation():
    # logit_k = sum_c W[k, c] * mean(maxpool(A_c)); so dlogit/dA[c, i, j] is
    # W[k, c] / n_cells at each pooling window's maximum and zero elsewhere
    state = build_classifier(ClassifierSpec(backbone="small_cnn_gap"), 16, seed=3)
    image = make_dataset(0, 1, side=16, seed=1)[0].image
    x = images_tensor([image], 16, 3)
    with torch.no_grad():
        _, _, act = state.model.forward_parts(x)
    a = act[0].double().numpy()
    weight = state.model.head.weight.detach().double().numpy()
    c, h, w = a.shape
    n_cells = (h // 2) * (w // 2)
    grad = np.zeros_like(a)
    for k in range(c):
        for bi in range(0, h, 2):
            for bj in range(0, w, 2):
                win = a[k, bi:bi + 2, bj:bj + 2]
                i, j = np.unravel_index(np.argmax(win), win.shape)
                grad[k, bi + i, bj + j] = weight[1, k] / n_cells
    expected = cam_oracle(a, grad, (16, 16))
    sal = grad_cam(state, image, 1, "m0")
    assert sal.values.shape == (16, 16) and sal.source_id == "m0"
    np.testing.assert_allclose(sal.values, expected, atol=1e-6)


def test_saliency_range_and_resolution():
    state = build_classifier(ClassifierSpec(backbone="small_cnn_gap"), 16, seed=0)
    for s in make_dataset(2, 2, side=16):
        sal = grad_cam(state, s.image, s.label)
        assert sal.values.shape == (16, 16)
        assert sal.values.min() >= 0 and sal.values.max() <= 1
    with pytest.raises(ValueError):
        grad_cam(state, s.image, 2)


def test_feature_export_and_csv(tmp_path):
    state = build_classifier(ClassifierSpec(backbone="small_cnn_gap"), 8, seed=0)
    ds = make_dataset(2, 1)
    fm = export_features(state, ds)
    assert fm.features.shape == (3, 64)
    with torch.no_grad():
        want = state.model.forward_parts(images_tensor(ds.images, 8, 3))[1].numpy()
    np.testing.assert_allclose(fm.features, want, atol=1e-6)
    rows = list(csv.reader(fm.write_csv(tmp_path / "f.csv").open()))
    assert rows[0][:4] == ["id", "label", "provenance", "f_0"] and len(rows) == 4
    assert rows[3][1] == "malignant"


def test_write_saliency_outputs(tmp_path):
    state = build_classifier(ClassifierSpec(backbone="small_cnn_gap"), 8, seed=0)
    image = ImageTensor(np.random.default_rng(0).uniform(0, 255, (8, 8, 1)))
    paths = write_saliency(grad_cam(state, make_dataset(1, 0)[0].image, 0), image, tmp_path, "s")
    assert all(p.exists() for p in paths)
    assert np.loadtxt(paths[2], delimiter=",").shape == (8, 8)
    assert heat_colormap(np.array([[0.0, 1.0]])).shape == (1, 2, 3)
