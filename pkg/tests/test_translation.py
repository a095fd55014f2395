import math

import numpy as np
import pytest
import torch

from synthbalance import translation as tr
from synthbalance.data import ImageTensor, LabelledDataset, LabelledSample, to_tanh_range
from synthbalance.errors import CheckpointError, DataError, TrainingError
from synthbalance.translation import (
    CycleGanConfig,
    DiscriminatorSpec,
    GeneratorSpec,
    PatchDiscriminator,
    UNetGenerator,
    adversarial_loss,
    cycle_consistency_loss,
    discriminator_loss,
    generator_adversarial_loss,
    generator_loss,
    init_state,
    load_checkpoint,
    patch_receptive_field,
    save_checkpoint,
    synthesize,
    total_objective,
    train_cyclegan,
    translate,
    write_loss_history,
)

from conftest import make_dataset

GEN = GeneratorSpec(depth=3, base_filters=2)
DISC = DiscriminatorSpec(receptive_field=16, base_filters=2)


def tiny_domains(n=3, side=16, seed=0):
    ds = make_dataset(n, n, side=side, seed=seed)
    return ds.with_label(0), ds.with_label(1)


# -- loss terms ----------------------------------------------------------------

def test_adversarial_loss_hand_value():
    got = adversarial_loss(torch.tensor([0.8, 0.6], dtype=torch.float64), torch.tensor([0.3, 0.1], dtype=torch.float64))
    want = (math.log(0.8) + math.log(0.6)) / 2 + (math.log(0.7) + math.log(0.9)) / 2
    assert got.item() == pytest.approx(want, abs=1e-12)
    assert discriminator_loss(torch.tensor([0.8]), torch.tensor([0.3])).item() == pytest.approx(
        -(math.log(0.8) + math.log(0.7)), abs=1e-6
    )


def test_generator_adversarial_loss_is_non_saturating():
    assert generator_adversarial_loss(torch.tensor([0.25], dtype=torch.float64)).item() == pytest.approx(-math.log(0.25), abs=1e-12)
    assert generator_loss(torch.tensor([0.25]), "least_squares").item() == pytest.approx(0.5625)


def test_adversarial_loss_clamps_extremes():
    v = adversarial_loss(torch.tensor([1.0]), torch.tensor([1.0]))
    assert torch.isfinite(v)


def test_cycle_loss_hand_value_and_zero():
    ob = torch.zeros(1, 3, 2, 2)
    rb = torch.full((1, 3, 2, 2), 0.5)
    om = torch.ones(1, 3, 2, 2)
    rm = torch.ones(1, 3, 2, 2) * 0.75
    assert cycle_consistency_loss(ob, rb, om, rm).item() == pytest.approx(0.75)
    im = ImageTensor(np.random.default_rng(0).uniform(-1, 1, (4, 4, 3)), "tanh_m1_1")
    assert cycle_consistency_loss(im, im, im, im).item() == 0.0
    with pytest.raises(ValueError):
        cycle_consistency_loss(ob, torch.zeros(1, 3, 4, 4), om, rm)


def test_total_objective_weights_cycle():
    assert total_objective(1.0, 2.0, 0.5, 10.0) == 8.0
    assert total_objective(1.0, 2.0, 0.5, 0.0) == 3.0


# -- networks --------------------------------------------------------------------

@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_unet_shape_and_range(depth):
    g = UNetGenerator(GeneratorSpec(depth=depth, base_filters=2))
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    y = g(x)
    assert y.shape == x.shape
    assert y.abs().max() <= 1.0


@pytest.mark.parametrize("n_layers,rf", [(1, 16), (2, 34), (3, 70)])
def test_patch_receptive_field_matches_gradient_support(n_layers, rf):
    assert patch_receptive_field(n_layers) == rf
    d = PatchDiscriminator(DiscriminatorSpec(receptive_field=rf, base_filters=2, normalization="batch")).double()
    d.eval()
    side = 160
    x = torch.randn(1, 3, side, side, dtype=torch.float64, requires_grad=True)
    out = d(x)
    i, j = out.shape[2] // 2, out.shape[3] // 2
    out[0, 0, i, j].backward()
    rows = torch.nonzero(x.grad[0].abs().sum(dim=(0, 2)))
    cols = torch.nonzero(x.grad[0].abs().sum(dim=(0, 1)))
    assert rows.max() - rows.min() + 1 == rf
    assert cols.max() - cols.min() + 1 == rf


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        DiscriminatorSpec(receptive_field=50)
    with pytest.raises(ValueError):
        init_state(GeneratorSpec(depth=3, base_filters=2), DISC, CycleGanConfig(), 20)
    with pytest.raises(ValueError):
        CycleGanConfig(gan_loss_form="wasserstein")


# -- training -------------------------------------------------------------------

def test_zero_epochs_returns_initialization():
    b, m = tiny_domains()
    cfg = CycleGanConfig(epochs=0, seed=4)
    state = train_cyclegan(b, m, GEN, DISC, cfg)
    fresh = init_state(GEN, DISC, cfg, 16)
    assert state.epoch == 0 and all(len(v) == 0 for v in state.history.values())
    for name, net in state.networks().items():
        for p, q in zip(net.parameters(), fresh.networks()[name].parameters()):
            assert torch.equal(p, q)


def test_training_is_deterministic_and_records_history():
    b, m = tiny_domains()
    cfg = CycleGanConfig(epochs=2, seed=1)
    s1 = train_cyclegan(b, m, GEN, DISC, cfg)
    s2 = train_cyclegan(b, m, GEN, DISC, cfg)
    assert s1.history == s2.history
    assert all(len(v) == 2 for v in s1.history.values())
    assert all(math.isfinite(x) for v in s1.history.values() for x in v)


def test_generator_update_leaves_discriminators_untouched():
    state = init_state(GEN, DISC, CycleGanConfig(seed=0), 16)
    b = torch.rand(1, 3, 16, 16) * 2 - 1
    m = torch.rand(1, 3, 16, 16) * 2 - 1
    before = [p.clone() for p in state.d_m.parameters()]
    tr.generator_update(state, b, m, state.g_b(b), state.g_m(m))
    assert all(torch.equal(p, q) for p, q in zip(before, state.d_m.parameters()))
    assert all(p.grad is None for p in state.d_m.parameters())
    assert all(p.requires_grad for p in state.d_m.parameters())


def test_unbalanced_domains_rejected():
    b, m = tiny_domains()
    with pytest.raises(DataError):
        train_cyclegan(b, LabelledDataset(m.samples[:1]), GEN, DISC, CycleGanConfig(epochs=1))


def test_non_finite_loss_aborts_with_location(monkeypatch):
    b, m = tiny_domains()
    monkeypatch.setattr(tr, "generator_loss", lambda fake, form="log": torch.tensor(float("nan")))
    with pytest.raises(TrainingError, match="epoch 1, step 1"):
        train_cyclegan(b, m, GEN, DISC, CycleGanConfig(epochs=1))


def test_periodic_checkpoints(tmp_path):
    b, m = tiny_domains(n=2)
    seen = []
    train_cyclegan(
        b, m, GEN, DISC, CycleGanConfig(epochs=4, checkpoint_every=2),
        checkpoint_dir=tmp_path, on_checkpoint=lambda s: seen.append(s.epoch),
    )
    assert seen == [2, 4]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["translator_epoch0002.ckpt", "translator_epoch0004.ckpt"]


# -- persistence and inference ------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    b, m = tiny_domains(n=2)
    state = train_cyclegan(b, m, GEN, DISC, CycleGanConfig(epochs=1, seed=2))
    path = save_checkpoint(state, tmp_path / "t.ckpt")
    back = load_checkpoint(path)
    assert back.epoch == 1 and back.history == state.history
    for name, net in state.networks().items():
        for p, q in zip(net.parameters(), back.networks()[name].parameters()):
            assert torch.equal(p, q)
    assert back.opt_g.state_dict()["state"].keys() == state.opt_g.state_dict()["state"].keys()


def test_checkpoint_corruption_detected(tmp_path):
    state = init_state(GEN, DISC, CycleGanConfig(epochs=0), 16)
    path = save_checkpoint(state, tmp_path / "t.ckpt")
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(bytes(raw[: len(raw) // 2]))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_translate_validates_input():
    state = init_state(GEN, DISC, CycleGanConfig(), 16)
    raw = ImageTensor(np.zeros((16, 16, 3)))
    with pytest.raises(DataError, match="tanh"):
        translate(state, [raw], "B_to_M")
    with pytest.raises(DataError):
        translate(state, [to_tanh_range(ImageTensor(np.zeros((8, 8, 3))))], "B_to_M")
    out = translate(state, [to_tanh_range(raw)], "M_to_B")
    assert out[0].range_tag == "tanh_m1_1" and out[0].values.shape == (16, 16, 3)


def test_synthesize_provenance():
    ds = make_dataset(3, 1, side=16)
    state = init_state(GEN, DISC, CycleGanConfig(), 16)
    syn = synthesize(state, ds)
    assert len(syn) == 3
    assert all(s.label == 1 and s.provenance == "synthetic" for s in syn)
    assert [s.source_id for s in syn] == ds.with_label(0).ids
    assert all(np.array_equal(s.image.values, np.rint(s.image.values)) for s in syn)


def test_loss_history_csv(tmp_path):
    b, m = tiny_domains(n=2)
    state = train_cyclegan(b, m, GEN, DISC, CycleGanConfig(epochs=2))
    lines = write_loss_history(state, tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,adv_BM,adv_MB,cycle,total"
    assert len(lines) == 3
    row = [float(x) for x in lines[2].split(",")]
    assert row[4] == pytest.approx(state.history["total"][1])


def test_learning_rate_schedule():
    cfg = CycleGanConfig(epochs=10, learning_rate=1.0, lr_decay_epochs=4)
    rates = [tr.learning_rate_at(cfg, e) for e in range(10)]
    assert rates[:6] == [1.0] * 6
    np.testing.assert_allclose(rates[6:], [0.8, 0.6, 0.4, 0.2])
    assert tr.learning_rate_at(CycleGanConfig(epochs=10), 9) == 2e-4
    with pytest.raises(ValueError):
        CycleGanConfig(epochs=3, lr_decay_epochs=4)


def test_resume_with_decay_matches_straight_run(tmp_path):
    b, m = tiny_domains(n=2)
    cfg = CycleGanConfig(epochs=4, seed=3, lr_decay_epochs=4, checkpoint_every=2)
    straight = train_cyclegan(b, m, GEN, DISC, cfg, checkpoint_dir=tmp_path)
    resumed = train_cyclegan(b, m, GEN, DISC, cfg, state=load_checkpoint(tmp_path / "translator_epoch0002.ckpt"))
    assert resumed.history == straight.history
