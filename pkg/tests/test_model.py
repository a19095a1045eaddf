import random

import pytest
import torch

from cruse_kd import model as M
from cruse_kd.errors import ConfigurationError, DataError, ShapeError

from conftest import SMALL, TOY


def test_teacher_and_student_sizes():
    assert M.count_params(M.TEACHER) == pytest.approx(1.9e6, rel=0.02)
    assert M.count_params(M.STUDENT) == pytest.approx(62e3, rel=0.02)


def test_mops_near_reported_values():
    teacher, student = M.count_mops_per_frame(M.TEACHER), M.count_mops_per_frame(M.STUDENT)
    assert teacher == pytest.approx(13.34, rel=0.2)
    assert student == pytest.approx(0.84, rel=0.2)
    assert abs(student / teacher - 0.063) <= 0.01


def test_doubling_channels_roughly_quadruples_ops():
    base = M.ModelConfig((8, 16, 32, 32), 160)
    wide = M.ModelConfig((16, 32, 64, 64), 320)
    ratio = M.count_mops_per_frame(wide, include_frontend=False) / M.count_mops_per_frame(base, include_frontend=False)
    assert 3.0 < ratio <= 4.0


def _enumerate(model):
    return sum(p.numel() for p in model.parameters())


def test_toy_single_unit_channels():
    cfg = M.ModelConfig((1, 1, 1, 1), 5, gru_groups=1)
    assert M.count_params(cfg) == _enumerate(M.build_model(cfg))


def test_count_matches_enumeration_random_configs():
    rng = random.Random(0)
    for _ in range(50):
        n_mels = rng.choice([16, 32, 48, 64, 80])
        c = tuple(rng.randint(1, 12) for _ in range(4))
        units = c[3] * n_mels // 16
        groups = rng.choice([g for g in (1, 2, 3, 4, 5, 6) if units % g == 0])
        cfg = M.ModelConfig(c, units, groups, n_mels)
        assert M.count_params(cfg) == _enumerate(M.CruseModel(cfg))


def test_bottleneck_mismatch_names_expected_units():
    with pytest.raises(ConfigurationError, match="160"):
        M.ModelConfig((8, 16, 32, 32), 150)
    with pytest.raises(ConfigurationError):
        M.ModelConfig((8, 16, 32, 32), 160, gru_groups=3)
    with pytest.raises(ConfigurationError):
        M.ModelConfig((8, 16, 32, 32), 160, n_mels=72)


def test_mask_and_taps():
    model = M.build_model(SMALL, seed=1)
    x = torch.rand(3, 1, 11, 80)
    mask, taps = model.forward_with_taps(x)
    assert mask.shape == x.shape
    assert ((mask > 0) & (mask < 1)).all()
    assert tuple(taps) == M.TAP_NAMES
    assert tuple(t.shape[-1] for t in taps.values()) == (40, 20, 10, 5, 5, 10, 20, 40, 80)
    assert {t.shape[2] for t in taps.values()} == {11}
    assert [t.shape[1] for t in taps.values()] == [4, 8, 8, 8, 8, 8, 8, 4, 1]
    assert torch.equal(taps["dec4"], mask)


def test_wrong_input_shape():
    with pytest.raises(ShapeError):
        M.build_model(SMALL)(torch.rand(1, 1, 5, 64))


def test_seeded_init_is_deterministic():
    a, b, c = M.build_model(SMALL, 3), M.build_model(SMALL, 3), M.build_model(SMALL, 4)
    assert M.checkpoint_bytes(a) == M.checkpoint_bytes(b) != M.checkpoint_bytes(c)


def test_init_bounds():
    model = M.build_model(M.STUDENT, 0)
    conv = model.enc_convs[1]
    bound = (1.0 / conv.fan_in()) ** 0.5
    assert conv.weight.abs().max() <= bound
    assert torch.equal(model.enc_norms[0].gain, torch.ones_like(model.enc_norms[0].gain))


@pytest.mark.parametrize("cfg", [TOY, SMALL], ids=["toy", "small"])
def test_network_is_causal(cfg):
    model = M.build_model(cfg, seed=2, dtype=torch.float64).eval()
    gen = torch.Generator().manual_seed(5)
    x = torch.rand(1, 1, 10, cfg.n_mels, dtype=torch.float64, generator=gen)
    with torch.no_grad():
        base, base_taps = model.forward_with_taps(x)
        for t in range(9):
            probe = x.clone()
            probe[:, :, t + 1:] = torch.rand(1, 1, 9 - t, cfg.n_mels, dtype=torch.float64, generator=gen)
            mask, taps = model.forward_with_taps(probe)
            assert torch.equal(mask[:, :, : t + 1], base[:, :, : t + 1])
            for name in M.TAP_NAMES:
                assert torch.equal(taps[name][:, :, : t + 1], base_taps[name][:, :, : t + 1])


def test_shuffle_changes_output():
    plain = M.ModelConfig((4, 8, 8, 8), 40)
    shuffled = M.ModelConfig((4, 8, 8, 8), 40, gru_shuffle=True)
    x = torch.rand(1, 1, 6, 80)
    a, b = M.build_model(plain, 0), M.build_model(shuffled, 0)
    assert not torch.allclose(a(x), b(x))


def test_checkpoint_round_trip(tmp_path):
    model = M.build_model(SMALL, seed=7)
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(model, path)
    loaded = M.load_checkpoint(path)
    assert loaded.cfg == SMALL
    assert M.checkpoint_bytes(loaded) == path.read_bytes()
    x = torch.rand(2, 1, 5, 80)
    assert torch.equal(model(x), loaded(x))


def test_checkpoint_header(tmp_path):
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(M.build_model(TOY), path)
    blob = path.read_bytes()
    assert blob.startswith(M.MAGIC)
    assert int.from_bytes(blob[8:12], "little") == M.VERSION


def test_bad_checkpoint(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        M.load_checkpoint(bad)
    with pytest.raises(DataError):
        M.load_checkpoint(tmp_path / "missing.ckpt")


def test_freeze():
    model = M.build_model(TOY).freeze()
    assert not model.training
    assert all(not p.requires_grad for p in model.parameters())
