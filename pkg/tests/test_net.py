from pathlib import Path

import numpy as np
import pytest

from lapar import net
from lapar import tensor as T
from lapar.dictionary import build_dictionary, preset_config
from lapar.tensor import Tensor, gradcheck
from lapar.train import charbonnier_loss

DATA = Path(__file__).parent / "data"


def test_presets():
    for name, (c, m) in {"A": (32, 4), "B": (24, 3), "C": (16, 2)}.items():
        cfg = net.ModelConfig.preset(name)
        assert (cfg.channels, cfg.blocks) == (c, m)
        assert cfg.label() == f"LAPAR-{name}"
    assert net.ModelConfig.preset("lapar-b").channels == 24
    with pytest.raises(ValueError):
        net.ModelConfig.preset("D")


def test_config_validation():
    assert net.ModelConfig(task="denoise", scale=4).scale == 1
    with pytest.raises(ValueError):
        net.ModelConfig(scale=5)
    with pytest.raises(ValueError):
        net.ModelConfig(k=4)


def test_forward_shape_lapar_c():
    cfg = net.ModelConfig.preset("C", L=72, scale=2)
    model = net.build_model(cfg, seed=0)
    phi = net.forward(model, np.random.default_rng(0).random((1, 3, 16, 16)).astype(np.float32))
    assert phi.shape == (1, 72, 32, 32)


@pytest.mark.parametrize("scale", [1, 2, 3, 4])
def test_output_is_scale_times_input(scale):
    cfg = net.ModelConfig(channels=4, blocks=1, L=6, scale=scale)
    phi = net.forward(net.build_model(cfg), np.zeros((2, 3, 7, 9), np.float32))
    assert phi.shape == (2, 6, 7 * scale, 9 * scale)


def test_denoise_has_no_upsampling():
    cfg = net.ModelConfig(channels=4, blocks=1, L=6, task="denoise")
    assert all("shuffle" not in n for n in net.param_shapes(cfg))
    assert net.param_shapes(cfg)["tail.expand.direction"][0] == 6


def test_seed_determinism_and_forward_determinism():
    cfg = net.ModelConfig(channels=4, blocks=2, L=14)
    a, b = net.build_model(cfg, seed=7), net.build_model(cfg, seed=7)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    x = np.random.default_rng(1).random((1, 3, 8, 8)).astype(np.float32)
    assert net.forward(a, x).data.tobytes() == net.forward(a, x).data.tobytes()
    c = net.build_model(cfg, seed=8)
    assert not np.array_equal(a.params["head.direction"].data, c.params["head.direction"].data)


def test_rejects_bad_input():
    model = net.build_model(net.ModelConfig(channels=4, blocks=1, L=6))
    with pytest.raises(ValueError):
        net.forward(model, np.zeros((1, 3, 4, 4)))
    with pytest.raises(ValueError):
        net.forward(model, np.zeros((1, 1, 8, 8)))


def test_base_coefficients_start():
    d = build_dictionary(preset_config("14"))
    base = net.identity_coefficients(d.bases)
    np.testing.assert_allclose(base @ d.as_matrix, np.eye(25)[12], atol=1e-12)
    cfg = net.ModelConfig(channels=4, blocks=1, L=14)
    model = net.build_model(cfg, base_coeffs=base, tail_scale=0.0, dtype=np.float64)
    phi = net.forward(model, np.random.default_rng(0).random((1, 3, 8, 8))).data
    np.testing.assert_allclose(phi[0, :, 3, 4], base, atol=1e-12)
    with pytest.raises(ValueError):
        net.build_model(cfg, base_coeffs=np.zeros(3))


def test_param_counts_table():
    want_x2 = {"A": 548_000, "B": 250_000, "C": 87_000}
    for s in (2, 3, 4):
        counts = [net.count_params(net.ModelConfig.preset(p, scale=s)) for p in "ABC"]
        assert counts[0] > counts[1] > counts[2]
    for p, ref in want_x2.items():
        n = net.count_params(net.ModelConfig.preset(p, scale=2))
        assert ref / 2 <= n <= ref * 2, (p, n)


def test_param_count_matches_built_model():
    cfg = net.ModelConfig(channels=6, blocks=2, L=10, scale=3)
    model = net.build_model(cfg)
    assert net.count_params(cfg) == sum(p.data.size for p in model.parameters())


def test_single_conv_multiadds():
    assert net.conv_multiadds(1, 1, 3, 10, 10) == 900


def test_multiadds_hand_count():
    cfg = net.ModelConfig(channels=2, blocks=0, L=3, k=5, scale=2, in_channels=1)
    # LR 2x2, HR 4x4: head 1*2*9*4, expand 2*12*9*4, two HR convs 3*3*9*16 each
    conv = 1 * 2 * 9 * 4 + 2 * 12 * 9 * 4 + 2 * (3 * 3 * 9 * 16)
    assert net.count_multiadds(cfg, 4, 4, include_filtering=False) == conv
    assert net.count_multiadds(cfg, 4, 4) == conv + 1 * (3 * 25 + 3) * 16


def test_composed_gradient_matches_finite_differences():
    from lapar.assembly import basis_responses
    from lapar.imaging import bicubic_resize_array

    rng = np.random.default_rng(0)
    d = build_dictionary(preset_config("14"))
    cfg = net.ModelConfig(channels=3, blocks=1, L=14, scale=2)
    model = net.build_model(cfg, seed=1, dtype=np.float64)
    lr = rng.random((1, 3, 8, 8))
    hr = rng.random((1, 3, 16, 16))
    resp = basis_responses(bicubic_resize_array(lr[0], 2), d)[None]

    def loss():
        return charbonnier_loss(T.basis_combine(net.forward(model, lr), resp), hr, 1e-3)

    rows = gradcheck(loss, model.params, 60, rng)
    assert max(r[4] for r in rows) <= 1e-4


def test_checkpoint_roundtrip(tmp_path):
    cfg = net.ModelConfig(channels=4, blocks=1, L=14)
    model = net.build_model(cfg, seed=2)
    p1, p2 = tmp_path / "a.lpar", tmp_path / "b.lpar"
    net.save(model, p1)
    back = net.load(p1)
    assert back.config == cfg
    for k in model.params:
        assert back.params[k].data.tobytes() == model.params[k].data.tobytes()
    net.save(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_corruption(tmp_path):
    p = tmp_path / "a.lpar"
    net.save(net.build_model(net.ModelConfig(channels=2, blocks=0, L=3)), p)
    raw = p.read_bytes()
    (tmp_path / "t.lpar").write_bytes(raw[:-20])
    with pytest.raises(net.CheckpointError):
        net.load(tmp_path / "t.lpar")
    bad = bytearray(raw)
    bad[4] = 9  # version
    (tmp_path / "v.lpar").write_bytes(bytes(bad))
    with pytest.raises(net.CheckpointError):
        net.load(tmp_path / "v.lpar")
    with pytest.raises(net.CheckpointError):
        net.load(tmp_path / "missing.lpar")


def test_checkpoint_shape_mismatch(tmp_path):
    model = net.build_model(net.ModelConfig(channels=2, blocks=0, L=3))
    model.params["head.bias"] = Tensor(np.zeros(5, np.float32))
    net.save(model, tmp_path / "x.lpar")
    with pytest.raises(net.CheckpointError, match="head.bias"):
        net.load(tmp_path / "x.lpar")


def test_golden_checkpoint_forward():
    model = net.load(DATA / "tiny_x2_v1.lpar")
    x = np.load(DATA / "tiny_x2_input.npy")
    want = np.load(DATA / "tiny_x2_output.npy")
    np.testing.assert_allclose(net.forward(model, x).data, want, atol=1e-6)
