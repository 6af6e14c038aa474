import numpy as np
import pytest
import torch

from soupsr.checkpoint import load_checkpoint, save_checkpoint
from soupsr.degradation import upsample_cubic
from soupsr.errors import CorruptionError, RangeError, ShapeError
from soupsr.model import (
    Discriminator,
    DiscriminatorConfig,
    GeneratorConfig,
    MultiScaleCheckpoint,
    MultiScaleGenerator,
    discriminate,
    generate,
    interpolate_params,
)
from soupsr.volume_io import Volume

SMALL = GeneratorConfig(base_channels=4, n_residual_blocks=1, scales=(2, 3, 4))


def perturbed_checkpoint(cfg=SMALL, seed=0):
    """Checkpoint whose exit convolutions are non-zero, so scales differ."""
    torch.manual_seed(seed)
    gen = MultiScaleGenerator(cfg)
    with torch.no_grad():
        for s in cfg.scales:
            gen.post[str(s)].conv2.weight.normal_(0, 0.05)
            gen.post[str(s)].conv2.bias.fill_(0.01 * s)
    return MultiScaleCheckpoint.from_generator(gen)


def small_volume(z=8, seed=0):
    return Volume(np.random.default_rng(seed).random((z, 6, 5)))


def test_zero_exit_reproduces_cubic():
    torch.manual_seed(0)
    ckpt = MultiScaleCheckpoint.from_generator(MultiScaleGenerator(SMALL))
    v = small_volume()
    for s in (2, 2.5, 3, 4):
        out = generate(ckpt, v, s)
        assert out.data.tobytes() == upsample_cubic(v, s).data.tobytes()


@pytest.mark.parametrize("s", [2, 2.25, 3, 3.5, 4])
def test_shape_law(s):
    v = small_volume(z=7)
    out = generate(perturbed_checkpoint(), v, s)
    assert out.shape == (int(np.floor(s * 7 + 0.5)), 6, 5)
    assert np.all(np.isfinite(out.data))


def test_interpolate_params_endpoints_bit_exact():
    ckpt = perturbed_checkpoint()
    for m in (2, 3, 4):
        backbone, tensors, base, alpha = interpolate_params(ckpt, float(m))
        assert backbone is ckpt.backbone
        for k, t in tensors.items():
            assert torch.equal(t, ckpt.per_scale[m][k])


def test_interpolate_params_scalar_example():
    ckpt = perturbed_checkpoint()
    for s, v in ((2, 1.0), (3, 3.0)):
        for k in ckpt.per_scale[s]:
            ckpt.per_scale[s][k] = torch.full_like(ckpt.per_scale[s][k], v)
    _, tensors, m, alpha = interpolate_params(ckpt, 2.5)
    assert (m, alpha) == (2, 0.5)
    for t in tensors.values():
        assert torch.all(t == 2.0)


def test_interpolate_params_out_of_range():
    with pytest.raises(RangeError):
        interpolate_params(perturbed_checkpoint(), 4.5)
    with pytest.raises(RangeError):
        interpolate_params(perturbed_checkpoint(), 1.9)


def test_fractional_generate_matches_manual_blend():
    ckpt = perturbed_checkpoint()
    v = small_volume(seed=3)
    got = generate(ckpt, v, 2.5).data
    # oracle: a fresh generator whose scale-2 modules hold the hand-blended weights
    gen = ckpt.build_generator()
    with torch.no_grad():
        for name, p in gen.named_parameters():
            for part in ("pre", "post"):
                prefix = f"{part}.2."
                if name.startswith(prefix):
                    key = f"{part}.{name[len(prefix):]}"
                    p.copy_(0.5 * ckpt.per_scale[2][key] + 0.5 * ckpt.per_scale[3][key])
        x = torch.from_numpy(upsample_cubic(v, 2.5).data.copy())[None, None]
        expected = gen(x, 2)[0, 0].numpy()
    np.testing.assert_allclose(got, expected, atol=1e-6)


def test_integer_scale_uses_direct_path():
    ckpt = perturbed_checkpoint()
    v = small_volume(seed=4)
    gen = ckpt.build_generator()
    x = torch.from_numpy(upsample_cubic(v, 3).data.copy())[None, None]
    with torch.no_grad():
        direct = gen(x, 3)[0, 0].numpy()
    assert generate(ckpt, v, 3).data.tobytes() == direct.astype(np.float32).tobytes()


def test_continuity_in_scale():
    ckpt = perturbed_checkpoint()
    v = small_volume(z=8, seed=5)
    # hold the output grid fixed: compare blended networks on one upsampled input
    gen = ckpt.build_generator()
    x = torch.from_numpy(upsample_cubic(v, 2.5).data.copy())[None, None]
    from soupsr.model import run_generator

    with torch.no_grad():
        ref = run_generator(gen, ckpt, x, 2.5)
        dists = [float((run_generator(gen, ckpt, x, 2.5 + d) - ref).abs().max()) for d in (0.4, 0.2, 0.1, 0.05, 0.01)]
    assert all(a > b for a, b in zip(dists, dists[1:]))
    assert dists[-1] < 1e-2


def test_tiled_inference_matches_whole_volume():
    ckpt = perturbed_checkpoint()
    v = small_volume(z=20, seed=6)
    whole = generate(ckpt, v, 3, tile=None).data
    tiled = generate(ckpt, v, 3, tile=7).data
    np.testing.assert_allclose(tiled, whole, atol=1e-5)


def test_generate_range_error():
    with pytest.raises(RangeError):
        generate(perturbed_checkpoint(), small_volume(), 5)


def test_gradient_flow_only_active_scale():
    ckpt = perturbed_checkpoint()
    gen = MultiScaleGenerator(SMALL)
    gen.load_state_dict(ckpt.state_dict())
    gen.train()
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 1, 12, 12, 12, generator=g)
    y = torch.rand(2, 1, 12, 12, 12, generator=g)
    loss = ((gen(x, 3) - y) ** 2).mean()
    loss.backward()
    for name, p in gen.named_parameters():
        active = name.startswith("backbone.") or name.startswith("pre.3.") or name.startswith("post.3.")
        if active:
            assert p.grad is not None and p.grad.abs().sum() > 0, name
        else:
            assert p.grad is None or p.grad.abs().sum() == 0, name


def test_rrdb_backbone_identity_at_init():
    cfg = GeneratorConfig(base_channels=4, n_residual_blocks=1, block_type="rrdb", scales=(2, 3), growth_channels=2)
    ckpt = MultiScaleCheckpoint.from_generator(MultiScaleGenerator(cfg))
    v = small_volume()
    assert generate(ckpt, v, 2.5).data.tobytes() == upsample_cubic(v, 2.5).data.tobytes()


def test_discriminator_contracts():
    torch.manual_seed(0)
    d = Discriminator(DiscriminatorConfig(channels=(4, 8)))
    patch = np.random.default_rng(0).random((32, 32, 32))
    assert discriminate(d, patch) == 0.0
    torch.nn.init.normal_(d.head.weight)
    a, b = discriminate(d, patch), discriminate(d, patch.copy())
    assert np.isfinite(a) and a == b
    with pytest.raises(ShapeError):
        discriminate(d, np.zeros((16, 32, 32)))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ckpt = perturbed_checkpoint()
    ckpt.manifest = {"seed": 1}
    save_checkpoint(ckpt, tmp_path / "m.soup")
    back = load_checkpoint(tmp_path / "m.soup")
    assert back.config == ckpt.config
    assert back.manifest == {"seed": 1}
    for k, t in ckpt.state_dict().items():
        assert torch.equal(back.state_dict()[k], t)


def test_truncated_checkpoint_is_corruption(tmp_path):
    save_checkpoint(perturbed_checkpoint(), tmp_path / "m.soup")
    raw = (tmp_path / "m.soup").read_bytes()
    (tmp_path / "t.soup").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "t.soup")


def test_shape_mismatch_is_corruption(tmp_path):
    ckpt = perturbed_checkpoint()
    ckpt.backbone["trunk.weight"] = torch.zeros(1, 1, 1, 1, 1)
    save_checkpoint(ckpt, tmp_path / "bad.soup")
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "bad.soup")


def test_two_scale_checkpoint_rejects_s5(tmp_path):
    cfg = GeneratorConfig(base_channels=4, n_residual_blocks=1, scales=(2, 3))
    save_checkpoint(MultiScaleCheckpoint.from_generator(MultiScaleGenerator(cfg)), tmp_path / "m.soup")
    with pytest.raises(RangeError):
        generate(load_checkpoint(tmp_path / "m.soup"), small_volume(), 5)


def test_checkpoint_archive_is_deterministic(tmp_path):
    ckpt = perturbed_checkpoint()
    save_checkpoint(ckpt, tmp_path / "a.soup")
    save_checkpoint(ckpt, tmp_path / "b.soup")
    assert (tmp_path / "a.soup").read_bytes() == (tmp_path / "b.soup").read_bytes()
