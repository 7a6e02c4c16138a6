from __future__ import annotations

import struct
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from splatfix.errors import NumericAbort, ShapeMismatchError
from splatfix.multiview import Video, make_cyclic
from splatfix.restorer.attention import MASK_SENTINEL, boundary_mask, masked_temporal_attention
from splatfix.restorer.checkpoint import MAGIC, load_checkpoint, read_header, save_checkpoint
from splatfix.restorer.edm import (NoiseSchedule, edm_sample, forward_diffuse, heun_sample, karras_schedule,
                                   loss_weight, preconditioning)
from splatfix.restorer.latent import LatentVideo, decode, encode, patchify, unpatchify
from splatfix.restorer.model import FixerConfig, FixerModel, RefEmbedding, denoise, denoise_tensor, reference_tokens
from splatfix.restorer.stats import capture_temporal_attention
from splatfix.restorer.train import FixerTrainer, TrainConfig, mirror_video, prepare, train_step

SMALL = dict(patch=8, depth=2, dim=32, heads=2, mlp_ratio=2)


class Sample:
    """Minimal paired sample (duck-typed like the pipeline's PairedSample)."""

    def __init__(self, seed, n=4, res=32):
        rng = np.random.default_rng(seed)
        base = rng.uniform(size=(n, res, res, 3))
        self.truth = make_cyclic(Video(base))
        self.coarse = make_cyclic(Video(np.clip(base + rng.normal(0, 0.1, base.shape), 0, 1)))
        self.reference = base[0]


# --- latents ------------------------------------------------------------------
def test_patchify_counts():
    lv = patchify(Video(np.zeros((2, 32, 32, 3))), 4)
    assert lv.tokens.shape == (2, 64, 48)


def test_patch_one_tokens_are_pixels():
    frames = np.random.default_rng(0).uniform(size=(1, 4, 5, 3))
    lv = patchify(Video(frames), 1)
    np.testing.assert_array_equal(lv.tokens[0], frames[0].reshape(20, 3))


@settings(max_examples=30, deadline=None)
@given(p=st.sampled_from([1, 2, 4, 8]), hb=st.integers(1, 4), wb=st.integers(1, 4),
       f=st.integers(1, 5), seed=st.integers(0, 999))
def test_patchify_roundtrip(p, hb, wb, f, seed):
    v = Video(np.random.default_rng(seed).uniform(size=(f, hb * p, wb * p, 3)))
    back = unpatchify(patchify(v, p))
    assert back.frames.tobytes() == v.frames.tobytes()
    assert decode(encode(v, p)).tobytes() == np.clip(v.frames, 0, 1).tobytes() or np.allclose(
        decode(encode(v, p)), v.frames, atol=1e-15)


def test_patchify_rejects_indivisible():
    with pytest.raises(ShapeMismatchError):
        patchify(Video(np.zeros((1, 10, 10, 3))), 4)


# --- mask and masked attention -------------------------------------------------
@pytest.mark.parametrize("n", [3, 19])
def test_boundary_mask_entries(n):
    m = boundary_mask(n)
    N = n - 1
    expected = {(0, 0), (0, N), (N, 0), (N, N)}
    got = {tuple(ix) for ix in np.argwhere(m.matrix == MASK_SENTINEL)}
    assert got == expected
    assert np.count_nonzero(m.matrix) == 4
    if n == 3:
        assert not m.matrix[1].any()


def test_boundary_mask_two_frames_warns():
    with pytest.warns(UserWarning):
        m = boundary_mask(2)
    assert m.masked.all()


def test_boundary_mask_too_small():
    with pytest.raises(ValueError):
        boundary_mask(1)


def _qkv(seed, frames, d=8, lead=(3, 2)):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(*lead, frames, d, generator=g, dtype=torch.float64) for _ in range(3)]


def test_masked_rows_have_exact_zeros_and_sum_to_one():
    q, k, v = _qkv(0, 9)
    _, w = masked_temporal_attention(q, k, v, boundary_mask(9), return_weights=True)
    assert torch.all(w[..., 0, 0] == 0) and torch.all(w[..., 0, 8] == 0)
    assert torch.all(w[..., 8, 0] == 0) and torch.all(w[..., 8, 8] == 0)
    assert bool(((w.sum(-1) - 1).abs() <= 1e-6).all())


def test_intermediate_rows_unaffected_by_mask():
    q, k, v = _qkv(1, 7)
    a, wa = masked_temporal_attention(q, k, v, boundary_mask(7), return_weights=True)
    b, wb = masked_temporal_attention(q, k, v, None, return_weights=True)
    assert (wa[..., 1:6, :] - wb[..., 1:6, :]).abs().max() <= 1e-7
    assert (a[..., 1:6, :] - b[..., 1:6, :]).abs().max() <= 1e-7


def test_zero_mask_matches_dense_oracle():
    q, k, v = _qkv(2, 5, d=4, lead=(1,))
    out = masked_temporal_attention(q, k, v, torch.zeros(5, 5, dtype=torch.float64))
    s = q[0].numpy() @ k[0].numpy().T / 2.0
    e = np.exp(s - s.max(1, keepdims=True))
    ref = (e / e.sum(1, keepdims=True)) @ v[0].numpy()
    np.testing.assert_allclose(out[0].numpy(), ref, atol=1e-6)
    assert torch.equal(out, masked_temporal_attention(q, k, v, None))


def test_fully_blocked_rows_are_zero():
    q, k, v = _qkv(3, 2)
    with pytest.warns(UserWarning):
        m = boundary_mask(2)
    out, w = masked_temporal_attention(q, k, v, m, return_weights=True)
    assert torch.all(w == 0) and torch.all(out == 0)


def test_attention_mask_shape_mismatch():
    q, k, v = _qkv(4, 5)
    with pytest.raises(ShapeMismatchError):
        masked_temporal_attention(q, k, v, boundary_mask(6))


# --- EDM pieces -----------------------------------------------------------------
def test_forward_diffuse():
    z = LatentVideo(np.random.default_rng(0).normal(size=(2, 4, 48)), 4, 8, 8)
    n = z.with_tokens(np.random.default_rng(1).normal(size=(2, 4, 48)))
    assert forward_diffuse(z, 0.0, n).tokens.tobytes() == z.tokens.tobytes()
    zero = z.with_tokens(np.zeros_like(z.tokens))
    np.testing.assert_array_equal(forward_diffuse(zero, 1.0, n).tokens, n.tokens)
    with pytest.raises(ShapeMismatchError):
        forward_diffuse(z, 1.0, LatentVideo(np.zeros((1, 4, 48)), 4, 8, 8))


def test_forward_diffuse_noise_std():
    rng = np.random.default_rng(2)
    z = LatentVideo(rng.normal(size=(10, 16, 48)), 4, 16, 16)
    sigma = 0.7
    diffs = []
    for _ in range(10):
        n = z.with_tokens(rng.normal(size=z.tokens.shape))
        diffs.append(forward_diffuse(z, sigma, n).tokens - z.tokens)
    d = np.concatenate([x.ravel() for x in diffs])
    assert d.size >= 10_000
    assert abs(d.std() - sigma) <= 0.03 * sigma


def test_preconditioning_limits():
    c_skip, c_out, c_in, c_noise = preconditioning(1e-6)
    assert float(c_skip) == pytest.approx(1.0, abs=1e-10)
    assert float(c_out) <= 1e-6
    assert float(c_noise) == pytest.approx(np.log(1e-6) / 4)
    assert float(loss_weight(torch.tensor(0.5, dtype=torch.float64))) == pytest.approx(8.0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule((1.0, 2.0))
    with pytest.raises(ValueError):
        NoiseSchedule((1.0,))
    with pytest.raises(ValueError):
        NoiseSchedule((1.0, -0.5))
    s = karras_schedule(1)
    assert s.sigmas == (80.0, 0.0)
    s = karras_schedule(18)
    assert s.steps == 18 and s.sigmas[0] == pytest.approx(80) and s.sigmas[-2] == pytest.approx(0.002)


def _truth_latents(cyclic=True, seed=0):
    rng = np.random.default_rng(seed)
    v = Video(rng.uniform(size=(4, 16, 16, 3)))
    if cyclic:
        v = make_cyclic(v)
    return v, encode(v, 4)


@settings(max_examples=40, deadline=None)
@given(steps=st.integers(1, 40))
def test_perfect_denoiser_recovers_truth(steps):
    v, z = _truth_latents()
    oracle = lambda x, sigma, zc, mf: torch.as_tensor(z.tokens)  # noqa: E731
    out = edm_sample(oracle, z, z, None, karras_schedule(steps), seed=steps)
    assert out.cyclic and len(out) == len(v)
    assert np.abs(out.frames - v.frames).max() <= 1e-3


def test_single_step_perfect_denoiser_is_exact():
    v, z = _truth_latents()
    out = edm_sample(lambda x, s, zc, mf: torch.as_tensor(z.tokens), z, z, None, NoiseSchedule((80.0, 0.0)))
    assert np.abs(out.frames - v.frames).max() <= 1e-5


def test_sampler_is_deterministic_and_seeded():
    model = FixerModel(FixerConfig(height=16, width=16, ref_grid=2, ref_cell=4, **SMALL))
    with torch.no_grad():
        for p in model.head.parameters():
            p.normal_(0, 0.05, generator=torch.Generator().manual_seed(0))
    v, _ = _truth_latents()
    z = encode(v, 8)
    mf = reference_tokens(v.frames[0], 2, 4)
    a = edm_sample(model, z, z, mf, karras_schedule(4), seed=5)
    b = edm_sample(model, z, z, mf, karras_schedule(4), seed=5)
    c = edm_sample(model, z, z, mf, karras_schedule(4), seed=6)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.frames.tobytes() != c.frames.tobytes()


def test_sampler_aborts_on_non_finite_state():
    _, z = _truth_latents()
    bad = lambda x, s, zc, mf: torch.full_like(x, float("nan"))  # noqa: E731
    with pytest.raises(NumericAbort) as exc:
        edm_sample(bad, z, z, None, karras_schedule(3))
    assert exc.value.diagnostics["step"] == 0


def test_sampler_frame_mismatch():
    _, z = _truth_latents()
    _, z2 = _truth_latents(cyclic=False)
    with pytest.raises(ShapeMismatchError):
        edm_sample(lambda *a: a[0], z, z2, None, karras_schedule(2))


def test_heun_on_gaussian_data_matches_closed_form():
    # data ~ N(0, s^2): D(x; sigma) = x s^2 / (s^2 + sigma^2); the ODE maps x_T to x_T * s / sqrt(s^2 + T^2)
    s = 0.5
    x = torch.tensor([80.0, -40.0], dtype=torch.float64)
    out = heun_sample(lambda z, sig: z * s**2 / (s**2 + sig**2), x, karras_schedule(200))
    expected = x * s / np.sqrt(s**2 + 80.0**2)
    assert torch.allclose(out, expected, rtol=2e-3)


# --- model ---------------------------------------------------------------------
def _small_model(**kw):
    return FixerModel(FixerConfig(**{**SMALL, **kw}))


def _batch(model, seeds=(0,)):
    return prepare([Sample(s) for s in seeds], model)


def test_reference_tokens_shape_and_range():
    img = np.random.default_rng(0).uniform(size=(32, 32, 3))
    r = reference_tokens(img, 4, 4)
    assert r.tokens.shape == (16, 48)
    assert r.tokens.min() >= -1 and r.tokens.max() <= 1
    with pytest.raises(ShapeMismatchError):
        RefEmbedding(np.zeros((0, 4)))
    with pytest.raises(ValueError):
        RefEmbedding(np.array([[np.nan]]))


def test_fresh_model_outputs_c_skip_times_input():
    model = _small_model()
    b = _batch(model)
    for sigma in (0.01, 0.5, 7.0):
        out = denoise_tensor(model, b.z_gt, sigma, b.z_c, b.m_f)
        c_skip = preconditioning(torch.tensor(sigma, dtype=torch.float32))[0]
        assert torch.equal(out, c_skip * b.z_gt)


def test_denoise_small_sigma_is_identity():
    model = _small_model()
    with torch.no_grad():
        model.head.weight.normal_(0, 0.1)
    s = Sample(0)
    z = encode(s.truth, 8)
    out = denoise(model, z, 1e-6, encode(s.coarse, 8), reference_tokens(s.reference, 4, 4))
    assert np.abs(out.tokens - z.tokens).max() <= 1e-4


def test_denoise_channel_mismatch():
    model = _small_model()
    s = Sample(0)
    with pytest.raises(ShapeMismatchError):
        denoise(model, encode(s.truth, 4), 1.0, encode(s.coarse, 4), reference_tokens(s.reference, 4, 4))


def test_reference_changes_output_after_one_step():
    model = _small_model()
    trainer = FixerTrainer(model, TrainConfig(lr=1e-3))
    b = _batch(model, (0, 1))
    trainer.train_step(b)
    s = Sample(0)
    z, zc = encode(s.truth, 8), encode(s.coarse, 8)
    a = denoise(model, z, 1.0, zc, reference_tokens(s.reference, 4, 4))
    other = reference_tokens(np.random.default_rng(9).uniform(size=(32, 32, 3)), 4, 4)
    c = denoise(model, z, 1.0, zc, other)
    assert np.sum((a.tokens - c.tokens) ** 2) > 0


def test_train_step_loss_finite_positive():
    model = _small_model()
    loss = train_step(FixerTrainer(model), [Sample(0), Sample(1)])
    assert np.isfinite(loss) and loss > 0


def test_train_step_rejects_mixed_frame_counts():
    model = _small_model()
    with pytest.raises(ShapeMismatchError):
        train_step(FixerTrainer(model), [Sample(0, n=4), Sample(1, n=5)])
    with pytest.raises(ValueError):
        train_step(FixerTrainer(model), [])


def test_train_step_aborts_on_non_finite_loss():
    model = _small_model()
    b = _batch(model)
    b.z_gt[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericAbort) as exc:
        FixerTrainer(model).train_step(b)
    assert "sigmas" in exc.value.diagnostics and exc.value.diagnostics["step"] == 0


class SmoothPair:
    """A memorizable pair: smooth frames whose coarse render equals the truth."""

    def __init__(self, n=4, res=16):
        yy, xx = np.mgrid[0:res, 0:res] / res
        base = np.stack([np.stack([0.5 + 0.3 * np.sin(2 * np.pi * (xx + k / n)),
                                   0.5 + 0.3 * np.cos(2 * np.pi * yy),
                                   np.full_like(xx, 0.4)], -1) for k in range(n)])
        self.truth = self.coarse = make_cyclic(Video(base))
        self.reference = base[0]


@pytest.mark.slow
def test_overfits_single_pair():
    # the same pair repeated 4x per step so each loss averages several sigma draws
    model = FixerModel(FixerConfig(height=16, width=16, ref_grid=2, ref_cell=4, patch=2, depth=2, dim=64,
                                   heads=2, mlp_ratio=2))
    trainer = FixerTrainer(model, TrainConfig(lr=1e-3))
    b = prepare([SmoothPair()] * 4, model)
    losses = [trainer.train_step(b) for _ in range(500)]
    assert np.mean(losses[-10:]) * 10 <= np.mean(losses[:10])


def test_masked_entries_receive_no_gradient():
    for mode, expect_zero in (("masked-cyclic", True), ("none-cyclic", False)):
        model = _small_model(mask_mode=mode)
        with torch.no_grad():
            model.head.weight.normal_(0, 0.1)
        b = _batch(model)
        loss = (denoise_tensor(model, b.z_gt + 0.5, 0.5, b.z_c, b.m_f) ** 2).sum()
        loss.backward()
        n = b.z_gt.shape[1] - 1
        for layer in model.temporal_layers():
            g = layer.bias.grad[:, [0, 0, n, n], [0, n, 0, n]]
            assert torch.all(g == 0) if expect_zero else bool(torch.any(g != 0))
            if expect_zero:
                assert torch.any(layer.bias.grad[:, 1:n, 1:n] != 0)


def test_masked_entries_cannot_influence_output():
    model = _small_model()
    with torch.no_grad():
        model.head.weight.normal_(0, 0.1)
    b = _batch(model)
    with torch.no_grad():
        before = denoise_tensor(model, b.z_gt, 1.0, b.z_c, b.m_f)
        n = b.z_gt.shape[1] - 1
        for layer in model.temporal_layers():
            layer.bias[:, [0, 0, n, n], [0, n, 0, n]] = torch.randn(layer.bias.shape[0], 4) * 50
        after = denoise_tensor(model, b.z_gt, 1.0, b.z_c, b.m_f)
    assert torch.equal(before, after)


def test_noncyclic_model_sees_stripped_video():
    model = _small_model(mask_mode="none-noncyclic")
    b = _batch(model)
    assert b.z_gt.shape[1] == 4 and model.temporal_mask(4) is None


def test_unconditioned_model_ignores_coarse_latents():
    model = _small_model(condition=False)
    with torch.no_grad():
        model.head.weight.normal_(0, 0.1)
    b = _batch(model)
    a = denoise_tensor(model, b.z_gt, 1.0, b.z_c, b.m_f)
    c = denoise_tensor(model, b.z_gt, 1.0, torch.randn_like(b.z_c), b.m_f)
    assert torch.equal(a, c)


def test_mirror_augmentation_flips_and_reverses():
    v = make_cyclic(Video(np.random.default_rng(0).uniform(size=(4, 8, 8, 3))))
    m = mirror_video(v)
    assert m.cyclic and len(m) == 5
    np.testing.assert_array_equal(m.frames[0], v.frames[0][:, ::-1])
    np.testing.assert_array_equal(m.frames[1], v.frames[3][:, ::-1])
    assert mirror_video(m).equals(v)


def test_model_init_is_seeded_and_isolated():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = _small_model(seed=3)
    after = torch.rand(1)
    b = _small_model(seed=3)
    assert torch.equal(before, after)  # construction leaves the global RNG untouched
    for (n1, p1), (n2, p2) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p1, p2)


# --- checkpoint and attention capture ------------------------------------------------
def test_checkpoint_roundtrip(tmp_path):
    model = _small_model(mask_mode="none-cyclic", seed=7)
    with torch.no_grad():
        model.head.weight.normal_(0, 0.1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, meta={"steps": 3})
    back, meta = load_checkpoint(path)
    assert meta == {"steps": 3}
    assert back.cfg == model.cfg
    for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    version, n = struct.unpack("<II", raw[8:16])
    header = read_header(path)
    assert version == 1 and header["config"]["mask_mode"] == "none-cyclic"
    first_name, first_shape = header["tensors"][0]
    count = int(np.prod(first_shape))
    first = np.frombuffer(raw[16 + n:16 + n + 4 * count], dtype="<f4").reshape(first_shape)
    np.testing.assert_array_equal(first, model.state_dict()[first_name].numpy())


def test_missing_checkpoint(tmp_path):
    from splatfix.errors import MissingCheckpointError

    with pytest.raises(MissingCheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_truncated_checkpoint(tmp_path):
    from splatfix.errors import SplatfixError

    path = tmp_path / "m.ckpt"
    save_checkpoint(_small_model(), path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(SplatfixError):
        load_checkpoint(path)


def test_capture_temporal_attention_shapes():
    model = _small_model()
    w = capture_temporal_attention(model, [Sample(0), Sample(1)])
    assert w.shape == (2, 2, 2, 5, 5)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-5)
    assert np.all(w[..., 0, 0] == 0) and np.all(w[..., 0, 4] == 0)
    assert all(layer.capture is None for layer in model.temporal_layers())
    with pytest.raises(ValueError):
        capture_temporal_attention(model, [])
