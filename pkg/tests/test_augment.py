import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from poisonforge import augment as A
from poisonforge.data import ImageBatch
from poisonforge.errors import TransformError

from conftest import random_batch


def const_batch(values, shape=(3, 8, 8), k=2):
    px = np.stack([np.full(shape, v, dtype=np.float32) for v in values])
    return ImageBatch(px, np.arange(len(values)) % k, [f"c-{i}" for i in range(len(values))], k)


# --------------------------------------------------------------------------
# policies


def test_identity_policy_is_noop(rng):
    b = random_batch(rng)
    (out,) = A.apply_policy(A.identity_policy(), b)
    assert np.array_equal(out.pixels, b.pixels)
    assert out.ids == b.ids


def test_test_policy_at_image_size_is_noop(rng):
    b = random_batch(rng)
    (out,) = A.apply_policy(A.test_policy(8), b)
    assert np.array_equal(out.pixels, b.pixels)


def test_pretrain_views_differ(rng):
    b = random_batch(rng, n=100)
    v1, v2 = A.apply_policy(A.pretrain_policy(seed=5), b, views=2)
    differ = np.any(v1.pixels != v2.pixels, axis=(1, 2, 3))
    # a sample is left untouched by both views with probability far below 0.5
    assert differ.mean() > 0.9


def test_views_are_reproducible(rng):
    b = random_batch(rng, n=10)
    p = A.pretrain_policy(seed=3)
    a = A.apply_policy(p, b, views=2, key=7)
    c = A.apply_policy(p, b, views=2, key=7)
    for x, y in zip(a, c):
        assert np.array_equal(x.pixels, y.pixels)
    d = A.apply_policy(p, b, views=1, key=8)
    assert not np.array_equal(a[0].pixels, d[0].pixels)


def test_per_sample_streams_do_not_depend_on_batch(rng):
    b = random_batch(rng, n=6)
    p = A.pretrain_policy(seed=1)
    (full,) = A.apply_policy(p, b)
    sub = ImageBatch(b.pixels[2:4], b.labels[2:4], b.ids[2:4], b.num_classes)
    (part,) = A.apply_policy(p, sub)
    assert np.array_equal(full.pixels[2:4], part.pixels)


def test_grayscale_stage_equalizes_channels(rng):
    b = random_batch(rng)
    p = A.AugmentPolicy(grayscale_prob=1.0)
    (out,) = A.apply_policy(p, b)
    assert np.array_equal(out.pixels[:, 0], out.pixels[:, 1])
    assert np.array_equal(out.pixels[:, 1], out.pixels[:, 2])
    expect = np.tensordot(np.array(A.LUMA), b.pixels.astype(np.float64), axes=([0], [1]))
    np.testing.assert_allclose(out.pixels[:, 0], expect, atol=1e-6)


def test_flip_stage_mirrors(rng):
    b = random_batch(rng)
    (out,) = A.apply_policy(A.AugmentPolicy(flip_prob=1.0), b)
    assert np.array_equal(out.pixels, b.pixels[..., ::-1])


def test_pad_crop_is_translation(rng):
    b = random_batch(rng, n=20)
    (out,) = A.apply_policy(A.sl_policy(seed=0, pad=2), b)
    padded = np.pad(b.pixels, ((0, 0), (0, 0), (2, 2), (2, 2)))
    for i in range(len(b)):
        windows = [padded[i, :, dy : dy + 8, dx : dx + 8] for dy in range(5) for dx in range(5)]
        flipped = [w[..., ::-1] for w in windows]
        assert any(np.array_equal(out.pixels[i], w) for w in windows + flipped)


def test_outputs_in_range_and_shape(rng):
    b = random_batch(rng, n=30)
    for p in (A.pretrain_policy(2), A.linprobe_policy(2), A.sl_policy(2), A.test_policy(8)):
        for v in A.apply_policy(p, b, views=2):
            assert v.pixels.shape == b.pixels.shape
            assert v.pixels.min() >= 0 and v.pixels.max() <= 1


def test_resize_and_center_crop_hit_declared_size(rng):
    b = random_batch(rng)
    x = torch.from_numpy(np.array(b.pixels))
    y = A.augment_tensor(A.AugmentPolicy(resize=12, center_crop=10), x, b.ids)
    assert tuple(y.shape) == (6, 3, 10, 10)


def test_crop_larger_than_image_raises(rng):
    b = random_batch(rng)
    with pytest.raises(ValueError):
        A.apply_policy(A.AugmentPolicy(center_crop=9), b)
    with pytest.raises(ValueError):
        A.apply_policy(A.AugmentPolicy(resize=8, center_crop=9), b)


def test_views_must_be_positive(rng):
    with pytest.raises(ValueError):
        A.apply_policy(A.identity_policy(), random_batch(rng), views=0)


@pytest.mark.parametrize("kw", [dict(flip_prob=1.5), dict(grayscale_prob=-0.1), dict(crop_scale=(0.0, 1.0)),
                                dict(crop_scale=(0.5, 1.2)), dict(blur_kernel=4)])
def test_policy_invariants(kw):
    with pytest.raises(ValueError):
        A.AugmentPolicy(**kw)


def test_policy_round_trips_through_dict():
    p = A.pretrain_policy(seed=9)
    assert A.AugmentPolicy.from_dict(p.to_dict()) == p


def test_augment_tensor_is_differentiable(rng):
    b = random_batch(rng, n=4)
    x = torch.from_numpy(np.array(b.pixels)).double().requires_grad_(True)
    y = A.augment_tensor(A.pretrain_policy(1), x, b.ids)
    y.sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()
    assert x.grad.abs().sum() > 0


def test_blur_preserves_constant_image():
    b = const_batch([0.3, 0.7])
    (out,) = A.apply_policy(A.AugmentPolicy(blur_prob=1.0), b)
    np.testing.assert_allclose(out.pixels, b.pixels, atol=1e-6)


# --------------------------------------------------------------------------
# cutout


def test_cutout_full_hole_centered_zeroes_image(rng):
    b = random_batch(rng, n=3)
    out = A.cutout(b, 8, rng, centers=np.full((3, 2), 4))
    assert np.all(out.pixels == 0)


def test_cutout_zero_hole_is_identity(rng):
    b = random_batch(rng)
    assert np.array_equal(A.cutout(b, 0, rng).pixels, b.pixels)


def test_cutout_mask_oracle():
    rng = np.random.default_rng(42)
    b = random_batch(np.random.default_rng(0), n=50)
    out = A.cutout(b, 4, rng)
    for i in range(len(b)):
        changed = np.any(out.pixels[i] != b.pixels[i], axis=0)
        zero = np.all(out.pixels[i] == 0, axis=0)
        assert changed.sum() <= 16
        assert np.all(zero[changed])
        ys, xs = np.nonzero(changed)
        if len(ys):
            # one axis-aligned square, possibly clipped at the border
            assert changed.sum() == (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
            assert ys.max() - ys.min() < 4 and xs.max() - xs.min() < 4
        assert np.array_equal(out.pixels[i][:, ~changed], b.pixels[i][:, ~changed])


def test_cutout_known_center_zeroes_exact_square(rng):
    b = const_batch([0.5])
    out = A.cutout(b, 4, rng, centers=[(4, 4)])
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:6, 2:6] = True
    assert np.all(out.pixels[0][:, mask] == 0)
    assert np.all(out.pixels[0][:, ~mask] == np.float32(0.5))


def test_cutout_hole_larger_than_image(rng):
    with pytest.raises(ValueError):
        A.cutout(random_batch(rng), 9, rng)


# --------------------------------------------------------------------------
# mixup / cutmix


def test_mixup_lambda_one_is_identity(rng):
    b = random_batch(rng)
    m = A.mixup(b, 1.0, rng, lam=1.0)
    assert np.array_equal(m.pixels, b.pixels)
    assert np.all(m.lam == 1.0)
    assert np.array_equal(m.labels_a, b.labels)


def test_mixup_convexity_on_constant_images(rng):
    b = const_batch([0.2, 0.8])
    m = A.mixup(b, 1.0, rng, lam=0.5, perm=[1, 0])
    np.testing.assert_allclose(m.pixels, 0.5, atol=1e-7)
    assert m.label_pairs == [(0, 1, 0.5), (1, 0, 0.5)]


def test_mixup_formula_oracle(rng):
    b = random_batch(rng)
    perm = np.array([3, 2, 1, 0, 5, 4])
    m = A.mixup(b, 1.0, rng, lam=0.3, perm=perm)
    expect = 0.3 * b.pixels.astype(np.float64) + 0.7 * b.pixels[perm].astype(np.float64)
    np.testing.assert_allclose(m.pixels, expect, atol=1e-6)


def test_cutmix_4x4_rectangle_mask_oracle(rng):
    b = const_batch([0.2, 0.8])
    m = A.cutmix(b, 1.0, rng, lam=0.75, perm=[1, 0], center=(4, 4))
    from_partner = np.all(m.pixels[0] == np.float32(0.8), axis=0)
    assert from_partner.sum() == 16
    assert np.all(m.lam == 0.75)
    assert m.label_pairs[0] == (0, 1, 0.75)


def test_cutmix_records_realized_area_when_clipped(rng):
    b = const_batch([0.2, 0.8])
    m = A.cutmix(b, 1.0, rng, lam=0.75, perm=[1, 0], center=(0, 0))
    swapped = np.all(m.pixels[0] == np.float32(0.8), axis=0).sum()
    assert swapped == 4
    assert m.lam[0] == pytest.approx(1 - swapped / 64)


def test_mix_alpha_must_be_positive(rng):
    with pytest.raises(ValueError):
        A.mixup(random_batch(rng), 0.0, rng)
    with pytest.raises(ValueError):
        A.cutmix(random_batch(rng), -1.0, rng)


def test_mixed_batch_rejects_bad_lambda():
    with pytest.raises(ValueError):
        A.MixedBatch(np.zeros((1, 3, 2, 2)), np.zeros(1), np.zeros(1), np.array([1.5]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), alpha=st.floats(0.1, 5.0))
def test_mix_properties(seed, alpha):
    b = random_batch(np.random.default_rng(seed + 1))
    for fn in (A.mixup, A.cutmix):
        m = fn(b, alpha, np.random.default_rng(seed))
        assert m.pixels.shape == b.pixels.shape
        assert m.pixels.min() >= 0 and m.pixels.max() <= 1
        assert np.all((m.lam >= 0) & (m.lam <= 1))
        m2 = fn(b, alpha, np.random.default_rng(seed))
        assert np.array_equal(m.pixels, m2.pixels)


# --------------------------------------------------------------------------
# ISS and gaussian noise


def test_grayscale_of_gray_image_is_identity(rng):
    g = rng.random((4, 1, 8, 8)).astype(np.float32)
    b = ImageBatch(np.repeat(g, 3, axis=1), np.zeros(4, dtype=int), [f"g-{i}" for i in range(4)], 2)
    out = A.iss_transform(b, "Grayscale")
    np.testing.assert_allclose(out.pixels, b.pixels, atol=1e-7)


def test_grayscale_replicates_luma(rng):
    b = random_batch(rng)
    out = A.iss_transform(b, "Grayscale")
    expect = 0.299 * b.pixels[:, 0] + 0.587 * b.pixels[:, 1] + 0.114 * b.pixels[:, 2]
    for c in range(3):
        np.testing.assert_allclose(out.pixels[:, c], expect, atol=1e-6)


def _smooth_batch(n=4, side=16):
    yy, xx = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side), indexing="ij")
    imgs = []
    for i in range(n):
        imgs.append(np.stack([0.2 + 0.6 * yy, 0.3 + 0.4 * xx, 0.5 + 0.2 * (yy - xx) * (i / n)]))
    return ImageBatch(np.array(imgs, dtype=np.float32), np.zeros(n, dtype=int), [f"s-{i}" for i in range(n)], 2)


def test_jpeg_quality_100_is_close():
    b = _smooth_batch()
    out = A.iss_transform(b, "JPEG", jpeg_quality=100)
    assert np.abs(out.pixels - b.pixels).max() < 0.05


def test_jpeg_quality_10_range_and_shape(rng):
    b = random_batch(rng)
    out = A.iss_transform(b, "JPEG", jpeg_quality=10)
    assert out.pixels.shape == b.pixels.shape
    assert out.pixels.min() >= 0 and out.pixels.max() <= 1
    assert not np.array_equal(out.pixels, b.pixels)


def test_jpeg_quality_out_of_range(rng):
    with pytest.raises(ValueError):
        A.iss_transform(random_batch(rng), "JPEG", jpeg_quality=0)
    with pytest.raises(ValueError):
        A.iss_transform(random_batch(rng), "Sepia")


def test_jpeg_codec_failure_is_transform_error(rng, monkeypatch):
    def boom(img, q):
        raise OSError("encoder broke")

    monkeypatch.setattr(A, "_jpeg_roundtrip", boom)
    with pytest.raises(TransformError):
        A.iss_transform(random_batch(rng), "JPEG", jpeg_quality=50)


def test_gaussian_noise_identities(rng):
    b = random_batch(rng)
    assert np.array_equal(A.gaussian_noise(b, 0.0, 1.0, rng).pixels, b.pixels)
    assert np.array_equal(A.gaussian_noise(b, 0.1, 0.0, rng).pixels, b.pixels)
    with pytest.raises(ValueError):
        A.gaussian_noise(b, -1.0, 1.0, rng)


def test_gaussian_noise_std():
    # 1000 pixels at 0.5: 10 images of 1 x 10 x 10
    b = ImageBatch(np.full((10, 1, 10, 10), 0.5, dtype=np.float32), np.zeros(10, dtype=int),
                   [f"n-{i}" for i in range(10)], 2)
    out = A.gaussian_noise(b, 4 / 255, 1.0, np.random.default_rng(0))
    dev = (out.pixels - b.pixels).astype(np.float64)
    assert abs(dev.std() - 4 / 255) < 0.15 * 4 / 255


def test_gaussian_noise_prob_selects_whole_images():
    b = ImageBatch(np.full((200, 1, 4, 4), 0.5, dtype=np.float32), np.zeros(200, dtype=int),
                   [f"n-{i}" for i in range(200)], 2)
    out = A.gaussian_noise(b, 0.05, 0.5, np.random.default_rng(1))
    touched = np.any(out.pixels != b.pixels, axis=(1, 2, 3))
    assert 0.35 < touched.mean() < 0.65
    assert np.all(np.all(out.pixels != b.pixels, axis=(1, 2, 3))[touched])


def test_gaussian_noise_tensor_identities():
    x = torch.rand(3, 3, 4, 4)
    gen = torch.Generator().manual_seed(0)
    assert A.gaussian_noise_tensor(x, 0.0, 1.0, gen) is x
    y = A.gaussian_noise_tensor(x, 0.1, 1.0, gen)
    assert y.min() >= 0 and y.max() <= 1 and not torch.equal(x, y)
