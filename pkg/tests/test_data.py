import json
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonforge.data import (
    MAGIC,
    ImageBatch,
    Norm,
    PerturbationBudget,
    PoisonedDataset,
    RepresentationMatrix,
    load_cifar_format,
    load_dataset,
    make_toy_dataset,
    perturbation_distances,
    read_container,
    read_header,
    save_dataset,
    write_container,
)
from poisonforge.errors import FormatError, IntegrityError

from conftest import random_batch


# ---- ImageBatch invariants


def test_image_batch_rejects_out_of_range_pixels():
    with pytest.raises(ValueError):
        ImageBatch(np.full((1, 1, 2, 2), 1.5), [0], ["a"], 2)
    with pytest.raises(ValueError):
        ImageBatch(np.full((1, 1, 2, 2), -0.1), [0], ["a"], 2)


def test_image_batch_rejects_bad_labels_and_ids():
    px = np.zeros((2, 1, 2, 2))
    with pytest.raises(ValueError):
        ImageBatch(px, [0, 2], ["a", "b"], 2)
    with pytest.raises(ValueError):
        ImageBatch(px, [0, 1], ["a", "a"], 2)
    with pytest.raises(ValueError):
        ImageBatch(px, [0], ["a", "b"], 2)


def test_image_batch_is_read_only(toy_small):
    with pytest.raises(ValueError):
        toy_small.pixels[0, 0, 0, 0] = 0.3


def test_subset_and_with_pixels(toy_small):
    sub = toy_small.subset([3, 1])
    assert sub.ids == (toy_small.ids[3], toy_small.ids[1])
    assert np.array_equal(sub.labels, toy_small.labels[[3, 1]])
    moved = toy_small.with_pixels(np.zeros_like(toy_small.pixels))
    assert moved.ids == toy_small.ids and moved.pixels.max() == 0


# ---- toy dataset


def test_toy_counting_contract():
    b = make_toy_dataset(2, 4, 8, 0)
    assert len(b) == 8
    assert b.labels.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    assert b.ids == tuple(f"toy-{i}" for i in range(8))


def test_toy_determinism():
    assert make_toy_dataset(3, 5, 8, 11).equals(make_toy_dataset(3, 5, 8, 11))
    assert not make_toy_dataset(3, 5, 8, 11).equals(make_toy_dataset(3, 5, 8, 12))


@pytest.mark.parametrize("args", [(1, 4, 8, 0), (2, 1, 8, 0), (2, 4, 7, 0)])
def test_toy_rejects_invalid_sizes(args):
    with pytest.raises(ValueError):
        make_toy_dataset(*args)


def test_toy_noise_level():
    # away from the clip boundaries, pixels scatter around the base image with std 0.05
    b = make_toy_dataset(2, 200, 8, 5)
    background = b.pixels[:, :, 0, 0]  # corner pixel is background (0.5) for both classes
    assert abs(background.mean() - 0.5) < 0.01
    assert abs(background.std() - 0.05) < 0.005


def test_toy_linearly_learnable():
    # a freshly initialized linear classifier on flattened pixels, 200 full-batch steps
    b = make_toy_dataset(4, 50, 16, 7)
    x = torch.from_numpy(np.array(b.pixels)).reshape(len(b), -1)
    y = torch.from_numpy(np.array(b.labels))
    torch.manual_seed(0)
    lin = torch.nn.Linear(x.shape[1], 4)
    opt = torch.optim.SGD(lin.parameters(), lr=0.5)
    for _ in range(200):
        opt.zero_grad()
        torch.nn.functional.cross_entropy(lin(x), y).backward()
        opt.step()
    acc = (lin(x).argmax(1) == y).float().mean().item()
    assert acc >= 0.95


@settings(max_examples=25, deadline=None)
@given(k=st.integers(2, 6), per=st.integers(2, 5), size=st.integers(8, 12), seed=st.integers(0, 2**31 - 1))
def test_toy_invariants_property(k, per, size, seed):
    b = make_toy_dataset(k, per, size, seed)
    assert b.pixels.min() >= 0 and b.pixels.max() <= 1
    assert len(set(b.ids)) == len(b) == k * per
    assert b.labels.max() < k


# ---- distances and PoisonedDataset


def test_perturbation_distances_oracle(rng):
    a = rng.random((3, 2, 4, 4))
    b = a.copy()
    b[0, 1, 2, 3] += 0.1
    b[1, :, 0, 0] -= 0.2  # one location, both channels
    b[2] += 0.01
    np.testing.assert_allclose(perturbation_distances(a, b, Norm.LINF), [0.1, 0.2, 0.01], atol=1e-12)
    np.testing.assert_allclose(perturbation_distances(a, b, Norm.L2), [0.1, np.sqrt(0.08), np.sqrt(32e-4)], atol=1e-12)
    np.testing.assert_array_equal(perturbation_distances(a, b, Norm.L0), [1, 1, 16])


def test_poisoned_dataset_budget_checked_at_construction(toy_small):
    px = np.array(toy_small.pixels)
    px[0] = np.clip(px[0] + 0.1, 0, 1)
    with pytest.raises(IntegrityError):
        PoisonedDataset(toy_small, toy_small.with_pixels(px), PerturbationBudget(Norm.LINF, 8 / 255), "x")
    ds = PoisonedDataset(toy_small, toy_small.with_pixels(px), PerturbationBudget(Norm.LINF, 8 / 255), "x",
                         validate=False)
    assert ds.budget_violations() == [toy_small.ids[0]]


def test_poisoned_dataset_rejects_label_change(toy_small):
    changed = ImageBatch(toy_small.pixels, (toy_small.labels + 1) % 4, toy_small.ids, 4)
    with pytest.raises(ValueError):
        PoisonedDataset(toy_small, changed, PerturbationBudget(), "x")


def test_unbounded_budget_accepts_any_distortion(toy_small):
    ds = PoisonedDataset(toy_small, toy_small.with_pixels(1 - toy_small.pixels), PerturbationBudget(Norm.UNBOUNDED, 0), "c")
    assert ds.budget_violations() == []


# ---- container round trips


def test_image_batch_round_trip(tmp_path, rng):
    b = random_batch(rng)
    save_dataset(b, tmp_path / "b.pf", extra={"note": "x"})
    back = load_dataset(tmp_path / "b.pf")
    assert back.equals(b)
    assert read_header(tmp_path / "b.pf")["extra"] == {"note": "x"}


def test_poisoned_round_trip_bit_exact(tmp_path, toy_small):
    px = np.clip(toy_small.pixels + np.float32(3 / 255), 0, 1)
    ds = PoisonedDataset(toy_small, toy_small.with_pixels(px), PerturbationBudget(Norm.LINF, 8 / 255), "T",
                         {"a": [1, 2], "b": {"c": 0.5}})
    save_dataset(ds, tmp_path / "p.pf")
    back = load_dataset(tmp_path / "p.pf")
    assert back.clean.equals(ds.clean) and back.poisoned.equals(ds.poisoned)
    assert back.budget == ds.budget and back.generator_tag == "T"
    assert dict(back.generator_config) == {"a": [1, 2], "b": {"c": 0.5}}


def test_representations_round_trip_including_empty(tmp_path):
    r = RepresentationMatrix(np.arange(6.0).reshape(3, 2), [0, 1, 0], ["a", "b", "c"])
    save_dataset(r, tmp_path / "r.pf")
    back = load_dataset(tmp_path / "r.pf")
    assert np.array_equal(back.reps, r.reps) and back.ids == r.ids
    empty = RepresentationMatrix(np.zeros((0, 4)), [], [])
    save_dataset(empty, tmp_path / "e.pf")
    assert load_dataset(tmp_path / "e.pf").reps.shape == (0, 4)


def test_container_layout_is_documented_form(tmp_path):
    write_container(tmp_path / "c.pf", {"kind": "raw"}, {"v": np.array([1.5, -2.0], dtype=np.float32)})
    raw = (tmp_path / "c.pf").read_bytes()
    assert raw[:8] == MAGIC
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    assert header["kind"] == "raw"
    assert np.frombuffer(raw[16 + hlen :], dtype="<f4").tolist() == [1.5, -2.0]
    h, arrays = read_container(tmp_path / "c.pf")
    assert arrays["v"].tolist() == [1.5, -2.0]


def test_truncated_file_is_format_error(tmp_path, rng):
    save_dataset(random_batch(rng), tmp_path / "b.pf")
    raw = (tmp_path / "b.pf").read_bytes()
    for cut in (4, 12, 40, len(raw) - 1):
        (tmp_path / "t.pf").write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "t.pf")


def test_trailing_bytes_and_bad_magic(tmp_path, rng):
    save_dataset(random_batch(rng), tmp_path / "b.pf")
    raw = (tmp_path / "b.pf").read_bytes()
    (tmp_path / "x.pf").write_bytes(raw + b"\0")
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "x.pf")
    (tmp_path / "y.pf").write_bytes(b"NOTAFILE" + raw[8:])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "y.pf")


def test_format_error_names_field(tmp_path, rng):
    save_dataset(random_batch(rng), tmp_path / "b.pf")
    h, arrays = read_container(tmp_path / "b.pf")
    write_container(tmp_path / "m.pf", h, {})
    with pytest.raises(FormatError, match="pixels"):
        load_dataset(tmp_path / "m.pf")


def test_budget_violation_on_load_is_integrity_error(tmp_path, toy_small):
    # write a poisoned container whose stored pixels exceed its own L-inf budget
    px = np.clip(toy_small.pixels + np.float32(0.1), 0, 1)
    ds = PoisonedDataset(toy_small, toy_small.with_pixels(px), PerturbationBudget(Norm.LINF, 8 / 255), "bad",
                         validate=False)
    save_dataset(ds, tmp_path / "bad.pf")
    with pytest.raises(IntegrityError):
        load_dataset(tmp_path / "bad.pf")


def test_no_partial_file_left_on_failed_write(tmp_path):
    with pytest.raises(TypeError):
        write_container(tmp_path / "z.pf", {}, {"s": np.array(["a"])})
    assert list(tmp_path.iterdir()) == []


# ---- CIFAR binary layout


def _cifar_records(labels, fill):
    out = bytearray()
    for lab, f in zip(labels, fill):
        out.append(lab)
        out.extend(f)
    return bytes(out)


def test_cifar_fixture(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (3, 3072), dtype=np.uint8)
    imgs[0, 0] = 255
    imgs[1, 1024] = 0
    (tmp_path / "data_batch_1.bin").write_bytes(_cifar_records([3, 0, 9], imgs))
    b = load_cifar_format(tmp_path)
    assert len(b) == 3 and b.labels.tolist() == [3, 0, 9]
    assert b.pixels.shape == (3, 3, 32, 32)
    assert b.pixels[0, 0, 0, 0] == 1.0  # 255 maps to exactly 1.0
    assert b.pixels[1, 1, 0, 0] == 0.0  # second plane is green
    np.testing.assert_array_equal(b.pixels[2, 2].ravel() * 255, imgs[2, 2048:].astype(np.float32))
    save_dataset(b, tmp_path / "c.pf")
    assert load_dataset(tmp_path / "c.pf").equals(b)


def test_cifar_missing_or_corrupt(tmp_path):
    with pytest.raises(FormatError):
        load_cifar_format(tmp_path)
    (tmp_path / "data_batch_1.bin").write_bytes(b"\x01" * 100)
    with pytest.raises(FormatError):
        load_cifar_format(tmp_path)
