import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cdgc.datapipe import (AugmentationConfig, ConditionEmbedder, DataFormatError, DatasetSpec,
                           ImageRecord, augment, augment_images, encode_condition,
                           generate_toyset, load_cifar10, load_toyset, parse_cifar10_bytes,
                           save_toyset)


def _fixture_bytes():
    # record 0: label 3, pixels 0..255 repeating; record 1: label 7, all 255
    rec0 = bytes([3]) + bytes(i % 256 for i in range(3072))
    rec1 = bytes([7]) + bytes([255]) * 3072
    return rec0 + rec1


def test_cifar_two_record_fixture(tmp_path):
    buf = _fixture_bytes()
    assert len(buf) == 6146
    (tmp_path / "data_batch_1.bin").write_bytes(buf)
    ds = load_cifar10(tmp_path, "train")
    assert len(ds) == 2
    assert ds.labels.tolist() == [buf[0], buf[3073]] == [3, 7]
    # R plane first, row-major: byte index 1 + c*1024 + r*32 + col
    img = ds.images[0]
    assert img[0, 0, 0] == pytest.approx(0 / 127.5 - 1)
    assert img[0, 0, 5] == pytest.approx(5 / 127.5 - 1)
    assert img[0, 1, 0] == pytest.approx(32 / 127.5 - 1)
    assert img[1, 0, 0] == pytest.approx((1024 % 256) / 127.5 - 1)
    assert torch.all(ds.images[1] == 1.0)


def test_cifar_endpoint_bytes():
    buf = bytes([0]) + bytes([0, 255]) + bytes(3070)
    px, _ = parse_cifar10_bytes(buf)
    assert px.flat[0] == -1.0
    assert px.flat[1] == 1.0


def test_cifar_truncated(tmp_path):
    with pytest.raises(DataFormatError):
        parse_cifar10_bytes(bytes(3072))
    (tmp_path / "data_batch_1.bin").write_bytes(_fixture_bytes()[:-1])
    with pytest.raises(DataFormatError):
        load_cifar10(tmp_path)


def test_cifar_bad_label():
    with pytest.raises(DataFormatError, match="label byte 10"):
        parse_cifar10_bytes(bytes([10]) + bytes(3072))


def test_cifar_record_count_bijective():
    n = 5
    buf = b"".join(bytes([i % 10]) + bytes([i]) * 3072 for i in range(n))
    px, labels = parse_cifar10_bytes(buf)
    assert len(buf) // 3073 == len(labels) == px.shape[0] == n


def test_cifar_missing_split(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path, "test")


def test_toyset_census():
    ds = generate_toyset(seed=1, n_shapes=4, n_colors=4, count=2000)
    assert len(ds) == 2000
    counts = np.bincount(ds.labels.numpy(), minlength=4)
    # binomial(2000, 1/4): sd ~ 19.4, allow 4 sd
    assert np.all(np.abs(counts - 500) <= 78)
    assert counts.sum() == 2000
    assert ds.images.shape == (2000, 3, 32, 32)
    assert ds.images.min() >= -1 and ds.images.max() <= 1
    assert set(ds.extras["color"].unique().tolist()) == {0, 1, 2, 3}


def test_toyset_deterministic():
    a = generate_toyset(7, 4, 4, 50)
    b = generate_toyset(7, 4, 4, 50)
    assert torch.equal(a.images, b.images)
    assert torch.equal(a.labels, b.labels)
    assert torch.equal(a.extras["color"], b.extras["color"])
    c = generate_toyset(8, 4, 4, 50)
    assert not torch.equal(a.images, c.images)


@pytest.mark.parametrize("kwargs", [dict(n_shapes=1), dict(n_colors=1), dict(count=0),
                                    dict(n_shapes=5)])
def test_toyset_errors(kwargs):
    args = dict(seed=1, n_shapes=4, n_colors=4, count=10)
    args.update(kwargs)
    with pytest.raises(ValueError):
        generate_toyset(**args)


def test_toyset_color_is_nuisance():
    ds = generate_toyset(3, 4, 4, 400)
    # color and shape are drawn independently
    table = np.zeros((4, 4))
    for s, c in zip(ds.labels.tolist(), ds.extras["color"].tolist()):
        table[s, c] += 1
    assert table.min() > 0


def test_toyset_roundtrip(tmp_path):
    ds = generate_toyset(2, 3, 2, 20)
    save_toyset(ds, tmp_path)
    back = load_toyset(tmp_path)
    assert torch.equal(back.images, ds.images)
    assert torch.equal(back.labels, ds.labels)
    assert torch.equal(back.extras["color"], ds.extras["color"])
    assert back.n_classes == 3
    raw = (tmp_path / "images.f32").read_bytes()
    assert len(raw) == 20 * 3 * 32 * 32 * 4
    assert np.frombuffer(raw, "<f4")[0] == ds.images.flatten()[0].item()


def test_augment_disabled_is_identity():
    rec = ImageRecord(torch.randn(3, 32, 32).clamp(-1, 1), 2)
    out = augment(rec, AugmentationConfig(enabled=False), np.random.default_rng(0))
    assert out is rec


def test_augment_shape_and_offset():
    img = torch.zeros(3, 32, 32)
    img[:, 16, 16] = 1.0
    cfg = AugmentationConfig(pad=4, crop=32, hflip_prob=0.0)
    for seed in range(20):
        out = augment(ImageRecord(img, 1), cfg, np.random.default_rng(seed))
        assert out.pixels.shape == (3, 32, 32)
        assert out.label == 1
        ys, xs = torch.nonzero(out.pixels[0] == 1.0, as_tuple=True)
        assert len(ys) == 1
        assert abs(int(ys[0]) - 16) <= 4 and abs(int(xs[0]) - 16) <= 4


def test_augment_replay():
    imgs = torch.rand(8, 3, 32, 32) * 2 - 1
    cfg = AugmentationConfig()
    a = augment_images(imgs, cfg, np.random.default_rng(5))
    b = augment_images(imgs, cfg, np.random.default_rng(5))
    assert torch.equal(a, b)
    # replay the draws by hand for the first image
    rng = np.random.default_rng(5)
    dy, dx, flip = int(rng.integers(0, 9)), int(rng.integers(0, 9)), rng.random() < 0.5
    padded = torch.nn.functional.pad(imgs[0], (4, 4, 4, 4))
    expect = padded[:, dy:dy + 32, dx:dx + 32]
    expect = expect.flip(-1) if flip else expect
    assert torch.equal(a[0], expect)


@settings(max_examples=25, deadline=None)
@given(pad=st.integers(0, 6), prob=st.floats(0, 1), seed=st.integers(0, 2**16))
def test_augment_preserves_shape_and_range(pad, prob, seed):
    imgs = torch.rand(2, 3, 32, 32) * 2 - 1
    out = augment_images(imgs, AugmentationConfig(pad=pad, crop=32, hflip_prob=prob),
                         np.random.default_rng(seed))
    assert out.shape == imgs.shape
    assert out.min() >= -1 and out.max() <= 1


def test_augmentation_config_invariants():
    with pytest.raises(ValueError):
        AugmentationConfig(hflip_prob=1.5)
    with pytest.raises(ValueError):
        AugmentationConfig(pad=0, crop=40).validate_for(32)


def test_dataset_spec_invariants():
    with pytest.raises(ValueError):
        DatasetSpec(n_classes=1)
    with pytest.raises(ValueError):
        DatasetSpec(resolution=64)


def test_encode_condition_onehot():
    assert encode_condition(2, 4).tolist() == [0, 0, 1, 0]
    v = encode_condition(0, 10)
    assert v.shape == (10,) and v[0] == 1 and v.sum() == 1


def test_encode_condition_embedded():
    emb = ConditionEmbedder(100)
    v = encode_condition(torch.tensor([5, 99]), 100, emb)
    assert v.shape == (2, 10)
    assert torch.isfinite(v).all()
    assert encode_condition(3, 100).shape == (10,)


@pytest.mark.parametrize("label,n", [(4, 4), (-1, 4), (100, 100)])
def test_encode_condition_range(label, n):
    with pytest.raises(ValueError):
        encode_condition(label, n)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 10), data=st.data())
def test_onehot_exactly_one(n, data):
    label = data.draw(st.integers(0, n - 1))
    v = encode_condition(label, n)
    assert v.sum() == 1 and v[label] == 1
