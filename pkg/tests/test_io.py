import gzip
import struct
import zlib

import numpy as np
import pytest

from rpgnet.config import micro_resnet
from rpgnet.factory import build_model
from rpgnet.io import (FormatError, IntegrityError, PackError, VersionError,
                       load_cifar10_bin, load_dataset, load_mnist_idx, pack,
                       unpack)
from rpgnet.io import ringpack
from rpgnet.io.datasets import CIFAR_TEST, CIFAR_TRAIN, IDX_IMAGES, MNIST_FILES, \
    read_idx
from rpgnet.train import prune_model


def _model(ring=0.3, seed=0, **kw):
    return build_model("micro_resnet", (3, 8, 8), 10, ring, seed=seed,
                       widths=(3, 4, 4), **kw)


def _perturb(model, seed):
    # give BN statistics and biases non-default values so they are exercised
    rng = np.random.default_rng(seed)
    for st in model.bn.values():
        st.gamma.data[:] = rng.uniform(0.5, 1.5, st.gamma.data.shape)
        st.beta.data[:] = rng.normal(size=st.beta.data.shape)
        st.running_mean[:] = rng.normal(size=st.running_mean.shape)
        st.running_var[:] = rng.uniform(0.1, 2, st.running_var.shape)
    for p in model.biases.values():
        p.data[:] = rng.normal(size=p.data.shape)


def _assert_same_state(a, b):
    ka, kb = a.kernels(), b.kernels()
    assert ka.keys() == kb.keys()
    for name in ka:
        assert ka[name].tobytes() == kb[name].tobytes()
    for name in a.bn:
        assert a.bn[name].running_var.tobytes() == b.bn[name].running_var.tobytes()
        assert a.bn[name].gamma.data.tobytes() == b.bn[name].gamma.data.tobytes()
    for name in a.biases:
        assert a.biases[name].data.tobytes() == b.biases[name].data.tobytes()


def test_round_trip_bitwise():
    model = _model()
    _perturb(model, 1)
    restored, meta = unpack(pack(model, {"note": "x"}))
    assert meta == {"note": "x"}
    _assert_same_state(model, restored)


def test_round_trip_block_grouping_unscaled_head_owned():
    model = _model(grouping="block", mode="sign", scale=False, generate_head=False)
    restored, _ = unpack(pack(model))
    _assert_same_state(model, restored)
    assert "head" in restored.weights


def test_round_trip_keeps_prune_masks():
    model = _model()
    prune_model(model, 0.3)
    restored, _ = unpack(pack(model))
    np.testing.assert_array_equal(restored.generator.masks[0],
                                  model.generator.masks[0])


def test_pack_is_canonical():
    assert pack(_model(seed=5)) == pack(_model(seed=5))


def test_float64_model_packs_as_float32():
    model = _model(precision=64)
    restored, _ = unpack(pack(model))
    ring = model.generator.rings[0].values
    assert restored.generator.rings[0].values.tobytes() == ring.astype(np.float32).tobytes()
    # the scale is applied in float32 after loading, so kernels agree to rounding
    for name, k in model.kernels().items():
        np.testing.assert_allclose(restored.kernels()[name], k, rtol=2e-7, atol=0)


def test_every_byte_flip_detected():
    data = bytearray(pack(_model(ring=20)))
    for i in range(len(data)):
        for flip in (0x01, 0x80, 0xFF):
            bad = bytearray(data)
            bad[i] ^= flip
            with pytest.raises(PackError):
                unpack(bytes(bad))


def test_bad_magic():
    data = bytearray(pack(_model()))
    data[0:4] = b"XXXX"
    with pytest.raises(PackError, match="magic"):
        unpack(bytes(data))


def test_unknown_version_with_valid_checksum():
    data = bytearray(pack(_model()))
    struct.pack_into("<I", data, 4, 2)
    body = bytes(data[:-4])
    data[-4:] = struct.pack("<I", zlib.crc32(body))
    with pytest.raises(VersionError):
        unpack(bytes(data))


def test_checksum_mismatch_is_integrity_error():
    data = bytearray(pack(_model()))
    data[-10] ^= 0x10
    with pytest.raises(IntegrityError):
        unpack(bytes(data))


def test_truncated_pack():
    with pytest.raises(PackError):
        unpack(pack(_model())[:6])


def test_pack_size_for_45k_ring():
    config = micro_resnet()
    model = build_model("micro_resnet", (3, 32, 32), 10, 45000)
    data = pack(model)
    bn_floats = sum(4 * l.out_channels for l in config.layers if l.kind == "batchnorm")
    bias_floats = sum(l.out_channels for l in config.layers if l.bias)
    clen = struct.unpack_from("<I", data, 8)[0]
    assert len(data) == 12 + clen + 4 * (45000 + bn_floats + bias_floats) + 4
    assert clen < 10000
    assert len(data) < 0.5 * 4 * config.dense_kernel_count


def test_save_and_load(tmp_path):
    model = _model()
    path = tmp_path / "m.rpg"
    n = ringpack.save(path, model)
    assert path.stat().st_size == n
    restored, _ = ringpack.load(path)
    _assert_same_state(model, restored)


# -- datasets --------------------------------------------------------------------
def _write_idx(path, magic, arr):
    header = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    path.write_bytes(header + arr.astype(np.uint8).tobytes())


def _mnist_dir(tmp_path, n_train=20, n_test=8):
    rng = np.random.default_rng(0)
    for split, n in (("train", n_train), ("test", n_test)):
        imgs, labs = MNIST_FILES[split]
        _write_idx(tmp_path / imgs, IDX_IMAGES, rng.integers(0, 256, (n, 28, 28)))
        _write_idx(tmp_path / labs, 0x00000801, rng.integers(0, 10, n))
    return tmp_path


def test_mnist_idx_parse(tmp_path):
    d = _mnist_dir(tmp_path)
    imgs, labs = MNIST_FILES["train"]
    x, y = load_mnist_idx(str(d / imgs), str(d / labs))
    assert x.shape == (20, 1, 28, 28) and x.dtype == np.uint8
    assert y.shape == (20,) and y.max() <= 9


def test_mnist_gzip(tmp_path):
    arr = np.arange(12, dtype=np.uint8).reshape(3, 2, 2)
    raw = tmp_path / "raw"
    _write_idx(raw, IDX_IMAGES, arr)
    gz = tmp_path / "imgs.gz"
    gz.write_bytes(gzip.compress(raw.read_bytes()))
    np.testing.assert_array_equal(read_idx(str(gz), IDX_IMAGES), arr)


def test_idx_truncated(tmp_path):
    arr = np.zeros((4, 28, 28), dtype=np.uint8)
    p = tmp_path / "x"
    _write_idx(p, IDX_IMAGES, arr)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(FormatError):
        read_idx(str(p), IDX_IMAGES)
    p.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        read_idx(str(p), IDX_IMAGES)


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "x"
    _write_idx(p, 0x00000801, np.zeros(3))
    with pytest.raises(FormatError, match="magic"):
        read_idx(str(p), IDX_IMAGES)


def _cifar_file(path, n, rng):
    rec = rng.integers(0, 256, (n, 3073)).astype(np.uint8)
    rec[:, 0] = rng.integers(0, 10, n)
    path.write_bytes(rec.tobytes())
    return rec


def test_cifar_parse(tmp_path):
    rng = np.random.default_rng(1)
    rec = _cifar_file(tmp_path / "b.bin", 5, rng)
    x, y = load_cifar10_bin(str(tmp_path / "b.bin"))
    assert x.shape == (5, 3, 32, 32)
    np.testing.assert_array_equal(y, rec[:, 0])
    np.testing.assert_array_equal(x[2, 1].ravel(), rec[2, 1 + 1024:1 + 2048])


def test_cifar_truncated(tmp_path):
    rng = np.random.default_rng(2)
    p = tmp_path / "b.bin"
    _cifar_file(p, 2, rng)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(FormatError):
        load_cifar10_bin(str(p))


def test_cifar_dataset_normalized_with_train_stats(tmp_path):
    rng = np.random.default_rng(3)
    for f in CIFAR_TRAIN:
        _cifar_file(tmp_path / f, 4, rng)
    _cifar_file(tmp_path / CIFAR_TEST, 3, rng)
    train, test = load_dataset("cifar10", str(tmp_path))
    assert len(train) == 20 and len(test) == 3
    np.testing.assert_allclose(train.images.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(train.images.std(axis=(0, 2, 3)), 1, atol=1e-4)


def test_mnist_dataset(tmp_path):
    train, test = load_dataset("mnist", str(_mnist_dir(tmp_path)), limit=10)
    assert train.shape == (1, 28, 28) and len(train) == 10 and len(test) == 8


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset("mnist", str(tmp_path))
