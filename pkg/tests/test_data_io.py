import numpy as np
import pytest

from restuner.backbone import BackboneConfig, build_backbone
from restuner.data_io import (
    Dataset,
    DatasetSpec,
    FormatError,
    import_weights,
    least_squares_probe,
    load_binary_dataset,
    load_checkpoint,
    read_checkpoint,
    save_binary_dataset,
    save_checkpoint,
    split_dataset,
    synth_dataset,
)
from restuner.tensor import Tensor
from restuner.tuners import AttachSpec, attach

TOY = BackboneConfig(dim=16, depth=2, heads=2, patch=4, image_size=8,
                     in_channels=1, num_classes=4, seed=0)
SPEC = DatasetSpec(num_classes=4, shape=(1, 8, 8), size=64, seed=0)


# -- synthetic data -----------------------------------------------------


def test_synth_deterministic():
    a = synth_dataset(SPEC)
    b = synth_dataset(SPEC)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_synth_balanced_labels():
    ds = synth_dataset(DatasetSpec(num_classes=3, shape=(1, 8, 8), size=64, seed=1))
    counts = np.bincount(ds.labels, minlength=3)
    assert counts.max() - counts.min() <= 1


def test_synth_linear_probe():
    ds = synth_dataset(SPEC)
    assert least_squares_probe(ds.images, ds.labels, 4) >= 0.9


def test_synth_tasks_differ():
    a = synth_dataset(SPEC, task="a")
    b = synth_dataset(SPEC, task="b")
    assert a.images.tobytes() != b.images.tobytes()
    with pytest.raises(ValueError):
        synth_dataset(SPEC, task="c")


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(num_classes=0)
    with pytest.raises(ValueError):
        DatasetSpec(num_classes=8, size=4)


def test_split_fractions():
    ds = synth_dataset(SPEC)
    train, test = split_dataset(ds, 0.75, seed=0)
    assert len(train) == 48 and len(test) == 16


# -- dataset binary format ----------------------------------------------


def test_dataset_round_trip(tmp_path):
    ds = synth_dataset(SPEC)
    path = tmp_path / "d.rtds"
    save_binary_dataset(ds, path)
    back = load_binary_dataset(path)
    # f32 on disk: round-trip equals the f32-cast original exactly
    assert np.array_equal(back.images, ds.images.astype(np.float32).astype(np.float64))
    assert np.array_equal(back.labels, ds.labels)
    assert back.num_classes == ds.num_classes


def test_dataset_truncated(tmp_path):
    ds = synth_dataset(SPEC)
    path = tmp_path / "d.rtds"
    save_binary_dataset(ds, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError, match="truncated.*byte"):
        load_binary_dataset(path)


def test_dataset_bad_magic(tmp_path):
    path = tmp_path / "d.rtds"
    path.write_bytes(b"XXXX" + b"\0" * 64)
    with pytest.raises(FormatError, match="magic"):
        load_binary_dataset(path)


def test_dataset_empty_count(tmp_path):
    import struct

    path = tmp_path / "d.rtds"
    path.write_bytes(b"RTDS" + struct.pack("<IIIIII", 1, 0, 4, 1, 8, 8))
    with pytest.raises(FormatError, match="zero items"):
        load_binary_dataset(path)


def test_dataset_label_out_of_range(tmp_path):
    ds = Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 9]), num_classes=4)
    path = tmp_path / "d.rtds"
    save_binary_dataset(ds, path)
    with pytest.raises(FormatError, match="label 9"):
        load_binary_dataset(path)


# -- checkpoints --------------------------------------------------------


def _tuned_model():
    m = build_backbone(TOY)
    attach(m, [
        AttachSpec(0, "mha", "res_attn", {"rank": 2, "heads": 2}),
        AttachSpec(1, "ffn", "adapter", {"bottleneck": 2}),
    ])
    return m


def test_checkpoint_round_trip_forward_identical(tmp_path):
    m = _tuned_model()
    rng = np.random.default_rng(0)
    for _, p in m.named_parameters():
        if p.trainable:
            p.data += rng.normal(size=p.data.shape) * 0.01
    path = tmp_path / "m.rtck"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    x = Tensor(rng.normal(size=(2, 1, 8, 8)))
    assert np.array_equal(m(x).data, back(x).data)
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), back.named_parameters()):
        assert n1 == n2
        assert p1.data.tobytes() == p2.data.tobytes()


def test_checkpoint_detects_byte_flip(tmp_path):
    m = _tuned_model()
    path = tmp_path / "m.rtck"
    save_checkpoint(m, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="CRC"):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    # rewrite the config echo to claim a wider tuner; tensors then mismatch
    import json
    import struct
    import zlib

    m = _tuned_model()
    path = tmp_path / "m.rtck"
    save_checkpoint(m, path)
    blob = path.read_bytes()
    payload = bytearray(blob[4:-4])
    (cfg_len,) = struct.unpack_from("<I", payload, 4)
    config = json.loads(payload[8 : 8 + cfg_len].decode())
    config["tuners"][1]["options"]["bottleneck"] = 4  # was 2
    new_cfg = json.dumps(config, sort_keys=True).encode()
    new_payload = payload[:4] + struct.pack("<I", len(new_cfg)) + new_cfg + payload[8 + cfg_len :]
    path.write_bytes(b"RTCK" + new_payload + struct.pack("<I", zlib.crc32(bytes(new_payload))))
    with pytest.raises(FormatError, match="shape mismatch for 'tuners"):
        load_checkpoint(path)


def test_checkpoint_unknown_tensor(tmp_path):
    m = _tuned_model()
    plain = build_backbone(TOY)
    path = tmp_path / "m.rtck"
    save_checkpoint(m, path)
    cfg, tensors = read_checkpoint(path)
    # a checkpoint whose config lacks the tuners cannot place their tensors
    path2 = tmp_path / "plain.rtck"
    save_checkpoint(plain, path2)
    import json
    import struct
    import zlib

    blob = path.read_bytes()
    payload = bytearray(blob[4:-4])
    (cfg_len,) = struct.unpack_from("<I", payload, 4)
    config = json.loads(payload[8 : 8 + cfg_len].decode())
    config["tuners"] = []
    new_cfg = json.dumps(config, sort_keys=True).encode()
    new_payload = payload[:4] + struct.pack("<I", len(new_cfg)) + new_cfg + payload[8 + cfg_len :]
    path.write_bytes(b"RTCK" + new_payload + struct.pack("<I", zlib.crc32(bytes(new_payload))))
    with pytest.raises(FormatError, match="unknown tensor name"):
        load_checkpoint(path)


# -- weight import ------------------------------------------------------


def test_import_identity_round_trip(tmp_path):
    m = build_backbone(TOY)
    path = tmp_path / "w.rtck"
    save_checkpoint(m, path)
    m2 = build_backbone(BackboneConfig(**{**TOY.__dict__, "seed": 99}))
    unused = import_weights(m2, path)
    assert unused == []
    x = Tensor(np.random.default_rng(1).normal(size=(2, 1, 8, 8)))
    assert np.array_equal(m(x).data, m2(x).data)


def test_import_missing_mandatory(tmp_path):
    m = build_backbone(TOY)
    path = tmp_path / "w.rtck"
    save_checkpoint(m, path)
    m2 = build_backbone(TOY)
    _, tensors = read_checkpoint(path)
    name_map = {n: n for n in tensors if n != "patch_embed.W"}
    with pytest.raises(FormatError, match="patch_embed.W"):
        import_weights(m2, path, name_map)


def test_import_reports_unused(tmp_path):
    m = _tuned_model()  # extra tuner tensors relative to a plain backbone
    path = tmp_path / "w.rtck"
    save_checkpoint(m, path)
    m2 = build_backbone(TOY)
    _, tensors = read_checkpoint(path)
    backbone_names = {n for n, p in m2.named_parameters()}
    name_map = {n: n for n in tensors if n in backbone_names}
    unused = import_weights(m2, path, name_map)
    assert unused and all(n.startswith("tuners.") for n in unused)
