"""Datasets and bit-exact persistence.

Two little-endian binary formats:

Checkpoint (magic ``RTCK``): u32 version, u32 config length + UTF-8 config
JSON, u32 tensor count, then per tensor u16 name length + name, u8 dtype
(0 = f64, 1 = f32), u8 ndim, ndim x u64 dims, raw values; finally a CRC32
of every byte after the magic.

Dataset (magic ``RTDS``): u32 version, u32 count, u32 classes, u32 C, H,
W, then count x (u32 label + C*H*W f32 pixels).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import BackboneConfig, ModelGraph, build_backbone
from .tuners import AttachSpec, attach

CHECKPOINT_MAGIC = b"RTCK"
CHECKPOINT_VERSION = 1
DATASET_MAGIC = b"RTDS"
DATASET_VERSION = 1


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [n, C, H, W] float64
    labels: np.ndarray  # [n] int64
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass
class DatasetSpec:
    num_classes: int = 4
    shape: tuple = (1, 8, 8)  # C, H, W
    size: int = 128
    train_fraction: float = 0.75
    seed: int = 0
    signal: float = 1.0
    noise: float = 0.1
    rotation_deg: float = 90.0  # task-B feature rotation

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if self.size < self.num_classes:
            raise ValueError("size must be >= num_classes")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train fraction must be in (0, 1]")


def _class_directions(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal per-class pixel directions for tasks A and B.

    Task B rotates each class direction toward an orthogonal complement,
    so B is a genuinely different (but related) feature layout.
    """
    d = int(np.prod(spec.shape))
    k = spec.num_classes
    if 2 * k > d:
        raise ValueError(f"image too small for {k} classes: {spec.shape}")
    rng = np.random.default_rng(spec.seed)
    q, _ = np.linalg.qr(rng.normal(size=(d, 2 * k)))
    theta = np.deg2rad(spec.rotation_deg)
    dirs_a = q[:, :k].T
    dirs_b = np.cos(theta) * q[:, :k].T + np.sin(theta) * q[:, k:].T
    return dirs_a, dirs_b


def synth_dataset(spec: DatasetSpec, task: str = "a") -> Dataset:
    """Class-conditional Gaussian blobs along per-class directions.

    Deterministic per (spec, task); labels balanced within one."""
    if task not in ("a", "b"):
        raise ValueError(f"task must be 'a' or 'b', got {task!r}")
    dirs_a, dirs_b = _class_directions(spec)
    dirs = dirs_a if task == "a" else dirs_b
    k = spec.num_classes
    rng = np.random.default_rng(spec.seed + (0 if task == "a" else 1_000_003))
    labels = np.arange(spec.size) % k
    rng.shuffle(labels)
    flat = spec.signal * dirs[labels] + spec.noise * rng.normal(size=(spec.size, dirs.shape[1]))
    images = flat.reshape(spec.size, *spec.shape)
    return Dataset(images, labels.astype(np.int64), k)


def split_dataset(ds: Dataset, train_fraction: float, seed: int = 0):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    cut = int(round(train_fraction * len(ds)))
    return ds.subset(order[:cut]), ds.subset(order[cut:])


def least_squares_probe(images: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Train accuracy of a closed-form linear probe on raw pixels."""
    n = len(labels)
    x = np.concatenate([images.reshape(n, -1), np.ones((n, 1))], axis=1)
    y = np.eye(num_classes)[labels]
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    pred = (x @ w).argmax(axis=1)
    return float((pred == labels).mean())


# -- dataset binary format ----------------------------------------------


def save_binary_dataset(ds: Dataset, path) -> None:
    c, h, w = ds.images.shape[1:]
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIIIII", DATASET_VERSION, len(ds), ds.num_classes, c, h, w))
        for label, img in zip(ds.labels, ds.images):
            f.write(struct.pack("<I", int(label)))
            f.write(np.asarray(img, dtype="<f4").tobytes())


def load_binary_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {blob[:4]!r} at byte 0")
    off = 4
    try:
        version, count, classes, c, h, w = struct.unpack_from("<IIIIII", blob, off)
    except struct.error:
        raise FormatError(f"truncated dataset header at byte {off}")
    off += 24
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if count == 0:
        raise FormatError("dataset file contains zero items")
    pixels = c * h * w
    images = np.empty((count, c, h, w))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        if off + 4 + 4 * pixels > len(blob):
            raise FormatError(f"truncated dataset item {i} at byte {off}")
        (label,) = struct.unpack_from("<I", blob, off)
        off += 4
        if label >= classes:
            raise FormatError(f"label {label} >= class count {classes} in item {i}")
        labels[i] = label
        images[i] = np.frombuffer(blob, dtype="<f4", count=pixels, offset=off).reshape(c, h, w)
        off += 4 * pixels
    return Dataset(images, labels, classes)


# -- checkpoints --------------------------------------------------------


def _tuner_options(tuner) -> dict:
    cfg = tuner.cfg
    if tuner.kind == "res_attn":
        return {"rank": cfg.rank, "heads": cfg.heads, "qkv_bias": cfg.qkv_bias}
    if tuner.kind in ("prefix", "prompt"):
        return {"length": cfg.length}
    return {"bottleneck": cfg.bottleneck}


def model_config_blob(model: ModelGraph) -> str:
    tuners = [
        {"block_index": block, "op": op, "kind": t.kind, "options": _tuner_options(t)}
        for (block, op), t in sorted(model.tuners.items())
    ]
    return json.dumps({"backbone": asdict(model.cfg), "tuners": tuners}, sort_keys=True)


def save_checkpoint(model: ModelGraph, path) -> None:
    payload = bytearray()
    config = model_config_blob(model).encode()
    payload += struct.pack("<I", CHECKPOINT_VERSION)
    payload += struct.pack("<I", len(config)) + config
    tensors = list(model.named_parameters())
    payload += struct.pack("<I", len(tensors))
    for name, p in tensors:
        nb = name.encode()
        payload += struct.pack("<H", len(nb)) + nb
        payload += struct.pack("<BB", 0, p.data.ndim)
        payload += struct.pack(f"<{p.data.ndim}Q", *p.data.shape)
        payload += np.asarray(p.data, dtype="<f8").tobytes()
    crc = zlib.crc32(bytes(payload))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + bytes(payload) + struct.pack("<I", crc))


def read_checkpoint(path):
    """Parse a checkpoint file -> (config dict, {name: float64 array})."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    payload, crc_bytes = blob[4:-4], blob[-4:]
    (crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) != crc:
        raise FormatError("checkpoint CRC mismatch (corrupt file)")
    off = 0
    (version,) = struct.unpack_from("<I", payload, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", payload, off)
    off += 4
    config = json.loads(payload[off : off + cfg_len].decode())
    off += cfg_len
    (count,) = struct.unpack_from("<I", payload, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off : off + name_len].decode()
        off += name_len
        dtype_code, ndim = struct.unpack_from("<BB", payload, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}Q", payload, off)
        off += 8 * ndim
        size = int(np.prod(dims)) if ndim else 1
        dt = "<f8" if dtype_code == 0 else "<f4"
        width = 8 if dtype_code == 0 else 4
        values = np.frombuffer(payload, dtype=dt, count=size, offset=off)
        off += width * size
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        tensors[name] = values.astype(np.float64).reshape(dims)
    return config, tensors


def load_checkpoint(path) -> ModelGraph:
    """Rebuild the model from its config echo and restore every tensor."""
    config, tensors = read_checkpoint(path)
    cfg = BackboneConfig(**config["backbone"])
    model = build_backbone(cfg)
    attach(model, [AttachSpec(**t) for t in config["tuners"]])
    params = dict(model.named_parameters())
    for name, values in tensors.items():
        if name not in params:
            raise FormatError(f"unknown tensor name {name!r} in checkpoint")
        p = params[name]
        if tuple(values.shape) != tuple(p.data.shape):
            raise FormatError(
                f"shape mismatch for {name!r}: file {values.shape} vs model {p.data.shape}"
            )
        p.data[...] = values
    missing = set(params) - set(tensors)
    if missing:
        raise FormatError(f"checkpoint missing tensors: {sorted(missing)}")
    return model


def import_weights(model: ModelGraph, path, name_map: dict | None = None):
    """Initialize backbone params from an external checkpoint-format file.

    name_map maps file tensor names to model parameter names (identity by
    default). Returns the list of unused file names; missing mandatory
    backbone tensors are an error.
    """
    _, tensors = read_checkpoint(path)
    name_map = name_map or {name: name for name in tensors}
    params = dict(model.named_parameters())
    used = set()
    for file_name, model_name in name_map.items():
        if file_name not in tensors:
            raise FormatError(f"name map references absent file tensor {file_name!r}")
        if model_name not in params:
            raise FormatError(f"name map targets unknown parameter {model_name!r}")
        p = params[model_name]
        values = tensors[file_name]
        if tuple(values.shape) != tuple(p.data.shape):
            raise FormatError(
                f"shape mismatch importing {file_name!r} -> {model_name!r}: "
                f"{values.shape} vs {p.data.shape}"
            )
        p.data[...] = values
        used.add(file_name)
    backbone_names = [
        n for n, p in params.items() if not p.trainable or n.startswith(("patch_embed", "cls"))
    ]
    mapped_targets = set(name_map.values())
    missing = [n for n in backbone_names if n not in mapped_targets]
    if missing:
        raise FormatError(f"import missing mandatory backbone tensors: {missing}")
    return sorted(set(tensors) - used)
