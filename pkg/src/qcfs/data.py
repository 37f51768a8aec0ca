"""Datasets (MNIST IDX files, seeded Gaussian blobs) and checkpoint persistence.

Checkpoint layout (all integers little-endian)::

    b"QCFSCKPT"            8-byte magic
    u32                    format version
    u64                    header length in bytes
    header                 UTF-8 JSON: model description + tensor table
    payload                raw float64 tensors, offsets relative to payload start

Every tensor entry in the header carries a CRC-32 of its bytes, and the
header also stores a SHA-256 of the full payload.
"""
from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .activation import QcfsParams
from .errors import CheckpointError, DataError, FormatError, ModelKindError
from .network import AnnModel, LayerSpec, SnnModel

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CKPT_MAGIC = b"QCFSCKPT"
CKPT_VERSION = 1

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MNIST_HINT = (
    "download train-images-idx3-ubyte.gz, train-labels-idx1-ubyte.gz, "
    "t10k-images-idx3-ubyte.gz and t10k-labels-idx1-ubyte.gz (e.g. from "
    "https://ossci-datasets.s3.amazonaws.com/mnist/) into that directory, "
    "then pass --data-dir or set QCFS_DATA_DIR"
)


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    n_classes: int = 10

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) == 0 or len(self.inputs) != len(self.labels):
            raise DataError(f"dataset needs N > 0 matching inputs/labels, got "
                            f"{len(self.inputs)} inputs and {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.inputs[:n], self.labels[:n], self.split, self.n_classes)


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})", 0) from exc
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated before magic number", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated dimension header", len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    need = head + int(np.prod(dims))
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload, expected {need} bytes, got {len(raw)}", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=need - head, offset=head).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Parse an IDX image/label pair (optionally gzipped) into a standardized Dataset."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float64) / 255.0
    x = (x - MNIST_MEAN) / MNIST_STD
    x = x.reshape(images.shape[0], 1, *images.shape[1:])
    return Dataset(x, labels.astype(np.int64), split, n_classes=10)


def default_data_dir() -> Path:
    env = os.environ.get("QCFS_DATA_DIR")
    return Path(env) if env else Path.home() / "data" / "mnist"


def _find(data_dir: Path, stem: str) -> Path | None:
    dotted = stem.replace("-idx", ".idx")
    for name in (stem, stem + ".gz", dotted, dotted + ".gz"):
        if (data_dir / name).exists():
            return data_dir / name
    return None


def load_mnist(data_dir=None, split: str = "train") -> Dataset:
    data_dir = Path(data_dir) if data_dir else default_data_dir()
    img_stem, lab_stem = MNIST_FILES[split]
    img, lab = _find(data_dir, img_stem), _find(data_dir, lab_stem)
    if img is None or lab is None:
        missing = img_stem if img is None else lab_stem
        raise DataError(f"MNIST file {missing} not found in {data_dir}; {MNIST_HINT}")
    return load_idx(img, lab, split)


# ---------------------------------------------------------------------------
# blobs


def synth_blobs(n_per_class: int, n_classes: int, dim: int, spread: float, seed: int,
                split: str = "train") -> Dataset:
    """Isotropic Gaussian clusters around seeded centres.

    Centres depend only on ``seed``; the train and test splits draw their
    points from independent substreams so they share the same centres.
    """
    if min(n_per_class, n_classes, dim) < 1 or spread < 0:
        raise DataError("synth_blobs needs positive sizes and a non-negative spread")
    root = np.random.SeedSequence(seed)
    centre_seq, train_seq, test_seq = root.spawn(3)
    centres = np.random.default_rng(centre_seq).uniform(-1.0, 1.0, size=(n_classes, dim))
    rng = np.random.default_rng(train_seq if split == "train" else test_seq)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = centres[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    ds = Dataset(x[order], labels[order], split, n_classes)
    ds.centres = centres
    return ds


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    flat_tr = train.inputs.reshape(len(train), -1)
    flat_te = test.inputs.reshape(len(test), -1)
    cents = np.stack([flat_tr[train.labels == c].mean(axis=0) for c in range(train.n_classes)])
    d = ((flat_te[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float(np.mean(d.argmin(axis=1) == test.labels))


# ---------------------------------------------------------------------------
# checkpoints


def _model_header(model) -> dict:
    header = {
        "kind": model.kind,
        "input_shape": list(model.input_shape),
        "layers": [l.to_dict() for l in model.layers],
        "meta": model.meta,
    }
    if model.kind == "ann":
        header["activations"] = {str(i): {"L": p.L, "lambda": p.lam, "shift": p.shift}
                                 for i, p in sorted(model.qcfs.items())}
    else:
        header["neurons"] = {str(i): {"theta": model.theta[i], "v0": model.v0[i]}
                             for i in sorted(model.theta)}
    return header


def save_checkpoint(model, path) -> None:
    header = _model_header(model)
    table, chunks, offset = {}, [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        blob = arr.tobytes()
        table[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(blob),
                       "crc32": zlib.crc32(blob)}
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    header["tensors"] = table
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(text)))
        fh.write(text)
        fh.write(payload)


def load_checkpoint(path, expect: str | None = None):
    """Load an AnnModel or SnnModel; ``expect`` ('ann'/'snn') enforces the kind."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a QCFS checkpoint (bad magic)")
    if len(raw) < 20:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    kind = header.get("kind")
    if expect is not None and kind != expect:
        raise ModelKindError(f"{path}: expected an {expect.upper()} checkpoint but found kind {kind!r}")
    payload = raw[20 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        bad = [n for n, e in header["tensors"].items()
               if zlib.crc32(payload[e["offset"]:e["offset"] + e["nbytes"]]) != e["crc32"]]
        raise CheckpointError(f"{path}: checksum mismatch in tensor(s) {', '.join(bad) or '<payload>'}")
    params = {}
    for name, e in header["tensors"].items():
        arr = np.frombuffer(payload, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        params[name] = arr.reshape(e["shape"]).astype(np.float64)
    layers = [LayerSpec(**d) for d in header["layers"]]
    meta = header.get("meta", {})
    if kind == "ann":
        qparams = {int(i): QcfsParams(d["L"], d["lambda"], d["shift"])
                   for i, d in header["activations"].items()}
        return AnnModel(tuple(header["input_shape"]), layers, params, qparams, meta)
    if kind == "snn":
        neurons = header["neurons"]
        return SnnModel(tuple(header["input_shape"]), layers, params,
                        {int(i): d["theta"] for i, d in neurons.items()},
                        {int(i): d["v0"] for i, d in neurons.items()}, meta)
    raise CheckpointError(f"{path}: unknown model kind {kind!r}")
