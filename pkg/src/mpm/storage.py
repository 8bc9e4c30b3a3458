"""On-disk formats: split cache, checkpoints and flat ``key = value`` configs.

Split cache (little-endian)::

    b"MPMSPLIT"  magic
    u32          format version
    u32          header length in bytes
    header       UTF-8 JSON: keys, list lengths, summary
    int32[...]   concatenated user sequences
    int32[M]     validation positives
    int32[M*n]   validation negatives
    int32[M]     test positives
    int32[M*n]   test negatives

Checkpoint: ``checkpoint.bin`` holds the parameter arrays as little-endian
float32, back to back. ``checkpoint.manifest`` is text::

    mpm-checkpoint 1
    config {...json...}
    param <name> <d0,d1,...> <byte offset> <byte length>
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import Tensor
from .data import EncodedDataset, Holdout, SplitDataset

SPLIT_MAGIC = b"MPMSPLIT"
SPLIT_VERSION = 1
CHECKPOINT_TAG = "mpm-checkpoint"
CHECKPOINT_VERSION = 1


class CacheFormatError(ValueError):
    pass


class CompatibilityError(ValueError):
    pass


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# split cache


def save_split(split: SplitDataset, path: str | Path, extra: dict | None = None) -> None:
    ds = split.dataset
    n_neg = split.validation.negatives.shape[1]
    header = {
        "user_keys": ds.user_keys,
        "item_keys": ds.item_keys,
        "lengths": [int(len(s)) for s in ds.sequences],
        "eval_negatives": int(n_neg),
        "summary": ds.summary(),
        "extra": extra or {},
    }
    blob = _canonical(header).encode("utf-8")
    arrays = [
        np.concatenate(ds.sequences),
        split.validation.positives,
        split.validation.negatives.reshape(-1),
        split.test.positives,
        split.test.negatives.reshape(-1),
    ]
    with open(path, "wb") as fh:
        fh.write(SPLIT_MAGIC)
        fh.write(struct.pack("<II", SPLIT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.asarray(a, dtype="<i4").tobytes())


def load_split(path: str | Path) -> tuple[SplitDataset, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != SPLIT_MAGIC:
        raise CacheFormatError(f"{path} is not a split cache")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != SPLIT_VERSION:
        raise CacheFormatError(f"{path}: cache version {version}, expected {SPLIT_VERSION}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    body = np.frombuffer(raw, dtype="<i4", offset=16 + hlen).astype(np.int64)
    lengths = header["lengths"]
    m, n_neg = len(lengths), header["eval_negatives"]
    total = int(np.sum(lengths))
    expected = total + 2 * m + 2 * m * n_neg
    if body.size != expected:
        raise CacheFormatError(f"{path}: payload has {body.size} values, expected {expected}")
    seqs = np.split(body[:total], np.cumsum(lengths)[:-1])
    off = total
    val_pos = body[off:off + m]
    off += m
    val_neg = body[off:off + m * n_neg].reshape(m, n_neg)
    off += m * n_neg
    test_pos = body[off:off + m]
    off += m
    test_neg = body[off:off + m * n_neg].reshape(m, n_neg)
    lens = np.asarray(lengths)
    ds = EncodedDataset(header["user_keys"], header["item_keys"], [np.array(s) for s in seqs])
    split = SplitDataset(ds, Holdout(val_pos, val_neg, lens - 2), Holdout(test_pos, test_neg, lens - 1))
    return split, header


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: dict[str, Tensor], meta: dict, directory: str | Path) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"{CHECKPOINT_TAG} {CHECKPOINT_VERSION}", f"config {_canonical(meta)}"]
    chunks = []
    offset = 0
    for name, t in params.items():
        buf = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        shape = ",".join(str(d) for d in t.shape)
        lines.append(f"param {name} {shape} {offset} {len(buf)}")
        chunks.append(buf)
        offset += len(buf)
    bin_path = directory / "checkpoint.bin"
    man_path = directory / "checkpoint.manifest"
    bin_path.write_bytes(b"".join(chunks))
    man_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return bin_path, man_path


def load_checkpoint(location: str | Path) -> tuple[dict[str, Tensor], dict]:
    """Load from a run directory or a manifest path."""
    location = Path(location)
    directory = location if location.is_dir() else location.parent
    man_path = directory / "checkpoint.manifest"
    lines = man_path.read_text(encoding="utf-8").splitlines()
    tag, _, version = lines[0].partition(" ")
    if tag != CHECKPOINT_TAG or int(version) != CHECKPOINT_VERSION:
        raise CacheFormatError(f"{man_path}: unsupported checkpoint header {lines[0]!r}")
    key, _, cfg = lines[1].partition(" ")
    if key != "config":
        raise CacheFormatError(f"{man_path}: missing config line")
    meta = json.loads(cfg)
    payload = (directory / "checkpoint.bin").read_bytes()
    params: dict[str, Tensor] = {}
    end = 0
    for line in lines[2:]:
        if not line.strip():
            continue
        kw, name, shape, off, nbytes = line.split(" ")
        if kw != "param":
            raise CacheFormatError(f"{man_path}: bad line {line!r}")
        off, nbytes = int(off), int(nbytes)
        if off != end:
            raise CacheFormatError(f"{man_path}: {name} starts at {off}, expected {end}")
        dims = tuple(int(d) for d in shape.split(",")) if shape else ()
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off).astype(np.float32).reshape(dims)
        params[name] = Tensor(arr, requires_grad=True, name=name)
        end = off + nbytes
    if end != len(payload):
        raise CacheFormatError(f"{man_path}: manifest covers {end} of {len(payload)} payload bytes")
    return params, meta


# ---------------------------------------------------------------------------
# flat config files


def _format_value(v: Any) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if v is None:
        return ""
    return str(v)


def parse_value(text: str, kind: Any) -> Any:
    text = text.strip()
    if kind is bool:
        return text.lower() in ("1", "true", "yes", "on")
    if kind in (list, "list[int]") or getattr(kind, "__origin__", None) is list:
        return [int(x) for x in text.split(",") if x.strip()]
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def read_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def write_config_file(values: dict[str, Any], path: str | Path) -> None:
    text = "".join(f"{k} = {_format_value(v)}\n" for k, v in values.items())
    Path(path).write_text(text, encoding="utf-8")


def config_hash(values: dict[str, Any]) -> str:
    return hashlib.sha256(_canonical(values).encode("utf-8")).hexdigest()[:16]


def dataclass_types(cls) -> dict[str, Any]:
    hints = {}
    for f in dataclasses.fields(cls):
        t = f.type if not isinstance(f.type, str) else f.type
        if isinstance(t, str):
            t = {"int": int, "float": float, "str": str, "bool": bool}.get(t, list if t.startswith("list") else str)
        hints[f.name] = t
    return hints
