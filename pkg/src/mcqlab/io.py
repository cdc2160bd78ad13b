"""Binary dataset and checkpoint files, INI run configuration, run
manifests and metrics CSVs.

Dataset file (little-endian)::

    b"MCQD" | u16 version | u64 count | u32 state_dim | u32 action_dim
    | u8 discrete | u32 meta_len | meta JSON (utf-8)
    | f32 s[count, state_dim] | f32 a[count, action_dim] | f32 r[count]
    | f32 s'[count, state_dim] | u8 d[count]

Discrete datasets store state and action ids as f32 and read them back as
int64, which is exact for ids below 2**24.

Checkpoint file (little-endian)::

    b"MCQC" | u16 version | u32 manifest_len | manifest JSON
    | f32 payload

The manifest is a list of ``{"name", "shape", "offset"}`` entries with
offsets counted in f32 elements from the start of the payload.
"""

from __future__ import annotations

import configparser
import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .errors import BadMagic, ConfigError, FormatError, Truncated, VersionMismatch
from .mdp import Dataset

DATASET_MAGIC = b"MCQD"
CHECKPOINT_MAGIC = b"MCQC"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1
_DS_HEADER = struct.Struct("<4sHQIIBI")
_CK_HEADER = struct.Struct("<4sHI")

METRICS_COLUMNS = ("step", "critic_loss", "actor_loss", "alpha", "q_in_dist", "q_ood", "target_q",
                   "eval_return", "normalized_score")


def _check_magic(magic, expected, version, supported):
    if magic != expected:
        raise BadMagic(f"expected magic {expected!r}, found {magic!r}")
    if version != supported:
        raise VersionMismatch(f"unsupported format version {version} (this build reads {supported})")


def encode_dataset(data: Dataset) -> bytes:
    n = len(data)
    sd, ad = data.state_dim, data.action_dim
    meta = json.dumps(data.meta, sort_keys=True).encode()
    parts = [_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, sd, ad, int(data.discrete), len(meta)), meta]
    for col, width in ((data.observations, sd), (data.actions, ad), (data.rewards, None),
                       (data.next_observations, sd)):
        arr = np.asarray(col, dtype="<f4")
        parts.append(arr.reshape(n, width).tobytes() if width else arr.reshape(n).tobytes())
    parts.append(np.asarray(data.dones, dtype=np.uint8).tobytes())
    return b"".join(parts)


def decode_dataset(buf: bytes) -> Dataset:
    if len(buf) < _DS_HEADER.size:
        if len(buf) >= 4 and buf[:4] != DATASET_MAGIC:
            raise BadMagic(f"expected magic {DATASET_MAGIC!r}, found {buf[:4]!r}")
        raise Truncated("file shorter than the dataset header")
    magic, version, n, sd, ad, discrete, meta_len = _DS_HEADER.unpack_from(buf)
    _check_magic(magic, DATASET_MAGIC, version, DATASET_VERSION)
    pos = _DS_HEADER.size
    need = pos + meta_len + 4 * n * (2 * sd + ad + 1) + n
    if len(buf) < need:
        raise Truncated(f"header promises {n} transitions ({need} bytes) but file has {len(buf)} bytes")
    meta = json.loads(buf[pos: pos + meta_len].decode()) if meta_len else {}
    pos += meta_len

    def take(count, dtype, shape):
        nonlocal pos
        size = count * np.dtype(dtype).itemsize
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
        pos += size
        return arr

    s = take(n * sd, "<f4", (n, sd))
    a = take(n * ad, "<f4", (n, ad))
    r = take(n, "<f4", (n,))
    s2 = take(n * sd, "<f4", (n, sd))
    d = take(n, np.uint8, (n,))
    if discrete:
        s, a, s2 = (x[:, 0].astype(np.int64) for x in (s, a, s2))
    else:
        s, a, s2 = (x.astype(np.float32) for x in (s, a, s2))
    return Dataset(s, a, r.astype(np.float32), s2, d.copy(), discrete=bool(discrete), meta=meta)


def write_dataset(path, data: Dataset):
    Path(path).write_bytes(encode_dataset(data))


def read_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())


TensorItems = Union[Mapping[str, np.ndarray], Iterable[Tuple[str, np.ndarray]]]


def encode_checkpoint(tensors: TensorItems) -> bytes:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    seen = set()
    manifest = []
    chunks = []
    offset = 0
    for name, arr in items:
        if name in seen:
            raise FormatError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        offset += arr.size
    head = json.dumps(manifest).encode()
    return b"".join([_CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(head)), head, *chunks])


def decode_checkpoint(buf: bytes) -> Dict[str, np.ndarray]:
    if len(buf) < _CK_HEADER.size:
        raise Truncated("file shorter than the checkpoint header")
    magic, version, head_len = _CK_HEADER.unpack_from(buf)
    _check_magic(magic, CHECKPOINT_MAGIC, version, CHECKPOINT_VERSION)
    start = _CK_HEADER.size + head_len
    if len(buf) < start:
        raise Truncated("manifest runs past the end of the file")
    try:
        manifest = json.loads(buf[_CK_HEADER.size: start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc
    n_floats = (len(buf) - start) // 4
    out = {}
    spans = []
    for entry in manifest:
        name, shape, off = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        size = int(np.prod(shape, dtype=np.int64))
        if off < 0 or off + size > n_floats:
            raise Truncated(f"tensor {name!r} lies outside the payload")
        spans.append((off, off + size, name))
        out[name] = np.frombuffer(buf, "<f4", size, start + 4 * off).reshape(shape).astype(np.float32)
    spans.sort()
    reach, last = 0, None
    for begin, end, name in spans:
        if begin < reach and end > begin:
            raise FormatError(f"tensors {last!r} and {name!r} overlap")
        if end > reach:
            reach, last = end, name
    return out


def write_checkpoint(path, tensors: TensorItems):
    Path(path).write_bytes(encode_checkpoint(tensors))


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- config

DEFAULT_CONFIG = {
    "run": {
        "mode": "train",
        "seeds": "0",
        "steps": "50000",
        "eval_every": "1000",
        "eval_episodes": "10",
        "final_eval_episodes": "50",
        "eval_seed": "0",
        "out_dir": "runs",
        "dataset": "",
        "checkpoint": "",
        "online_steps": "20000",
        "checkpoint_every": "0",
    },
    "env": {
        "dim": "2",
        "mode": "mass",
        "step_scale": "0.1",
        "horizon": "100",
        "goal": "",
        "ref_min": "",
        "ref_max": "",
    },
    "dataset": {
        "kind": "medium",
        "episodes": "500",
        "seed": "0",
        "noise": "0.1",
        "gain": "0.5",
        "mix": "0.5",
    },
    "hyper": {
        "lam": "0.9",
        "n_ood": "10",
        "batch_size": "32",
        "hidden": "32,32",
        "cvae_hidden": "32,32",
    },
    "verify": {
        "contraction_trials": "1000",
        "sandwich_trials": "200",
        "improvement_trials": "200",
        "bound_pairs": "100",
    },
}


def parse_scalar(text: str):
    """INI value to Python: ints, floats, booleans, ``none``, comma lists."""
    t = text.strip()
    low = t.lower()
    if low in ("", "none", "null"):
        return None
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in t:
        return tuple(parse_scalar(p) for p in t.split(",") if p.strip())
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


@dataclass
class RunConfig:
    """Sectioned key/value configuration with typed accessors."""

    sections: Dict[str, Dict[str, str]] = field(default_factory=dict)

    @classmethod
    def defaults(cls):
        return cls({k: dict(v) for k, v in DEFAULT_CONFIG.items()})

    @classmethod
    def load(cls, path=None, overrides: Sequence[str] = ()):
        cfg = cls.defaults()
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except configparser.Error as exc:
                raise ConfigError(f"malformed config {path}: {exc}") from exc
            for sec in parser.sections():
                cfg.sections.setdefault(sec, {}).update(parser[sec])
        for item in overrides:
            cfg.set_override(item)
        return cfg

    def set_override(self, item: str):
        """Apply ``section.key=value``."""
        key, sep, value = item.partition("=")
        sec, dot, name = key.strip().partition(".")
        if not sep or not dot or not sec or not name:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        self.sections.setdefault(sec, {})[name] = value.strip()

    def get(self, section, key, default=None):
        raw = self.sections.get(section, {}).get(key)
        if raw is None:
            return default
        value = parse_scalar(raw)
        return default if value is None else value

    def section(self, name) -> Dict[str, object]:
        return {k: parse_scalar(v) for k, v in self.sections.get(name, {}).items()}

    def has_section(self, name) -> bool:
        return name in self.sections

    def to_dict(self):
        return {k: dict(v) for k, v in sorted(self.sections.items())}

    def dump(self, path):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_dict(self.to_dict())
        with open(path, "w") as fh:
            parser.write(fh)


def write_manifest(path, config: RunConfig, seed, extra=None):
    doc = {
        "config": config.to_dict(),
        "seed": seed,
        "formats": {"dataset": DATASET_VERSION, "checkpoint": CHECKPOINT_VERSION},
        "metrics_columns": list(METRICS_COLUMNS),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, rows: Sequence[Mapping[str, object]], columns=METRICS_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def read_metrics_csv(path) -> List[Dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if v != "" else float("nan")) for k, v in row.items()} for row in csv.DictReader(fh)]
