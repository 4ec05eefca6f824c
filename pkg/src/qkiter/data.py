"""Seeded synthetic copy-detection data.

Keys are drawn around latent cluster centers; each query is its key passed
through a random composition of 1-3 vector augmentations, so every
(query, key) positive pair is generated without external labels.

All generated values are rounded to float32 so that data read back from the
"QKDS" files is bit-identical to data generated in process.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateInputError, FormatError, ShapeError

AUG_KINDS = ("additive_noise", "mask_block", "global_scale", "feature_shift")

# seed-stream tags
_CENTERS, _TRAIN_KEYS, _EVAL_KEYS, _AUG = 1, 2, 3, 4


@dataclass
class SynthConfig:
    n_keys: int = 10_000
    d_in: int = 64
    n_clusters: int = 500
    cluster_spread: float = 0.35
    noise_scale: float = 0.25
    mask_fraction: float = 0.25
    scale_range: tuple = (0.6, 1.4)
    shift_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        problems = []
        if self.n_keys < 1:
            problems.append("n_keys must be >= 1")
        if self.d_in < 1:
            problems.append("d_in must be >= 1")
        if not 1 <= self.n_clusters <= self.n_keys:
            problems.append("n_clusters must be in [1, n_keys]")
        if not 0 <= self.mask_fraction < 1:
            problems.append("mask_fraction must be in [0, 1)")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            problems.append("scale_range must satisfy 0 < lo <= hi")
        if min(self.noise_scale, self.shift_scale, self.cluster_spread) < 0:
            problems.append("magnitudes must be non-negative")
        if problems:
            raise ConfigError("; ".join(problems))


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def cluster_centers(cfg: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, _CENTERS])
    return rng.normal(size=(cfg.n_clusters, cfg.d_in))


def _draw_keys(cfg, n, stream):
    centers = cluster_centers(cfg)
    rng = np.random.default_rng([cfg.seed, stream])
    assign = rng.integers(0, cfg.n_clusters, size=n)
    return _f32(centers[assign] + cfg.cluster_spread * rng.normal(size=(n, cfg.d_in)))


def generate_keys(cfg: SynthConfig) -> np.ndarray:
    """Training keys, (n_keys, d_in)."""
    return _draw_keys(cfg, cfg.n_keys, _TRAIN_KEYS)


@dataclass(frozen=True)
class AugmentationOp:
    kind: str
    params: tuple

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "additive_noise":
            return x + self.params[0]
        if self.kind == "mask_block":
            start, length = self.params
            out = x.copy()
            out[start : start + length] = 0.0
            return out
        if self.kind == "global_scale":
            return x * self.params[0]
        if self.kind == "feature_shift":
            return x + self.params[0]
        raise ValueError(self.kind)


def _active_kinds(cfg: SynthConfig):
    kinds = []
    if cfg.noise_scale > 0:
        kinds.append("additive_noise")
    if round(cfg.mask_fraction * cfg.d_in) >= 1:
        kinds.append("mask_block")
    if cfg.scale_range != (1.0, 1.0):
        kinds.append("global_scale")
    if cfg.shift_scale > 0:
        kinds.append("feature_shift")
    return kinds


def sample_ops(cfg: SynthConfig, item_index: int, stream: int = _AUG) -> list:
    """The augmentation composition for one item, in application order."""
    rng = np.random.default_rng([cfg.seed, stream, item_index])
    kinds = _active_kinds(cfg)
    if not kinds:
        return []
    n_ops = int(rng.integers(1, min(3, len(kinds)) + 1))
    chosen = [kinds[i] for i in rng.permutation(len(kinds))[:n_ops]]
    ops = []
    for kind in chosen:
        if kind == "additive_noise":
            params = (cfg.noise_scale * rng.normal(size=cfg.d_in),)
        elif kind == "mask_block":
            length = int(round(cfg.mask_fraction * cfg.d_in))
            params = (int(rng.integers(0, cfg.d_in - length + 1)), length)
        elif kind == "global_scale":
            params = (float(rng.uniform(*cfg.scale_range)),)
        else:
            params = (float(rng.uniform(-cfg.shift_scale, cfg.shift_scale)),)
        ops.append(AugmentationOp(kind, params))
    return ops


def augment_query(key, item_index: int, cfg: SynthConfig, stream: int = _AUG) -> np.ndarray:
    key = np.asarray(key, dtype=np.float64)
    if key.shape != (cfg.d_in,):
        raise ShapeError(f"expected key of width {cfg.d_in}, got {key.shape}")
    x = key
    for op in sample_ops(cfg, item_index, stream):
        x = op(x)
    return _f32(x)


def augment_all(keys, cfg: SynthConfig, first_index: int = 0, stream: int = _AUG) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.float64)
    if len(keys) == 0:
        return keys.reshape(0, cfg.d_in)
    return np.stack(
        [augment_query(k, first_index + i, cfg, stream) for i, k in enumerate(keys)]
    )


@dataclass
class EvalSplit:
    keys: np.ndarray
    queries: np.ndarray
    key_ids: np.ndarray
    query_ids: np.ndarray
    ground_truth: np.ndarray  # (n, 2) of (query_id, key_id)


def build_eval_split(
    cfg: SynthConfig, n_eval_queries: int, n_distractors: int, n_extra_keys: int = 0
) -> EvalSplit:
    """Held-out keys and queries drawn from fresh seed streams.

    Key ids start at ``cfg.n_keys`` so they never collide with training ids.
    The first ``n_eval_queries`` keys each get one augmented query; distractor
    queries are augmentations of keys that are not in the reference set.
    Every query is augmented with its own query id as the item index.
    """
    if n_eval_queries < 1 or n_distractors < 0 or n_extra_keys < 0:
        raise ConfigError("n_eval_queries must be >= 1 and other counts >= 0")
    n_ref = n_eval_queries + n_extra_keys
    drawn = _draw_keys(cfg, n_ref + n_distractors, _EVAL_KEYS)
    keys = drawn[:n_ref]
    hidden = drawn[n_ref:]
    base = cfg.n_keys
    queries = np.concatenate(
        [
            augment_all(keys[:n_eval_queries], cfg, base, _AUG),
            augment_all(hidden, cfg, base + n_eval_queries, _AUG),
        ]
    )
    key_ids = base + np.arange(n_ref)
    query_ids = base + np.arange(len(queries))
    gt = np.stack([query_ids[:n_eval_queries], key_ids[:n_eval_queries]], axis=1)
    return EvalSplit(keys, queries, key_ids, query_ids, gt)


# --- files ------------------------------------------------------------------

_DS_HEAD = struct.Struct("<4sIQIQ")  # magic, version, n_rows, d, id_offset
_DV_EXTRA = struct.Struct("<B7x")  # role byte
ROLE_CODES = {"query": 0, "key": 1}


def write_vectors(path, rows, id_offset: int = 0, role: str | None = None) -> None:
    """"QKDS" (inputs) or, with ``role`` set, "QKDV" (descriptors) file.

    Layout: magic | u32 version | u64 n_rows | u32 d | u64 id_offset
    [| u8 role, 7 pad bytes for QKDV] | float32 row-major data."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ShapeError("rows must be a matrix")
    magic = b"QKDS" if role is None else b"QKDV"
    head = _DS_HEAD.pack(magic, 1, rows.shape[0], rows.shape[1], id_offset)
    if role is not None:
        head += _DV_EXTRA.pack(ROLE_CODES[role])
    Path(path).write_bytes(head + rows.astype("<f4").tobytes())


def read_vectors(path, expect: str = "QKDS"):
    """Returns ``(rows, id_offset, role)``; role is None for QKDS files."""
    buf = Path(path).read_bytes()
    if len(buf) < _DS_HEAD.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, d, id_offset = _DS_HEAD.unpack_from(buf, 0)
    if magic.decode("ascii", "replace") != expect or version != 1:
        raise FormatError(f"{path}: expected a version-1 {expect} file")
    pos = _DS_HEAD.size
    role = None
    if expect == "QKDV":
        (code,) = _DV_EXTRA.unpack_from(buf, pos)
        pos += _DV_EXTRA.size
        role = {v: k for k, v in ROLE_CODES.items()}.get(code)
        if role is None:
            raise FormatError(f"{path}: unknown role byte {code}")
    if len(buf) - pos != 4 * n * d:
        raise FormatError(f"{path}: payload size does not match {n}x{d}")
    rows = np.frombuffer(buf, dtype="<f4", offset=pos).astype(np.float64).reshape(n, d)
    return rows, id_offset, role


@dataclass
class DatasetFiles:
    root: Path
    train_keys: Path = field(init=False)
    eval_keys: Path = field(init=False)
    eval_queries: Path = field(init=False)
    ground_truth: Path = field(init=False)
    manifest: Path = field(init=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.train_keys = self.root / "train_keys.qkds"
        self.eval_keys = self.root / "eval_keys.qkds"
        self.eval_queries = self.root / "eval_queries.qkds"
        self.ground_truth = self.root / "ground_truth.csv"
        self.manifest = self.root / "manifest.json"


def write_dataset(out_dir, cfg: SynthConfig, split: EvalSplit, keys=None) -> DatasetFiles:
    from .metrics import write_ground_truth

    files = DatasetFiles(out_dir)
    files.root.mkdir(parents=True, exist_ok=True)
    keys = generate_keys(cfg) if keys is None else keys
    write_vectors(files.train_keys, keys, 0)
    write_vectors(files.eval_keys, split.keys, int(split.key_ids[0]))
    write_vectors(files.eval_queries, split.queries, int(split.query_ids[0]))
    write_ground_truth(split.ground_truth, files.ground_truth)
    manifest = {
        "synth": asdict(cfg),
        "seed_streams": {
            "centers": _CENTERS,
            "train_keys": _TRAIN_KEYS,
            "eval_keys": _EVAL_KEYS,
            "augment": _AUG,
        },
        "n_train_keys": int(len(keys)),
        "n_eval_keys": int(len(split.keys)),
        "n_eval_queries": int(len(split.queries)),
        "n_ground_truth": int(len(split.ground_truth)),
    }
    files.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return files


def read_dataset(data_dir):
    """Training keys and the eval split from a gen-data directory."""
    from .metrics import read_ground_truth

    files = DatasetFiles(data_dir)
    keys, _, _ = read_vectors(files.train_keys)
    ek, k_off, _ = read_vectors(files.eval_keys)
    eq, q_off, _ = read_vectors(files.eval_queries)
    if len(keys) == 0:
        raise DegenerateInputError(f"{files.train_keys}: no training keys")
    split = EvalSplit(
        ek,
        eq,
        k_off + np.arange(len(ek)),
        q_off + np.arange(len(eq)),
        read_ground_truth(files.ground_truth),
    )
    return keys, split
