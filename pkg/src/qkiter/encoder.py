"""Query and key encoders.

An encoder is ``backbone -> head``. The backbone standardizes its input with
statistics frozen at construction time and applies relu dense layers,
producing the intermediate descriptor. The head sees the intermediate
descriptor concatenated with the fixed baseline descriptor and returns::

    descriptor = 0.01 * head([intermediate, base]) + base

With a zero final head layer the descriptor is exactly the baseline.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, ShapeError
from .nn import DenseLayer, ParamGroup, dense_backward, preactivation, _activate
from .parallel import map_rows
from .store import PcaModel, pca_fit, pca_transform

RESIDUAL_SCALE = 0.01
NORM_EPS = 1e-6
ROLES = ("query", "key")
PHASES = ("Q", "K")


@dataclass
class BaselineFeaturizer:
    """Fixed stand-in for a hand-crafted global descriptor:
    ``scale * pca(tanh(projection @ x))``. Never trained.

    ``scale`` is one scalar for all components (no whitening), fixed at fit
    time so the fitted descriptors have unit total variance.
    """

    seed: int
    projection: np.ndarray  # (d_proj, d_in)
    pca: PcaModel
    scale: float = 1.0

    @property
    def d_in(self) -> int:
        return self.projection.shape[1]

    @property
    def d_base(self) -> int:
        return self.pca.d_out_pca


def build_featurizer(seed: int, fit_inputs, d_proj: int, d_base: int) -> BaselineFeaturizer:
    fit_inputs = np.asarray(fit_inputs, dtype=np.float64)
    rng = np.random.default_rng([seed, 0xF0])
    d_in = fit_inputs.shape[1]
    projection = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_proj, d_in))
    pca = pca_fit(np.tanh(fit_inputs @ projection.T), d_base)
    scale = 1.0 / float(np.sqrt(pca.explained_variance.sum()))
    return BaselineFeaturizer(seed, projection, pca, scale)


def baseline_featurize(f: BaselineFeaturizer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != f.d_in:
        raise ShapeError(f"featurizer expects width {f.d_in}, got {x.shape}")
    return f.scale * pca_transform(f.pca, np.tanh(x @ f.projection.T))


@dataclass
class EncoderParams:
    role: str
    norm_mean: np.ndarray
    norm_var: np.ndarray
    backbone_layers: list
    head_layers: list
    trainable_backbone: bool = True
    trainable_head: bool = True
    featurizer_seed: int = 0

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        self.norm_mean = np.asarray(self.norm_mean, dtype=np.float64)
        self.norm_var = np.asarray(self.norm_var, dtype=np.float64)
        self.norm_mean.setflags(write=False)
        self.norm_var.setflags(write=False)
        widths = [self.d_in] + [l.n_out for l in self.backbone_layers]
        for layer, w in zip(self.backbone_layers, widths):
            if layer.n_in != w:
                raise ShapeError("backbone layer widths do not chain")
        if self.head_layers:
            w = self.head_layers[0].n_in
            for layer in self.head_layers:
                if layer.n_in != w:
                    raise ShapeError("head layer widths do not chain")
                w = layer.n_out
            if self.head_layers[0].n_in != self.d_mid + self.d_out:
                raise ShapeError("head input must be d_mid + d_base with d_base == d_out")

    @property
    def d_in(self) -> int:
        return self.norm_mean.shape[0]

    @property
    def d_mid(self) -> int:
        return self.backbone_layers[-1].n_out if self.backbone_layers else self.d_in

    @property
    def d_out(self) -> int:
        return self.head_layers[-1].n_out

    def group(self, part: str) -> ParamGroup:
        layers = self.backbone_layers if part == "backbone" else self.head_layers
        arrays = []
        for layer in layers:
            arrays += [layer.weight, layer.bias]
        return ParamGroup(f"{self.role}.{part}", arrays)

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.role,
            self.norm_mean.copy(),
            self.norm_var.copy(),
            [l.copy() for l in self.backbone_layers],
            [l.copy() for l in self.head_layers],
            self.trainable_backbone,
            self.trainable_head,
            self.featurizer_seed,
        )


def init_encoder(
    role: str,
    norm_inputs,
    backbone_width: int,
    d_mid: int,
    head_hidden: int,
    d_out: int,
    seed: int,
    featurizer_seed: int = 0,
) -> EncoderParams:
    """Seeded encoder with frozen standardization statistics taken from
    ``norm_inputs`` and a zero final head layer."""
    norm_inputs = np.asarray(norm_inputs, dtype=np.float64)
    rng = np.random.default_rng([seed, ROLES.index(role)])
    d_in = norm_inputs.shape[1]
    backbone = [
        DenseLayer.init(d_in, backbone_width, "relu", rng),
        DenseLayer.init(backbone_width, d_mid, "relu", rng),
    ]
    head = [
        DenseLayer.init(d_mid + d_out, head_hidden, "relu", rng),
        DenseLayer.init(head_hidden, d_out, "identity", rng, zero=True),
    ]
    return EncoderParams(
        role,
        norm_inputs.mean(axis=0),
        norm_inputs.var(axis=0),
        backbone,
        head,
        featurizer_seed=featurizer_seed,
    )


# --- forward / backward -----------------------------------------------------


@dataclass
class EncoderCache:
    """Per-call activations needed for backward. Each entry is (input, pre)."""

    backbone: list = field(default_factory=list)
    head: list = field(default_factory=list)


def standardize(enc: EncoderParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != enc.d_in:
        raise ShapeError(f"{enc.role} encoder expects width {enc.d_in}, got {x.shape}")
    return (x - enc.norm_mean) / np.sqrt(enc.norm_var + NORM_EPS)


def _run(layers, h, cache_list):
    for layer in layers:
        pre = preactivation(layer, h)
        if cache_list is not None:
            cache_list.append((h, pre))
        h = _activate(pre, layer.activation)
    return h


def _back(layers, cache_list, grad):
    if len(cache_list) != len(layers):
        raise ContractError("cache does not match parameter layout")
    grads = [None] * (2 * len(layers))
    for i in reversed(range(len(layers))):
        h, pre = cache_list[i]
        if pre.shape[-1] != layers[i].n_out:
            raise ContractError("cache does not match parameter layout")
        gw, gb, grad = dense_backward(layers[i], h, grad, pre=pre)
        grads[2 * i], grads[2 * i + 1] = gw, gb
    return grads, grad


def backbone_forward(enc: EncoderParams, x, cache: EncoderCache | None = None) -> np.ndarray:
    h = standardize(enc, x)
    return _run(enc.backbone_layers, h, None if cache is None else cache.backbone)


def head_forward(
    enc: EncoderParams, intermediate, base, cache: EncoderCache | None = None
) -> np.ndarray:
    intermediate = np.asarray(intermediate, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    if intermediate.shape[-1] != enc.d_mid or base.shape[-1] != enc.d_out:
        raise ShapeError(
            f"head expects ({enc.d_mid}, {enc.d_out}), got "
            f"{intermediate.shape} and {base.shape}"
        )
    h = np.concatenate([intermediate, base], axis=-1)
    out = _run(enc.head_layers, h, None if cache is None else cache.head)
    return RESIDUAL_SCALE * out + base


def head_backward(enc: EncoderParams, cache: EncoderCache, grad_desc):
    """Head parameter gradients and the gradient wrt the intermediate input."""
    grads, g_in = _back(enc.head_layers, cache.head, RESIDUAL_SCALE * np.asarray(grad_desc))
    return grads, g_in[..., : enc.d_mid]


def encoder_forward(enc, f: BaselineFeaturizer, x, cache: EncoderCache | None = None):
    inter = backbone_forward(enc, x, cache)
    return head_forward(enc, inter, baseline_featurize(f, x), cache)


def encoder_backward(enc: EncoderParams, cache: EncoderCache, grad_desc) -> dict:
    """Gradients for the trainable parameter groups only.

    Returns ``{"head": [...], "backbone": [...]}`` with frozen groups absent;
    each list alternates weight and bias gradients layer by layer.
    """
    grads = {}
    if not (enc.trainable_head or enc.trainable_backbone):
        return grads
    head_grads, g_inter = head_backward(enc, cache, grad_desc)
    if enc.trainable_head:
        grads["head"] = head_grads
    if enc.trainable_backbone:
        grads["backbone"], _ = _back(enc.backbone_layers, cache.backbone, g_inter)
    return grads


def embed(enc, f, x, workers: int = 1) -> np.ndarray:
    """Full forward over many rows, tiled so the result is worker-independent."""
    x = np.asarray(x, dtype=np.float64)
    return map_rows(lambda t: encoder_forward(enc, f, t), x, workers=workers)


def set_phase_trainability(q: EncoderParams, k: EncoderParams, phase: str) -> None:
    """Q phase: whole query model plus key head train, key backbone frozen.
    K phase is the mirror image."""
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}")
    moving, frozen = (q, k) if phase == "Q" else (k, q)
    moving.trainable_backbone = moving.trainable_head = True
    frozen.trainable_backbone = False
    frozen.trainable_head = True


# --- hashing and checkpoints ------------------------------------------------


def backbone_hash(enc: EncoderParams) -> bytes:
    h = hashlib.sha256()
    h.update(enc.norm_mean.tobytes())
    h.update(enc.norm_var.tobytes())
    for layer in enc.backbone_layers:
        h.update(layer.activation.encode())
        h.update(np.ascontiguousarray(layer.weight).tobytes())
        h.update(np.ascontiguousarray(layer.bias).tobytes())
    return h.digest()


def source_tag(enc: EncoderParams, dataset_tag: str) -> bytes:
    """Identifies (role, backbone parameters, dataset) of a bulk evaluation."""
    h = hashlib.sha256(b"QKIS-source")
    h.update(enc.role.encode())
    h.update(backbone_hash(enc))
    h.update(dataset_tag.encode())
    return h.digest()


CKPT_MAGIC = b"QKCP"
CKPT_VERSION = 1
_ACT_CODES = {"identity": 0, "relu": 1, "tanh": 2}
_CKPT_HEAD = struct.Struct("<4sIBBBxQI")
_LAYER_HEAD = struct.Struct("<IIBxxx")


def checkpoint_bytes(enc: EncoderParams) -> bytes:
    parts = [
        _CKPT_HEAD.pack(
            CKPT_MAGIC,
            CKPT_VERSION,
            ROLES.index(enc.role),
            int(enc.trainable_backbone),
            int(enc.trainable_head),
            enc.featurizer_seed,
            enc.d_in,
        ),
        enc.norm_mean.astype("<f8").tobytes(),
        enc.norm_var.astype("<f8").tobytes(),
        struct.pack("<II", len(enc.backbone_layers), len(enc.head_layers)),
    ]
    for layer in enc.backbone_layers + enc.head_layers:
        parts.append(_LAYER_HEAD.pack(layer.n_out, layer.n_in, _ACT_CODES[layer.activation]))
        parts.append(layer.weight.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
    return b"".join(parts)


def write_checkpoint(enc: EncoderParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(enc))


def read_checkpoint(path, expect_role: str | None = None) -> EncoderParams:
    buf = Path(path).read_bytes()
    try:
        magic, version, role, tb, th, fseed, d_in = _CKPT_HEAD.unpack_from(buf, 0)
        if magic != CKPT_MAGIC or version != CKPT_VERSION:
            raise FormatError(f"{path}: not a QKCP v{CKPT_VERSION} checkpoint")
        pos = _CKPT_HEAD.size

        def take(n):
            nonlocal pos
            arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
            pos += 8 * n
            return arr

        mean, var = take(d_in), take(d_in)
        n_bb, n_head = struct.unpack_from("<II", buf, pos)
        pos += 8
        codes = {v: k for k, v in _ACT_CODES.items()}
        layers = []
        for _ in range(n_bb + n_head):
            n_out, n_in, act = _LAYER_HEAD.unpack_from(buf, pos)
            pos += _LAYER_HEAD.size
            w = take(n_out * n_in).reshape(n_out, n_in)
            layers.append(DenseLayer(w, take(n_out), codes[act]))
    except (struct.error, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    role_name = ROLES[role]
    if expect_role is not None and role_name != expect_role:
        raise ContractError(f"{path}: checkpoint is a {role_name} model, not {expect_role}")
    return EncoderParams(
        role_name, mean, var, layers[:n_bb], layers[n_bb:], bool(tb), bool(th), fseed
    )


_FZ_HEAD = struct.Struct("<4sIQIIId")


def save_featurizer(f: BaselineFeaturizer, path) -> None:
    """Binary file "QKFZ": seed, dims, then projection, pca mean,
    components and explained variance as little-endian float64."""
    d_proj, d_in = f.projection.shape
    parts = [
        _FZ_HEAD.pack(b"QKFZ", 1, f.seed, d_proj, d_in, f.d_base, f.scale),
        f.projection.astype("<f8").tobytes(),
        f.pca.mean.astype("<f8").tobytes(),
        f.pca.components.astype("<f8").tobytes(),
        f.pca.explained_variance.astype("<f8").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_featurizer(path) -> BaselineFeaturizer:
    buf = Path(path).read_bytes()
    magic, version, seed, d_proj, d_in, d_base, scale = _FZ_HEAD.unpack_from(buf, 0)
    if magic != b"QKFZ" or version != 1:
        raise FormatError(f"{path}: not a QKFZ featurizer file")
    sizes = [d_proj * d_in, d_proj, d_base * d_proj, d_base]
    if len(buf) != _FZ_HEAD.size + 8 * sum(sizes):
        raise FormatError(f"{path}: size does not match header")
    arrays, pos = [], _FZ_HEAD.size
    for n in sizes:
        arrays.append(np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64))
        pos += 8 * n
    proj, mean, comps, var = arrays
    pca = PcaModel(mean, comps.reshape(d_base, d_proj), var)
    return BaselineFeaturizer(seed, proj.reshape(d_proj, d_in), pca, scale)
