"""Fusion networks: per-modality slice encoders feeding one transformer.

Every imaging input is encoded slice-by-slice with a small residual CNN
(weights shared across slices of that modality, one encoder per modality).
A radiograph contributes one token, each MRI slice one token.  Tokens get
learned positional and modality embeddings, pass through a post-LN
transformer, are mean-pooled, optionally concatenated with the clinical
vector, and classified by a one-hidden-layer head into two logits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractViolation

IMAGING_MODALITIES = ("XR", "DESS", "TSE", "T2MAP")
ARCH_KINDS = ("XR1", "MR1", "XR1MR1", "MR2", "XR1MR2", "XR1MR2C1")


@dataclass(frozen=True)
class ArchSpec:
    """Architecture hyperparameters; ``kind`` fixes the modality layout."""

    kind: str
    mri_protocols: tuple = ()
    clinical_dim: int = 0
    descriptor_dim: int = 64
    trf_layers: int = 4
    trf_heads: int = 8
    trf_ffn_dim: int | None = None
    dropout_rate: float = 0.1
    head_hidden: int = 64
    encoder_channels: tuple = (8, 16, 32)
    max_slices: int = 128

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ContractViolation(f"unknown architecture kind {self.kind!r}")
        n_mri = {"XR1": 0, "MR1": 1, "XR1MR1": 1, "MR2": 2, "XR1MR2": 2, "XR1MR2C1": 2}
        if len(self.mri_protocols) != n_mri[self.kind]:
            raise ContractViolation(
                f"{self.kind} needs {n_mri[self.kind]} MRI protocol(s), got {len(self.mri_protocols)}"
            )
        for p in self.mri_protocols:
            if p not in ("DESS", "TSE", "T2MAP"):
                raise ContractViolation(f"unknown MRI protocol {p!r}")
        if len(set(self.mri_protocols)) != len(self.mri_protocols):
            raise ContractViolation("duplicate MRI protocols")
        if (self.clinical_dim > 0) != self.kind.endswith("C1"):
            raise ContractViolation("clinical_dim must be positive exactly for *C1 kinds")
        if self.descriptor_dim % self.trf_heads != 0:
            raise ContractViolation("descriptor_dim must be divisible by trf_heads")
        if self.trf_layers < 1 or self.head_hidden < 1 or not self.encoder_channels:
            raise ContractViolation("layer counts and widths must be positive")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ContractViolation("dropout_rate must lie in [0, 1)")

    @property
    def uses_xr(self) -> bool:
        return self.kind.startswith("XR1")

    def token_modalities(self) -> tuple:
        mods = ("XR",) if self.uses_xr else ()
        return mods + tuple(self.mri_protocols)

    @property
    def ffn_dim(self) -> int:
        return self.trf_ffn_dim or 2 * self.descriptor_dim


@dataclass
class ModalityBatch:
    """One batch of model inputs; masked modalities are mean-replaced."""

    xr: np.ndarray | None = None
    mri: dict = field(default_factory=dict)
    clinical: np.ndarray | None = None
    slice_index: dict = field(default_factory=dict)
    masked: frozenset = frozenset()
    means: dict = field(default_factory=dict)

    def batch_size(self) -> int:
        if self.xr is not None:
            return self.xr.shape[0]
        for v in self.mri.values():
            return v.shape[0]
        if self.clinical is not None:
            return self.clinical.shape[0]
        raise ContractViolation("empty modality batch")


@dataclass
class Model:
    spec: ArchSpec
    params: dict


def _names_and_shapes(spec: ArchSpec):
    """Parameter layout in construction order: (name, shape, init kind)."""
    d = spec.descriptor_dim
    layout = []
    for mod in spec.token_modalities():
        c_in = 1
        for i, c_out in enumerate(spec.encoder_channels):
            pre = f"enc.{mod}.stage{i}"
            layout.append((f"{pre}.conv1.w", (c_out, c_in, 3, 3), "he"))
            layout.append((f"{pre}.conv1.b", (c_out,), "zero"))
            layout.append((f"{pre}.conv2.w", (c_out, c_out, 3, 3), "he"))
            layout.append((f"{pre}.conv2.b", (c_out,), "zero"))
            layout.append((f"{pre}.skip.w", (c_out, c_in, 1, 1), "he"))
            layout.append((f"{pre}.skip.b", (c_out,), "zero"))
            c_in = c_out
        layout.append((f"enc.{mod}.proj.w", (c_in, d), "he"))
        layout.append((f"enc.{mod}.proj.b", (d,), "zero"))
    layout.append(("emb.pos", (spec.max_slices, d), "emb"))
    layout.append(("emb.mod", (len(spec.token_modalities()), d), "emb"))
    f = spec.ffn_dim
    for layer in range(spec.trf_layers):
        pre = f"trf{layer}"
        for proj in ("q", "k", "v", "o"):
            layout.append((f"{pre}.{proj}.w", (d, d), "he"))
            layout.append((f"{pre}.{proj}.b", (d,), "zero"))
        layout.append((f"{pre}.ln1.g", (d,), "one"))
        layout.append((f"{pre}.ln1.b", (d,), "zero"))
        layout.append((f"{pre}.ffn1.w", (d, f), "he"))
        layout.append((f"{pre}.ffn1.b", (f,), "zero"))
        layout.append((f"{pre}.ffn2.w", (f, d), "he"))
        layout.append((f"{pre}.ffn2.b", (d,), "zero"))
        layout.append((f"{pre}.ln2.g", (d,), "one"))
        layout.append((f"{pre}.ln2.b", (d,), "zero"))
    head_in = d + spec.clinical_dim
    layout.append(("head.fc1.w", (head_in, spec.head_hidden), "he"))
    layout.append(("head.fc1.b", (spec.head_hidden,), "zero"))
    layout.append(("head.fc2.w", (spec.head_hidden, 2), "he"))
    layout.append(("head.fc2.b", (2,), "zero"))
    return layout


def _fan_in(shape, kind):
    if len(shape) == 4:  # conv [O, C, kh, kw]
        return shape[1] * shape[2] * shape[3]
    if len(shape) == 2:
        return shape[0]
    return shape[0]


def build_model(spec: ArchSpec, seed: int = 0) -> Model:
    """Deterministic initialization: He-uniform weights, zero biases,
    N(0, 1)/sqrt(D) embeddings, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in _names_and_shapes(spec):
        if kind == "he":
            bound = np.sqrt(6.0 / _fan_in(shape, kind))
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "emb":
            data = rng.normal(0.0, 1.0, size=shape) / np.sqrt(spec.descriptor_dim)
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return Model(spec, params)


def param_count(model: Model) -> int:
    return sum(t.data.size for t in model.params.values())


def _encode_stack(model: Model, mod: str, x: Tensor, training, rng) -> Tensor:
    """Residual CNN over [N, 1, H, W] -> [N, D] descriptors."""
    p = model.params
    h = x
    for i in range(len(model.spec.encoder_channels)):
        pre = f"enc.{mod}.stage{i}"
        main = dc.conv2d(h, p[f"{pre}.conv1.w"], p[f"{pre}.conv1.b"], stride=2, padding=1)
        main = dc.relu(main)
        main = dc.conv2d(main, p[f"{pre}.conv2.w"], p[f"{pre}.conv2.b"], stride=1, padding=1)
        skip = dc.conv2d(h, p[f"{pre}.skip.w"], p[f"{pre}.skip.b"], stride=2, padding=0)
        h = dc.relu(main + skip)
    pooled = dc.global_average_pool(h)
    return dc.matmul(pooled, p[f"enc.{mod}.proj.w"]) + p[f"enc.{mod}.proj.b"]


def _attention(model: Model, layer: int, x: Tensor, training, rng) -> Tensor:
    spec, p = model.spec, model.params
    b, t, d = x.shape
    heads = spec.trf_heads
    dk = d // heads
    pre = f"trf{layer}"

    def split(h):
        return dc.transpose(dc.reshape(h, (b, t, heads, dk)), (0, 2, 1, 3))

    q = split(dc.matmul(x, p[f"{pre}.q.w"]) + p[f"{pre}.q.b"])
    k = split(dc.matmul(x, p[f"{pre}.k.w"]) + p[f"{pre}.k.b"])
    v = split(dc.matmul(x, p[f"{pre}.v.w"]) + p[f"{pre}.v.b"])
    att = dc.softmax(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))) * Tensor(1.0 / np.sqrt(dk)))
    ctx = dc.reshape(dc.transpose(dc.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
    return dc.matmul(ctx, p[f"{pre}.o.w"]) + p[f"{pre}.o.b"]


def _transformer_layer(model: Model, layer: int, x: Tensor, training, rng) -> Tensor:
    spec, p = model.spec, model.params
    pre = f"trf{layer}"
    att = dc.dropout(_attention(model, layer, x, training, rng), spec.dropout_rate, rng, training)
    x = dc.layer_norm(x + att, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
    h = dc.relu(dc.matmul(x, p[f"{pre}.ffn1.w"]) + p[f"{pre}.ffn1.b"])
    h = dc.matmul(h, p[f"{pre}.ffn2.w"]) + p[f"{pre}.ffn2.b"]
    h = dc.dropout(h, spec.dropout_rate, rng, training)
    return dc.layer_norm(x + h, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])


def _masked_input(batch: ModalityBatch, mod: str, data: np.ndarray) -> np.ndarray:
    if mod not in batch.masked:
        return data
    if mod not in batch.means:
        raise ContractViolation(f"masked modality {mod!r} has no replacement mean")
    mean = np.asarray(batch.means[mod], dtype=np.float64)
    if mean.shape != data.shape[1:]:
        raise ContractViolation(f"mean shape {mean.shape} mismatches {mod} input")
    return np.broadcast_to(mean, data.shape)


def forward(model: Model, batch: ModalityBatch, mode: str = "eval", seed: int = 0) -> Tensor:
    """Compute [B, 2] logits; ``mode='train'`` enables dropout (seeded)."""
    if mode not in ("train", "eval"):
        raise ContractViolation(f"unknown mode {mode!r}")
    training = mode == "train"
    rng = np.random.default_rng(seed) if training else None
    spec = model.spec
    b = batch.batch_size()
    token_groups, positions, mod_ids = [], [], []
    for mod_id, mod in enumerate(spec.token_modalities()):
        if mod == "XR":
            if batch.xr is None:
                raise ContractViolation("architecture expects an XR input")
            data = _masked_input(batch, "XR", np.asarray(batch.xr, dtype=np.float64))
            enc = _encode_stack(model, "XR", Tensor(data), training, rng)
            token_groups.append(dc.reshape(enc, (b, 1, spec.descriptor_dim)))
            positions.append(np.array([0]))
            mod_ids.append(np.array([mod_id]))
        else:
            if mod not in batch.mri:
                raise ContractViolation(f"architecture expects MRI protocol {mod!r}")
            vol = np.asarray(batch.mri[mod], dtype=np.float64)
            if vol.ndim != 4:
                raise ContractViolation(f"{mod} input must be [B, S, H, W]")
            vol = _masked_input(batch, mod, vol)
            s, h, w = vol.shape[1:]
            idx = np.asarray(batch.slice_index.get(mod, np.arange(s)))
            if idx.shape != (s,):
                raise ContractViolation(f"slice_index for {mod} must have {s} entries")
            if idx.min() < 0 or idx.max() >= spec.max_slices:
                raise ContractViolation("slice index outside the positional table")
            flat = Tensor(vol.reshape(b * s, 1, h, w))
            enc = _encode_stack(model, mod, flat, training, rng)
            token_groups.append(dc.reshape(enc, (b, s, spec.descriptor_dim)))
            positions.append(idx)
            mod_ids.append(np.full(s, mod_id))
    tokens = token_groups[0] if len(token_groups) == 1 else dc.concat(token_groups, axis=1)
    pos = np.concatenate(positions)
    mid = np.concatenate(mod_ids).astype(int)
    x = tokens + dc.embedding(model.params["emb.pos"], pos)
    x = x + dc.embedding(model.params["emb.mod"], mid)
    x = dc.dropout(x, spec.dropout_rate, rng, training)
    for layer in range(spec.trf_layers):
        x = _transformer_layer(model, layer, x, training, rng)
    pooled = dc.mean(x, axis=1)
    if spec.clinical_dim:
        if batch.clinical is None:
            raise ContractViolation("architecture expects a clinical vector")
        clin = np.asarray(batch.clinical, dtype=np.float64)
        if clin.shape != (b, spec.clinical_dim):
            raise ContractViolation(
                f"clinical input must be [B, {spec.clinical_dim}], got {clin.shape}"
            )
        clin = _masked_input(batch, "CLIN", clin)
        pooled = dc.concat([pooled, Tensor(clin)], axis=1)
    h1 = dc.relu(dc.matmul(pooled, model.params["head.fc1.w"]) + model.params["head.fc1.b"])
    h1 = dc.dropout(h1, spec.dropout_rate, rng, training)
    return dc.matmul(h1, model.params["head.fc2.w"]) + model.params["head.fc2.b"]


def predict_proba(model: Model, batch: ModalityBatch) -> np.ndarray:
    """Eval-mode class probabilities [B, 2]."""
    logits = forward(model, batch, mode="eval")
    return dc.softmax(logits, axis=-1).data


# ---------------------------------------------------------------------------
# checkpoints: flat binary, sorted parameter names
# ---------------------------------------------------------------------------

_CKP_MAGIC = b"CKP1"


def save_checkpoint(model: Model, path):
    with open(path, "wb") as fh:
        fh.write(_CKP_MAGIC)
        fh.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            data = model.params[name].data
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKP_MAGIC:
            raise ContractViolation(f"{path} is not a checkpoint file")
        (count,) = struct.unpack("<I", fh.read(4))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = data.astype(np.float64)
    return out


def apply_checkpoint(model: Model, state: dict):
    """Load parameter arrays into a model; names and shapes must match."""
    if set(state) != set(model.params):
        raise ContractViolation("checkpoint parameter names do not match the model")
    for name, arr in state.items():
        if arr.shape != model.params[name].data.shape:
            raise ContractViolation(f"checkpoint shape mismatch for {name}")
        model.params[name].data = np.array(arr, dtype=np.float64)
        model.params[name].grad = None
