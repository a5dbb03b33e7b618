"""The full network: per-modality ST-Transformers, note branch, fusion transformer, head."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .cohort import Cohort
from .errors import ContractError, DataError, DimensionError, ParameterError
from .graph import AdjacencyMatrix, SageParams, build_adjacency, median_bandwidth, pool_node_features, sage_layer
from .init import uniform_fan_in
from .modality import (
    MAX_CHUNKS, MAX_VISITS, EmbeddingProvider, HashEmbedder, ModalityFeatures, chunk_note, note_vectors,
    pad_visits, project_notes,
)
from .tensor import Tensor
from .transformer import (
    SequenceBatch, TransformerLayerParams, add_positional_encoding, extract_cls, prepend_cls, strip_cls,
    transformer_layer,
)

BRANCHES = ("ehr", "image")
ALL_MODALITIES = ("ehr", "image", "note")
CHECKPOINT_VERSION = 1


@dataclass
class MustConfig:
    d: int = 64
    heads: int = 4
    d_ff: int | None = None  # 4 * d when unset
    temporal_layers: int = 1
    fusion_layers: int = 1
    dropout: float = 0.1
    delta: float = 0.5
    sigma: float | str = "median"
    metric: str = "cosine_distance"
    fusion_input: str = "sequence"
    modalities: tuple[str, ...] = ALL_MODALITIES
    positional_encoding: bool = True
    note_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.validate()

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d

    def validate(self) -> None:
        if min(self.d, self.heads, self.ff_dim, self.note_dim) <= 0:
            raise ParameterError("dimensions must be positive")
        if self.d % self.heads:
            raise ParameterError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.temporal_layers < 0 or self.fusion_layers < 0:
            raise ParameterError("layer counts must be non-negative")
        if self.fusion_input not in ("sequence", "cls"):
            raise ParameterError(f"fusion_input must be 'sequence' or 'cls', got {self.fusion_input!r}")
        if not self.modalities or set(self.modalities) - set(ALL_MODALITIES):
            raise ParameterError(f"modalities must be a non-empty subset of {ALL_MODALITIES}")
        if not 0.0 <= self.delta < 1.0:
            raise ParameterError(f"delta must lie in [0, 1), got {self.delta}")
        if self.sigma != "median" and not float(self.sigma) > 0:
            raise ParameterError(f"sigma must be 'median' or positive, got {self.sigma!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "MustConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


class ParameterStore:
    """Named learnable tensors in registration order."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.tensors:
            raise ContractError(f"parameter {name!r} registered twice")
        t = Tensor(value, requires_grad=True)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.tensors[k].data[...] = v

    def sage(self, prefix: str) -> SageParams:
        return SageParams(self[f"{prefix}.W_self"], self[f"{prefix}.W_neigh"], self[f"{prefix}.bias"])

    def layer(self, prefix: str, heads: int) -> TransformerLayerParams:
        keys = ("W_Q", "W_K", "W_V", "W_o", "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
                "W_ff1", "b_ff1", "W_ff2", "b_ff2")
        return TransformerLayerParams(**{k: self[f"{prefix}.{k}"] for k in keys}, heads=heads)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype=np.float64).tobytes())
        return h.hexdigest()


def _add_layer(store: ParameterStore, prefix: str, d: int, d_ff: int, rng) -> None:
    for k in ("W_Q", "W_K", "W_V", "W_o"):
        store.add(f"{prefix}.{k}", uniform_fan_in(rng, d, d))
    store.add(f"{prefix}.ln1_gamma", np.ones(d))
    store.add(f"{prefix}.ln1_beta", np.zeros(d))
    store.add(f"{prefix}.ln2_gamma", np.ones(d))
    store.add(f"{prefix}.ln2_beta", np.zeros(d))
    store.add(f"{prefix}.W_ff1", uniform_fan_in(rng, d, d_ff))
    store.add(f"{prefix}.b_ff1", np.zeros(d_ff))
    store.add(f"{prefix}.W_ff2", uniform_fan_in(rng, d_ff, d))
    store.add(f"{prefix}.b_ff2", np.zeros(d))


def init_parameters(cfg: MustConfig, raw_dims: dict[str, int], seed: int | None = None) -> ParameterStore:
    """Fan-in uniform weights, zero biases and CLS tokens, unit LN gains.

    ``raw_dims`` maps each used modality to its input width (``d_note`` for
    notes).
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d = cfg.d
    store = ParameterStore()
    for b in BRANCHES:
        if b not in cfg.modalities:
            continue
        store.add(f"{b}.input.W", uniform_fan_in(rng, raw_dims[b], d))
        store.add(f"{b}.input.b", np.zeros(d))
        store.add(f"{b}.sage.W_self", uniform_fan_in(rng, d, d))
        store.add(f"{b}.sage.W_neigh", uniform_fan_in(rng, d, d))
        store.add(f"{b}.sage.bias", np.zeros(d))
        store.add(f"{b}.cls", np.zeros(d))
        for k in range(cfg.temporal_layers):
            _add_layer(store, f"{b}.temporal.{k}", d, cfg.ff_dim, rng)
    if "note" in cfg.modalities:
        store.add("note.W_d", uniform_fan_in(rng, raw_dims["note"], d))
    for k in range(cfg.fusion_layers):
        _add_layer(store, f"fusion.{k}", d, cfg.ff_dim, rng)
    store.add("head.W1", uniform_fan_in(rng, d, d))
    store.add("head.b1", np.zeros(d))
    store.add("head.W2", uniform_fan_in(rng, d, 1))
    store.add("head.b2", np.zeros(1))
    return store


# ---------------------------------------------------------------------------
# inputs


@dataclass
class ModelInputs:
    """Everything a forward pass needs for one admission set (the graph's nodes)."""

    ehr: ModalityFeatures
    image: ModalityFeatures
    notes: ModalityFeatures
    labels: np.ndarray
    splits: np.ndarray
    admission_ids: list
    graphs: dict[str, AdjacencyMatrix] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.labels)

    def raw_dims(self) -> dict[str, int]:
        return {"ehr": self.ehr.dim, "image": self.image.dim, "note": self.notes.dim}

    def features(self, modality: str) -> ModalityFeatures:
        return {"ehr": self.ehr, "image": self.image, "note": self.notes}[modality]

    def permuted(self, perm) -> "ModelInputs":
        perm = np.asarray(perm)
        return ModelInputs(
            self.ehr.subset(perm), self.image.subset(perm), self.notes.subset(perm),
            self.labels[perm], self.splits[perm], [self.admission_ids[i] for i in perm],
            {k: g.permuted(perm) for k, g in self.graphs.items()},
        )


def build_graph(features: ModalityFeatures, cfg: MustConfig) -> AdjacencyMatrix:
    pooled = pool_node_features(features.values, features.mask)
    sigma = median_bandwidth(pooled, cfg.metric) if cfg.sigma == "median" else float(cfg.sigma)
    return build_adjacency(pooled, sigma=sigma, delta=cfg.delta, metric=cfg.metric)


def prepare_inputs(cohort: Cohort, cfg: MustConfig, provider: EmbeddingProvider | None = None) -> ModelInputs:
    """Pad visit sequences, embed note chunks and build one graph per visit modality."""
    recs = cohort.records
    if not recs:
        raise DataError("cohort is empty")
    ids = [r.admission_id for r in recs]
    pids = [r.patient_id for r in recs]
    feats = {}
    for m in BRANCHES:
        seqs = [getattr(r, m) for r in recs]
        dims = {s.shape[1] for s in seqs if len(s)}
        if len(dims) != 1:
            raise DataError(f"{m} visit widths are inconsistent across admissions: {sorted(dims)}")
        values, mask = pad_visits(seqs, dims.pop(), MAX_VISITS)
        feats[m] = ModalityFeatures(m, values, mask, ids, pids)
    provider = provider or HashEmbedder(dim=cfg.note_dim, seed=cfg.seed)
    notes = note_vectors([chunk_note(r.note_tokens) for r in recs], provider, ids, MAX_CHUNKS)
    inputs = ModelInputs(feats["ehr"], feats["image"], notes, cohort.labels, cohort.splits, ids)
    for m in BRANCHES:
        if m in cfg.modalities:
            inputs.graphs[m] = build_graph(feats[m], cfg)
    return inputs


# ---------------------------------------------------------------------------
# forward


def st_transformer_forward(V: ModalityFeatures, A: AdjacencyMatrix, branch: str, cfg: MustConfig,
                           params: ParameterStore, training: bool = False, rng=None):
    """Project, GraphSAGE, add positions, prepend CLS, temporal layers.

    Returns the output sequence without its CLS slot, as a
    :class:`SequenceBatch`, and the CLS representation ``(a, d)``.
    """
    mask = V.mask
    x = T.matmul(Tensor(V.values), params[f"{branch}.input.W"]) + params[f"{branch}.input.b"]
    x = T.apply_mask(x, mask[:, :, None])
    h = sage_layer(x, A, params.sage(f"{branch}.sage"), mask=mask)
    z = SequenceBatch(h, mask)
    if cfg.positional_encoding:
        z = add_positional_encoding(z)
    z = prepend_cls(z, params[f"{branch}.cls"])
    for k in range(cfg.temporal_layers):
        z = transformer_layer(z, params.layer(f"{branch}.temporal.{k}", cfg.heads), cfg.dropout, training, rng)
    return strip_cls(z), extract_cls(z)


def fuse(ehr_out, img_out, notes: SequenceBatch | None, cfg: MustConfig) -> SequenceBatch:
    """Concatenate modality token sequences along the token axis.

    ``ehr_out``/``img_out`` are ``(sequence, cls)`` pairs from
    :func:`st_transformer_forward` or ``None`` when the modality is unused.
    """
    parts: list[SequenceBatch] = []
    for out in (ehr_out, img_out):
        if out is None:
            continue
        seq, cls = out
        if cfg.fusion_input == "sequence":
            parts.append(seq)
        else:
            a, d = cls.shape
            parts.append(SequenceBatch(T.reshape(cls, (a, 1, d)), np.ones((a, 1), dtype=bool)))
    if notes is not None:
        parts.append(notes)
    if not parts:
        raise ContractError("fuse needs at least one modality")
    widths = {p.values.shape[2] for p in parts}
    if len(widths) != 1:
        raise ContractError(f"fuse: modality widths differ {sorted(widths)}")
    return SequenceBatch(T.concat([p.values for p in parts], axis=1),
                         np.concatenate([p.mask for p in parts], axis=1))


def masked_max(z: SequenceBatch) -> Tensor:
    """Max over the token axis with padded tokens excluded."""
    bias = np.where(z.mask, 0.0, -np.inf)[:, :, None]
    return T.max(T.add_constant(z.values, bias), axis=1)


def head_forward(pooled: Tensor, params: ParameterStore) -> Tensor:
    h = T.relu(T.matmul(pooled, params["head.W1"]) + params["head.b1"])
    out = T.matmul(h, params["head.W2"]) + params["head.b2"]
    return T.reshape(out, (out.shape[0],))


def encode(inputs: ModelInputs, cfg: MustConfig, params: ParameterStore, training: bool = False,
           rng=None) -> SequenceBatch:
    """Fused token sequence after the fusion transformer."""
    outs = {}
    for b in BRANCHES:
        if b in cfg.modalities:
            outs[b] = st_transformer_forward(inputs.features(b), inputs.graphs[b], b, cfg, params, training, rng)
    notes = None
    if "note" in cfg.modalities:
        notes = SequenceBatch(project_notes(inputs.notes, params["note.W_d"]), inputs.notes.mask)
    z = fuse(outs.get("ehr"), outs.get("image"), notes, cfg)
    for k in range(cfg.fusion_layers):
        z = transformer_layer(z, params.layer(f"fusion.{k}", cfg.heads), cfg.dropout, training, rng)
    return z


def must_forward(inputs: ModelInputs, cfg: MustConfig, params: ParameterStore, training: bool = False,
                 rng=None) -> Tensor:
    """One logit per admission, shape ``(a,)``."""
    if training and cfg.dropout > 0 and rng is None:
        raise ContractError("training with dropout needs an rng")
    for b in BRANCHES:
        if b in cfg.modalities and b not in inputs.graphs:
            raise ContractError(f"no graph built for modality {b!r}")
    return head_forward(masked_max(encode(inputs, cfg, params, training, rng)), params)


# ---------------------------------------------------------------------------
# checkpoints


def config_to_dict(cfg: MustConfig) -> dict:
    d = asdict(cfg)
    d["modalities"] = list(cfg.modalities)
    return d


def checkpoint_dict(cfg: MustConfig, params: ParameterStore, extra: dict | None = None) -> dict:
    return {
        "format": "must-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(cfg),
        "extra": extra or {},
        "params": {
            name: {"shape": list(t.shape), "dtype": t.data.dtype.name,
                   "values": [float(x) for x in t.data.reshape(-1)]}
            for name, t in params.items()
        },
    }


def save_checkpoint(path, cfg: MustConfig, params: ParameterStore, extra: dict | None = None) -> str:
    """Write a JSON checkpoint and return the SHA-256 of its bytes."""
    text = json.dumps(checkpoint_dict(cfg, params, extra))
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_checkpoint(path) -> tuple[MustConfig, ParameterStore, dict]:
    try:
        raw = json.loads(Path(path).read_text())
    except ValueError as exc:
        raise DataError(f"{path}: not a JSON checkpoint ({exc})") from exc
    if raw.get("format") != "must-checkpoint" or raw.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {raw.get('format')!r} v{raw.get('version')}")
    cfg = MustConfig.from_dict(raw["config"])
    store = ParameterStore()
    for name, entry in raw["params"].items():
        arr = np.asarray(entry["values"], dtype=entry.get("dtype", "float64")).reshape(entry["shape"])
        t = store.add(name, arr)
        t.data = arr  # keep the stored width exactly
    return cfg, store, raw.get("extra", {})


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def check_widths(inputs: ModelInputs, params: ParameterStore, cfg: MustConfig) -> None:
    for b in BRANCHES:
        if b in cfg.modalities and params[f"{b}.input.W"].shape[0] != inputs.features(b).dim:
            raise DimensionError(f"{b} inputs have width {inputs.features(b).dim}, "
                                 f"checkpoint expects {params[f'{b}.input.W'].shape[0]}")
    if "note" in cfg.modalities and params["note.W_d"].shape[0] != inputs.notes.dim:
        raise DimensionError(f"note vectors have width {inputs.notes.dim}, "
                             f"checkpoint expects {params['note.W_d'].shape[0]}")
