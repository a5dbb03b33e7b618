"""Per-modality input sequences: visit features and clinical-note chunk embeddings."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Literal, Protocol, Sequence

import numpy as np

from . import tensor as T
from .errors import DataError, DimensionError
from .tensor import Tensor

MAX_VISITS = 9
CHUNK_TOKENS = 512
MAX_CHUNKS = 25
FILE_EMBED_DIM = 768

Modality = Literal["ehr", "image", "note"]


@dataclass
class ModalityFeatures:
    """Padded per-admission sequences for one modality.

    ``values`` is ``(a, L, d_raw)``, ``mask`` is ``(a, L)`` with True on real
    rows. Padded rows are always zero.
    """

    modality: str
    values: np.ndarray
    mask: np.ndarray
    admission_ids: list = field(default_factory=list)
    patient_ids: list | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 3 or self.mask.shape != self.values.shape[:2]:
            raise DimensionError(f"{self.modality}: values {self.values.shape} vs mask {self.mask.shape}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def subset(self, idx) -> "ModalityFeatures":
        idx = np.asarray(idx)
        ids = [self.admission_ids[i] for i in idx] if self.admission_ids else []
        pids = [self.patient_ids[i] for i in idx] if self.patient_ids else None
        return ModalityFeatures(self.modality, self.values[idx], self.mask[idx], ids, pids)


def pad_visits(sequences: Sequence, d: int, max_len: int = MAX_VISITS, dtype=np.float64,
               keep: str = "last") -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length ``(t_i, d)`` sequences into ``(a, max_len, d)``.

    Real rows come first. Sequences longer than ``max_len`` keep their most
    recent rows (``keep="last"``) or earliest rows (``keep="first"``).
    """
    a = len(sequences)
    values = np.zeros((a, max_len, d), dtype=dtype)
    mask = np.zeros((a, max_len), dtype=bool)
    for i, seq in enumerate(sequences):
        rows = np.asarray(seq, dtype=dtype).reshape(-1, d) if len(seq) else np.zeros((0, d))
        rows = rows[-max_len:] if keep == "last" else rows[:max_len]
        values[i, : len(rows)] = rows
        mask[i, : len(rows)] = True
    return values, mask


# ---------------------------------------------------------------------------
# notes


def tokenize(text: str) -> list[str]:
    return text.split()


def chunk_note(tokens: Sequence[str], max_len: int = CHUNK_TOKENS,
               max_chunks: int | None = MAX_CHUNKS) -> list[list[str]]:
    """Split into consecutive chunks of at most ``max_len`` tokens.

    Only the first ``max_chunks`` chunks are kept; ``None`` disables the cap.
    """
    if max_len <= 0:
        raise ValueError(f"max_len must be positive, got {max_len}")
    tokens = list(tokens)
    chunks = [tokens[i:i + max_len] for i in range(0, len(tokens), max_len)]
    return chunks if max_chunks is None else chunks[:max_chunks]


class EmbeddingProvider(Protocol):
    dim: int

    def embed_chunk(self, tokens: Sequence[str], admission_id=None, chunk_index: int | None = None) -> np.ndarray:
        ...


def _stable_seed(*parts) -> int:
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class HashEmbedder:
    """Deterministic stand-in for a pretrained chunk encoder.

    A chunk maps to the normalized sum of per-token pseudo-random vectors
    plus a small component keyed on the exact token sequence, so chunks with
    similar vocabulary land close together while distinct chunks never
    coincide.
    """

    def __init__(self, dim: int = 64, seed: int = 0, order_weight: float = 0.1):
        self.dim = dim
        self.seed = seed
        self.order_weight = order_weight
        self._token_vec = lru_cache(maxsize=None)(self._draw)

    def _draw(self, key: str) -> np.ndarray:
        rng = np.random.default_rng(_stable_seed(self.seed, key))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed_chunk(self, tokens, admission_id=None, chunk_index=None) -> np.ndarray:
        tokens = list(tokens)
        if not tokens:
            return np.zeros(self.dim)
        bag = np.sum([self._token_vec(t) for t in tokens], axis=0) / np.sqrt(len(tokens))
        seq = self._draw("\x1e".join(tokens) + "\x1dseq")
        v = bag + self.order_weight * np.linalg.norm(bag) * seq
        n = np.linalg.norm(v)
        return v / n if n > 0 else seq


class FileEmbeddingProvider:
    """Precomputed chunk vectors keyed by ``(admission_id, chunk_index)``.

    The file is JSON-lines: ``{"admission_id", "chunk_index", "vector"}``.
    """

    def __init__(self, path, dim: int = FILE_EMBED_DIM):
        self.dim = dim
        self.path = Path(path)
        self.vectors: dict[tuple[str, int], np.ndarray] = {}
        with open(self.path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    key = (str(rec["admission_id"]), int(rec["chunk_index"]))
                    vec = np.asarray(rec["vector"], dtype=np.float64)
                except (ValueError, KeyError, TypeError) as exc:
                    raise DataError(f"{self.path}:{lineno}: malformed embedding record ({exc})") from exc
                if vec.shape != (dim,):
                    raise DataError(f"{self.path}:{lineno}: vector has {vec.size} values, expected {dim}")
                if not np.isfinite(vec).all():
                    raise DataError(f"{self.path}:{lineno}: non-finite values")
                if key in self.vectors:
                    raise DataError(f"{self.path}:{lineno}: duplicate chunk {key}")
                self.vectors[key] = vec

    def embed_chunk(self, tokens, admission_id=None, chunk_index=None) -> np.ndarray:
        try:
            return self.vectors[(str(admission_id), int(chunk_index))]
        except KeyError:
            raise DataError(
                f"no precomputed embedding for admission {admission_id!r} chunk {chunk_index}"
            ) from None


def write_embedding_file(path, vectors: dict) -> None:
    with open(path, "w") as fh:
        for (adm, idx), vec in vectors.items():
            fh.write(json.dumps({"admission_id": adm, "chunk_index": idx,
                                 "vector": [float(x) for x in vec]}) + "\n")


def note_vectors(chunks: Sequence[Sequence[Sequence[str]]], provider: EmbeddingProvider,
                 admission_ids: Sequence | None = None, max_chunks: int = MAX_CHUNKS) -> ModalityFeatures:
    """Provider vectors for every chunk, zero-padded to ``max_chunks`` rows.

    An admission without chunks keeps one zero row marked real so attention
    always has a key.
    """
    a = len(chunks)
    ids = list(admission_ids) if admission_ids is not None else list(range(a))
    values = np.zeros((a, max_chunks, provider.dim))
    mask = np.zeros((a, max_chunks), dtype=bool)
    for i, note in enumerate(chunks):
        note = list(note)[:max_chunks]
        for c, toks in enumerate(note):
            values[i, c] = provider.embed_chunk(toks, admission_id=ids[i], chunk_index=c)
        mask[i, : max(len(note), 1)] = True
    return ModalityFeatures("note", values, mask, ids)


def project_notes(raw: ModalityFeatures, W_d: Tensor) -> Tensor:
    """Differentiable ``raw @ W_d`` -> ``(a, C, d)``; padded rows stay zero."""
    if W_d.shape[0] != raw.dim:
        raise DimensionError(f"W_d is {W_d.shape} but note vectors have width {raw.dim}")
    return T.matmul(Tensor(raw.values), W_d)


def embed_notes(chunks, provider: EmbeddingProvider, W_d: Tensor,
                admission_ids: Sequence | None = None) -> ModalityFeatures:
    raw = note_vectors(chunks, provider, admission_ids)
    with T.no_grad():
        projected = project_notes(raw, W_d).data
    return ModalityFeatures("note", projected, raw.mask, raw.admission_ids)


# ---------------------------------------------------------------------------
# visit features on disk


def ingest_modality_features(path, modality: str, expected_d_raw: int,
                             admission_ids: Sequence | None = None,
                             max_len: int = MAX_VISITS) -> ModalityFeatures:
    """Load one modality from a features JSON-lines file.

    Lines for other modalities are skipped. Visits are taken in file order
    (chronological) and truncated to the most recent ``max_len``. When
    ``admission_ids`` is given the output follows that order and every id
    must be present exactly once.
    """
    path = Path(path)
    found: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if rec["modality"] != modality:
                    continue
                adm, pid, visits = str(rec["admission_id"]), rec.get("patient_id"), rec["visits"]
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed feature record ({exc})") from exc
            try:
                arr = np.asarray(visits, dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: ragged visit rows for admission {adm}") from exc
            if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] != expected_d_raw:
                raise DataError(
                    f"{path}:{lineno}: admission {adm} visits have shape {arr.shape}, "
                    f"expected (n>=1, {expected_d_raw})"
                )
            if not np.isfinite(arr).all():
                raise DataError(f"{path}:{lineno}: admission {adm} has non-finite values")
            if adm in found:
                raise DataError(f"{path}:{lineno}: duplicate admission {adm}")
            found[adm] = (pid, arr)

    if admission_ids is None:
        order = list(found)
    else:
        order = [str(a) for a in admission_ids]
        unknown = sorted(set(found) - set(order))
        if unknown:
            raise DataError(f"{path}: unknown admission ids {unknown[:5]}")
        missing = [a for a in order if a not in found]
        if missing:
            raise DataError(f"{path}: no {modality} features for admissions {missing[:5]}")
    values, mask = pad_visits([found[a][1] for a in order], expected_d_raw, max_len)
    return ModalityFeatures(modality, values, mask, order, [found[a][0] for a in order])


def save_modality_features(features: ModalityFeatures, path, append: bool = False) -> None:
    pids = features.patient_ids or [None] * features.n
    with open(path, "a" if append else "w") as fh:
        for i in range(features.n):
            rows = features.values[i][features.mask[i]]
            fh.write(json.dumps({
                "admission_id": features.admission_ids[i],
                "patient_id": pids[i],
                "modality": features.modality,
                "visits": rows.tolist(),
            }) + "\n")
