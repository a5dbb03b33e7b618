"""Admission records, synthetic cohorts with planted signal, splits and JSONL I/O."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, ParameterError
from .modality import MAX_VISITS
from .tensor import sigmoid

SPLITS = ("train", "val", "test")
MODALITIES = ("ehr", "image", "note")


def _as_visits(rows, admission_id) -> np.ndarray:
    try:
        arr = np.asarray(rows, dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"admission {admission_id}: ragged visit rows") from exc
    if arr.size == 0:
        return arr.reshape(0, arr.shape[-1] if arr.ndim == 2 else 0)
    if arr.ndim != 2:
        raise DataError(f"admission {admission_id}: visits must be a 2-D list, got shape {arr.shape}")
    return arr


@dataclass
class AdmissionRecord:
    admission_id: str
    patient_id: str
    label: int
    split: str
    ehr: np.ndarray
    image: np.ndarray
    note_tokens: list[str]

    def __post_init__(self):
        self.ehr = _as_visits(self.ehr, self.admission_id)
        self.image = _as_visits(self.image, self.admission_id)
        if self.label not in (0, 1):
            raise DataError(f"admission {self.admission_id}: label must be 0 or 1, got {self.label!r}")
        if self.split not in SPLITS:
            raise DataError(f"admission {self.admission_id}: unknown split {self.split!r}")
        if len(self.ehr) < 1:
            raise DataError(f"admission {self.admission_id}: needs at least one EHR visit")

    def __eq__(self, other):
        if not isinstance(other, AdmissionRecord):
            return NotImplemented
        return (
            (self.admission_id, self.patient_id, self.label, self.split, self.note_tokens)
            == (other.admission_id, other.patient_id, other.label, other.split, other.note_tokens)
            and np.array_equal(self.ehr, other.ehr)
            and np.array_equal(self.image, other.image)
        )

    def to_json(self) -> dict:
        return {
            "admission_id": self.admission_id,
            "patient_id": self.patient_id,
            "label": int(self.label),
            "split": self.split,
            "ehr": self.ehr.tolist(),
            "image": self.image.tolist(),
            "note_tokens": list(self.note_tokens),
        }


@dataclass
class Cohort:
    records: list[AdmissionRecord] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.admission_id in seen:
                raise DataError(f"duplicate admission id {r.admission_id!r}")
            seen.add(r.admission_id)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, Cohort) and self.records == other.records

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=int)

    @property
    def splits(self) -> np.ndarray:
        return np.array([r.split for r in self.records])

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def prevalence(self, split: str | None = None) -> float:
        y = self.labels if split is None else self.labels[self.indices(split)]
        return float(y.mean()) if len(y) else float("nan")


@dataclass
class SyntheticSpec:
    """Knobs of the synthetic cohort generator.

    Labels depend on a per-admission latent vector; each modality sees a view
    of it scaled by its signal strength. With ``split_latent`` the latent
    coordinates are partitioned across the three modalities, so no single
    modality carries the whole signal.
    """

    n_admissions: int = 600
    prevalence: float = 0.17
    latent_dim: int = 6
    s_e: float = 1.0
    s_i: float = 1.0
    s_n: float = 1.0
    noise: float = 1.0
    label_sharpness: float = 4.0
    missing_note_prob: float = 0.1
    d_ehr_raw: int = 16
    d_img_raw: int = 16
    max_visits: int = 12
    max_admissions_per_patient: int = 3
    patient_correlation: float = 0.6
    vocab_size: int = 60
    topical_fraction: float = 0.3
    note_length: tuple[int, int] = (50, 1200)
    split_latent: bool = True
    fractions: tuple[float, float, float] = (0.64, 0.16, 0.20)
    seed: int = 0

    def validate(self) -> None:
        if self.n_admissions < 1:
            raise ParameterError("n_admissions must be positive")
        if not 0.0 < self.prevalence < 1.0:
            raise ParameterError(f"prevalence must lie in (0, 1), got {self.prevalence}")
        expected_pos = self.prevalence * self.n_admissions
        if expected_pos < 3 or self.n_admissions - expected_pos < 3:
            raise ParameterError(
                f"prevalence {self.prevalence} is infeasible for {self.n_admissions} admissions "
                "(each split needs both classes)"
            )
        if min(self.s_e, self.s_i, self.s_n) < 0:
            raise ParameterError("signal strengths must be non-negative")
        if self.noise < 0 or self.label_sharpness < 0:
            raise ParameterError("noise and label_sharpness must be non-negative")
        if not 0.0 <= self.missing_note_prob <= 1.0:
            raise ParameterError("missing_note_prob must lie in [0, 1]")
        if self.latent_dim < 3 and self.split_latent:
            raise ParameterError("split_latent needs latent_dim >= 3")


def latent_blocks(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    idx = np.arange(spec.latent_dim)
    if spec.split_latent:
        return {m: idx[k::3] for k, m in enumerate(MODALITIES)}
    return {m: idx for m in MODALITIES}


def _solve_intercept(score: np.ndarray, prevalence: float) -> float:
    lo, hi = -50.0, 50.0
    for _ in range(200):
        mid = (lo + hi) / 2
        if sigmoid(score + mid).mean() < prevalence:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def generate_synthetic_cohort(spec: SyntheticSpec) -> Cohort:
    """Draw a cohort whose labels are driven by a latent shared across modalities."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k, n = spec.latent_dim, spec.n_admissions

    # admissions grouped into patients; a patient's admissions share part of the latent
    patient_of: list[int] = []
    n_patients = 0
    while len(patient_of) < n:
        count = int(rng.integers(1, spec.max_admissions_per_patient + 1))
        patient_of.extend([n_patients] * count)
        n_patients += 1
    patient_of = np.array(patient_of[:n])
    base = rng.standard_normal((n_patients, k))
    rho = spec.patient_correlation
    z = rho * base[patient_of] + np.sqrt(1 - rho ** 2) * rng.standard_normal((n, k))

    blocks = latent_blocks(spec)
    w = {}
    for m in MODALITIES:
        v = rng.standard_normal(len(blocks[m]))
        w[m] = v / np.linalg.norm(v) if spec.split_latent or m == "ehr" else w["ehr"]
    views = {m: z[:, blocks[m]] @ w[m] for m in MODALITIES}  # each ~ N(0, 1)
    score = sum(views.values()) / np.sqrt(len(MODALITIES)) if spec.split_latent else views["ehr"]
    score = spec.label_sharpness * score
    b = _solve_intercept(score, spec.prevalence)
    labels = (rng.random(n) < sigmoid(score + b)).astype(int)

    loadings = {
        "ehr": rng.standard_normal((len(blocks["ehr"]), spec.d_ehr_raw)),
        "image": rng.standard_normal((len(blocks["image"]), spec.d_img_raw)),
    }
    strength = {"ehr": spec.s_e, "image": spec.s_i}
    vocab = {
        "pos": [f"p{i}" for i in range(spec.vocab_size)],
        "neg": [f"q{i}" for i in range(spec.vocab_size)],
        "neutral": [f"w{i}" for i in range(4 * spec.vocab_size)],
    }

    records = []
    for i in range(n):
        seqs = {}
        for m in ("ehr", "image"):
            t = int(rng.integers(1, spec.max_visits + 1))
            signal = strength[m] * (z[i, blocks[m]] @ loadings[m])
            x = signal[None, :] + spec.noise * rng.standard_normal((t, loadings[m].shape[1]))
            seqs[m] = x[-MAX_VISITS:]
        if rng.random() < spec.missing_note_prob:
            tokens = []
        else:
            length = int(rng.integers(spec.note_length[0], spec.note_length[1] + 1))
            p_pos = sigmoid(2.0 * spec.s_n * views["note"][i])
            topical = rng.random(length) < spec.topical_fraction
            positive = rng.random(length) < p_pos
            picks = rng.integers(0, spec.vocab_size, size=length)
            neutral = rng.integers(0, len(vocab["neutral"]), size=length)
            tokens = [
                (vocab["pos"][picks[j]] if positive[j] else vocab["neg"][picks[j]])
                if topical[j] else vocab["neutral"][neutral[j]]
                for j in range(length)
            ]
        records.append(AdmissionRecord(
            admission_id=f"A{i:06d}", patient_id=f"P{patient_of[i]:06d}", label=int(labels[i]),
            split="train", ehr=seqs["ehr"], image=seqs["image"], note_tokens=tokens,
        ))
    return split_cohort(Cohort(records), spec.fractions, spec.seed)


def split_cohort(cohort: Cohort, fractions=(0.64, 0.16, 0.20), seed: int = 0) -> Cohort:
    """Assign train/val/test tags, stratified by label and grouped by patient.

    Patients are bucketed by (admissions, positives), shuffled within each
    bucket, then dealt one at a time to whichever split lags its target share
    the most. Every admission of a patient lands in the same split.
    """
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ContractError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    members: dict[str, list[int]] = {}
    for i, r in enumerate(cohort.records):
        members.setdefault(r.patient_id, []).append(i)
    labels = cohort.labels
    buckets: dict[tuple[int, int], list[str]] = {}
    for pid, idx in members.items():
        buckets.setdefault((int(labels[idx].sum()), len(idx)), []).append(pid)

    assigned = np.zeros(3)
    split_of = [""] * len(cohort)
    for key in sorted(buckets, reverse=True):
        pids = buckets[key]
        for j in rng.permutation(len(pids)):
            idx = members[pids[j]]
            deficit = fractions * (assigned.sum() + len(idx)) - assigned
            s = int(np.argmax(deficit))
            assigned[s] += len(idx)
            for i in idx:
                split_of[i] = SPLITS[s]

    out = Cohort([
        AdmissionRecord(r.admission_id, r.patient_id, r.label, split_of[i], r.ehr, r.image, r.note_tokens)
        for i, r in enumerate(cohort.records)
    ])
    for s, frac in zip(SPLITS, fractions):
        if frac == 0:
            continue
        y = out.labels[out.indices(s)]
        if len(set(y.tolist())) < 2:
            raise ContractError(f"split {s!r} lacks one of the classes")
    return out


def save_cohort(cohort: Cohort, path) -> None:
    with open(path, "w") as fh:
        for r in cohort.records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def load_cohort(path) -> Cohort:
    path = Path(path)
    records = []
    seen: set[str] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec = AdmissionRecord(
                    admission_id=str(d["admission_id"]), patient_id=str(d["patient_id"]),
                    label=d["label"], split=d["split"], ehr=d["ehr"], image=d["image"],
                    note_tokens=list(d["note_tokens"]),
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed admission record ({exc})") from exc
            if rec.admission_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate admission id {rec.admission_id!r}")
            seen.add(rec.admission_id)
            records.append(rec)
    return Cohort(records)


def spec_to_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
