import numpy as np
import pytest

from must import cohort as C
from must.errors import ContractError, DataError, ParameterError
from must.metrics import auc


def small(**kw):
    base = dict(n_admissions=120, prevalence=0.3, seed=3)
    base.update(kw)
    return C.generate_synthetic_cohort(C.SyntheticSpec(**base))


def test_same_seed_gives_byte_identical_files(tmp_path):
    for name in ("a", "b"):
        C.save_cohort(small(), tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    C.save_cohort(small(seed=4), tmp_path / "c.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


def test_realized_prevalence_for_n2000():
    coh = C.generate_synthetic_cohort(C.SyntheticSpec(n_admissions=2000, seed=0))
    assert abs(coh.prevalence() - 0.17) <= 0.02


def test_split_sizes_and_prevalence():
    coh = C.generate_synthetic_cohort(C.SyntheticSpec(n_admissions=1000, seed=5))
    sizes = [len(coh.indices(s)) for s in C.SPLITS]
    # patients are indivisible (up to 3 admissions), so allow a few admissions of slack
    for got, want in zip(sizes, (640, 160, 200)):
        assert abs(got - want) <= 3
    g = coh.prevalence()
    for s in C.SPLITS:
        assert abs(coh.prevalence(s) - g) <= 0.03


def test_splits_disjoint_exhaustive_and_patient_grouped():
    coh = small(n_admissions=300)
    ids = [set(np.array([r.admission_id for r in coh.records])[coh.indices(s)]) for s in C.SPLITS]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert set().union(*ids) == {r.admission_id for r in coh.records}
    split_of_patient = {}
    for r in coh.records:
        assert split_of_patient.setdefault(r.patient_id, r.split) == r.split


def test_visit_bounds_and_missing_notes():
    coh = small(n_admissions=400, missing_note_prob=0.25)
    for r in coh.records:
        assert 1 <= len(r.ehr) <= 9 and 1 <= len(r.image) <= 9
        assert r.ehr.shape[1] == 16
    missing = np.mean([len(r.note_tokens) == 0 for r in coh.records])
    assert 0.15 <= missing <= 0.35


def test_planted_signal_is_visible_to_simple_oracles():
    coh = C.generate_synthetic_cohort(C.SyntheticSpec(n_admissions=1500, seed=2))
    y = coh.labels
    # note oracle: share of positive-vocabulary tokens among topical tokens
    share = []
    for r in coh.records:
        pos = sum(t.startswith("p") for t in r.note_tokens)
        neg = sum(t.startswith("q") for t in r.note_tokens)
        share.append(pos / (pos + neg) if pos + neg else 0.5)
    assert auc(share, y) > 0.6
    no_signal = C.generate_synthetic_cohort(C.SyntheticSpec(n_admissions=1500, s_n=0.0, seed=2))
    share0 = []
    for r in no_signal.records:
        pos = sum(t.startswith("p") for t in r.note_tokens)
        neg = sum(t.startswith("q") for t in r.note_tokens)
        share0.append(pos / (pos + neg) if pos + neg else 0.5)
    assert abs(auc(share0, no_signal.labels) - 0.5) < 0.06


def test_split_latent_partitions_coordinates():
    blocks = C.latent_blocks(C.SyntheticSpec(latent_dim=6))
    assert sorted(np.concatenate(list(blocks.values())).tolist()) == list(range(6))
    shared = C.latent_blocks(C.SyntheticSpec(latent_dim=6, split_latent=False))
    assert all(len(v) == 6 for v in shared.values())


@pytest.mark.parametrize("kw", [dict(prevalence=0.0), dict(prevalence=1.0), dict(n_admissions=10, prevalence=0.1),
                                dict(s_e=-1.0), dict(noise=-0.1)])
def test_invalid_specs(kw):
    with pytest.raises(ParameterError):
        C.generate_synthetic_cohort(C.SyntheticSpec(**kw))


def test_split_lacking_class_raises():
    recs = [C.AdmissionRecord(f"A{i}", f"P{i}", int(i == 0), "train", [[0.0]], [[0.0]], []) for i in range(10)]
    with pytest.raises(ContractError):
        C.split_cohort(C.Cohort(recs), (0.64, 0.16, 0.20))
    with pytest.raises(ContractError):
        C.split_cohort(C.Cohort(recs), (0.5, 0.5, 0.5))


def test_roundtrip(tmp_path):
    coh = small()
    C.save_cohort(coh, tmp_path / "c.jsonl")
    assert C.load_cohort(tmp_path / "c.jsonl") == coh


def test_truncated_file_reports_line(tmp_path):
    coh = small()
    path = tmp_path / "c.jsonl"
    C.save_cohort(coh, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:5] + [lines[5][: len(lines[5]) // 2]]) + "\n")
    with pytest.raises(DataError, match=r":6:"):
        C.load_cohort(path)


def test_empty_file_is_empty_cohort(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert len(C.load_cohort(tmp_path / "e.jsonl")) == 0


def test_duplicate_id_rejected(tmp_path):
    path = tmp_path / "c.jsonl"
    C.save_cohort(small(), path)
    first = path.read_text().splitlines()[0]
    path.write_text(path.read_text() + first + "\n")
    with pytest.raises(DataError, match="duplicate"):
        C.load_cohort(path)


def test_record_validation():
    with pytest.raises(DataError):
        C.AdmissionRecord("A", "P", 2, "train", [[0.0]], [[0.0]], [])
    with pytest.raises(DataError):
        C.AdmissionRecord("A", "P", 1, "holdout", [[0.0]], [[0.0]], [])
    with pytest.raises(DataError):
        C.AdmissionRecord("A", "P", 1, "train", [], [[0.0]], [])


@pytest.mark.slow
def test_test_auc_is_monotone_in_ehr_signal():
    from must import tensor as T
    from must.model import MustConfig, prepare_inputs
    from must.optim import TrainConfig, predict, train

    strengths = (0.0, 0.25, 2.0)
    holds = 0
    for seed in range(3):
        aucs = []
        for s in strengths:
            coh = C.generate_synthetic_cohort(C.SyntheticSpec(n_admissions=600, s_e=s, s_i=0.0, s_n=0.0,
                                                              split_latent=False, seed=seed))
            cfg = MustConfig(d=16, heads=2, seed=seed)
            inputs = prepare_inputs(coh, cfg)
            res = train(inputs, cfg, TrainConfig(epochs=60, patience=20, seed=seed))
            with T.precision("float32"):
                probs = predict(inputs, cfg, res.params)
            test = inputs.splits == "test"
            aucs.append(auc(probs[test], inputs.labels[test]))
        holds += sum(aucs[j] >= aucs[i] for i in range(3) for j in range(i + 1, 3))
    assert holds >= 7
