"""Finite-difference verification of every differentiable operation.

Each case builds a random scalar objective from a seed. The suite runs all
cases over a range of seeds in 64-bit precision and reports the worst
relative error per case.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from . import transformer as TF
from .gradcheck import GradcheckResult, check_gradients
from .graph import SageParams, build_adjacency, sage_layer
from .modality import ModalityFeatures, project_notes
from .model import ModelInputs, MustConfig, build_graph, init_parameters, masked_max, must_forward
from .optim import bce_loss
from .tensor import Tensor

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict[str, Tensor]]]
TOLERANCE = 1e-4
STEP = 1e-5
E2E_COORDS = 4  # random entries probed per parameter tensor in the end-to-end case


def _w(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _probe(rng, shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _lengths_mask(rng, a, L):
    mask = np.zeros((a, L), dtype=bool)
    for i in range(a):
        mask[i, : int(rng.integers(1, L + 1))] = True
    return mask


def _objective(out: Tensor, probe: Tensor) -> Tensor:
    return T.sum(out * probe)


# --- elementary operations --------------------------------------------------


def case_matmul(rng):
    a, b, w = _w(rng, (3, 4)), _w(rng, (4, 2)), _probe(rng, (3, 2))
    return lambda: _objective(T.matmul(a, b), w), {"a": a, "b": b}


def case_batched_matmul(rng):
    a, b, w = _w(rng, (2, 3, 4)), _w(rng, (2, 4, 5)), _probe(rng, (2, 3, 5))
    return lambda: _objective(T.matmul(a, b), w), {"a": a, "b": b}


def case_shared_matmul(rng):
    a, b, w = _w(rng, (2, 3, 4)), _w(rng, (4, 5)), _probe(rng, (2, 3, 5))
    return lambda: _objective(T.matmul(a, b), w), {"a": a, "b": b}


def case_add_sub_mul(rng):
    a, b, c = _w(rng, (2, 3, 4)), _w(rng, (4,)), _w(rng, (3, 4))
    w = _probe(rng, (2, 3, 4))
    return lambda: _objective(T.mul(T.sub(T.add(a, b), c), a), w), {"a": a, "b": b, "c": c}


def case_scale(rng):
    a, w = _w(rng, (5,)), _probe(rng, (5,))
    return lambda: _objective(T.scale(a, -2.5) * a, w), {"a": a}


def case_concat_getitem(rng):
    a, b = _w(rng, (2, 3, 4)), _w(rng, (2, 1, 4))
    w = _probe(rng, (2, 3, 4))
    idx = np.array([0, 3, 3, 1])
    return (lambda: _objective(T.concat([a, b], axis=1)[:, 1:, :], w)
            + T.sum(T.getitem(T.reshape(a, (24,)), idx))), {"a": a, "b": b}


def case_reshape_transpose(rng):
    a, w = _w(rng, (2, 3, 4)), _probe(rng, (4, 6))
    return lambda: _objective(T.reshape(T.transpose(a, (2, 0, 1)), (4, 6)), w), {"a": a}


def case_reductions(rng):
    a = _w(rng, (3, 5))
    w1, w2 = _probe(rng, (3,)), _probe(rng, (5,))
    return lambda: _objective(T.max(a, axis=1), w1) + _objective(T.mean(a, axis=0), w2) + T.sum(a), {"a": a}


def case_relu_softplus(rng):
    a = Tensor(rng.normal(size=(4, 4)) * 3.0, requires_grad=True)
    w = _probe(rng, (4, 4))
    return lambda: _objective(T.relu(a) + T.softplus(a), w), {"a": a}


def case_softmax(rng):
    a, w = _w(rng, (3, 5)), _probe(rng, (3, 5))
    return lambda: _objective(T.softmax(a, axis=-1), w), {"a": a}


def case_masked_softmax(rng):
    a, w = _w(rng, (3, 5)), _probe(rng, (3, 5))
    bias = np.where(_lengths_mask(rng, 3, 5), 0.0, -np.inf)
    return lambda: _objective(T.softmax(T.add_constant(a, bias), axis=-1), w), {"a": a}


def case_standardize(rng):
    a, w = _w(rng, (3, 6)), _probe(rng, (3, 6))
    return lambda: _objective(T.standardize(a), w), {"a": a}


def case_dropout(rng):
    a, w = _w(rng, (4, 6)), _probe(rng, (4, 6))
    seed = int(rng.integers(1 << 31))
    # a fresh generator per call keeps the mask fixed across perturbations
    return lambda: _objective(T.dropout(a, 0.3, np.random.default_rng(seed), True), w), {"a": a}


def case_apply_mask(rng):
    a, w = _w(rng, (3, 4, 2)), _probe(rng, (3, 4, 2))
    mask = _lengths_mask(rng, 3, 4)[:, :, None]
    return lambda: _objective(T.apply_mask(a, mask), w), {"a": a}


# --- network blocks -----------------------------------------------------------


def _layer_params(rng, d, heads, d_ff):
    p = TF.init_layer_params(d, heads, d_ff, rng)
    for t in p.tensors().values():
        t.data = t.data + 0.3 * rng.normal(size=t.shape)
    return p


def case_layer_norm(rng):
    x, g, b = _w(rng, (2, 3, 6)), _w(rng, (6,)), _w(rng, (6,))
    w = _probe(rng, (2, 3, 6))
    return lambda: _objective(TF.layer_norm(x, g, b), w), {"x": x, "gamma": g, "beta": b}


def case_attention(rng):
    p = _layer_params(rng, 4, 2, 8)
    x, w = _w(rng, (3, 4, 4)), _probe(rng, (3, 4, 4))
    mask = _lengths_mask(rng, 3, 4)
    targets = {k: p.tensors()[k] for k in ("W_Q", "W_K", "W_V", "W_o")}
    return lambda: _objective(TF.multi_head_attention(TF.SequenceBatch(x, mask), p), w), dict(targets, x=x)


def case_transformer_layer(rng):
    p = _layer_params(rng, 4, 2, 6)
    x, w = _w(rng, (2, 3, 4)), _probe(rng, (2, 3, 4))
    mask = _lengths_mask(rng, 2, 3)
    seed = int(rng.integers(1 << 31))

    def fn():
        z = TF.SequenceBatch(x, mask)
        return _objective(TF.transformer_layer(z, p, 0.2, True, np.random.default_rng(seed)).values, w)

    return fn, dict(p.tensors(), x=x)


def case_cls_positions(rng):
    x, cls = _w(rng, (2, 3, 4)), _w(rng, (4,))
    mask = _lengths_mask(rng, 2, 3)
    w1, w2 = _probe(rng, (2, 4)), _probe(rng, (2, 3, 4))

    def fn():
        z = TF.prepend_cls(TF.add_positional_encoding(TF.SequenceBatch(x, mask)), cls)
        return _objective(TF.extract_cls(z), w1) + _objective(TF.strip_cls(z).values, w2)

    return fn, {"x": x, "cls": cls}


def case_sage(rng):
    p = SageParams(_w(rng, (3, 3)), _w(rng, (3, 3)), _w(rng, (3,)))
    V, w = _w(rng, (5, 2, 3)), _probe(rng, (5, 2, 3))
    A = build_adjacency(rng.normal(size=(5, 2)), sigma=1.0, delta=0.2, metric="euclidean")
    mask = _lengths_mask(rng, 5, 2)
    targets = {"W_self": p.W_self, "W_neigh": p.W_neigh, "bias": p.bias, "V": V}
    return lambda: _objective(sage_layer(V, A, p, mask=mask), w), targets


def case_masked_max(rng):
    x, w = _w(rng, (3, 5, 4)), _probe(rng, (3, 4))
    mask = _lengths_mask(rng, 3, 5)
    return lambda: _objective(masked_max(TF.SequenceBatch(x, mask)), w), {"x": x}


def case_project_notes(rng):
    raw = ModalityFeatures("note", rng.normal(size=(2, 4, 5)), _lengths_mask(rng, 2, 4), [0, 1])
    raw.values[~raw.mask] = 0.0
    W, w = _w(rng, (5, 3)), _probe(rng, (2, 4, 3))
    return lambda: _objective(project_notes(raw, W), w), {"W_d": W}


def case_bce(rng):
    z = Tensor(rng.normal(size=8) * 4.0, requires_grad=True)
    y = rng.integers(0, 2, size=8)
    keep = np.array([True, True, False, True, True, True, False, True])
    return lambda: bce_loss(z, y, keep, pos_weight=2.5), {"logits": z}


# --- end to end ---------------------------------------------------------------


def toy_inputs(rng, a: int = 4, L: int = 9, d_raw: int = 3, note_dim: int = 5, cfg: MustConfig | None = None):
    """A tiny random admission set with padding in every modality."""
    feats = {}
    ids = [f"T{i}" for i in range(a)]
    for m in ("ehr", "image"):
        mask = _lengths_mask(rng, a, L)
        feats[m] = ModalityFeatures(m, rng.normal(size=(a, L, d_raw)) * mask[:, :, None], mask, ids, ids)
    nmask = _lengths_mask(rng, a, 25)
    notes = ModalityFeatures("note", rng.normal(size=(a, 25, note_dim)) * nmask[:, :, None], nmask, ids)
    labels = np.array([i % 2 for i in range(a)])
    inputs = ModelInputs(feats["ehr"], feats["image"], notes, labels, np.array(["train"] * a), ids)
    cfg = cfg or toy_config()
    for m in ("ehr", "image"):
        inputs.graphs[m] = build_graph(feats[m], cfg)
    return inputs


def toy_config(**overrides) -> MustConfig:
    base = dict(d=8, heads=2, temporal_layers=1, fusion_layers=1, dropout=0.1, delta=0.3, note_dim=5)
    base.update(overrides)
    return MustConfig(**base)


def case_end_to_end(rng):
    cfg = toy_config(seed=int(rng.integers(1 << 31)))
    inputs = toy_inputs(rng, cfg=cfg)
    params = init_parameters(cfg, inputs.raw_dims())
    for t in params.tensors.values():
        t.data = t.data + 0.2 * rng.normal(size=t.shape)
    seed = int(rng.integers(1 << 31))

    def fn():
        logits = must_forward(inputs, cfg, params, training=True, rng=np.random.default_rng(seed))
        return bce_loss(logits, inputs.labels)

    return fn, dict(params.tensors)


CASES: dict[str, Case] = {
    "matmul": case_matmul,
    "batched_matmul": case_batched_matmul,
    "shared_matmul": case_shared_matmul,
    "add_sub_mul": case_add_sub_mul,
    "scale": case_scale,
    "concat_getitem": case_concat_getitem,
    "reshape_transpose": case_reshape_transpose,
    "reductions": case_reductions,
    "relu_softplus": case_relu_softplus,
    "softmax": case_softmax,
    "masked_softmax": case_masked_softmax,
    "standardize": case_standardize,
    "dropout": case_dropout,
    "apply_mask": case_apply_mask,
    "layer_norm": case_layer_norm,
    "attention": case_attention,
    "transformer_layer": case_transformer_layer,
    "cls_positions": case_cls_positions,
    "sage_layer": case_sage,
    "masked_max": case_masked_max,
    "project_notes": case_project_notes,
    "bce_loss": case_bce,
    "end_to_end": case_end_to_end,
}


@dataclass
class SuiteReport:
    results: dict[str, list[GradcheckResult]]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for rs in self.results.values() for r in rs)

    def worst(self) -> dict[str, float]:
        return {name: max(r.max_error for r in rs) for name, rs in self.results.items()}

    def lines(self) -> list[str]:
        out = []
        for name, rs in self.results.items():
            bad = [i for i, r in enumerate(rs) if not r.passed]
            status = "ok" if not bad else f"FAIL seeds {bad}"
            out.append(f"{name:<20} max_rel_err={max(r.max_error for r in rs):.2e}  {status}")
        return out


def run_suite(seeds=range(20), names=None, tol: float = TOLERANCE, h: float = STEP) -> SuiteReport:
    """Run the selected cases (all by default) over ``seeds`` in 64-bit mode."""
    names = list(CASES) if names is None else list(names)
    unknown = set(names) - set(CASES)
    if unknown:
        raise KeyError(f"unknown gradient cases {sorted(unknown)}")
    start = time.perf_counter()
    results: dict[str, list[GradcheckResult]] = {}
    with T.precision("float64"):
        for name in names:
            results[name] = []
            for seed in seeds:
                rng = np.random.default_rng(seed)
                fn, targets = CASES[name](rng)
                coords = E2E_COORDS if name == "end_to_end" else None
                results[name].append(check_gradients(fn, targets, name=name, h=h, tol=tol,
                                                      max_coords=coords, rng=rng))
    return SuiteReport(results, time.perf_counter() - start)
