"""Command-line entry point: generate, train, evaluate, ablate, gradcheck, dump-config.

Configuration merges, lowest priority first: built-in defaults, a JSON file
given with ``--config``, ``--set section.key=value`` overrides, then the
dedicated flags (``--seed``, ``--lr``, ``--epochs``). The top-level ``seed``
is the single root of all randomness and is copied into the data, model and
train sections.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import model as M
from . import tensor as T
from .cohort import SyntheticSpec, generate_synthetic_cohort, load_cohort, save_cohort
from .errors import ContractError, DataError, DimensionError, NumericalError, ParameterError
from .gradsuite import run_suite
from .metrics import evaluate_scores
from .modality import FileEmbeddingProvider
from .optim import TrainConfig, predict, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, EXIT_GRADCHECK = 0, 1, 2, 3, 4
SECTIONS = ("data", "model", "train", "paths")
ABLATIONS = (("ehr only", ("ehr",)), ("image only", ("image",)), ("note only", ("note",)),
             ("full", ("ehr", "image", "note")))


class UsageError(Exception):
    pass


def default_config() -> dict:
    data = asdict(SyntheticSpec())
    model = M.config_to_dict(M.MustConfig())
    for section in (data, model):
        section.pop("seed")
    train_cfg = TrainConfig().to_dict()
    train_cfg.pop("seed")
    return {
        "seed": 0,
        "data": {k: list(v) if isinstance(v, tuple) else v for k, v in data.items()},
        "model": model,
        "train": train_cfg,
        "paths": {"cohort": None, "embeddings": None, "checkpoint": None, "report": None},
    }


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    value = _parse_value(raw)
    if parts == ["seed"]:
        cfg["seed"] = value
        return
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise UsageError(f"override key must be 'seed' or <section>.<name> with section in {SECTIONS}, got {key!r}")
    section, name = parts
    if name not in cfg[section]:
        raise UsageError(f"unknown setting {key!r}")
    cfg[section][name] = value


def merge_config(args) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        except ValueError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        for key, value in loaded.items():
            if key == "seed":
                cfg["seed"] = value
            elif key in SECTIONS and isinstance(value, dict):
                for name, v in value.items():
                    apply_override(cfg, f"{key}.{name}={json.dumps(v)}")
            else:
                raise UsageError(f"unknown config entry {key!r}")
    for assignment in getattr(args, "set", None) or []:
        apply_override(cfg, assignment)
    flags = {"seed": ("seed", None), "lr": ("train", "lr"), "epochs": ("train", "epochs"),
             "cohort": ("paths", "cohort"), "embeddings": ("paths", "embeddings"),
             "checkpoint": ("paths", "checkpoint")}
    for flag, (section, name) in flags.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if name is None:
            cfg[section] = value
        else:
            cfg[section][name] = value
    if not isinstance(cfg["seed"], int):
        raise UsageError(f"seed must be an integer, got {cfg['seed']!r}")
    return cfg


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg["data"].items()}
    return SyntheticSpec(**d, seed=cfg["seed"])


def model_config(cfg: dict, **overrides) -> M.MustConfig:
    d = dict(cfg["model"], seed=cfg["seed"])
    d.update(overrides)
    return M.MustConfig.from_dict(d)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(dict(cfg["train"], seed=cfg["seed"]))


def _provider(cfg: dict):
    path = cfg["paths"].get("embeddings")
    if not path:
        return None
    return FileEmbeddingProvider(path, dim=cfg["model"]["note_dim"])


def _cohort(cfg: dict):
    path = cfg["paths"].get("cohort")
    if path:
        if not Path(path).exists():
            raise DataError(f"cohort file {path} does not exist")
        return load_cohort(path)
    return generate_synthetic_cohort(synthetic_spec(cfg))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands -----------------------------------------------------------------


def cmd_generate(args, cfg) -> int:
    cohort = generate_synthetic_cohort(synthetic_spec(cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cohort(cohort, out)
    _write_json(out.with_name(out.name + ".config.json"), cfg)
    print(f"wrote {len(cohort)} admissions ({cohort.prevalence():.3f} positive) to {out}")
    return EXIT_OK


def _train_one(cohort, cfg, mcfg, out: Path, tag: str = ""):
    tcfg = train_config(cfg)
    inputs = M.prepare_inputs(cohort, mcfg, _provider(cfg))
    result = train(inputs, mcfg, tcfg)
    prefix = f"{tag}." if tag else ""
    digest = M.save_checkpoint(out / f"{prefix}checkpoint.json", mcfg, result.params,
                               {"best_epoch": result.best_epoch, "best_val_auc": result.best_val_auc,
                                "root_seed": cfg["seed"]})
    result.write_history(out / f"{prefix}history.jsonl")
    return inputs, result, digest


def cmd_train(args, cfg) -> int:
    out = _out_dir(args)
    _write_json(out / "config.json", cfg)
    cohort = _cohort(cfg)
    _, result, digest = _train_one(cohort, cfg, model_config(cfg), out)
    summary = {"best_epoch": result.best_epoch, "best_val_auc": result.best_val_auc,
               "epochs_run": len(result.history), "checkpoint_sha256": digest, "seconds": result.seconds}
    _write_json(out / "train_summary.json", summary)
    print(f"best val AUC {result.best_val_auc:.4f} at epoch {result.best_epoch}; checkpoint sha256 {digest}")
    return EXIT_OK


def _test_report(inputs, mcfg, params):
    dtype = next(iter(params.tensors.values())).data.dtype.name
    with T.precision(dtype):
        probs = predict(inputs, mcfg, params)
    test = inputs.splits == "test"
    if not test.any():
        raise ContractError("cohort has no test admissions")
    return evaluate_scores(probs[test], inputs.labels[test])


def cmd_evaluate(args, cfg) -> int:
    ckpt = cfg["paths"].get("checkpoint")
    if not ckpt:
        raise UsageError("evaluate needs --checkpoint")
    if not Path(ckpt).exists():
        raise DataError(f"checkpoint {ckpt} does not exist")
    mcfg, params, _ = M.load_checkpoint(ckpt)
    inputs = M.prepare_inputs(_cohort(cfg), mcfg, _provider(cfg))
    M.check_widths(inputs, params, mcfg)
    report = _test_report(inputs, mcfg, params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    _write_json(out.with_name(out.name + ".config.json"), cfg)
    print(f"test AUC {report.auc:.4f} [{report.ci_low:.4f}, {report.ci_high:.4f}]  ACC {report.acc:.4f}")
    return EXIT_OK


def format_table(rows: list[dict]) -> str:
    header = ("model", "AUC", "95% CI", "ACC", "best epoch")
    body = [(r["model"], f"{r['auc']:.4f}", f"[{r['ci'][0]:.4f}, {r['ci'][1]:.4f}]", f"{r['acc']:.4f}",
             str(r["best_epoch"])) for r in rows]
    widths = [max(len(x[i]) for x in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def run_ablation(cohort, cfg, out: Path) -> list[dict]:
    rows = []
    for name, mods in ABLATIONS:
        mcfg = model_config(cfg, modalities=list(mods))
        inputs, result, digest = _train_one(cohort, cfg, mcfg, out, tag=name.replace(" ", "_"))
        report = _test_report(inputs, mcfg, result.params)
        rows.append(dict(report.to_json(), model=name, modalities=list(mods), best_epoch=result.best_epoch,
                         best_val_auc=result.best_val_auc, checkpoint_sha256=digest))
    return rows


def cmd_ablate(args, cfg) -> int:
    out = _out_dir(args)
    _write_json(out / "config.json", cfg)
    rows = run_ablation(_cohort(cfg), cfg, out)
    table = format_table(rows)
    (out / "ablation.txt").write_text(table)
    _write_json(out / "ablation.json", {"root_seed": cfg["seed"], "rows": rows})
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    report = run_suite(seeds=range(args.seeds))
    for line in report.lines():
        print(line)
    print(f"{'PASS' if report.passed else 'FAIL'} in {report.seconds:.1f}s")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_dump_config(args, cfg) -> int:
    text = json.dumps(cfg, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# --- parser -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="must", description="Multimodal spatiotemporal graph-transformer for readmission prediction.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_dir=False, out=False):
        p.add_argument("--config", help="JSON config file with sections data/model/train/paths")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. model.d=32 (repeatable)")
        p.add_argument("--seed", type=int, help="root seed for every random draw")
        if out_dir:
            p.add_argument("--out-dir", required=True)
        if out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("generate", help="write a synthetic cohort as JSON lines")
    common(p, out=True)

    for name, helptext in (("train", "train one model"), ("ablate", "train ehr/image/note-only and full models")):
        p = sub.add_parser(name, help=helptext)
        common(p, out_dir=True)
        p.add_argument("--cohort", help="cohort JSONL (generated from the data section when omitted)")
        p.add_argument("--embeddings", help="JSONL of precomputed note chunk vectors")
        p.add_argument("--lr", type=float)
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("evaluate", help="score the test split with a checkpoint")
    common(p, out=True)
    p.add_argument("--checkpoint")
    p.add_argument("--cohort")
    p.add_argument("--embeddings")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    p.add_argument("--seeds", type=int, default=20)

    p = sub.add_parser("dump-config", help="print the effective configuration")
    common(p)
    p.add_argument("--out")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "dump-config": cmd_dump_config}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = merge_config(args)
        if args.command in ("generate", "train", "ablate"):
            synthetic_spec(cfg).validate()
            model_config(cfg)
            train_config(cfg)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ParameterError, TypeError) as exc:
        print(f"must: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError, ContractError, OSError) as exc:
        print(f"must: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"must: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
