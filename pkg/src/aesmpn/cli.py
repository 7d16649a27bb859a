"""Command-line entry point: ``aesmpn gen | train | eval | predict | gradcheck``.

Settings resolve in this order: explicit flags, then the JSON object given
with ``--config`` (keys are the long flag names with dashes or
underscores), then built-in defaults. Every command writes only inside its
``--out`` directory and leaves a ``manifest.json`` there.

Exit codes: 0 success, 1 usage or validation error, 2 runtime or numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .data import (
    DatasetError,
    GenerationError,
    GeneratorConfig,
    NormalizationSpec,
    load_dataset,
    normalize,
    save_dataset,
    split_dataset,
    generate_synthetic,
)
from .gradsuite import run_suite
from .model import AESMPN, MODEL_PRESETS, ModelConfig, SampleError, predict
from .nn import load_checkpoint, save_checkpoint
from .numerics import DimensionError, NumericError
from .train import (
    TrainConfig,
    TrainingError,
    evaluate,
    metrics_row,
    train,
    write_loss_csv,
    write_metrics_csv,
)

log = logging.getLogger("aesmpn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MODEL_CHOICES = tuple(MODEL_PRESETS) + ("all",)
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)

DEFAULTS = {
    "gen": {
        "samples": 100,
        "nodes_min": GeneratorConfig.nodes_min,
        "nodes_max": GeneratorConfig.nodes_max,
        "flows_min": GeneratorConfig.flows_min,
        "flows_max": GeneratorConfig.flows_max,
        "rho_max": GeneratorConfig.rho_max,
        "seed": 0,
    },
    "train": {
        "model": "ae-smpn2",
        "epochs": TrainConfig.epochs,
        "learning_rate": TrainConfig.learning_rate,
        "clip_norm": TrainConfig.clip_norm,
        "K": ModelConfig.K,
        "hidden": ModelConfig.hidden,
        "ae_pretrain": False,
        "ae_pretrain_steps": TrainConfig.ae_pretrain_steps,
        "seed": 0,
    },
    "eval": {"split": "test"},
    "predict": {},
    "gradcheck": {"eps": 1e-5, "seed": 0},
}


class UsageError(Exception):
    """Bad flags, config or inputs (exit 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS  # unset flags stay absent so config and defaults can fill them
    p = _Parser(prog="aesmpn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"aesmpn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--out", required=out_required, type=Path, help="output directory")
        sp.add_argument("--config", type=Path, help="JSON file of default settings for this command")

    g = sub.add_parser("gen", help="generate a synthetic M/M/1 dataset")
    common(g)
    g.add_argument("--samples", type=int, default=S)
    g.add_argument("--nodes-min", type=int, default=S)
    g.add_argument("--nodes-max", type=int, default=S)
    g.add_argument("--flows-min", type=int, default=S)
    g.add_argument("--flows-max", type=int, default=S)
    g.add_argument("--rho-max", type=float, default=S, help="upper bound on every link's utilisation")
    g.add_argument("--seed", type=int, default=S)

    t = sub.add_parser("train", help="train one model variant, or all of them")
    common(t)
    t.add_argument("--data", required=True, type=Path, help="dataset file (JSON lines)")
    t.add_argument("--model", choices=MODEL_CHOICES, default=S)
    t.add_argument("--epochs", type=int, default=S)
    t.add_argument("--lr", dest="learning_rate", type=float, default=S)
    t.add_argument("--clip-norm", type=float, default=S, help="global gradient norm bound, 0 disables")
    t.add_argument("--K", dest="K", type=int, default=S, help="message-passing rounds")
    t.add_argument("--hidden", type=int, default=S, help="state and embedding width")
    t.add_argument("--ae-pretrain", action="store_true", default=S)
    t.add_argument("--ae-pretrain-steps", type=int, default=S)
    t.add_argument("--seed", type=int, default=S)

    e = sub.add_parser("eval", help="metrics of a checkpoint on one split")
    common(e)
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default=S)

    r = sub.add_parser("predict", help="per-flow delay predictions in seconds")
    common(r)
    r.add_argument("--checkpoint", required=True, type=Path)
    r.add_argument("--data", required=True, type=Path)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op, layer and the model")
    common(c, out_required=False)
    c.add_argument("--eps", type=float, default=S)
    c.add_argument("--seed", type=int, default=S)
    return p


def resolve_settings(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags (later wins)."""
    settings = dict(DEFAULTS[args.command])
    if args.config is not None:
        try:
            doc = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        aliases = {"lr": "learning_rate"}
        for key, value in doc.items():
            key = aliases.get(key, key.replace("-", "_"))
            if key not in settings:
                raise UsageError(f"config key {key!r} does not apply to '{args.command}'")
            settings[key] = value
    for key in settings:
        if hasattr(args, key):
            settings[key] = getattr(args, key)
    return settings


# ---------------------------------------------------------------- manifest


def sha256_of(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class Manifest:
    """``manifest.json`` in the output directory, rewritten as the run progresses."""

    def __init__(self, out: Path, command: str, settings: dict, argv: list[str]):
        self.path = out / "manifest.json"
        self.out = out
        self.started = time.time()
        self.doc = {
            "command": command,
            "version": __version__,
            "argv": argv,
            "config": settings,
            "seed": settings.get("seed"),
            "datasets": {},
            "outputs": [],
            "timings": {"started": self.started},
            "status": "running",
        }
        self.write()

    def dataset(self, path: Path) -> None:
        self.doc["datasets"][str(path)] = sha256_of(path)

    def output(self, path: Path) -> Path:
        rel = str(Path(path).relative_to(self.out))
        if rel not in self.doc["outputs"]:
            self.doc["outputs"].append(rel)
        return path

    def timing(self, key: str, seconds: float) -> None:
        self.doc["timings"][key] = seconds

    def finish(self, status: str = "ok") -> None:
        self.doc["status"] = status
        self.doc["timings"]["finished"] = time.time()
        self.doc["timings"]["total_seconds"] = self.doc["timings"]["finished"] - self.started
        self.write()

    def write(self) -> None:
        _atomic_write_text(self.path, json.dumps(self.doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- helpers


def _load(path: Path) -> list:
    if not path.is_file():
        raise UsageError(f"dataset {path} not found")
    return load_dataset(path)


def _splits(samples: list, seed: int) -> dict[str, list]:
    train_s, val_s, test_s = split_dataset(samples, SPLIT_FRACTIONS, seed=seed)
    return {"train": train_s, "val": val_s, "test": test_s}


def _model_from_checkpoint(path: Path) -> tuple[AESMPN, dict, NormalizationSpec]:
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found")
    try:
        params, meta = load_checkpoint(path)
        cfg = ModelConfig(**meta["model_config"])
        norm = NormalizationSpec.from_dict(meta["normalization"])
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: unusable checkpoint ({exc})") from None
    model = AESMPN(cfg, seed=0)
    model.load_state_dict(params)
    return model, meta, norm


def _check_widths(model: AESMPN, samples: list) -> None:
    c = model.config
    for s in samples:
        for label, arr, width in (
            ("flow", s.flow_features, c.flow_dim),
            ("L2 link", s.l2_features, c.l2_dim),
            ("L3 link", s.l3_features, c.l3_dim),
        ):
            if arr.shape[1] != width:
                raise DimensionError(
                    f"sample {s.sample_id!r}: {label} features have width {arr.shape[1]}, checkpoint expects {width}"
                )


# ---------------------------------------------------------------- commands


def cmd_gen(settings: dict, out: Path, manifest: Manifest) -> int:
    try:
        cfg = GeneratorConfig(
            samples=settings["samples"],
            nodes_min=settings["nodes_min"],
            nodes_max=settings["nodes_max"],
            flows_min=settings["flows_min"],
            flows_max=settings["flows_max"],
            rho_max=settings["rho_max"],
            seed=settings["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    t0 = time.time()
    samples = generate_synthetic(cfg)
    if not samples:
        log.warning("warning: --samples 0 writes an empty dataset")
    path = manifest.output(out / "dataset.jsonl")
    save_dataset(samples, path)
    manifest.timing("generate_seconds", time.time() - t0)
    manifest.dataset(path)
    print(f"wrote {len(samples)} samples to {path}")
    return EXIT_OK


def cmd_train(settings: dict, out: Path, manifest: Manifest, data: Path) -> int:
    try:
        tcfg = TrainConfig(
            epochs=settings["epochs"],
            learning_rate=settings["learning_rate"],
            clip_norm=settings["clip_norm"],
            seed=settings["seed"],
            ae_pretrain=bool(settings["ae_pretrain"]),
            ae_pretrain_steps=settings["ae_pretrain_steps"],
        )
        names = list(MODEL_PRESETS) if settings["model"] == "all" else [settings["model"]]
        configs = {n: ModelConfig.preset(n, K=settings["K"], hidden=settings["hidden"], latent=settings["hidden"]) for n in names}
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from None

    samples = _load(data)
    manifest.dataset(data)
    if len(samples) < len(SPLIT_FRACTIONS):
        raise UsageError(f"{data}: {len(samples)} samples cannot fill train/val/test splits")
    raw = _splits(samples, tcfg.seed)
    norm = NormalizationSpec().with_delay_scale(raw["train"])
    split = {k: [normalize(s, norm) for s in v] for k, v in raw.items()}
    norm_path = manifest.output(out / "normalization.json")
    norm.save(norm_path)

    rows = []
    for name in names:
        t0 = time.time()
        model = AESMPN(configs[name], seed=tcfg.seed)
        result = train(
            model,
            split["train"],
            split["val"],
            tcfg,
            progress=lambda r, name=name: log.info("%s epoch %d train %.4f val %.4f", name, r.epoch, r.train_mape, r.val_mape),
        )
        manifest.timing(f"train_seconds[{name}]", time.time() - t0)
        meta = {
            "model": name,
            "model_config": vars(configs[name]),
            "train_config": vars(tcfg),
            "normalization": norm.to_dict(),
            "dataset_sha256": manifest.doc["datasets"][str(data)],
            "split": {
                "seed": tcfg.seed,
                "fractions": list(SPLIT_FRACTIONS),
                "ids": {k: [s.sample_id for s in v] for k, v in raw.items()},
            },
            "best_epoch": result.best_epoch,
        }
        model_dir = out / name
        model_dir.mkdir(exist_ok=True)
        write_loss_csv(manifest.output(model_dir / "loss.csv"), result.history)
        save_checkpoint(manifest.output(model_dir / "final.ckpt.json"), result.final_params, meta)
        save_checkpoint(manifest.output(model_dir / "best.ckpt.json"), result.best_params, meta)

        model.load_state_dict(result.best_params)
        reports = [evaluate(model, split[k], norm, k) for k in ("train", "val", "test")]
        rows.append(metrics_row(name, *reports))
        print(f"{name}: best epoch {result.best_epoch}, test MAPE {reports[2].mape_pct:.3f}%")
        manifest.write()
    write_metrics_csv(manifest.output(out / "metrics.csv"), rows)
    return EXIT_OK


def cmd_eval(settings: dict, out: Path, manifest: Manifest, checkpoint: Path, data: Path) -> int:
    model, meta, norm = _model_from_checkpoint(checkpoint)
    samples = _load(data)
    manifest.dataset(data)
    manifest.dataset(checkpoint)
    _check_widths(model, samples)
    split = settings["split"]
    if split != "all":
        ids = meta.get("split", {}).get("ids", {}).get(split)
        if ids is None:
            raise UsageError(f"{checkpoint} records no '{split}' split")
        by_id = {s.sample_id: s for s in samples}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise UsageError(f"{data} lacks {len(missing)} sample(s) of the '{split}' split, e.g. {missing[0]!r}")
        samples = [by_id[i] for i in ids]
    report = evaluate(model, [normalize(s, norm) for s in samples], norm, split)
    path = manifest.output(out / "metrics.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("model", "split", "mape", "mae", "mse", "msle"))
        w.writerow([meta.get("model", ""), split] + [repr(v) for v in (report.mape_pct, report.mae, report.mse, report.msle)])
    print(f"{meta.get('model', '')} {split}: MAPE {report.mape_pct:.6f}% MAE {report.mae:.6g} MSE {report.mse:.6g} MSLE {report.msle:.6g}")
    return EXIT_OK


def cmd_predict(settings: dict, out: Path, manifest: Manifest, checkpoint: Path, data: Path) -> int:
    model, meta, norm = _model_from_checkpoint(checkpoint)
    samples = _load(data)
    manifest.dataset(data)
    manifest.dataset(checkpoint)
    _check_widths(model, samples)
    rows = []
    for s in samples:  # compute everything before touching the output file
        delays = predict(model, normalize(s, norm)) * norm.delay_scale
        rows.extend((s.sample_id, k, repr(float(d))) for k, d in enumerate(delays))
    path = manifest.output(out / "predictions.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sample_id", "flow_id", "predicted_delay"))
        w.writerows(rows)
    print(f"wrote {len(rows)} predictions to {path}")
    return EXIT_OK


def cmd_gradcheck(settings: dict, out: Path | None, manifest: Manifest | None) -> int:
    if not settings["eps"] > 0:
        raise UsageError("--eps must be positive")
    results = run_suite(eps=settings["eps"], seed=settings["seed"])
    width = max(len(r.name) for r in results)
    for r in results:
        verdict = "ok" if r.passed else "FAIL"
        print(f"{r.group:<6} {r.name:<{width}}  max_rel_err={r.max_rel_error:.3e}  tol={r.tolerance:.0e}  {verdict}")
    failed = [r for r in results if not r.passed]
    if manifest is not None:
        path = manifest.output(out / "gradcheck.json")
        _atomic_write_text(path, json.dumps([vars(r) for r in results], indent=2) + "\n")
    print(f"{len(results) - len(failed)}/{len(results)} checks within tolerance")
    return EXIT_OK if not failed else EXIT_RUNTIME


# ---------------------------------------------------------------- main


def run(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    settings = resolve_settings(args)
    out = args.out
    manifest = None
    if out is not None:
        if out.exists() and not out.is_dir():
            raise UsageError(f"--out {out} exists and is not a directory")
        out.mkdir(parents=True, exist_ok=True)
        manifest = Manifest(out, args.command, settings, argv)
    try:
        if args.command == "gen":
            code = cmd_gen(settings, out, manifest)
        elif args.command == "train":
            code = cmd_train(settings, out, manifest, args.data)
        elif args.command == "eval":
            code = cmd_eval(settings, out, manifest, args.checkpoint, args.data)
        elif args.command == "predict":
            code = cmd_predict(settings, out, manifest, args.checkpoint, args.data)
        else:
            code = cmd_gradcheck(settings, out, manifest)
    except BaseException:
        if manifest is not None:
            manifest.finish("failed")
        raise
    if manifest is not None:
        manifest.finish("ok" if code == EXIT_OK else "failed")
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return run(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, SampleError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, TrainingError, GenerationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
