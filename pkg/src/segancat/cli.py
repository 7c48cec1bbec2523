"""Command-line entry point: ``segancat <command> --config PATH [--seed N] [--out DIR]``.

Commands: synth, split, train, eval, crosseval, transfer, gradcheck. Every
command writes ``config.json`` into the output directory, puts its artifacts
under ``checkpoints/``, ``reports/`` (and ``history.csv`` for training) and
prints a one-line summary. Errors exit non-zero with the offending key or path.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from threadpoolctl import threadpool_limits

from .data import MODALITIES, SliceDataset, load_manifest, load_split, save_manifest, stratified_split
from .errors import ConfigError, DataError, NumericError, ShapeError
from .gradsuite import run_gradient_suite
from .metrics import EvalSet, cross_modality_matrix, evaluate
from .models import ArchConfig, ModelPair
from .phantom import generate_phantom_dataset
from .train import TrainConfig, fit, load_pair
from .transfer import fine_tune

TOP_KEYS = {"seed", "output_dir", "modality", "combine_mode", "loss", "arch", "train", "data",
            "phantom", "eval", "crosseval", "transfer", "gradcheck"}


@dataclass
class ExperimentConfig:
    """One JSON document describing a run; relative paths resolve against the config's folder."""

    arch: ArchConfig
    train: TrainConfig
    modality: str = "ALL"
    seed: int = 0
    output_dir: Path | None = None
    data: dict = field(default_factory=dict)
    phantom: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    crosseval: dict = field(default_factory=dict)
    transfer: dict = field(default_factory=dict)
    gradcheck: dict = field(default_factory=dict)
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict)

    @property
    def modalities(self) -> list:
        return list(MODALITIES) if self.modality == "ALL" else [self.modality]

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".", seed: int | None = None) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        extra = set(doc) - TOP_KEYS
        if extra:
            raise ConfigError("unknown key", sorted(extra)[0])
        seed = int(doc.get("seed", 0)) if seed is None else int(seed)
        modality = doc.get("modality", "ALL")
        if modality != "ALL" and modality not in MODALITIES:
            raise ConfigError(f"must be ALL or one of {list(MODALITIES)}", "modality")
        m = 4 if modality == "ALL" else 1
        arch_doc = dict(_section(doc, "arch"))
        if "in_channels" in arch_doc and arch_doc["in_channels"] != m:
            raise ConfigError(f"modality {modality} implies {m} input channels", "arch.in_channels")
        combine = doc.get("combine_mode", arch_doc.get("combine_mode", "concat"))
        if arch_doc.get("combine_mode", combine) != combine:
            raise ConfigError("disagrees with top-level combine_mode", "arch.combine_mode")
        arch_doc.update(in_channels=m, combine_mode=combine)
        try:
            arch = ArchConfig.from_dict(arch_doc)
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], f"arch.{exc.key}") from exc
        except TypeError as exc:
            raise ConfigError(str(exc), "arch") from exc
        loss = _section(doc, "loss")
        if set(loss) - {"dice"}:
            raise ConfigError("unknown loss flag", f"loss.{sorted(set(loss) - {'dice'})[0]}")
        train_doc = dict(_section(doc, "train"))
        for k in ("seed", "use_dice"):
            if k in train_doc:
                raise ConfigError("set at the top level (seed) or under loss (dice)", f"train.{k}")
        train_doc.update(seed=seed, use_dice=bool(loss.get("dice", True)))
        train_doc.setdefault("crop", arch.input_size)
        try:
            train = TrainConfig.from_dict(train_doc)
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], f"train.{exc.key}") from exc
        except TypeError as exc:
            raise ConfigError(str(exc), "train") from exc
        out = doc.get("output_dir")
        base = Path(base_dir)
        return cls(arch=arch, train=train, modality=modality, seed=seed,
                   output_dir=None if out is None else (Path(out) if Path(out).is_absolute() else base / out),
                   data=dict(_section(doc, "data")), phantom=dict(_section(doc, "phantom")),
                   eval=dict(_section(doc, "eval")), crosseval=dict(_section(doc, "crosseval")),
                   transfer=dict(_section(doc, "transfer")), gradcheck=dict(_section(doc, "gradcheck")),
                   base_dir=base, raw=doc)


def _section(doc, key) -> dict:
    v = doc.get(key, {})
    if not isinstance(v, dict):
        raise ConfigError("must be an object", key)
    return v


def _require(section: dict, key: str, prefix: str):
    if key not in section:
        raise ConfigError("missing required key", f"{prefix}.{key}")
    return section[key]


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except ValueError as exc:
        raise ConfigError(f"invalid JSON ({exc})", "<document>") from exc
    return ExperimentConfig.from_dict(doc, path.parent, seed)


def _prepare_out(args, cfg: ExperimentConfig, config_path: Path) -> Path:
    out = Path(args.out) if args.out else cfg.output_dir
    if out is None:
        raise ConfigError("no output directory (use --out or output_dir)", "output_dir")
    out.mkdir(parents=True, exist_ok=True)
    if args.seed is None:
        (out / "config.json").write_bytes(config_path.read_bytes())
    else:
        doc = dict(cfg.raw, seed=cfg.seed)
        (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


def _split_manifest(cfg: ExperimentConfig):
    m = load_manifest(cfg.path(_require(cfg.data, "manifest", "data")))
    if not m.splits:
        m = stratified_split(m, float(cfg.data.get("split_frac", 0.8)), cfg.seed,
                             tuple(cfg.data.get("strata", ("grade",))))
    return m


def _volume_crop(cfg):
    c = cfg.data.get("volume_crop")
    return None if c is None else tuple(int(v) for v in c)


# commands -------------------------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, out: Path) -> str:
    n = int(cfg.phantom.get("n_subjects", 40))
    size = tuple(int(v) for v in cfg.phantom.get("size", (96, 96, 32)))
    m = generate_phantom_dataset(out / "data", n, size, cfg.seed)
    return f"synth: {len(m.records)} subjects {size} -> {out / 'data' / 'manifest.json'}"


def cmd_split(cfg: ExperimentConfig, out: Path) -> str:
    m = load_manifest(cfg.path(_require(cfg.data, "manifest", "data")))
    m = stratified_split(m, float(cfg.data.get("split_frac", 0.8)), cfg.seed,
                         tuple(cfg.data.get("strata", ("grade",))))
    save_manifest(m, out / "manifest.json")
    return f"split: {len(m.subjects('train'))} train / {len(m.subjects('val'))} val -> {out / 'manifest.json'}"


def cmd_train(cfg: ExperimentConfig, out: Path) -> str:
    m = _split_manifest(cfg)
    crop = _volume_crop(cfg)
    train = SliceDataset(load_split(m, "train", cfg.modalities, crop), cfg.modalities)
    val = EvalSet.from_records(load_split(m, "val", cfg.modalities, crop), cfg.arch.input_size, cfg.modalities)
    pair = ModelPair(cfg.arch, seed=cfg.seed)
    res = fit(pair, train, val, cfg.train, out_dir=out, resume=bool(cfg.data.get("resume", False)))
    report = evaluate(pair, val, provenance={"checkpoint": "checkpoints/best.ckpt", "epoch": res.best_epoch,
                                             "seed": cfg.seed, "dataset": str(m.root)})
    report.save(out / "reports", "metrics")
    return f"train: best val dice {res.best_dice:.4f} at epoch {res.best_epoch} ({res.epochs_run} epochs run)"


def cmd_eval(cfg: ExperimentConfig, out: Path) -> str:
    ck_path = cfg.path(cfg.eval.get("checkpoint", out / "checkpoints" / "best.ckpt"))
    pair, ck = load_pair(ck_path)
    m = _split_manifest(cfg)
    split = cfg.eval.get("split", "val")
    val = EvalSet.from_records(load_split(m, split, cfg.modalities, _volume_crop(cfg)), pair.arch.input_size,
                               cfg.modalities)
    report = evaluate(pair, val, float(cfg.eval.get("threshold", 0.5)),
                      provenance={"checkpoint": str(ck_path), "epoch": ck.epoch, "seed": ck.seed,
                                  "dataset": str(m.root), "split": split})
    report.save(out / "reports", "metrics")
    return f"eval: mean dice {report.mean_dice:.4f} over {len(report.rows)} volumes"


def cmd_crosseval(cfg: ExperimentConfig, out: Path) -> str:
    paths = _require(cfg.crosseval, "checkpoints", "crosseval")
    models = {}
    for mod, p in paths.items():
        if mod not in MODALITIES:
            raise ConfigError("unknown modality", f"crosseval.checkpoints.{mod}")
        models[mod], _ = load_pair(cfg.path(p))
    m = _split_manifest(cfg)
    size = next(iter(models.values())).arch.input_size
    data = EvalSet.from_records(load_split(m, "val", MODALITIES, _volume_crop(cfg)), size, MODALITIES)
    grid = cross_modality_matrix(models, data)
    grid.save(out / "reports")
    dom = sum(grid.diagonal_dominant_rows())
    return f"crosseval: {len(grid.rows)}x{len(grid.cols)} grid, {dom} rows peak on their own modality"


def cmd_transfer(cfg: ExperimentConfig, out: Path) -> str:
    if cfg.modality == "ALL":
        raise ConfigError("transfer needs a single target modality", "modality")
    src = cfg.path(_require(cfg.transfer, "source_checkpoint", "transfer"))
    regime = cfg.transfer.get("regime", "SDin")
    m = _split_manifest(cfg)
    crop = _volume_crop(cfg)
    train = SliceDataset(load_split(m, "train", cfg.modalities, crop), cfg.modalities)
    val = EvalSet.from_records(load_split(m, "val", cfg.modalities, crop), cfg.arch.input_size, cfg.modalities)
    try:
        res = fine_tune(src, train, val, regime, cfg.train, source_modality=cfg.transfer.get("source_modality"),
                        out_dir=out, scratch_dice=cfg.transfer.get("scratch_dice"),
                        reset_optimizer=bool(cfg.transfer.get("reset_optimizer", True)))
    except ValueError as exc:
        if "regime" in str(exc):
            raise ConfigError(str(exc), "transfer.regime") from exc
        raise
    return f"transfer: {regime} best val dice {res.fit.best_dice:.4f} after {res.fit.epochs_run} epochs"


def cmd_gradcheck(cfg: ExperimentConfig, out: Path) -> tuple:
    cases = run_gradient_suite(range(int(cfg.gradcheck.get("seeds", 20))))
    failed = [c for c in cases if not c.passed]
    (out / "reports").mkdir(parents=True, exist_ok=True)
    doc = [{"op": c.name, "dtype": c.dtype, "seed": c.seed, "max_error": c.max_error, "tol": c.tol,
            "passed": c.passed} for c in cases]
    (out / "reports" / "gradcheck.json").write_text(json.dumps(doc, indent=1) + "\n")
    worst = max(cases, key=lambda c: c.max_error / c.tol)
    msg = (f"gradcheck: {len(cases) - len(failed)}/{len(cases)} passed "
           f"(worst {worst.name}/{worst.dtype} {worst.max_error:.2e} vs {worst.tol:.0e})")
    return msg, 0 if not failed else 1


COMMANDS = {
    "synth": cmd_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
    "crosseval": cmd_crosseval, "transfer": cmd_transfer, "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segancat", description="Adversarial tumour segmentation on phantoms.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="experiment JSON document")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    return p


def _thread_limit() -> int | None:
    n = os.environ.get("SEGAN_THREADS")
    if not n:
        return None
    try:
        n = int(n)
    except ValueError:
        raise ConfigError(f"not an integer: {n!r}", "SEGAN_THREADS") from None
    if n < 1:
        raise ConfigError("must be >= 1", "SEGAN_THREADS")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with contextlib.ExitStack() as stack:
            n = _thread_limit()
            if n is not None:
                stack.enter_context(threadpool_limits(limits=n))
            cfg = load_config(args.config, args.seed)
            out = _prepare_out(args, cfg, Path(args.config))
            res = COMMANDS[args.command](cfg, out)
    except (ConfigError, DataError, ShapeError, NumericError, FileNotFoundError) as exc:
        print(f"segancat {args.command}: error: {exc}", file=sys.stderr)
        return 2
    msg, code = res if isinstance(res, tuple) else (res, 0)
    print(msg)
    return code


if __name__ == "__main__":
    sys.exit(main())
