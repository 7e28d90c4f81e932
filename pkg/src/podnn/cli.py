"""Command-line entry point: ``podnn train | experiment | invert``.

Exit codes: 0 success (including runs that did not converge), 1 user error
(bad config, missing files, checkpoint mismatch), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .data import MechanismSpec, build_dataset, load_idx, synthetic_images
from .evaluation import KINDS, ExperimentConfig, LabelProbe, default_mechanisms, run_experiment
from .images import image_grid, write_pgm
from .metrics import MetricsWriter
from .networks import DiscriminatorNet, PODNNEnsemble, load_checkpoint, save_checkpoint
from .trainer import ConvergenceResult, TrainConfig, Trainer

logger = logging.getLogger("podnn")

DATA_ROOT_ENV = "PODNN_DATA_ROOT"


class UserError(Exception):
    """Problems the user can fix: bad config, missing files, incompatible checkpoints."""


@dataclass
class DatasetConfig:
    source: str = "synthetic"  # or "idx"
    path: Optional[str] = None
    n_images: int = 2000
    image_size: int = 16
    limit: Optional[int] = None
    proportions: Optional[list] = None

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise UserError(f"dataset.source: expected 'synthetic' or 'idx', got {self.source!r}")
        if self.source == "idx" and not self.path:
            raise UserError("dataset.path: required when dataset.source is 'idx'")


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    mechanisms: list = field(default_factory=lambda: [m.to_dict() for m in default_mechanisms()])
    trainer: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)
    output_dir: str = "runs/default"
    seed: int = 0
    samples_every: int = 50

    def train_config(self) -> TrainConfig:
        return _guard("trainer", lambda: TrainConfig.from_dict(
            {**self.trainer, "mechanisms": self.mechanisms, "seed": self.seed}))

    def experiment_config(self) -> ExperimentConfig:
        return _guard("experiment", lambda: ExperimentConfig.from_dict(
            {**self.experiment, "trainer": {**self.experiment.get("trainer", {}), **self.trainer},
             "mechanisms": self.mechanisms, "n_images": self.dataset.n_images,
             "image_size": self.dataset.image_size}))

    def to_dict(self) -> dict:
        return asdict(self)


def _guard(section: str, build):
    try:
        return build()
    except (TypeError, ValueError) as exc:
        raise UserError(f"{section}: {exc}") from exc


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise UserError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise UserError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(known)}")
    return d


def parse_run_config(doc: dict) -> RunConfig:
    _strict(RunConfig, doc, "config")
    doc = dict(doc)
    ds = _strict(DatasetConfig, doc.pop("dataset", {}), "dataset")
    try:
        cfg = RunConfig(dataset=DatasetConfig(**ds), **doc)
        for i, m in enumerate(cfg.mechanisms):
            _guard(f"mechanisms[{i}]", lambda: MechanismSpec.from_dict(m))
    except TypeError as exc:
        raise UserError(f"config: {exc}") from exc
    cfg.train_config()  # surfaces trainer key errors before any work starts
    return cfg


def load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UserError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UserError(f"{p}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


_TRAINER_KEYS = {f.name for f in fields(TrainConfig)} - {"mechanisms", "seed"}
_EXPERIMENT_KEYS = {f.name for f in fields(ExperimentConfig)} - {"trainer", "mechanisms", "n_images", "image_size"}


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key=value`` strings. Bare trainer/experiment field names are routed
    to their section; dotted keys (``dataset.n_images``) address nested fields."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise UserError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        value = _parse_value(raw)
        if "." in key:
            path = key.split(".")
        elif key in {f.name for f in fields(RunConfig)}:
            path = [key]
        elif key in _TRAINER_KEYS:
            path = ["trainer", key]
        elif key in _EXPERIMENT_KEYS:
            path = ["experiment", key]
        else:
            raise UserError(f"--set: unknown key {key!r}")
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UserError(f"--set: {key!r} does not address an object field")
        node[path[-1]] = value
    return doc


def resolve_data_path(path: str) -> Path:
    p = Path(path)
    if not p.is_absolute() and os.environ.get(DATA_ROOT_ENV):
        p = Path(os.environ[DATA_ROOT_ENV]) / p
    if not p.exists():
        raise UserError(f"dataset file not found: {p}")
    return p


def load_base_images(ds: DatasetConfig, seed: int) -> np.ndarray:
    if ds.source == "synthetic":
        return synthetic_images(ds.n_images, ds.image_size, seed=seed)
    try:
        images = load_idx(resolve_data_path(ds.path))
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    return images[: ds.limit] if ds.limit else images


# -------------------------------------------------------------------- train


def _sample_grid(trainer: Trainer, x_q: np.ndarray, n: int = 8) -> np.ndarray:
    x = x_q[:n]
    outs, _, _ = trainer.ensemble.forward(Tensor(x), training=False)
    return image_grid([x.astype(np.float64)] + [o.data.astype(np.float64) for o in outs])


def _checkpoint(trainer: Trainer, path: Path, cfg: RunConfig, tag: str) -> None:
    nets = {f"expert{i}": e for i, e in enumerate(trainer.ensemble.experts)}
    nets["discriminator"] = trainer.discriminator
    meta = {"tag": tag, "iteration": trainer.iteration, "n_experts": trainer.config.n_experts,
            "orthogonalization": trainer.config.orthogonalization, "image_hw": list(trainer.pair.image_hw),
            "config": cfg.to_dict()}
    save_checkpoint(path, nets, meta)


def cmd_train(cfg: RunConfig) -> int:
    tcfg = cfg.train_config()
    base = load_base_images(cfg.dataset, cfg.seed)
    pair = _guard("dataset", lambda: build_dataset(base, tcfg.mechanisms, cfg.dataset.proportions, seed=cfg.seed))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    trainer = Trainer(tcfg, pair, probe=LabelProbe(pair))
    with MetricsWriter(out / "metrics.csv", tcfg.n_experts, pair.n_mechanisms) as writer:
        def on_record(rec):
            writer.write(rec)
            if cfg.samples_every > 0 and rec.iteration % cfg.samples_every == 0:
                _, x_q, _ = trainer._batch(rec.iteration)
                write_pgm(out / "samples" / f"iter{rec.iteration:05d}.pgm", _sample_grid(trainer, x_q))

        result = _train_with_checkpoints(trainer, on_record, out, cfg)

    with open(out / "timing.csv", "w") as fh:
        fh.write("iteration,phase,seconds\n")
        for it, phase, secs in trainer.timings:
            fh.write(f"{it},{phase},{secs!r}\n")
    summary = {"converged": result.converged,
               "status": "converged" if result.converged else "not converged",
               "convergence_iteration": result.iteration, "mapping": result.mapping,
               "iterations": trainer.iteration, "degenerate_fallbacks": trainer.total_fallbacks}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _train_with_checkpoints(trainer: Trainer, on_record, out: Path, cfg: RunConfig) -> ConvergenceResult:
    """Trainer.run with a checkpoint at convergence and at the end."""
    result = trainer.run(on_record, on_converged=lambda t: _checkpoint(
        t, out / "checkpoints" / "converged.zip", cfg, "converged"))
    _checkpoint(trainer, out / "checkpoints" / "final.zip", cfg, "final")
    return result


# --------------------------------------------------------------- experiment


def cmd_experiment(kind: str, cfg: RunConfig) -> int:
    if kind not in KINDS:
        raise UserError(f"unknown experiment kind {kind!r}; expected one of {', '.join(KINDS)}")
    ecfg = cfg.experiment_config()
    base = load_base_images(cfg.dataset, cfg.seed) if cfg.dataset.source == "idx" else None
    doc = run_experiment(kind, ecfg, cfg.output_dir, base=base)
    print(json.dumps(doc["result"], sort_keys=True, default=str))
    return 0


# ------------------------------------------------------------------- invert


def load_networks(checkpoint: Path):
    if not checkpoint.exists():
        raise UserError(f"checkpoint not found: {checkpoint}")
    try:
        nets, meta = load_checkpoint(checkpoint)
    except (KeyError, ValueError, OSError) as exc:
        raise UserError(f"{checkpoint}: {exc}") from exc
    try:
        n = int(meta["n_experts"])
        ens = PODNNEnsemble.build(n, np.random.default_rng(0), bool(meta["orthogonalization"]), dtype=np.float32)
        disc = DiscriminatorNet(np.random.default_rng(0), tuple(meta["image_hw"]), dtype=np.float32)
        for i, e in enumerate(ens.experts):
            e.load_state_dict(nets[f"expert{i}"])
        disc.load_state_dict(nets["discriminator"])
    except (KeyError, ValueError) as exc:
        raise UserError(f"{checkpoint}: checkpoint does not match the network architecture ({exc})") from exc
    return ens, disc, meta


def best_expert_outputs(ens: PODNNEnsemble, disc: DiscriminatorNet, images: np.ndarray):
    """Per image: the output of the expert the frozen discriminator scores highest."""
    x = Tensor(images.astype(np.float32))
    outs, _, _ = ens.forward(x, training=False)
    stacked = np.stack([o.data for o in outs])
    e, n = stacked.shape[:2]
    scores, _ = disc.forward(Tensor(stacked.reshape((e * n,) + images.shape[1:])))
    scores = scores.data.reshape(e, n).astype(np.float64)
    best = np.argmax(scores, axis=0)
    return stacked[best, np.arange(n)], best, scores


def cmd_invert(checkpoint: str, images_path: str, out: str, limit: Optional[int]) -> int:
    ens, disc, meta = load_networks(Path(checkpoint))
    images = load_idx(resolve_data_path(images_path), dtype=np.float32)
    if limit:
        images = images[:limit]
    if tuple(images.shape[2:]) != tuple(meta["image_hw"]):
        raise UserError(f"images are {images.shape[2]}x{images.shape[3]} but the checkpoint expects "
                        f"{meta['image_hw'][0]}x{meta['image_hw'][1]}")
    picked, best, _ = best_expert_outputs(ens, disc, images)
    write_pgm(out, image_grid([images.astype(np.float64), picked.astype(np.float64)]))
    print(json.dumps({"images": int(len(images)), "best_expert": best.tolist(), "grid": str(out)}))
    return 0


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="podnn", description="Competing orthogonal experts that invert "
                                     "unknown image transformations.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field (repeatable)")
        p.add_argument("--out", help="output directory (overrides output_dir)")

    p = sub.add_parser("train", help="competitive training, then the standalone phase")
    config_args(p)
    p = sub.add_parser("experiment", help="run one of the experiment kinds")
    p.add_argument("kind", help=", ".join(KINDS))
    config_args(p)
    p = sub.add_parser("invert", help="write input / best-expert output grids from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="IDX image file")
    p.add_argument("--out", required=True, help="output PGM path")
    p.add_argument("--limit", type=int, default=None, help="use only the first N images")
    return parser


def _resolve(args) -> RunConfig:
    doc = apply_overrides(load_config_file(args.config), args.overrides)
    if args.out:
        doc["output_dir"] = args.out
    return parse_run_config(doc)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(_resolve(args))
        if args.command == "experiment":
            return cmd_experiment(args.kind, _resolve(args))
        return cmd_invert(args.checkpoint, args.images, args.out, args.limit)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
