"""Label-aware measurements and the experiment harness.

This is the only module that reads a dataset's hidden mechanism labels and
pre-images. Training code receives a :class:`LabelProbe` (for metrics and the
label-based convergence test) or an :class:`OracleDiscriminator` (for the
oracle-scoring experiments) and never looks inside.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .data import (DatasetPair, MechanismSpec, build_dataset, surviving_mask,
                   synthetic_images)
from .metrics import MetricsRecord, write_metrics
from .trainer import ConvergenceResult, TrainConfig, Trainer, detect_convergence

logger = logging.getLogger(__name__)


def hidden_labels(pair: DatasetPair) -> np.ndarray:
    return pair._hidden_labels


def pre_images(pair: DatasetPair) -> np.ndarray:
    return pair._pre_images


class LabelProbe:
    """Fills per-mechanism claim counts and mean scores into metrics records."""

    def __init__(self, pair: DatasetPair):
        self._labels = hidden_labels(pair)
        self.n_mechanisms = pair.n_mechanisms

    def labels(self, q_ids: np.ndarray) -> np.ndarray:
        return self._labels[np.asarray(q_ids)]

    def annotate(self, rec: MetricsRecord, step) -> None:
        labels = self.labels(step.q_ids)
        m = self.n_mechanisms
        claims = []
        for pts in step.winners:
            claims.append(np.bincount(labels[pts], minlength=m).astype(int).tolist() if pts else [0] * m)
        scores = []
        for row in step.d_scores:
            scores.append([float(row[labels == k].mean()) if (labels == k).any() else None for k in range(m)])
        rec.claims_by_mechanism = claims
        rec.score_by_mechanism = scores


class OracleDiscriminator:
    """Scores 1 for the expert designated to a point's true mechanism, 0 otherwise.

    The expert-to-mechanism designation is a fixed random permutation per run
    (experts beyond the mechanism count are never designated).
    """

    def __init__(self, pair: DatasetPair, n_experts: int, seed: int = 0):
        if n_experts < pair.n_mechanisms:
            raise ValueError("oracle scoring needs at least one expert per mechanism")
        self._labels = hidden_labels(pair)
        perm = np.random.default_rng([seed, 3]).permutation(n_experts)
        # designation[k] = expert responsible for mechanism k
        self.designation = perm[: pair.n_mechanisms].tolist()
        self.n_experts = n_experts

    def __call__(self, q_ids: np.ndarray) -> np.ndarray:
        labels = self._labels[np.asarray(q_ids)]
        scores = np.zeros((self.n_experts, len(labels)))
        scores[np.asarray(self.designation)[labels], np.arange(len(labels))] = 1.0
        return scores


# ------------------------------------------------------------------ measures


def convergence_iteration(records: Sequence[MetricsRecord], window: int) -> Optional[int]:
    """Offline last-swap iteration over a run log, or None when not converged."""
    recs = [r for r in records if r.phase == "competitive"]
    if len(recs) < window:
        return None
    res = detect_convergence([r.claim_matrix() for r in recs], window, [r.iteration for r in recs])
    return res.iteration if res.converged else None


def inversion_error(outputs: np.ndarray, originals: np.ndarray, spec: MechanismSpec) -> float:
    """MSE between expert outputs and the true pre-images on surviving pixels."""
    outputs = np.asarray(outputs, dtype=np.float64)
    originals = np.asarray(originals, dtype=np.float64)
    if outputs.shape != originals.shape:
        raise ValueError(f"outputs {outputs.shape} and originals {originals.shape} differ in shape")
    mask = surviving_mask(spec, outputs.shape[-2:])
    diff = (outputs - originals)[..., mask]
    return float(np.mean(diff * diff))


def evaluate_inversion(trainer: Trainer, pair: DatasetPair, specs: Sequence[MechanismSpec],
                       designation: Optional[Sequence[int]] = None, n_eval: Optional[int] = None,
                       batch: int = 128) -> dict:
    """Per-mechanism inversion MSE of the responsible expert on D_Q.

    The responsible expert is the oracle designation when given, otherwise the
    highest-scoring expert per point under the frozen discriminator.
    """
    labels = hidden_labels(pair)
    pre = pre_images(pair)
    n = len(pair.d_q) if n_eval is None else min(n_eval, len(pair.d_q))
    dt = trainer.config.np_dtype
    picked = np.empty((n,) + pair.d_q.shape[1:])
    for lo in range(0, n, batch):
        hi = min(lo + batch, n)
        x = pair.d_q[lo:hi].astype(dt)
        outs, _, _ = trainer.ensemble.forward(Tensor(x), training=False)
        outs = np.stack([o.data for o in outs]).astype(np.float64)
        if designation is not None:
            who = np.asarray(designation)[labels[lo:hi]]
        else:
            e, b = outs.shape[:2]
            s, _ = trainer.discriminator.forward(Tensor(outs.reshape((e * b,) + x.shape[1:]).astype(dt)))
            who = np.argmax(s.data.reshape(e, b), axis=0)
        picked[lo:hi] = outs[who, np.arange(len(x))]
    result = {}
    for k, spec in enumerate(specs):
        sel = labels[:n] == k
        if sel.any():
            result[spec.name] = inversion_error(picked[sel], pre[:n][sel], spec)
    return result


def spread_diagnostic(records: Sequence[MetricsRecord]) -> dict:
    """Hoarding vs hidden spread, per iteration of a labelled run.

    An expert "holds" mechanism k in an iteration when it claims a strict
    majority of that mechanism's points in the batch. For every
    (iteration, expert) where the expert holds two or more mechanisms we check
    whether its spread exceeds the median spread over all experts that
    iteration. ``single`` collects the same comparison for experts holding
    exactly one mechanism, keyed by that mechanism.
    """
    multi_hits, multi_total = 0, 0
    single: dict[int, list[bool]] = {}
    for rec in records:
        if rec.claims_by_mechanism is None:
            continue
        claims = rec.claim_matrix()
        per_mech = claims.sum(axis=0)
        holds = (2 * claims > per_mech[None, :]) & (per_mech[None, :] > 0)
        med = float(np.median(rec.spread))
        for i in range(claims.shape[0]):
            above = rec.spread[i] > med
            held = np.flatnonzero(holds[i])
            if len(held) >= 2:
                multi_total += 1
                multi_hits += int(above)
            elif len(held) == 1:
                single.setdefault(int(held[0]), []).append(bool(above))
    return {
        "multi_iterations": multi_total,
        "multi_above_median": multi_hits,
        "multi_fraction": multi_hits / multi_total if multi_total else None,
        "single_by_mechanism": {k: {"iterations": len(v), "above_median": int(sum(v)),
                                    "fraction": sum(v) / len(v)} for k, v in sorted(single.items())},
    }


# -------------------------------------------------------------- experiments

KINDS = ("convergence-compare", "oracle-severity", "real-severity", "relocation-balance", "rp-sweep", "timing")

VARIANTS = {
    "with": {"orthogonalization": True, "relocation": True},
    "without": {"orthogonalization": False, "relocation": False},
}


def default_mechanisms() -> list[MechanismSpec]:
    return [MechanismSpec("translate", "left", 4), MechanismSpec("translate", "right", 4),
            MechanismSpec("contrast-invert"), MechanismSpec("noise", sigma=0.1, seed=5)]


def translations(severity: int, directions: Sequence[str] = ("left", "right", "up", "down")) -> list[MechanismSpec]:
    return [MechanismSpec("translate", d, severity) for d in directions]


@dataclass
class ExperimentConfig:
    """Knobs shared by every experiment kind; ``trainer`` holds TrainConfig overrides."""

    seeds: list = None
    n_images: int = 2000
    image_size: int = 16
    mechanisms: list = None
    trainer: dict = None
    severities: list = None
    real_severities: list = None
    rp_values: list = None
    oracle_iterations: int = 150
    n_eval: int = 512
    timing_iterations: int = 20
    balance_seeds: list = None

    def __post_init__(self):
        self.seeds = list(range(5)) if self.seeds is None else list(self.seeds)
        self.mechanisms = (default_mechanisms() if self.mechanisms is None
                           else [m if isinstance(m, MechanismSpec) else MechanismSpec.from_dict(m)
                                 for m in self.mechanisms])
        self.trainer = dict(self.trainer or {})
        self.severities = [1, 2, 3, 4, 5] if self.severities is None else list(self.severities)
        self.real_severities = [2, 5] if self.real_severities is None else list(self.real_severities)
        self.rp_values = [0.1, 0.3, 0.5, 0.9] if self.rp_values is None else list(self.rp_values)
        self.balance_seeds = self.seeds[:3] if self.balance_seeds is None else list(self.balance_seeds)
        for key in ("mechanisms", "seed"):
            if key in self.trainer:
                raise ValueError(f"trainer override {key!r} is set per experiment, not globally")
        TrainConfig.from_dict({**self.trainer, "mechanisms": [m.to_dict() for m in self.mechanisms]})  # validates early

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["mechanisms"] = [m.to_dict() for m in self.mechanisms]
        return out


@dataclass
class RunResult:
    label: str
    seed: int
    converged: bool
    convergence_iteration: Optional[int]
    iterations: int
    mean_step_seconds: float
    trainer: Trainer
    pair: DatasetPair


def _base_images(cfg: ExperimentConfig, seed: int, base: Optional[np.ndarray]) -> np.ndarray:
    if base is not None:
        return base
    return synthetic_images(cfg.n_images, cfg.image_size, seed=seed)


def train_run(label: str, specs: Sequence[MechanismSpec], seed: int, cfg: ExperimentConfig,
              overrides: Optional[dict] = None, proportions: Optional[Sequence[float]] = None,
              oracle: bool = False, base: Optional[np.ndarray] = None, stop_at_convergence: bool = True,
              iterations: Optional[int] = None) -> RunResult:
    """One seeded competitive run (no standalone phase)."""
    pair = build_dataset(_base_images(cfg, seed, base), specs, proportions, seed=seed)
    tcfg = TrainConfig.from_dict({**cfg.trainer, **(overrides or {}), "mechanisms": [m.to_dict() for m in specs],
                                  "seed": seed})
    if iterations is not None:
        tcfg = replace(tcfg, max_iterations=iterations)
    override = OracleDiscriminator(pair, tcfg.n_experts, seed) if oracle else None
    tr = Trainer(tcfg, pair, probe=LabelProbe(pair), score_override=override)
    tr.warmup()
    result = ConvergenceResult(False)
    while tr.iteration < tcfg.max_iterations:
        tr.train_step(*tr._batch(tr.iteration))
        if stop_at_convergence:
            result = tr.check_convergence()
            if result.converged:
                break
    if not stop_at_convergence:
        result = tr.check_convergence()
    tr.converged = result
    secs = [t for _, _, t in tr.timings]
    logger.info("%s seed=%d converged=%s at %s after %d iterations", label, seed, result.converged,
                result.iteration, tr.iteration)
    return RunResult(label, seed, result.converged, result.iteration, tr.iteration,
                     float(np.mean(secs)) if secs else 0.0, tr, pair)


def censored_median(results: Sequence[RunResult], budget: int) -> float:
    """Median convergence iteration with non-converged runs counted at the budget."""
    return float(statistics.median([r.convergence_iteration if r.converged else budget for r in results]))


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, bool):
            return str(int(v))
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = [",".join(columns)] + [",".join(fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


RUN_COLUMNS = ["label", "seed", "converged", "convergence_iteration", "iterations", "mean_step_seconds"]


def _run_row(r: RunResult) -> list:
    return [r.label, r.seed, r.converged, r.convergence_iteration, r.iterations, r.mean_step_seconds]


def _budget(cfg: ExperimentConfig) -> int:
    return int(cfg.trainer.get("max_iterations", TrainConfig.max_iterations))


def _compare(cfg: ExperimentConfig, specs, label_prefix: str, base) -> tuple[list[RunResult], dict]:
    runs, summary = [], {}
    for variant, flags in VARIANTS.items():
        group = [train_run(f"{label_prefix}{variant}", specs, s, cfg, flags, base=base) for s in cfg.seeds]
        runs += group
        conv = [r.convergence_iteration for r in group if r.converged]
        summary[variant] = {
            "seeds": [r.seed for r in group],
            "converged": sum(r.converged for r in group),
            "convergence_iterations": [r.convergence_iteration for r in group],
            "median_censored": censored_median(group, _budget(cfg)),
            "median_converged_only": float(statistics.median(conv)) if conv else None,
        }
    return runs, summary


def _exp_convergence_compare(cfg, out: Path, base) -> dict:
    runs, summary = _compare(cfg, cfg.mechanisms, "", base)
    _write_csv(out / "convergence-compare.csv", RUN_COLUMNS, [_run_row(r) for r in runs])
    summary["with_faster"] = summary["with"]["median_censored"] < summary["without"]["median_censored"]
    return summary


def _exp_real_severity(cfg, out: Path, base) -> dict:
    rows, summary = [], {}
    for sev in cfg.real_severities:
        runs, s = _compare(cfg, translations(sev), f"{sev}px-", base)
        rows += [[sev] + _run_row(r) for r in runs]
        summary[f"{sev}px"] = s
    _write_csv(out / "real-severity.csv", ["severity"] + RUN_COLUMNS, rows)
    return summary


def _exp_oracle_severity(cfg, out: Path, base) -> dict:
    """Equal budgets per severity with oracle assignment; inversion MSE per severity."""
    rows, per_sev = [], {}
    flags = {"orthogonalization": cfg.trainer.get("orthogonalization", True), "relocation": False}
    for sev in cfg.severities:
        specs = translations(sev)
        errs = []
        for s in cfg.seeds:
            r = train_run(f"oracle-{sev}px", specs, s, cfg, flags, oracle=True, stop_at_convergence=False,
                          iterations=cfg.oracle_iterations)
            ev = evaluate_inversion(r.trainer, r.pair, specs, r.trainer.score_override.designation, cfg.n_eval)
            mse = float(np.mean(list(ev.values())))
            errs.append(mse)
            rows.append([sev, s, mse] + [ev[m.name] for m in specs])
        per_sev[sev] = float(np.mean(errs))
    cols = ["severity", "seed", "mse"] + ["mse_" + d for d in ("left", "right", "up", "down")]
    _write_csv(out / "oracle-severity.csv", cols, rows)
    vals = list(per_sev.values())
    return {
        "iterations": cfg.oracle_iterations,
        "mean_mse": {f"{k}px": v for k, v in per_sev.items()},
        "relative_variation": (max(vals) - min(vals)) / min(vals),
    }


def _exp_relocation_balance(cfg, out: Path, base) -> dict:
    balanced = translations(2)
    imbalanced = translations(2, ("left", "right", "up"))
    summary, rows = {}, []
    for name, specs, props in (("balanced", balanced, None), ("imbalanced", imbalanced, [0.6, 0.2, 0.2])):
        records = []
        for s in cfg.balance_seeds:
            r = train_run(f"{name}", specs, s, cfg, VARIANTS["with"], proportions=props, base=base)
            records += r.trainer.records
            rows.append([name] + _run_row(r))
            write_metrics(out / f"metrics-{name}-seed{s}.csv", r.trainer.records, r.trainer.config.n_experts,
                          len(specs))
        summary[name] = spread_diagnostic(records)
    _write_csv(out / "relocation-balance.csv", ["dataset"] + RUN_COLUMNS, rows)
    return summary


def _exp_rp_sweep(cfg, out: Path, base) -> dict:
    rows, runs_rows = [], []
    budget = _budget(cfg)
    for rp in cfg.rp_values:
        group = [train_run(f"rp{rp}", cfg.mechanisms, s, cfg, {**VARIANTS["with"], "rp": rp}, base=base)
                 for s in cfg.seeds]
        runs_rows += [[rp] + _run_row(r) for r in group]
        its = [r.convergence_iteration if r.converged else budget for r in group]
        rows.append([rp, float(np.mean(its)), sum(r.converged for r in group)])
    _write_csv(out / "rp-sweep.csv", ["rp", "mean_convergence_iteration", "converged"], rows)
    _write_csv(out / "rp-sweep-runs.csv", ["rp"] + RUN_COLUMNS, runs_rows)
    return {"rows": [{"rp": r[0], "mean_convergence_iteration": r[1], "converged": r[2]} for r in rows]}


def _exp_timing(cfg, out: Path, base) -> dict:
    rows, means = [], {}
    for variant, orth in (("with", True), ("without", False)):
        per_seed = []
        for s in cfg.seeds:
            r = train_run(f"timing-{variant}", cfg.mechanisms, s, cfg,
                          {"orthogonalization": orth, "relocation": False, "warmup_iterations": 0},
                          stop_at_convergence=False, iterations=cfg.timing_iterations, base=base)
            secs = [t for _, _, t in r.trainer.timings]
            rows.append([variant, s, len(secs), float(np.mean(secs)), float(np.std(secs))])
            per_seed.append(float(np.mean(secs)))
        means[variant] = float(np.mean(per_seed))
    _write_csv(out / "timing.csv", ["variant", "seed", "iterations", "mean_seconds", "std_seconds"], rows)
    return {
        "mean_step_seconds": means,
        "overhead_percent": 100.0 * (means["with"] / means["without"] - 1.0),
    }


_EXPERIMENTS = {
    "convergence-compare": _exp_convergence_compare,
    "oracle-severity": _exp_oracle_severity,
    "real-severity": _exp_real_severity,
    "relocation-balance": _exp_relocation_balance,
    "rp-sweep": _exp_rp_sweep,
    "timing": _exp_timing,
}


def run_experiment(kind: str, config: ExperimentConfig, out_dir, base: Optional[np.ndarray] = None) -> dict:
    """Run one experiment kind; writes ``<kind>.csv`` and ``summary.json`` into ``out_dir``.

    ``base`` replaces the synthetic images (e.g. an IDX image set) for every seed.
    """
    if kind not in _EXPERIMENTS:
        raise ValueError(f"unknown experiment kind {kind!r}; expected one of {', '.join(KINDS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    summary = _EXPERIMENTS[kind](config, out, base)
    doc = {"kind": kind, "config": config.to_dict(), "result": summary,
           "wall_seconds": time.perf_counter() - t0}
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    return doc


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
