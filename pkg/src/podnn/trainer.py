"""Competitive adversarial training of parallel experts.

One competitive step: run every expert on the transformed minibatch, score
the outputs with the discriminator, update the discriminator, hand each point
to its highest-scoring expert, relocate points if some expert went empty,
then update each expert on its own points only. After convergence the
discriminator is frozen and only assigns points while the experts keep
training (the standalone phase).
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import DatasetPair, MechanismSpec, sample_minibatch
from .metrics import MetricsRecord
from .networks import DiscriminatorNet, PODNNEnsemble, orthogonality_residual
from .optim import AdamState, adam_step
from .relocation import RelocationDecision, expert_spreads, relocate

logger = logging.getLogger(__name__)

SCORE_CLAMP = 1e-7


@dataclass
class TrainConfig:
    mechanisms: list = field(default_factory=list)
    n_experts: Optional[int] = None  # defaults to the number of mechanisms
    batch_size: int = 64
    lr_expert: float = 1e-4
    lr_discriminator: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    orthogonalization: bool = True
    relocation: bool = True
    rp: float = 0.30
    max_iterations: int = 400
    window: int = 20
    convergence: str = "labels"  # or "partition" (label-free proxy)
    standalone_iterations: int = 100
    coupled_updates: bool = False
    warmup_iterations: int = 0
    lr_warmup: float = 1e-3
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.mechanisms = [m if isinstance(m, MechanismSpec) else MechanismSpec.from_dict(m) for m in self.mechanisms]
        if self.n_experts is None:
            self.n_experts = len(self.mechanisms)
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if not 0.0 < self.rp < 1.0:
            raise ValueError(f"rp must lie in (0, 1), got {self.rp}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.convergence not in ("labels", "partition"):
            raise ValueError(f"convergence must be 'labels' or 'partition', got {self.convergence!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mechanisms"] = [m.to_dict() for m in self.mechanisms]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown trainer keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------- losses


def discriminator_objective(d_real: Tensor, d_fake: Sequence[Tensor]) -> Tensor:
    """E[log D(x)] + (1/N') * sum_i E[log(1 - D(E_i(x')))], to be maximized."""
    if d_real.size == 0 or not d_fake or any(f.size == 0 for f in d_fake):
        raise ValueError("discriminator objective needs non-empty real and fake batches")
    real = ad.clip(d_real, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    total = ad.mean(ad.log(real))
    fake_terms = None
    for f in d_fake:
        term = ad.mean(ad.log(1.0 - ad.clip(f, SCORE_CLAMP, 1.0 - SCORE_CLAMP)))
        fake_terms = term if fake_terms is None else fake_terms + term
    return total + fake_terms * (1.0 / len(d_fake))


def expert_loss(winner_scores: Tensor) -> Tensor:
    """Non-saturating generator loss -E[log D(E*(x'))] over claimed points."""
    if winner_scores.size == 0:
        raise ValueError("expert loss needs at least one claimed point")
    return -ad.mean(ad.log(ad.clip(winner_scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)))


def assign(scores: np.ndarray) -> list[list[int]]:
    """Point j goes to argmax_i scores[i, j]; ties go to the lowest index."""
    scores = np.asarray(scores)
    winners = np.argmax(scores, axis=0)
    return [np.flatnonzero(winners == i).tolist() for i in range(scores.shape[0])]


# -------------------------------------------------------------- convergence


def majority_mapping(claims: np.ndarray) -> list[int]:
    """Per expert: the mechanism holding a strict majority of its claims, else -1."""
    claims = np.asarray(claims)
    out = []
    for row in claims:
        total = row.sum()
        k = int(np.argmax(row)) if total else -1
        out.append(k if total and 2 * row[k] > total else -1)
    return out


def _valid_mapping(mapping: Sequence[int], claims: np.ndarray) -> bool:
    n_mech = claims.shape[1]
    totals = claims.sum(axis=1)
    if any(m < 0 and t > 0 for m, t in zip(mapping, totals)):
        return False
    held = [m for m in mapping if m >= 0]
    return len(held) == len(set(held)) and set(held) == set(range(n_mech))


@dataclass
class ConvergenceResult:
    converged: bool
    iteration: Optional[int] = None
    mapping: Optional[list] = None


def detect_convergence(history: Sequence[np.ndarray], window: int,
                       iterations: Optional[Sequence[int]] = None) -> ConvergenceResult:
    """Label-based convergence over per-iteration (expert x mechanism) claim counts.

    Converged once ``window`` consecutive iterations share one valid mapping:
    every claiming expert has a strict-majority mechanism, no two experts share
    one, and every mechanism is covered. The reported iteration is where that
    run of identical mappings began, i.e. the last swap.
    """
    if iterations is None:
        iterations = list(range(len(history)))
    prev, start, run = None, None, 0
    for it, claims in zip(iterations, history):
        claims = np.asarray(claims)
        mapping = majority_mapping(claims)
        if not _valid_mapping(mapping, claims):
            prev, run = None, 0
            continue
        if mapping == prev:
            run += 1
        else:
            prev, start, run = mapping, it, 1
        if run >= window:
            return ConvergenceResult(True, start, list(mapping))
    return ConvergenceResult(False)


def detect_partition_convergence(claim_totals: Sequence[Sequence[int]], window: int,
                                 iterations: Optional[Sequence[int]] = None,
                                 tolerance: float = 0.1) -> ConvergenceResult:
    """Label-free proxy: ``window`` iterations in which every expert claims
    something and each expert's share of the batch stays within ``tolerance``
    of its share at the start of the run."""
    if iterations is None:
        iterations = list(range(len(claim_totals)))
    ref, start = None, None
    run = 0
    for it, totals in zip(iterations, claim_totals):
        totals = np.asarray(totals, dtype=np.float64)
        if (totals == 0).any():
            ref, run = None, 0
            continue
        share = totals / totals.sum()
        if ref is not None and np.all(np.abs(share - ref) <= tolerance):
            run += 1
        else:
            ref, start, run = share, it, 1
        if run >= window:
            return ConvergenceResult(True, start, None)
    return ConvergenceResult(False)


# ------------------------------------------------------------------ trainer


@dataclass
class StepOutput:
    """Raw per-step arrays; the evaluation probe turns these into label-aware metrics."""

    scores: np.ndarray  # (E, B) discriminator scores used for assignment
    d_scores: np.ndarray  # (E, B) actual discriminator scores
    hidden: np.ndarray  # (E, B, 128)
    winners: list  # assignment before relocation
    assignment: list  # assignment after relocation
    relocation: Optional[RelocationDecision]
    q_ids: np.ndarray
    outputs: np.ndarray  # (E, B, C, H, W) expert outputs


class Trainer:
    """Owns the networks, optimizers and iteration state for one run.

    ``probe`` (from :mod:`podnn.evaluation`) is the only channel to hidden
    labels; without it label-derived metrics stay empty and only the
    label-free convergence proxy is available. ``score_override`` replaces
    discriminator scores for assignment (used by the oracle experiments).
    """

    def __init__(self, config: TrainConfig, pair: DatasetPair, probe=None,
                 score_override: Optional[Callable[[np.ndarray], np.ndarray]] = None):
        self.config = config
        self.pair = pair
        self.probe = probe
        self.score_override = score_override
        dtype = config.np_dtype
        init_rng = np.random.default_rng([config.seed, 1])
        self.ensemble = PODNNEnsemble.build(config.n_experts, init_rng, config.orthogonalization, dtype=dtype)
        self.discriminator = DiscriminatorNet(init_rng, pair.image_hw, dtype=dtype)
        self.relocation_rng = np.random.default_rng([config.seed, 2])
        self.d_opt = AdamState(self.discriminator.parameters(), config.lr_discriminator,
                               config.beta1, config.beta2, config.adam_eps)
        self.e_opts = [AdamState(e.parameters(), config.lr_expert, config.beta1, config.beta2, config.adam_eps)
                       for e in self.ensemble.experts]
        self.iteration = 0
        self.phase = "competitive"
        self.converged: Optional[ConvergenceResult] = None
        self.records: list[MetricsRecord] = []
        self.timings: list[tuple[int, str, float]] = []
        self.claim_history: list[np.ndarray] = []
        self.total_fallbacks = 0
        self.last_step: Optional[StepOutput] = None

    # -- helpers

    def _batch(self, t: int):
        x_p, x_q, ids = sample_minibatch(self.pair, self.config.batch_size, self.config.seed, t)
        dt = self.config.np_dtype
        return x_p.astype(dt, copy=False), x_q.astype(dt, copy=False), ids

    def warmup(self) -> None:
        """Optional pre-training of every expert towards the identity map."""
        cfg = self.config
        if cfg.warmup_iterations <= 0:
            return
        opts = [AdamState(e.parameters(), cfg.lr_warmup, 0.9, 0.999, cfg.adam_eps) for e in self.ensemble.experts]
        params = [p for e in self.ensemble.experts for p in e.parameters()]
        for t in range(cfg.warmup_iterations):
            _, x_q, _ = sample_minibatch(self.pair, cfg.batch_size, cfg.seed + 7919, t)
            x = Tensor(x_q.astype(cfg.np_dtype, copy=False))
            with Tape() as tape:
                outs, _, _ = self.ensemble.forward(x, training=True, detach_previous=not cfg.coupled_updates)
                loss = None
                for o in outs:
                    err = o - x
                    term = ad.mean(err * err)
                    loss = term if loss is None else loss + term
            grads = ad.backward(tape, loss, params)
            for opt in opts:
                adam_step(opt, grads)

    def _expert_update(self, tape: Tape, outs: list, assignment: list) -> Optional[float]:
        """Update each expert on its own claimed points through the current discriminator."""
        claimed = [(i, pts) for i, pts in enumerate(assignment) if pts]
        if not claimed:
            return None
        with tape:
            pieces = [ad.take(outs[i], np.asarray(pts)) for i, pts in claimed]
            scores, _ = self.discriminator.forward(ad.concat(pieces, axis=0))
            loss = None
            off = 0
            for (i, pts), piece in zip(claimed, pieces):
                term = expert_loss(scores[off : off + len(pts)])
                off += len(pts)
                loss = term if loss is None else loss + term
        params = [p for e in self.ensemble.experts for p in e.parameters()]
        grads = ad.backward(tape, loss, params)
        for i, _ in claimed:
            adam_step(self.e_opts[i], grads)
        return float(loss.data) / len(claimed)

    # -- one iteration

    def train_step(self, x_p: np.ndarray, x_q: np.ndarray, q_ids: np.ndarray) -> MetricsRecord:
        if self.phase != "competitive":
            raise RuntimeError("train_step is only valid in the competitive phase")
        cfg = self.config
        n_exp, b = cfg.n_experts, len(x_q)
        t0 = time.perf_counter()

        etape = Tape()
        with etape:
            outs, v_list, diag = self.ensemble.forward(Tensor(x_q), training=True,
                                                      detach_previous=not cfg.coupled_updates)
        residual = orthogonality_residual(v_list, diag.degenerate)
        self.total_fallbacks += diag.fallbacks
        fakes = np.stack([o.data for o in outs])

        # score with the pre-update discriminator, then ascend its objective
        with Tape() as dtape:
            batch = Tensor(np.concatenate([x_p, fakes.reshape((n_exp * b,) + x_q.shape[1:])]))
            s, h = self.discriminator.forward(batch)
            n_real = len(x_p)
            fake_scores = [s[n_real + i * b : n_real + (i + 1) * b] for i in range(n_exp)]
            objective = discriminator_objective(s[:n_real], fake_scores)
            d_loss = -objective
        d_scores = s.data[n_real:].reshape(n_exp, b).astype(np.float64)
        hidden = h.data[n_real:].reshape(n_exp, b, -1).astype(np.float64)
        grads = ad.backward(dtape, d_loss, self.discriminator.parameters())
        adam_step(self.d_opt, grads)

        scores = d_scores if self.score_override is None else np.asarray(self.score_override(q_ids), dtype=np.float64)
        winners = assign(scores)
        assignment, decision = winners, None
        empty = [i for i, pts in enumerate(winners) if not pts]
        if cfg.relocation and empty:
            recipient = int(empty[self.relocation_rng.integers(len(empty))])
            assignment, decision = relocate(hidden, scores, winners, recipient, cfg.rp)

        e_loss = self._expert_update(etape, outs, assignment)
        elapsed = time.perf_counter() - t0

        step = StepOutput(scores, d_scores, hidden, winners, assignment, decision, q_ids, fakes)
        rec = self._record(step, float(objective.data), e_loss, residual, diag.fallbacks)
        self.timings.append((self.iteration, self.phase, elapsed))
        self.iteration += 1
        return rec

    def _record(self, step: StepOutput, d_obj, e_loss, residual, fallbacks) -> MetricsRecord:
        spreads = expert_spreads(step.hidden, step.winners)
        score_std = [float(np.std(step.d_scores[i][pts])) if pts else 0.0 for i, pts in enumerate(step.winners)]
        dec = step.relocation
        rec = MetricsRecord(
            iteration=self.iteration,
            phase=self.phase,
            d_objective=d_obj,
            expert_loss=e_loss,
            ortho_residual=residual,
            degenerate_count=fallbacks,
            claims=[len(p) for p in step.winners],
            spread=spreads,
            score_std=score_std,
            reloc_donor=dec.donor if dec else None,
            reloc_recipient=dec.recipient if dec else None,
            reloc_moved=len(dec.moved) if dec else 0,
        )
        if self.probe is not None:
            self.probe.annotate(rec, step)
        self.last_step = step
        self.records.append(rec)
        return rec

    # -- convergence and phases

    def check_convergence(self) -> ConvergenceResult:
        cfg = self.config
        its = [r.iteration for r in self.records if r.phase == "competitive"]
        recs = [r for r in self.records if r.phase == "competitive"]
        if cfg.convergence == "labels":
            if self.probe is None:
                raise RuntimeError("label-based convergence needs an evaluation probe")
            return detect_convergence([r.claim_matrix() for r in recs], cfg.window, its)
        return detect_partition_convergence([r.claims for r in recs], cfg.window, its)

    def standalone_step(self, x_q: np.ndarray, q_ids: np.ndarray) -> MetricsRecord:
        """Frozen discriminator assigns; experts train on their own points."""
        if self.phase != "standalone":
            raise RuntimeError("standalone training requires a converged run")
        cfg = self.config
        t0 = time.perf_counter()
        etape = Tape()
        with etape:
            outs, v_list, diag = self.ensemble.forward(Tensor(x_q), training=True,
                                                      detach_previous=not cfg.coupled_updates)
        residual = orthogonality_residual(v_list, diag.degenerate)
        fakes = np.stack([o.data for o in outs])
        n_exp, b = fakes.shape[:2]
        s, h = self.discriminator.forward(Tensor(fakes.reshape((n_exp * b,) + x_q.shape[1:])))
        d_scores = s.data.reshape(n_exp, b).astype(np.float64)
        hidden = h.data.reshape(n_exp, b, -1).astype(np.float64)
        scores = d_scores if self.score_override is None else np.asarray(self.score_override(q_ids), dtype=np.float64)
        winners = assign(scores)
        e_loss = self._expert_update(etape, outs, winners)
        elapsed = time.perf_counter() - t0
        step = StepOutput(scores, d_scores, hidden, winners, winners, None, q_ids, fakes)
        rec = self._record(step, None, e_loss, residual, diag.fallbacks)
        self.timings.append((self.iteration, self.phase, elapsed))
        self.iteration += 1
        return rec

    def standalone_phase(self, iterations: Optional[int] = None) -> None:
        if self.converged is None or not self.converged.converged:
            raise RuntimeError("standalone phase requested before convergence")
        iterations = self.config.standalone_iterations if iterations is None else iterations
        self.phase = "standalone"
        for _ in range(iterations):
            _, x_q, ids = self._batch(self.iteration)
            self.standalone_step(x_q, ids)

    def run(self, on_record: Optional[Callable[[MetricsRecord], None]] = None,
            standalone: bool = True,
            on_converged: Optional[Callable[["Trainer"], None]] = None) -> ConvergenceResult:
        """Competitive phase until convergence or the budget, then standalone.

        ``on_converged`` fires once, right after convergence is detected and
        before the standalone phase starts.
        """
        cfg = self.config
        self.warmup()
        result = ConvergenceResult(False)
        while self.iteration < cfg.max_iterations:
            x_p, x_q, ids = self._batch(self.iteration)
            rec = self.train_step(x_p, x_q, ids)
            if on_record is not None:
                on_record(rec)
            result = self.check_convergence()
            if result.converged:
                break
        self.converged = result
        if result.converged:
            logger.info("converged at iteration %s (detected at %s)", result.iteration, self.iteration - 1)
            if on_converged is not None:
                on_converged(self)
            if standalone and cfg.standalone_iterations > 0:
                self.phase = "standalone"
                for _ in range(cfg.standalone_iterations):
                    _, x_q, ids = self._batch(self.iteration)
                    rec = self.standalone_step(x_q, ids)
                    if on_record is not None:
                        on_record(rec)
        else:
            logger.info("not converged within %d iterations", cfg.max_iterations)
        return result
