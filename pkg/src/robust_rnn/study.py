"""Multi-regime, multi-seed comparison on MNIST: train, sweep noise, compare.

Each (regime, seed) run is cached under ``cache_dir`` in a directory named by
the SHA-256 of everything that determines it (hyperparameters, data bytes,
code version), so an interrupted study resumes and a finished one reloads
instantly. Changing any input changes the key.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset
from .evaluate import McEstimate, SweepPoint, SweepResult, noise_sweep, threshold_extract
from .linalg import operator_norm
from .model import Activation, LossSpec, init_params, load_params, save_params
from .robustness import NoiseSpec
from .train import Regime, TrainConfig, evaluate_dataset, train

REGIMES = ("regular", "stable", "estimator", "upperbound")

STUDY_OMEGAS = (
    0.0, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0,
)


@dataclass(frozen=True)
class StudySpec:
    mu: dict = field(default_factory=lambda: {"estimator": 1e-3, "upperbound": 1e-7})
    seeds: tuple = (0, 1, 2)
    epochs: int = 30
    hidden: int = 60
    init: str = "identity"
    step_size: float = 0.02
    momentum: float = 0.9
    batch_size: int = 64
    gradient_clip_norm: float = 1.0
    schedule: str = "cosine"
    train_omega: float = 1.0
    omegas: tuple = STUDY_OMEGAS
    n_repeats: int = 3
    target_pct: float = 5.0

    def train_config(self, regime: str, seed: int, d: int) -> TrainConfig:
        return TrainConfig(
            regime=Regime(regime),
            mu=float(self.mu.get(regime, 0.0)),
            epochs=self.epochs,
            batch_size=self.batch_size,
            step_size=self.step_size,
            momentum=self.momentum,
            seed=seed,
            gradient_clip_norm=self.gradient_clip_norm,
            noise=NoiseSpec.isotropic(self.train_omega, d),
            schedule=self.schedule,
        )


@dataclass
class RunRecord:
    regime: str
    seed: int
    clean_accuracy: float
    norm_a: float
    sweep: SweepResult
    log_csv: str
    path: Path

    @property
    def misclassification(self) -> np.ndarray:
        return self.sweep.misclassification


@dataclass
class StudyResult:
    spec: StudySpec
    runs: list

    def of(self, regime: str) -> list:
        return [r for r in self.runs if r.regime == regime]

    def mean_curve(self, regime: str) -> np.ndarray:
        return np.mean([r.misclassification for r in self.of(regime)], axis=0)

    def mean_clean_accuracy(self, regime: str) -> float:
        return float(np.mean([r.clean_accuracy for r in self.of(regime)]))

    def mean_norm_a(self, regime: str) -> float:
        return float(np.mean([r.norm_a for r in self.of(regime)]))

    def at_omega(self, regime: str, omega: float) -> float:
        omegas = np.asarray(self.spec.omegas)
        k = int(np.argmin(np.abs(omegas - omega)))
        if abs(omegas[k] - omega) > 1e-12:
            raise ValueError(f"omega {omega} is not on the sweep grid")
        return float(self.mean_curve(regime)[k])

    def mean_sweep(self, regime: str) -> SweepResult:
        zero = McEstimate(0.0, 0.0, 2)
        pts = tuple(SweepPoint(float(w), float(p), zero) for w, p in zip(self.spec.omegas, self.mean_curve(regime)))
        return SweepResult(pts, {"regime": regime, "seeds": list(self.spec.seeds)})

    def threshold(self, regime: str, target_pct: float | None = None) -> float:
        """Amplitude at which the seed-averaged curve reaches the target; nan if not bracketed."""
        target = self.spec.target_pct if target_pct is None else target_pct
        try:
            return threshold_extract(self.mean_sweep(regime), target)
        except ValueError:
            return math.nan

    def summary_csv(self) -> str:
        lines = ["regime,clean_accuracy,norm_a,misclassification_at_1,threshold_omega"]
        for regime in REGIMES:
            if not self.of(regime):
                continue
            lines.append(
                f"{regime},{self.mean_clean_accuracy(regime)!r},{self.mean_norm_a(regime)!r},"
                f"{self.at_omega(regime, 1.0)!r},{self.threshold(regime)!r}"
            )
        return "\n".join(lines) + "\n"


def dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.inputs).tobytes())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    return h.hexdigest()


def run_key(spec: StudySpec, regime: str, seed: int, train_digest: str, test_digest: str) -> str:
    payload = {
        "version": __version__,
        "regime": regime,
        "seed": seed,
        "train": train_digest,
        "test": test_digest,
        "mu": float(spec.mu.get(regime, 0.0)),
        # other regimes' weights and the seed list do not affect this run
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items() if k not in ("seeds", "mu")},
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _sweep_from_csv(text: str) -> SweepResult:
    rows = [line.split(",") for line in text.strip().splitlines()[1:]]
    pts = []
    for omega, pct, mean, se in rows:
        pts.append(SweepPoint(float(omega), float(pct), McEstimate(float(mean), float(se), 2)))
    return SweepResult(tuple(pts))


def run_one(spec: StudySpec, regime: str, seed: int, train_set: Dataset, test_set: Dataset, cache_dir, log=None) -> RunRecord:
    cache_dir = Path(cache_dir)
    key = run_key(spec, regime, seed, dataset_digest(train_set), dataset_digest(test_set))
    where = cache_dir / f"{regime}-seed{seed}-{key}"
    done = where / "done.json"
    if done.exists():
        meta = json.loads(done.read_text())
        return RunRecord(
            regime, seed, meta["clean_accuracy"], meta["norm_a"],
            _sweep_from_csv((where / "sweep.csv").read_text()), (where / "train_log.csv").read_text(), where,
        )
    where.mkdir(parents=True, exist_ok=True)
    m = int(max(train_set.labels.max(), test_set.labels.max())) + 1
    p0 = init_params(spec.hidden, train_set.d, m, Activation.RELU, seed=seed, recurrent=spec.init)
    cfg = spec.train_config(regime, seed, train_set.d)

    def on_epoch(rec, params):
        if log is not None:
            log(
                f"{regime} seed {seed} epoch {rec.epoch}: test acc {rec.test_accuracy:.4f} "
                f"reg {rec.regularizer:.4g} |A| {rec.norm_a:.3f} ({rec.wall_time:.0f}s)"
            )

    params, tlog = train(p0, train_set, cfg, test_set, on_epoch=on_epoch)
    save_params(where / "checkpoint.json", params)
    (where / "train_log.csv").write_text(tlog.to_csv())
    sweep = noise_sweep(params, test_set, spec.omegas, spec.n_repeats, seed)
    (where / "sweep.csv").write_text(sweep.to_csv())
    _, acc = evaluate_dataset(params, test_set, LossSpec())
    meta = {"clean_accuracy": acc, "norm_a": operator_norm(params.A), "key": key}
    done.write_text(json.dumps(meta, indent=2) + "\n")
    return RunRecord(regime, seed, acc, meta["norm_a"], sweep, tlog.to_csv(), where)


def run_study(spec: StudySpec, train_set: Dataset, test_set: Dataset, cache_dir, regimes=REGIMES, log=None) -> StudyResult:
    runs = [
        run_one(spec, regime, seed, train_set, test_set, cache_dir, log)
        for regime in regimes
        for seed in spec.seeds
    ]
    return StudyResult(spec, runs)


def load_checkpoint(record: RunRecord):
    return load_params(record.path / "checkpoint.json")
