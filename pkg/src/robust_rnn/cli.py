"""Command-line entry point: ``robust-rnn {train,sweep,certify,verify}``.

Every run writes into a fresh directory under ``--out`` holding the resolved
config (``config.txt``, reusable with ``--config``), a JSON manifest that is
written before any compute and finalised afterwards, and comma-separated
result tables.

Exit codes: 0 success, 1 usage or config error, 2 runtime or numerical error
(including a failed oracle check in ``verify``).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .data import IdxError, load_idx, subset, synth_two_class, write_manifest
from .evaluate import mc_expected_loss, noise_sweep, threshold_extract
from .linalg import ConvergenceError, make_rng
from .model import Activation, LossSpec, forward, init_params, load_params, save_params
from .robustness import bound_report, propagate_covariance, stability_certificate, upper_bound_basic
from .train import TrainingDiverged, TrainLog, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# flag name -> config key, for the flags that map one-to-one
FLAG_KEYS = {
    "seed": "seed",
    "regime": "regime",
    "mu": "mu",
    "epochs": "epochs",
    "omega_grid": "omega_grid",
    "workers": "workers",
    "out": "out",
    "mnist_images": "mnist_images",
    "mnist_labels": "mnist_labels",
    "mnist_test_images": "mnist_test_images",
    "mnist_test_labels": "mnist_test_labels",
    "target_pct": "target_pct",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--regime", choices=["regular", "stable", "estimator", "upperbound"])
    common.add_argument("--mu", type=float)
    common.add_argument("--epochs", type=int)
    common.add_argument("--omega-grid", metavar="LIST", help="comma-separated noise amplitudes")
    common.add_argument("--workers", type=int)
    common.add_argument("--out", metavar="DIR", help="parent directory for run outputs")
    common.add_argument("--checkpoint", metavar="PATH", action="append", help="model checkpoint (repeatable)")
    common.add_argument("--mnist-images", metavar="PATH")
    common.add_argument("--mnist-labels", metavar="PATH")
    common.add_argument("--mnist-test-images", metavar="PATH")
    common.add_argument("--mnist-test-labels", metavar="PATH")
    common.add_argument("--synthetic", action="store_true", default=None, help="use the two-class synthetic task")
    common.add_argument("--target-pct", type=float, help="sweep: report the amplitude reaching this error")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], help="override any config key")

    parser = _Parser(prog="robust-rnn", description="Robustness of basic recurrent networks to input noise.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train one model in one regime")
    sub.add_parser("sweep", parents=[common], help="misclassification against noise amplitude")
    sub.add_parser("certify", parents=[common], help="Lipschitz bounds and stability test")
    sub.add_parser("verify", parents=[common], help="Monte Carlo checks of the covariance estimate and bounds")
    return parser


def resolve_config(args) -> RunConfig:
    layers = []
    if args.config:
        layers.append(RunConfig.read_file(args.config))
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, text = item.split("=", 1)
        key = RunConfig.normalise_key(key)
        overrides[key] = RunConfig.parse_value(key, text)
    layers.append(overrides)
    flags = {}
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr)
        if value is None:
            continue
        flags[key] = RunConfig.parse_value(key, value) if isinstance(value, str) else value
    if args.synthetic:
        flags["synthetic"] = True
    if args.checkpoint:
        flags["checkpoint"] = tuple(args.checkpoint)
    layers.append(flags)
    return RunConfig.build(*layers)


# ------------------------------------------------------------------ io


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """A fresh output directory with a manifest bracketing the work."""

    def __init__(self, command: str, cfg: RunConfig, argv):
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        base = Path(cfg.out) / f"{command}-{stamp}-{cfg.digest()[:8]}"
        path, k = base, 1
        while path.exists():
            path = base.with_name(f"{base.name}-{k}")
            k += 1
        path.mkdir(parents=True)
        self.dir = path
        self.outputs = []
        self.started = time.perf_counter()
        (path / "config.txt").write_text(cfg.to_text())
        self.manifest = {
            "command": command,
            "status": "running",
            "version": __version__,
            "seed": cfg.seed,
            "config_digest": cfg.digest(),
            "config": cfg.to_text().splitlines(),
            "argv": list(argv),
            "started": _dt.datetime.now().isoformat(timespec="seconds"),
        }
        self._write_manifest()

    def _write_manifest(self):
        (self.dir / "manifest.json").write_text(json.dumps(self.manifest, indent=2) + "\n")

    def path(self, name: str) -> Path:
        return self.dir / name

    def write(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        self.record(name)
        return p

    def record(self, name: str):
        if name not in self.outputs:
            self.outputs.append(name)

    def finish(self, status: str, exit_code: int, error: str | None = None, extra: dict | None = None):
        self.manifest.update(
            status=status,
            exit_code=exit_code,
            wall_time_s=round(time.perf_counter() - self.started, 3),
            finished=_dt.datetime.now().isoformat(timespec="seconds"),
            outputs=[
                {"file": name, "sha256": _sha256(self.path(name)), "bytes": self.path(name).stat().st_size}
                for name in self.outputs
                if self.path(name).exists()
            ],
        )
        if error:
            self.manifest["error"] = error
        if extra:
            self.manifest.update(extra)
        self._write_manifest()


def _say(message: str):
    print(message, file=sys.stderr, flush=True)


def _table(header, rows) -> str:
    def fmt(v):
        if isinstance(v, (bool, np.bool_)):
            return "true" if v else "false"
        if isinstance(v, (float, np.floating)):
            v = float(v)
            return "inf" if math.isinf(v) and v > 0 else ("nan" if math.isnan(v) else repr(v))
        return str(v)

    lines = [",".join(header)] + [",".join(fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- data


def _require_file(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"file not found: {path}")


def load_data(cfg: RunConfig, run: Run | None = None, need_train: bool = True):
    """``(train, test)`` datasets described by the config; either may be None."""
    if cfg.synthetic:
        train_set = synth_two_class(
            cfg.synthetic_per_class, cfg.synthetic_steps, cfg.synthetic_dim, cfg.synthetic_separation,
            make_rng(cfg.train_subset_seed),
        )
        test_set = synth_two_class(
            cfg.synthetic_per_class, cfg.synthetic_steps, cfg.synthetic_dim, cfg.synthetic_separation,
            make_rng(cfg.test_subset_seed + 10_000),
        )
        return train_set, test_set
    train_set = test_set = None
    if cfg.mnist_images and need_train:
        _require_file(cfg.mnist_images)
        _require_file(cfg.mnist_labels)
        full = load_idx(cfg.mnist_images, cfg.mnist_labels, "train")
        train_set, idx = subset(full, min(cfg.train_size, len(full)), cfg.train_subset_seed)
        if run is not None:
            write_manifest(run.path("train_indices.txt"), idx, f"subset of {cfg.mnist_images}")
            run.record("train_indices.txt")
    test_images, test_labels = cfg.mnist_test_images, cfg.mnist_test_labels
    if test_images is None and not need_train:
        # evaluation-only commands read the single pair given
        test_images, test_labels = cfg.mnist_images, cfg.mnist_labels
    if test_images:
        _require_file(test_images)
        _require_file(test_labels)
        full = load_idx(test_images, test_labels, "test")
        test_set, idx = subset(full, min(cfg.test_size, len(full)), cfg.test_subset_seed)
        if run is not None:
            write_manifest(run.path("test_indices.txt"), idx, f"subset of {test_images}")
            run.record("test_indices.txt")
    return train_set, test_set


def _load_checkpoints(cfg: RunConfig, at_least: int = 1):
    if len(cfg.checkpoint) < at_least:
        raise ConfigError("this command needs --checkpoint")
    models = []
    seen = {}
    for path in cfg.checkpoint:
        _require_file(path)
        name = Path(path).stem
        if name in seen:
            seen[name] += 1
            name = f"{name}_{seen[name]}"
        else:
            seen[name] = 0
        models.append((name, load_params(path)))
    return models


def _check_dims(params, dataset, name):
    if dataset is not None and params.d != dataset.d:
        raise ValueError(f"checkpoint {name} expects inputs of size {params.d}, data has {dataset.d}")


# ------------------------------------------------------------ commands


def cmd_train(cfg: RunConfig, run: Run) -> int:
    train_set, test_set = load_data(cfg, run)
    if train_set is None:
        raise ConfigError("train needs --mnist-images/--mnist-labels or --synthetic")
    m = int(train_set.labels.max()) + 1
    m = max(m, int(test_set.labels.max()) + 1) if test_set is not None else m
    if not cfg.synthetic:
        m = max(m, 10)
    p0 = init_params(cfg.hidden, train_set.d, m, Activation(cfg.activation), seed=cfg.seed, recurrent=cfg.init)
    tcfg = cfg.train_config(train_set.d, cfg.hidden)
    log_path = run.path("train_log.csv")
    with open(log_path, "w") as fh:
        fh.write(TrainLog.csv_header())
    run.record("train_log.csv")

    def on_epoch(rec, params):
        with open(log_path, "a") as fh:
            fh.write(TrainLog.csv_row(rec))
        _say(
            f"epoch {rec.epoch:3d}  loss {rec.train_loss:.4f}  train acc {rec.train_accuracy:.4f}  "
            f"test acc {rec.test_accuracy:.4f}  reg {rec.regularizer:.4g}  |A| {rec.norm_a:.3f}"
        )

    try:
        params, log = train(p0, train_set, tcfg, test_set, on_epoch=on_epoch)
    except TrainingDiverged as exc:
        save_params(run.path("checkpoint_last_good.json"), exc.params)
        run.record("checkpoint_last_good.json")
        raise
    save_params(run.path("checkpoint.json"), params)
    run.record("checkpoint.json")
    final = log[-1]
    print(f"checkpoint: {run.path('checkpoint.json')}")
    print(f"final test accuracy: {final.test_accuracy:.4f}  ||A||: {final.norm_a:.4f}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, run: Run) -> int:
    models = _load_checkpoints(cfg)
    _, test_set = load_data(cfg, run, need_train=False)
    if test_set is None:
        raise ConfigError("sweep needs a test set (--mnist-images/--mnist-labels or --synthetic)")
    rows, thresholds = [], []
    for name, params in models:
        _check_dims(params, test_set, name)
        sweep = noise_sweep(params, test_set, cfg.omega_grid, cfg.n_repeats, cfg.seed, cfg.workers)
        run.write(f"sweep_{name}.csv", sweep.to_csv())
        for p in sweep.points:
            rows.append((name, p.omega, p.misclassification_pct, p.rho_final.mean, p.rho_final.std_error))
        if cfg.target_pct is not None:
            try:
                w, note = threshold_extract(sweep, cfg.target_pct), ""
            except ValueError as exc:
                w, note = math.nan, str(exc).replace(",", ";")
            thresholds.append((name, cfg.target_pct, w, note))
    run.write("sweep.csv", _table(("model", "omega", "misclassification_pct", "rho_mc_mean", "rho_mc_stderr"), rows))
    print(_table(("model", "omega", "misclassification_pct"), [r[:3] for r in rows]), end="")
    if thresholds:
        run.write("thresholds.csv", _table(("model", "target_pct", "omega", "note"), thresholds))
        for name, target, w, note in thresholds:
            print(f"{name}: {target}% misclassification at omega = {w:.4g}" + (f" ({note})" if note else ""))
    return EXIT_OK


def _eval_set(cfg: RunConfig):
    if cfg.synthetic or cfg.mnist_images or cfg.mnist_test_images:
        return load_data(cfg, None, need_train=False)[1]
    return None


def _horizon(cfg: RunConfig, dataset) -> int:
    if cfg.horizon is not None:
        return cfg.horizon
    return dataset.T if dataset is not None else 28


def cmd_certify(cfg: RunConfig, run: Run) -> int:
    models = _load_checkpoints(cfg)
    T = _horizon(cfg, _eval_set(cfg))
    summary = []
    for name, params in models:
        noise = cfg.noise(params.d, params.n)
        report = bound_report(params, noise, T)
        run.write(f"bounds_{name}.csv", report.to_csv())
        cert = stability_certificate(params, noise, T)
        summary.append((
            name, report.lam, report.kappa_u, report.kappa_g, report.norm_a, T,
            cert.omega, cert.reference, cert.certified, cert.specnorm_a_lt_1,
            report.steady_basic, report.steady_general,
        ))
        print(
            f"{name}: lambda={report.lam:.4f} kappa_u={report.kappa_u:.4f} kappa_G={report.kappa_g:.4f} "
            f"||A||={report.norm_a:.4f}  Omega_{T}={cert.omega:.4g} vs {cert.reference:.4g}  "
            f"certified={'yes' if cert.certified else 'no'}  ||A||<1={'yes' if cert.specnorm_a_lt_1 else 'no'}"
        )
    header = (
        "model", "lambda", "kappa_u", "kappa_g", "norm_a", "horizon", "omega_bound", "reference",
        "certified", "specnorm_a_lt_1", "steady_basic", "steady_general",
    )
    run.write("certificate.csv", _table(header, summary))
    return EXIT_OK


def verify_checkpoint(params, inputs, label: int, cfg: RunConfig):
    """Per-step oracle table and the list of failed asserted checks."""
    noise = cfg.noise(params.d, params.n)
    traj = forward(params, inputs)
    cov = propagate_covariance(params, traj, noise)
    spec = LossSpec()
    T = inputs.shape[0]
    clean_loss, noisy_loss, rho_mc, _ = mc_expected_loss(
        params, inputs, np.full(T, label), spec, noise, cfg.verify_samples, make_rng(cfg.seed)
    )
    exact = params.activation is Activation.IDENTITY
    lip = params.activation.lipschitz == 1.0
    rows, failures = [], []
    for t in range(1, T + 1):
        r, e = rho_mc[t - 1], noisy_loss[t - 1]
        bound = upper_bound_basic(params, noise, t) if lip else math.nan
        within = abs(cov.rho_hat[t - 1] - r.mean) <= 3 * r.std_error + 1e-12 * max(1.0, r.mean)
        bound_ok = (not lip) or r.mean - 3 * r.std_error <= bound * (1 + 1e-9)
        rhs = clean_loss[t - 1] + spec.lipschitz * math.sqrt(r.mean + 3 * r.std_error)
        thm1_ok = e.mean - 3 * e.std_error <= rhs + 1e-12 * max(1.0, abs(rhs))
        rows.append((
            t, cov.rho_hat[t - 1], r.mean, r.std_error, bound, clean_loss[t - 1], e.mean, e.std_error, rhs,
            within, bound_ok, thm1_ok,
        ))
        if exact and not within:
            failures.append(f"t={t}: estimate {cov.rho_hat[t - 1]:.6g} vs Monte Carlo {r.mean:.6g} +- {r.std_error:.3g}")
        if not bound_ok:
            failures.append(f"t={t}: Monte Carlo rho {r.mean:.6g} exceeds bound {bound:.6g}")
        if not thm1_ok:
            failures.append(f"t={t}: noisy loss {e.mean:.6g} exceeds {rhs:.6g}")
    return rows, failures


def cmd_verify(cfg: RunConfig, run: Run) -> int:
    models = _load_checkpoints(cfg)
    test_set = _eval_set(cfg)
    header = (
        "t", "rho_hat", "rho_mc", "rho_mc_stderr", "bound_basic", "clean_loss", "noisy_loss_mc",
        "noisy_loss_stderr", "loss_bound", "estimate_within_3se", "bound_holds", "loss_bound_holds",
    )
    all_failures = []
    for name, params in models:
        if test_set is not None:
            _check_dims(params, test_set, name)
            if cfg.verify_index >= len(test_set):
                raise ConfigError(f"verify_index {cfg.verify_index} is outside the test set")
            sample = test_set[cfg.verify_index]
            inputs, label = sample.inputs, sample.label
        else:
            inputs, label = np.zeros((_horizon(cfg, None), params.d)), 0
        if label >= params.m:
            raise ValueError(f"label {label} does not fit a model with {params.m} outputs")
        rows, failures = verify_checkpoint(params, inputs, label, cfg)
        run.write(f"verify_{name}.csv", _table(header, rows))
        status = "ok" if not failures else f"{len(failures)} failed checks"
        print(f"{name}: {len(rows)} steps, {cfg.verify_samples} Monte Carlo samples: {status}")
        for f in failures:
            print(f"  {f}")
        all_failures += [f"{name}: {f}" for f in failures]
    if all_failures:
        run.manifest["failed_checks"] = all_failures
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "certify": cmd_certify, "verify": cmd_verify}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command in ("sweep", "certify", "verify") and not cfg.checkpoint:
            raise ConfigError(f"{args.command} needs --checkpoint")
    except ConfigError as exc:
        _say(f"robust-rnn: config error: {exc}")
        return EXIT_USAGE
    run = Run(args.command, cfg, argv)
    _say(f"robust-rnn {args.command}: writing to {run.dir}")
    try:
        code = COMMANDS[args.command](cfg, run)
    except ConfigError as exc:
        run.finish("failed", EXIT_USAGE, str(exc))
        _say(f"robust-rnn: config error: {exc}")
        return EXIT_USAGE
    except (OSError, IdxError, ValueError, FloatingPointError, ConvergenceError, TrainingDiverged) as exc:
        run.finish("failed", EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
        _say(f"robust-rnn: error: {exc}")
        return EXIT_RUNTIME
    run.finish("ok" if code == EXIT_OK else "failed", code)
    return code


if __name__ == "__main__":
    sys.exit(main())
