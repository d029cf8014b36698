"""Command-line entry point: config parsing, train/eval/verify subcommands,
metrics sinks, checkpointing, and plot-ready export.

Config files are flat ``key = value`` text (# comments allowed); unknown
keys are rejected by name. Checkpoints are JSON documents with a magic
string and format version; parameters, optimizer moments, RNG state, and
env state are all included so a resumed run is bit-identical to an
uninterrupted one. Metrics are line-delimited JSON (or CSV), one
self-describing record per iteration, flushed as written.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .envs import make_env
from .flow import FlowConfig, FlowPolicy, NoisePair, init_velocity_net, log_prob, reverse_sample
from .numerics import ConfigError, GradTape, Tensor, make_rng, tensor_sum
from .objectives import LossConfig, kl_estimate
from .oracle import (
    finite_diff_grad,
    max_relative_error,
    mc_entropy,
    numerical_logdet,
    roundtrip_scan,
)
from .rollout import GaeConfig
from .trainer import TrainConfig, Trainer, evaluate

__all__ = [
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "MetricsWriter",
    "RunConfig",
    "build_trainer",
    "load_checkpoint",
    "main",
    "parse_config",
    "read_metrics",
    "restore_trainer",
    "save_checkpoint",
]

CHECKPOINT_MAGIC = "GENPO"
CHECKPOINT_VERSION = 1
OUTPUT_ROOT_VAR = "GENPO_OUT_ROOT"


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class RunConfig:
    # environment selection and constants (None -> per-env default)
    env: str = "pointmass"
    horizon: int | None = None
    physics_dt: float | None = None
    drag: float | None = None
    goal_x: float | None = None
    goal_y: float | None = None
    start_radius: float | None = None
    action_bound: float | None = None
    # flow
    steps: int = 5
    mixing: float = 0.9
    interpolation_alpha: float = 0.5
    # losses
    clip: float = 0.2
    entropy_coeff: float = 0.01
    compression_coeff: float = 0.01
    value_coeff: float = 1.0
    # advantage estimation
    gamma: float = 0.99
    gae_lambda: float = 0.95
    # training loop
    iterations: int = 300
    steps_per_env: int = 64
    update_epochs: int = 5
    minibatch_size: int = 128
    learning_rate: float = 1e-3
    kl_target: float = 0.01
    lr_min: float = 1e-5
    lr_max: float = 1e-2
    seed: int = 0
    n_envs: int = 4
    normalize_adv: bool = True
    grad_clip_norm: float = 1.0
    actor_hidden: tuple[int, ...] = (32, 32)
    critic_hidden: tuple[int, ...] = (64, 64)
    time_embed_dim: int = 16
    time_embed_hidden: tuple[int, ...] = (32,)
    # output
    out_dir: str | None = None
    metrics_format: str = "jsonl"

    def __post_init__(self):
        if self.env not in ("pointmass", "bimodal"):
            raise ConfigError(f"env must be 'pointmass' or 'bimodal', got {self.env!r}")
        if self.metrics_format not in ("jsonl", "csv"):
            raise ConfigError(f"metrics_format must be 'jsonl' or 'csv', got {self.metrics_format!r}")


# declared key types; tuples are comma-separated ints
_KEY_TYPES = {
    "env": str,
    "horizon": int,
    "physics_dt": float,
    "drag": float,
    "goal_x": float,
    "goal_y": float,
    "start_radius": float,
    "action_bound": float,
    "steps": int,
    "mixing": float,
    "interpolation_alpha": float,
    "clip": float,
    "entropy_coeff": float,
    "compression_coeff": float,
    "value_coeff": float,
    "gamma": float,
    "gae_lambda": float,
    "iterations": int,
    "steps_per_env": int,
    "update_epochs": int,
    "minibatch_size": int,
    "learning_rate": float,
    "kl_target": float,
    "lr_min": float,
    "lr_max": float,
    "seed": int,
    "n_envs": int,
    "normalize_adv": bool,
    "grad_clip_norm": float,
    "actor_hidden": tuple,
    "critic_hidden": tuple,
    "time_embed_dim": int,
    "time_embed_hidden": tuple,
    "out_dir": str,
    "metrics_format": str,
}


def _parse_value(key: str, raw: str, target_type):
    raw = raw.strip()
    try:
        if target_type is tuple:
            return tuple(int(part) for part in raw.split(",") if part.strip())
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as err:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from err


def parse_config(path: str | os.PathLike | None) -> RunConfig:
    """Build a RunConfig from a flat key=value file; missing keys keep their
    defaults, unknown keys are rejected by name."""
    overrides: dict = {}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config file {path}: {err}") from err
        try:
            parser.read_string("[run]\n" + text)
        except configparser.Error as err:
            raise ConfigError(f"config file {path} is not key=value text: {err}") from err
        for key, raw in parser["run"].items():
            if key not in _KEY_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            overrides[key] = _parse_value(key, raw, _KEY_TYPES[key])
    return RunConfig(**overrides)


def build_env(cfg: RunConfig):
    env_keys = {
        "pointmass": ("horizon", "physics_dt", "drag", "start_radius", "action_bound"),
        "bimodal": ("horizon", "physics_dt", "drag", "action_bound"),
    }[cfg.env]
    overrides = {k: getattr(cfg, k) for k in env_keys if getattr(cfg, k) is not None}
    if cfg.goal_x is not None or cfg.goal_y is not None:
        gx = cfg.goal_x if cfg.goal_x is not None else 0.0
        gy = cfg.goal_y if cfg.goal_y is not None else 0.0
        overrides["goal"] = (gx, gy)
    return make_env(cfg.env, cfg.n_envs, **overrides)


def to_train_config(cfg: RunConfig, env) -> TrainConfig:
    spec = env.spec
    flow = FlowConfig(
        state_dim=spec.obs_dim,
        action_dim=spec.act_dim,
        steps=cfg.steps,
        mixing=cfg.mixing,
        interpolation_alpha=cfg.interpolation_alpha,
    )
    return TrainConfig(
        flow=flow,
        iterations=cfg.iterations,
        steps_per_env=cfg.steps_per_env,
        update_epochs=cfg.update_epochs,
        minibatch_size=cfg.minibatch_size,
        learning_rate=cfg.learning_rate,
        kl_target=cfg.kl_target,
        lr_min=cfg.lr_min,
        lr_max=cfg.lr_max,
        loss=LossConfig(cfg.clip, cfg.entropy_coeff, cfg.compression_coeff, cfg.value_coeff),
        gae=GaeConfig(cfg.gamma, cfg.gae_lambda),
        seed=cfg.seed,
        n_envs=cfg.n_envs,
        normalize_adv=cfg.normalize_adv,
        grad_clip_norm=cfg.grad_clip_norm,
        actor_hidden=cfg.actor_hidden,
        critic_hidden=cfg.critic_hidden,
        time_embed_dim=cfg.time_embed_dim,
        time_embed_hidden=cfg.time_embed_hidden,
    )


def build_trainer(cfg: RunConfig) -> Trainer:
    env = build_env(cfg)
    return Trainer(to_train_config(cfg, env), env)


def resolve_out_dir(cfg: RunConfig, override: str | None = None) -> Path:
    if override is not None:
        base = Path(override)
    elif cfg.out_dir is not None:
        base = Path(cfg.out_dir)
    else:
        base = Path(os.environ.get(OUTPUT_ROOT_VAR, "runs")) / f"{cfg.env}-seed{cfg.seed}"
    base.mkdir(parents=True, exist_ok=True)
    return base


# ---------------------------------------------------------------------------
# metrics sinks

class MetricsWriter:
    """Appends one self-describing record per iteration, flushed per write.

    jsonl: one JSON object per line (floats round-trip exactly via repr).
    csv: header from the first row, empty cells for missing values.
    """

    def __init__(self, path: str | os.PathLike, fmt: str = "jsonl"):
        if fmt not in ("jsonl", "csv"):
            raise ConfigError(f"unknown metrics format {fmt!r}")
        self.path = Path(path)
        self.fmt = fmt
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._csv_writer = None
        self._csv_fields = None

    def write(self, row: dict) -> None:
        if self.fmt == "jsonl":
            self._fh.write(json.dumps(row) + "\n")
        else:
            if self._csv_writer is None:
                self._csv_fields = list(row.keys())
                self._csv_writer = csv.DictWriter(self._fh, fieldnames=self._csv_fields)
                self._csv_writer.writeheader()
            self._csv_writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()


def read_metrics(path: str | os.PathLike) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


# ---------------------------------------------------------------------------
# checkpoints

def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def save_checkpoint(path: str | os.PathLike, trainer: Trainer) -> None:
    doc = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "flow": asdict(trainer.cfg.flow),
        "state": _to_jsonable(trainer.state_dict()),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))


def load_checkpoint(path: str | os.PathLike) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as err:
        raise ConfigError(f"cannot read checkpoint {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"checkpoint {path} is not valid JSON: {err}") from err
    if not isinstance(doc, dict) or doc.get("magic") != CHECKPOINT_MAGIC:
        raise ConfigError(f"checkpoint {path} has a bad magic string")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint {path} has unsupported version {doc.get('version')!r}"
        )
    return doc


def restore_trainer(trainer: Trainer, doc: dict) -> None:
    flow_here = asdict(trainer.cfg.flow)
    if doc["flow"] != flow_here:
        raise ConfigError(
            f"checkpoint flow config {doc['flow']} does not match run config {flow_here}"
        )
    trainer.load_state_dict(doc["state"])


# ---------------------------------------------------------------------------
# verification report

def _verify_checks(cfg: RunConfig):
    """Oracle suite at the configured flow settings; yields
    (name, measured, bound, passed)."""
    env = build_env(cfg)
    spec = env.spec
    flow = FlowConfig(spec.obs_dim, spec.act_dim, cfg.steps, cfg.mixing, cfg.interpolation_alpha)
    rng = make_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    params = init_velocity_net(rng, flow, hidden=(16, 16), embed_dim=8, embed_hidden=(16,))
    policy = FlowPolicy(params, flow)

    yield ("roundtrip_max_error", roundtrip_scan(policy, 500, rng), 1e-8)

    # constant log-det of the sampling map against the numerical Jacobian
    small_flow = FlowConfig(spec.obs_dim, 2, min(cfg.steps, 3), cfg.mixing, cfg.interpolation_alpha)
    small = FlowPolicy(
        init_velocity_net(rng, small_flow, hidden=(8, 8), embed_dim=4, embed_hidden=(8,)),
        small_flow,
    )
    state_row = rng.standard_normal((1, spec.obs_dim))
    analytic = 2.0 * small_flow.action_dim * small_flow.steps * math.log(small_flow.mixing)

    def sample_map(z):
        noise = NoisePair(z[None, :2], z[None, 2:])
        a = reverse_sample(small.params, state_row, noise, small_flow)
        return np.concatenate([a.x[0], a.y[0]])

    logdet = numerical_logdet(sample_map, rng.standard_normal(4))
    yield ("logdet_vs_numerical", abs(logdet - analytic), 1e-4)

    # reverse-mode gradient of log_prob against central differences
    probe_flow = FlowConfig(3, 2, 2, cfg.mixing, cfg.interpolation_alpha)
    probe = init_velocity_net(rng, probe_flow, hidden=(8,), embed_dim=4, embed_hidden=(8,))
    pstate = rng.standard_normal((4, 3))
    paction = reverse_sample(
        probe, pstate,
        NoisePair(rng.standard_normal((4, 2)), rng.standard_normal((4, 2))),
        probe_flow,
    )
    tensors = probe.parameters()

    def loss_fn(arrays):
        trial = probe.with_parameters([Tensor(a) for a in arrays])
        return float(log_prob(trial, pstate, paction, probe_flow).data.sum())

    with GradTape() as tape:
        loss = tensor_sum(log_prob(probe, pstate, paction, probe_flow))
    ad_grads = tape.gradient(loss, tensors)
    fd_grads = finite_diff_grad(loss_fn, [t.data for t in tensors])
    yield ("logprob_grad_vs_fd", max_relative_error(fd_grads, ad_grads), 1e-4)

    # Monte Carlo entropy against the analytic constant
    ent = mc_entropy(policy, np.zeros(spec.obs_dim), 100_000, rng)
    yield ("mc_entropy_deviation", ent.deviation, 0.01 * abs(ent.analytic))

    # KL estimator: exact zero on itself, mu^2/2 on a unit-Gaussian shift pair
    z = rng.standard_normal(100_000)
    mu = 0.5
    old_lp = -0.5 * z * z
    new_lp = -0.5 * (z - mu) ** 2
    yield ("kl_self", abs(kl_estimate(old_lp, old_lp)), 0.0)
    est = kl_estimate(old_lp, new_lp)
    se = float(np.std(old_lp - new_lp, ddof=1) / math.sqrt(z.size))
    yield ("kl_shift_pair", abs(est - mu * mu / 2.0), 3.0 * se)


def run_verify(cfg: RunConfig) -> int:
    failures = 0
    for name, measured, bound in _verify_checks(cfg):
        ok = measured <= bound
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'}  {name}: measured={measured:.3e} bound={bound:.3e}")
    print("verify:", "all checks passed" if failures == 0 else f"{failures} check(s) failed")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# subcommands

def run_train(cfg: RunConfig, out_dir: Path, checkpoint_every: int | None) -> int:
    trainer = build_trainer(cfg)
    metrics_path = out_dir / ("metrics." + cfg.metrics_format)
    ckpt_path = out_dir / "checkpoint.json"
    with MetricsWriter(metrics_path, cfg.metrics_format) as writer:
        for i in range(cfg.iterations):
            row = trainer.train_iteration()
            writer.write(row)
            if checkpoint_every and (i + 1) % checkpoint_every == 0:
                save_checkpoint(ckpt_path, trainer)
    save_checkpoint(ckpt_path, trainer)
    last = trainer.state.history[-1] if trainer.state.history else None
    if last is not None:
        print(
            f"finished {cfg.iterations} iterations; "
            f"return_mean={last['return_mean']} kl={last['kl']:.5f} lr={last['lr']:.2e}"
        )
    print(f"metrics: {metrics_path}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def run_eval(cfg: RunConfig, checkpoint_path: str, episodes: int) -> int:
    trainer = build_trainer(cfg)
    restore_trainer(trainer, load_checkpoint(checkpoint_path))
    rng = make_rng(np.random.SeedSequence(cfg.seed + 1).spawn(1)[0])
    report = evaluate(trainer.state.policy, trainer.env, episodes, rng)
    print(f"episodes: {episodes}")
    print(f"mean_return: {report.mean_return!r}")
    if report.returns.size:
        print(f"return_std: {report.returns.std()!r}")
    if report.mode_fractions is not None:
        print(f"mode_fractions: +g={report.mode_fractions[0]:.3f} -g={report.mode_fractions[1]:.3f}")
    return 0


def run_export(metrics_path: str, out_path: str) -> int:
    rows = read_metrics(metrics_path)
    if not rows:
        print("no metrics rows to export", file=sys.stderr)
        return 1
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a key=value config file (defaults apply if omitted)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument(
        "--out", help=f"output directory (default: ${OUTPUT_ROOT_VAR} or ./runs, per-run subdir)"
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="genpo",
        description="Train, evaluate, and verify the invertible coupled-flow policy.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop, writing metrics and checkpoints")
    _add_common(p_train)
    p_train.add_argument("--checkpoint-every", type=int, default=None,
                         help="also checkpoint every N iterations (final always written)")

    p_eval = sub.add_parser("eval", help="evaluate a checkpointed policy")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint file from train")
    p_eval.add_argument("--episodes", type=int, default=100)

    p_verify = sub.add_parser("verify", help="run the brute-force oracle suite; nonzero exit on failure")
    _add_common(p_verify)

    p_export = sub.add_parser("export-plot-data", help="convert a jsonl metrics file to CSV")
    p_export.add_argument("--metrics", required=True)
    p_export.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "export-plot-data":
            return run_export(args.metrics, args.out)
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.command == "train":
            return run_train(cfg, resolve_out_dir(cfg, args.out), args.checkpoint_every)
        if args.command == "eval":
            return run_eval(cfg, args.checkpoint, args.episodes)
        if args.command == "verify":
            return run_verify(cfg)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
