"""Configuration loading, command dispatch, and experiment recipes.

Configs are plain-text key=value files with [env], [train], and [certify]
sections; omitted keys take the documented defaults and unknown keys are
rejected with their line number. Environment variables of the form
MB_<SECTION>_<KEY> override file values.

Commands:
  train           one training run per seed: metrics CSV, checkpoints,
                  greedy trajectory log
  eval            evaluate a checkpoint, print one summary line
  verify          scenario safety certificate from a trajectory log
  ablate-gamma-b  barrier-discount sweep {0.4, 0.5, 0.7, 0.9, 0.99}
  ablate-beta     gradient-weight sweep, beta_b = 1 - beta_q
  smoke           sub-minute end-to-end check on a built-in tiny config
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .battlegrid import EnvConfig, EnvError
from .certify import CertifyError, SafetyQuery, certify_policy, format_certificate
from .diffcore import DiffError
from .trainloop import (
    METRICS_HEADER,
    MetricsRow,
    TrainConfig,
    Trainer,
    load_checkpoint,
)

__all__ = [
    "HarnessError",
    "RunSpec",
    "load_config",
    "config_hash",
    "write_metrics",
    "read_metrics",
    "MetricsWriter",
    "run_command",
    "main",
    "GAMMA_B_SWEEP",
    "BETA_Q_SWEEP",
]

GAMMA_B_SWEEP = (0.4, 0.5, 0.7, 0.9, 0.99)
BETA_Q_SWEEP = (0.1, 0.3, 0.5, 0.7, 0.9)

SECTIONS = ("env", "train", "certify")
ENV_PREFIX = "MB_"


class HarnessError(ValueError):
    """Configuration or command errors with a human-readable cause."""


@dataclass
class RunSpec:
    command: str
    config: str | None
    out: str
    seeds: list[int]
    checkpoint: str | None = None
    log: str | None = None


def _coerce(raw: str, target_type, where: str):
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is str:
            return raw
        if target_type is tuple:  # comma list of ints (hazard cells)
            return tuple(int(x) for x in raw.split(",")) if raw.strip() else ()
    except ValueError:
        raise HarnessError(f"{where}: cannot parse {raw!r}") from None
    raise HarnessError(f"{where}: unsupported value type")


def _field_types(cls) -> dict[str, type]:
    by_annotation = {"int": int, "float": float, "str": str}
    out = {}
    for f in dataclasses.fields(cls):
        annotation = f.type if isinstance(f.type, str) else f.type.__name__
        if annotation.startswith("tuple"):
            out[f.name] = tuple
        else:
            out[f.name] = by_annotation.get(annotation, str)
    return out


_SCHEMAS = {
    "env": _field_types(EnvConfig),
    "train": _field_types(TrainConfig),
    "certify": _field_types(SafetyQuery),
}
# certify defaults that depend on the env are resolved in load_config
_CERTIFY_DEFAULTS = {"n_samples": 100, "removed": 0, "param_count": 1,
                     "beta": 0.05}


def _parse_file(path) -> dict[str, dict[str, tuple[str, int]]]:
    values: dict[str, dict[str, tuple[str, int]]] = {s: {} for s in SECTIONS}
    section = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip().lower()
                if section not in SECTIONS:
                    raise HarnessError(
                        f"{path}:{lineno}: unknown section [{section}]")
                continue
            if "=" not in line:
                raise HarnessError(f"{path}:{lineno}: expected key=value")
            if section is None:
                raise HarnessError(
                    f"{path}:{lineno}: key before any [section] header")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in _SCHEMAS[section]:
                raise HarnessError(
                    f"{path}:{lineno}: unknown key {key!r} in [{section}]")
            values[section][key] = (val, lineno)
    return values


def _env_overrides(environ) -> dict[str, dict[str, tuple[str, int]]]:
    out: dict[str, dict[str, tuple[str, int]]] = {s: {} for s in SECTIONS}
    for name, val in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        body = name[len(ENV_PREFIX):]
        section, _, key = body.partition("_")
        section, key = section.lower(), key.lower()
        if section not in SECTIONS or not key:
            continue
        if key not in _SCHEMAS[section]:
            raise HarnessError(f"environment override {name}: unknown key {key!r}")
        out[section][key] = (val, 0)
    return out


def load_config(path=None, environ=None):
    """Load (EnvConfig, TrainConfig, SafetyQuery) with defaults applied.

    `path` may be None (pure defaults). MB_<SECTION>_<KEY> environment
    variables override file values; pass `environ={}` to disable.
    """
    environ = os.environ if environ is None else environ
    values = _parse_file(path) if path is not None else {s: {} for s in SECTIONS}
    for section, pairs in _env_overrides(environ).items():
        values[section].update(pairs)

    positions: dict[str, int] = {}

    def build(section, cls, defaults=None):
        kwargs = dict(defaults or {})
        for key, (raw, lineno) in values[section].items():
            where = f"{path or '<defaults>'}:{lineno}: [{section}] {key}"
            kwargs[key] = _coerce(raw, _SCHEMAS[section][key], where)
            positions[key] = lineno
        try:
            return cls(**kwargs)
        except TypeError as err:
            raise HarnessError(f"[{section}]: {err}") from None

    env_cfg = build("env", EnvConfig)
    train_cfg = build("train", TrainConfig)
    certify_defaults = dict(_CERTIFY_DEFAULTS)
    certify_defaults["omega"] = float(env_cfg.n_allies - 1)
    query = build("certify", SafetyQuery, certify_defaults)

    for cfg, err_cls in ((env_cfg, EnvError), (train_cfg, DiffError),
                         (query, CertifyError)):
        try:
            cfg.validate()
        except err_cls as err:
            msg = str(err)
            by_length = sorted(positions, key=len, reverse=True)
            line = next((positions[key] for key in by_length if key in msg), None)
            suffix = f" (line {line})" if line else ""
            raise HarnessError(f"{path or '<defaults>'}: {msg}{suffix}") from None
    return env_cfg, train_cfg, query


def config_hash(env_cfg: EnvConfig, train_cfg: TrainConfig,
                query: SafetyQuery) -> str:
    parts = []
    for section, cfg in (("env", env_cfg), ("train", train_cfg),
                         ("certify", query)):
        for f in dataclasses.fields(cfg):
            parts.append(f"{section}.{f.name}={getattr(cfg, f.name)!r}")
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:16]


# ----------------------------------------------------------------- metrics io


class MetricsWriter:
    """CSV writer flushed per row so partial output survives crashes."""

    def __init__(self, path, meta: dict | None = None):
        self._fh = open(path, "w", encoding="utf-8")
        for key, value in (meta or {}).items():
            self._fh.write(f"# {key}={value}\n")
        self._fh.write(METRICS_HEADER + "\n")
        self._fh.flush()

    def write(self, row: MetricsRow) -> None:
        self._fh.write(row.to_csv() + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(rows, path, meta: dict | None = None) -> None:
    with MetricsWriter(path, meta) as writer:
        for row in rows:
            writer.write(row)


def read_metrics(path) -> list[MetricsRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line == METRICS_HEADER:
                continue
            try:
                rows.append(MetricsRow.from_csv(line))
            except (ValueError, DiffError) as err:
                raise HarnessError(f"{path}:{lineno}: {err}") from None
    return rows


# ------------------------------------------------------------------ commands


def _train_one(env_cfg, train_cfg, query, out_dir: Path, label: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(env_cfg, train_cfg, query)
    trainer = Trainer(env_cfg, train_cfg, config_hash=chash)
    csv_path = out_dir / f"{label}.csv"
    meta = {"seed": train_cfg.seed, "config_hash": chash,
            "variant": train_cfg.variant}
    with MetricsWriter(csv_path, meta) as writer:
        trainer.run(on_row=writer.write, checkpoint_dir=str(out_dir))
    from .trainloop import save_checkpoint

    save_checkpoint(out_dir / f"{label}_checkpoint.npz", trainer.store, chash)
    trainer.write_trajectory_log(out_dir / f"{label}_trajectories.txt",
                                 episodes=query.n_samples,
                                 meta={"config_hash": chash})
    return csv_path


def _seeded(env_cfg, train_cfg, seed: int):
    return replace(env_cfg, seed=seed), replace(train_cfg, seed=seed)


def _cmd_train(spec: RunSpec) -> int:
    env_cfg, train_cfg, query = load_config(spec.config)
    for seed in spec.seeds:
        e, t = _seeded(env_cfg, train_cfg, seed)
        csv_path = _train_one(e, t, query, Path(spec.out), f"seed{seed}")
        print(f"train: wrote {csv_path}")
    return 0


def _cmd_eval(spec: RunSpec) -> int:
    if not spec.checkpoint:
        raise HarnessError("eval: --checkpoint is required")
    env_cfg, train_cfg, query = load_config(spec.config)
    seed = spec.seeds[0]
    e, t = _seeded(env_cfg, train_cfg, seed)
    trainer = Trainer(e, t, config_hash=config_hash(e, t, query))
    flat, meta = load_checkpoint(spec.checkpoint)
    if meta["names"] != trainer.store.names():
        raise HarnessError(
            "eval: checkpoint parameters do not match this configuration")
    trainer.store.load_flat(flat)
    win_rate, deaths, mean_return = trainer.evaluate()
    print(f"eval: win_rate={win_rate!r} deaths={deaths!r} return={mean_return!r} "
          f"episodes={t.eval_episodes} seed={seed}")
    return 0


def _cmd_verify(spec: RunSpec) -> int:
    if not spec.log:
        raise HarnessError("verify: --log is required")
    env_cfg, train_cfg, query = load_config(spec.config)
    cert = certify_policy(spec.log, query)
    report = format_certificate(cert, query)
    out_dir = Path(spec.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "certificate.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    return 0


def _cmd_ablate_gamma_b(spec: RunSpec) -> int:
    env_cfg, train_cfg, query = load_config(spec.config)
    seed = spec.seeds[0]
    for value in GAMMA_B_SWEEP:
        e, t = _seeded(env_cfg, train_cfg, seed)
        t = replace(t, gamma_b=value)
        csv_path = _train_one(e, t, query, Path(spec.out), f"gamma_b_{value:g}")
        print(f"ablate-gamma-b: wrote {csv_path}")
    return 0


def _cmd_ablate_beta(spec: RunSpec) -> int:
    env_cfg, train_cfg, query = load_config(spec.config)
    seed = spec.seeds[0]
    for value in BETA_Q_SWEEP:
        e, t = _seeded(env_cfg, train_cfg, seed)
        t = replace(t, beta_q=value, beta_b=round(1.0 - value, 12))
        csv_path = _train_one(e, t, query, Path(spec.out), f"beta_q_{value:g}")
        print(f"ablate-beta: wrote {csv_path}")
    return 0


SMOKE_CONFIG = """\
[env]
env_type = battle
grid_width = 5
grid_height = 3
n_allies = 2
n_enemies = 2
ally_hp = 3
enemy_hp = 1
max_steps = 10

[train]
hidden_dim = 8
rnn_hidden_dim = 8
embed_dim = 8
n_quantiles = 3
batch_size = 2
epochs = 6
eval_interval = 3
eval_episodes = 2
epsilon_decay_steps = 60

[certify]
n_samples = 10
"""


def _cmd_smoke(spec: RunSpec) -> int:
    out_dir = Path(spec.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_path = out_dir / "smoke_config.ini"
    config_path.write_text(SMOKE_CONFIG, encoding="utf-8")
    env_cfg, train_cfg, query = load_config(config_path, environ={})
    seed = spec.seeds[0]
    e, t = _seeded(env_cfg, train_cfg, seed)
    csv_path = _train_one(e, t, query, out_dir, "smoke")
    rows = read_metrics(csv_path)
    if not rows:
        raise HarnessError("smoke: training produced no metrics rows")
    cert = certify_policy(out_dir / "smoke_trajectories.txt", query)
    (out_dir / "certificate.txt").write_text(
        format_certificate(cert, query), encoding="utf-8")
    print(f"smoke: ok ({len(rows)} metrics rows, epsilon={cert.epsilon:.4f})")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "verify": _cmd_verify,
    "ablate-gamma-b": _cmd_ablate_gamma_b,
    "ablate-beta": _cmd_ablate_beta,
    "smoke": _cmd_smoke,
}


def run_command(spec: RunSpec) -> int:
    if spec.command not in _COMMANDS:
        raise HarnessError(f"unknown command {spec.command!r}")
    if spec.command != "smoke" and spec.config is None:
        raise HarnessError(f"{spec.command}: --config is required")
    if spec.config is not None and not Path(spec.config).exists():
        raise HarnessError(f"config file not found: {spec.config}")
    if not spec.seeds:
        raise HarnessError("seed list must not be empty")
    return _COMMANDS[spec.command](spec)


def _parse_seeds(raw: str) -> list[int]:
    try:
        return [int(s) for s in raw.split(",") if s.strip() != ""]
    except ValueError:
        raise HarnessError(f"cannot parse seed list {raw!r}") from None


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="marlbarrier",
        description="Cooperative quantile-return training with a casualty "
                    "barrier constraint and scenario-based certification.",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seeds", default="0", help="comma-separated seed list")
    parser.add_argument("--checkpoint", default=None,
                        help="checkpoint file (eval)")
    parser.add_argument("--log", default=None, help="trajectory log (verify)")
    args = parser.parse_args(argv)
    try:
        spec = RunSpec(command=args.command, config=args.config, out=args.out,
                       seeds=_parse_seeds(args.seeds),
                       checkpoint=args.checkpoint, log=args.log)
        return run_command(spec)
    except (HarnessError, EnvError, DiffError, CertifyError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
