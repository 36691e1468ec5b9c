"""Run configuration: a strict, human-editable YAML tree.

Every key is validated with an explicit field path before round 1; unknown
keys are rejected so typos fail fast instead of silently using defaults.
``parse_config`` and ``config_to_dict`` round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from .aggregation import AggregatorKind, HorusConfig
from .attacks import AttackConfig, AttackKind, PerturbationDirection
from .detection import MatrixSource, Percentile, TopM
from .errors import ConfigurationError
from .sim import TaskConfig

__all__ = [
    "ClientTemplate",
    "RunConfig",
    "parse_config",
    "load_config",
    "config_to_dict",
    "AGGREGATOR_DEFAULTS",
]

# Parameter defaults applied when a sweep names an aggregator without params.
AGGREGATOR_DEFAULTS: dict[str, dict[str, Any]] = {
    "horus": {},
    "fedavg": {},
    "krum": {"f": 2},
    "multi_krum": {"f": 2, "m": 4},
    "median": {},
    "trimmed_mean": {"beta": 0.2},
}


@dataclass(frozen=True)
class ClientTemplate:
    """Expands to ``count`` clients sharing one architecture.

    ``participation_rate=None`` draws each client's rate from the default
    pool {1.0, 0.75, 0.5} at setup time.
    """

    count: int
    hidden_width: int
    participation_rate: float | None = None

    def __post_init__(self):
        if self.count < 1:
            raise ConfigurationError(f"client count must be >= 1, got {self.count}")
        if self.hidden_width < 1:
            raise ConfigurationError(
                f"hidden_width must be >= 1, got {self.hidden_width}"
            )
        if self.participation_rate is not None and not 0.0 < self.participation_rate <= 1.0:
            raise ConfigurationError(
                f"participation_rate must be in (0, 1], got {self.participation_rate}"
            )


@dataclass(frozen=True)
class RunConfig:
    task: TaskConfig
    clients: tuple[ClientTemplate, ...]
    aggregator: AggregatorKind
    detection: HorusConfig
    attack: AttackConfig
    rounds: int
    lr: float = 0.3
    epochs: int = 1
    batch: int = 256
    rank: int = 8
    warmup_epochs: int = 10
    warmup_lr: float | None = None
    workers: int = 0
    master_seed: int = 0
    output_dir: str = "runs/out"

    def expand_clients(self) -> list[tuple[int, int, float | None]]:
        """(arch_id, hidden_width, participation_rate) per client, in id order."""
        out = []
        for arch_id, tpl in enumerate(self.clients):
            out.extend(
                (arch_id, tpl.hidden_width, tpl.participation_rate)
                for _ in range(tpl.count)
            )
        return out

    @property
    def num_clients(self) -> int:
        return sum(t.count for t in self.clients)

    def validate(self) -> None:
        n = self.num_clients
        if n < 1:
            raise ConfigurationError("clients: at least one client required")
        if self.rounds < 1:
            raise ConfigurationError(f"rounds must be >= 1, got {self.rounds}")
        if self.lr < 0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch < 1:
            raise ConfigurationError(f"batch must be >= 1, got {self.batch}")
        if self.rank < 1:
            raise ConfigurationError(f"rank must be >= 1, got {self.rank}")
        if self.warmup_epochs < 0:
            raise ConfigurationError("warmup_epochs must be >= 0")
        if self.workers < 0:
            raise ConfigurationError("workers must be >= 0")
        bad = [a for a in self.attack.attacker_ids if not 0 <= a < n]
        if bad:
            raise ConfigurationError(
                f"attack.attacker_ids: ids {sorted(bad)} outside [0, {n})"
            )
        self.aggregator.check_feasible(n)
        if not 0.0 <= self.detection.lam <= 1.0:
            raise ConfigurationError(
                f"detection.lambda must be in [0, 1], got {self.detection.lam}"
            )
        if self.detection.k < 1:
            raise ConfigurationError(f"detection.k must be >= 1, got {self.detection.k}")


def _reject_unknown(d: Mapping, allowed: set[str], path: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigurationError(
            f"{path}: unknown key(s) {sorted(unknown)}; allowed: {sorted(allowed)}"
        )


_MISSING = object()


def _get(d: Mapping, key: str, path: str, kind, default=_MISSING):
    if key not in d:
        if default is _MISSING:
            raise ConfigurationError(f"{path}.{key}: required key missing")
        return default
    val = d[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if not isinstance(val, kind) or (isinstance(val, bool) and kind is not bool):
        raise ConfigurationError(
            f"{path}.{key}: expected {getattr(kind, '__name__', kind)}, "
            f"got {type(val).__name__} ({val!r})"
        )
    return val


def _parse_task(d: Mapping, path: str) -> TaskConfig:
    _reject_unknown(d, {"feature_dim", "num_classes", "samples_per_class",
                        "class_separation", "noise_scale", "dirichlet_alpha",
                        "signal_dim", "seed"}, path)
    signal_dim = d.get("signal_dim", 5)
    if signal_dim is not None:
        signal_dim = _get(d, "signal_dim", path, int, 5)
    try:
        return TaskConfig(
            feature_dim=_get(d, "feature_dim", path, int, 64),
            num_classes=_get(d, "num_classes", path, int, 10),
            samples_per_class=_get(d, "samples_per_class", path, int, 4000),
            class_separation=_get(d, "class_separation", path, float, 3.5),
            noise_scale=_get(d, "noise_scale", path, float, 0.8),
            dirichlet_alpha=_get(d, "dirichlet_alpha", path, float, 0.3),
            signal_dim=signal_dim,
            seed=_get(d, "seed", path, int, 0),
        )
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def _parse_clients(items, path: str) -> tuple[ClientTemplate, ...]:
    if not isinstance(items, list) or not items:
        raise ConfigurationError(f"{path}: expected a non-empty list of templates")
    out = []
    for i, item in enumerate(items):
        p = f"{path}[{i}]"
        if not isinstance(item, Mapping):
            raise ConfigurationError(f"{p}: expected a mapping")
        _reject_unknown(item, {"count", "hidden_width", "participation_rate"}, p)
        rate = item.get("participation_rate")
        if rate is not None:
            rate = _get(item, "participation_rate", p, float)
        try:
            out.append(
                ClientTemplate(
                    count=_get(item, "count", p, int),
                    hidden_width=_get(item, "hidden_width", p, int),
                    participation_rate=rate,
                )
            )
        except ConfigurationError as exc:
            raise ConfigurationError(f"{p}: {exc}") from None
    return tuple(out)


def _parse_aggregator(d, path: str) -> AggregatorKind:
    if isinstance(d, str):
        d = {"kind": d, **AGGREGATOR_DEFAULTS.get(d, {})}
    if not isinstance(d, Mapping):
        raise ConfigurationError(f"{path}: expected a name or mapping with 'kind'")
    _reject_unknown(d, {"kind", "f", "m", "beta"}, path)
    name = _get(d, "kind", path, str)
    try:
        return AggregatorKind(
            name=name,
            f=_get(d, "f", path, int, AGGREGATOR_DEFAULTS.get(name, {}).get("f", 0)),
            m=_get(d, "m", path, int, AGGREGATOR_DEFAULTS.get(name, {}).get("m", 1)),
            beta=_get(d, "beta", path, float,
                      AGGREGATOR_DEFAULTS.get(name, {}).get("beta", 0.0)),
        )
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def _parse_detection(d: Mapping, path: str) -> HorusConfig:
    _reject_unknown(d, {"lambda", "k", "mode", "source"}, path)
    mode_spec = d.get("mode", {"percentile": 95.0})
    if not isinstance(mode_spec, Mapping) or len(mode_spec) != 1:
        raise ConfigurationError(
            f"{path}.mode: expected exactly one of {{percentile: p}} or {{top_m: m}}"
        )
    ((mode_name, mode_val),) = mode_spec.items()
    if mode_name == "percentile":
        if not isinstance(mode_val, (int, float)) or not 0 <= mode_val <= 100:
            raise ConfigurationError(f"{path}.mode.percentile: expected p in [0, 100]")
        mode = Percentile(float(mode_val))
    elif mode_name == "top_m":
        if not isinstance(mode_val, int) or mode_val < 0:
            raise ConfigurationError(f"{path}.mode.top_m: expected integer >= 0")
        mode = TopM(mode_val)
    else:
        raise ConfigurationError(f"{path}.mode: unknown mode {mode_name!r}")
    source = _get(d, "source", path, str, "a")
    if source not in ("a", "b"):
        raise ConfigurationError(f"{path}.source: expected 'a' or 'b', got {source!r}")
    return HorusConfig(
        lam=_get(d, "lambda", path, float, 0.5),
        k=_get(d, "k", path, int, 5),
        mode=mode,
        source=MatrixSource(source),
    )


def _parse_attack(d: Mapping, path: str) -> AttackConfig:
    _reject_unknown(d, {"kind", "start_round", "attacker_ids", "z_override",
                        "gamma_init", "search_iters", "direction", "knowledge"}, path)
    kind_name = _get(d, "kind", path, str, "none")
    try:
        kind = AttackKind(kind_name)
    except ValueError:
        raise ConfigurationError(
            f"{path}.kind: unknown attack {kind_name!r}; "
            f"expected one of {[k.value for k in AttackKind]}"
        ) from None
    ids = d.get("attacker_ids", [])
    if not isinstance(ids, list) or not all(isinstance(a, int) for a in ids):
        raise ConfigurationError(f"{path}.attacker_ids: expected a list of integers")
    z = d.get("z_override")
    if z is not None:
        z = _get(d, "z_override", path, float)
    direction = _get(d, "direction", path, str, "neg_std")
    try:
        direction = PerturbationDirection(direction)
    except ValueError:
        raise ConfigurationError(
            f"{path}.direction: expected one of "
            f"{[p.value for p in PerturbationDirection]}, got {direction!r}"
        ) from None
    try:
        return AttackConfig(
            kind=kind,
            start_round=_get(d, "start_round", path, int, 1),
            attacker_ids=frozenset(ids),
            z_override=z,
            gamma_init=_get(d, "gamma_init", path, float, 1.0),
            search_iters=_get(d, "search_iters", path, int, 20),
            direction=direction,
            knowledge=_get(d, "knowledge", path, str, "own"),
        )
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


_TOP_KEYS = {"task", "clients", "aggregator", "detection", "attack", "rounds",
             "lr", "epochs", "batch", "rank", "warmup_epochs", "warmup_lr",
             "workers", "master_seed", "output_dir"}


def parse_config(data: Mapping, *, path: str = "config") -> RunConfig:
    """Build and validate a RunConfig from a parsed YAML/JSON mapping."""
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"{path}: expected a mapping at the top level")
    _reject_unknown(data, _TOP_KEYS, path)
    for key in ("task", "detection", "attack"):
        if key in data and not isinstance(data[key], Mapping):
            raise ConfigurationError(f"{path}.{key}: expected a mapping")
    warmup_lr = data.get("warmup_lr")
    if warmup_lr is not None:
        warmup_lr = _get(data, "warmup_lr", path, float)
    cfg = RunConfig(
        task=_parse_task(data.get("task", {}), f"{path}.task"),
        clients=_parse_clients(data.get("clients"), f"{path}.clients"),
        aggregator=_parse_aggregator(data.get("aggregator", "horus"),
                                     f"{path}.aggregator"),
        detection=_parse_detection(data.get("detection", {}), f"{path}.detection"),
        attack=_parse_attack(data.get("attack", {}), f"{path}.attack"),
        rounds=_get(data, "rounds", path, int),
        lr=_get(data, "lr", path, float, 0.3),
        epochs=_get(data, "epochs", path, int, 1),
        batch=_get(data, "batch", path, int, 256),
        rank=_get(data, "rank", path, int, 8),
        warmup_epochs=_get(data, "warmup_epochs", path, int, 10),
        warmup_lr=warmup_lr,
        workers=_get(data, "workers", path, int, 0),
        master_seed=_get(data, "master_seed", path, int, 0),
        output_dir=_get(data, "output_dir", path, str, "runs/out"),
    )
    cfg.validate()
    return cfg


def load_config(
    path: str | Path,
    *,
    seed_override: int | None = None,
    output_override: str | None = None,
) -> RunConfig:
    """Parse a YAML config file, applying CLI overrides before validation."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: YAML parse error: {exc}") from None
    if data is None:
        raise ConfigurationError(f"{path}: empty configuration file")
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    if seed_override is not None:
        data["master_seed"] = seed_override
    if output_override is not None:
        data["output_dir"] = output_override
    return parse_config(data, path=str(path))


def config_to_dict(cfg: RunConfig) -> dict:
    """Serialize a RunConfig back to the mapping form parse_config accepts."""
    mode = cfg.detection.mode
    mode_spec = (
        {"percentile": mode.p} if isinstance(mode, Percentile) else {"top_m": mode.m}
    )
    out = {
        "task": {
            "feature_dim": cfg.task.feature_dim,
            "num_classes": cfg.task.num_classes,
            "samples_per_class": cfg.task.samples_per_class,
            "class_separation": cfg.task.class_separation,
            "noise_scale": cfg.task.noise_scale,
            "dirichlet_alpha": cfg.task.dirichlet_alpha,
            "signal_dim": cfg.task.signal_dim,
            "seed": cfg.task.seed,
        },
        "clients": [
            {
                "count": t.count,
                "hidden_width": t.hidden_width,
                **(
                    {"participation_rate": t.participation_rate}
                    if t.participation_rate is not None
                    else {}
                ),
            }
            for t in cfg.clients
        ],
        "aggregator": {
            "kind": cfg.aggregator.name,
            "f": cfg.aggregator.f,
            "m": cfg.aggregator.m,
            "beta": cfg.aggregator.beta,
        },
        "detection": {
            "lambda": cfg.detection.lam,
            "k": cfg.detection.k,
            "mode": mode_spec,
            "source": cfg.detection.source.value,
        },
        "attack": {
            "kind": cfg.attack.kind.value,
            "start_round": cfg.attack.start_round,
            "attacker_ids": sorted(cfg.attack.attacker_ids),
            "gamma_init": cfg.attack.gamma_init,
            "search_iters": cfg.attack.search_iters,
            "direction": cfg.attack.direction.value,
            "knowledge": cfg.attack.knowledge,
            **(
                {"z_override": cfg.attack.z_override}
                if cfg.attack.z_override is not None
                else {}
            ),
        },
        "rounds": cfg.rounds,
        "lr": cfg.lr,
        "epochs": cfg.epochs,
        "batch": cfg.batch,
        "rank": cfg.rank,
        "warmup_epochs": cfg.warmup_epochs,
        "workers": cfg.workers,
        "master_seed": cfg.master_seed,
        "output_dir": cfg.output_dir,
    }
    if cfg.warmup_lr is not None:
        out["warmup_lr"] = cfg.warmup_lr
    return out
