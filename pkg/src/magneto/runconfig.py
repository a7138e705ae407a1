"""Flat ``key = value`` run configuration merging model, training, TAD and synthetic settings."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Dict, Iterable, Mapping, Optional, Tuple

from .config import ModelConfig, SyntheticConfig, TadConfig, TrainConfig
from .errors import ConfigurationError

# top-level seed feeds every random stream, so the per-section seeds are not keys
_SECTIONS = {
    "model": (ModelConfig, ()),
    "train": (TrainConfig, ("seed", "tad")),
    "tad": (TadConfig, ()),
    "synth": (SyntheticConfig, ("seed",)),
}
_TOP = {
    "seed": int,
    "kind": str,
    "val_fraction": float,
    "outliers_per_item": int,
    "gradcheck.eps": float,
    "gradcheck.tol": float,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tad: TadConfig = field(default_factory=TadConfig)
    synth: SyntheticConfig = field(default_factory=SyntheticConfig)
    seed: int = 0
    kind: str = "MAGNETO"
    val_fraction: float = 0.2
    outliers_per_item: int = 0
    gradcheck_eps: float = 1e-5
    gradcheck_tol: float = 1e-4

    def training(self) -> TrainConfig:
        """Training settings with the run seed and TAD coefficients folded in."""
        return replace(self.train, seed=self.seed, tad=self.tad)

    def synthetic(self) -> SyntheticConfig:
        return replace(self.synth, seed=self.seed)


def known_keys():
    keys = list(_TOP)
    for section, (cls, hidden) in _SECTIONS.items():
        keys += [f"{section}.{f.name}" for f in fields(cls) if f.name not in hidden]
    return keys


def _field_types(cls):
    return {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}


def _convert(key: str, raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment.  Returns raw strings."""
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}, line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known_keys():
            raise ConfigurationError(f"{source}, line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigurationError(f"{source}, line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config_file(path) -> Dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), str(path))


def parse_assignments(items: Iterable[str]) -> Dict[str, str]:
    """``KEY=VALUE`` strings as given on the command line."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (p.strip() for p in item.split("=", 1))
        if key not in known_keys():
            raise ConfigurationError(f"unknown key {key!r}")
        out[key] = value
    return out


def build_run_config(*layers: Mapping[str, str], base: Optional[RunConfig] = None) -> RunConfig:
    """Apply raw-string layers in order (later wins) on top of ``base``."""
    merged: Dict[str, str] = {}
    for layer in layers:
        merged.update({k: str(v) for k, v in layer.items()})
    cfg = base or RunConfig()
    sections = {name: {} for name in _SECTIONS}
    top = {}
    for key, raw in merged.items():
        if key in _TOP:
            top[key.replace(".", "_")] = _convert(key, raw, _TOP[key])
            continue
        section, name = key.split(".", 1)
        cls = _SECTIONS[section][0]
        sections[section][name] = _convert(key, raw, _field_types(cls)[name])
    try:
        return replace(
            cfg,
            model=replace(cfg.model, **sections["model"]),
            train=replace(cfg.train, **sections["train"]),
            tad=replace(cfg.tad, **sections["tad"]),
            synth=replace(cfg.synth, **sections["synth"]),
            **top,
        )
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def as_mapping(cfg: RunConfig) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for key in known_keys():
        if key in _TOP:
            out[key] = getattr(cfg, key.replace(".", "_"))
        else:
            section, name = key.split(".", 1)
            out[key] = getattr(getattr(cfg, section), name)
    return out


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig, extra: Tuple[Tuple[str, str], ...] = ()) -> str:
    """Canonical text form; reading it back yields an equal RunConfig."""
    lines = ["# effective configuration"]
    lines += [f"# {k}: {v}" for k, v in extra]
    lines += [f"{k} = {_format(v)}" for k, v in as_mapping(cfg).items()]
    return "\n".join(lines) + "\n"
