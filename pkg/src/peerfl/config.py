"""Experiment configuration: JSON in, validated dataclass out.

Unknown keys are rejected (typos must not silently fall back to defaults) and
every error message carries the offending key path. ``parse_config`` also
accepts a result manifest (the dict under its "config" key), so a finished
run can be replayed from its own manifest.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

__all__ = ["ConfigError", "DatasetConfig", "ExperimentConfig", "parse_config", "apply_overrides"]

PROTOCOLS = (
    "dfml",
    "dec_fedavg",
    "dec_fedprox",
    "dec_heterofl",
    "dec_fedrolex",
    "dec_feddropout",
    "def_kt",
    "dec_fml",
)
PT_PROTOCOLS = ("dec_heterofl", "dec_fedrolex", "dec_feddropout")

# width-list presets: one homogeneous family, one 2x-rate ladder (nested, for
# the partial-training schemes), one varied-depth family
WIDTH_PRESETS: dict[str, list[list[int]]] = {
    "h0": [[32, 64]],
    "h1": [[64, 128], [32, 64], [16, 32], [8, 16], [4, 8]],
    "h2": [
        [32, 64, 128, 256],
        [32, 64, 128],
        [32, 64],
        [16, 32, 64],
        [8, 16, 32, 64],
    ],
}


class ConfigError(ValueError):
    """Configuration rejected; message carries the key path."""


@dataclass
class DatasetConfig:
    source: str = "synth"            # synth | idx | csv
    num_classes: int = 6
    dim: int = 16
    per_class: int = 200
    spread: float = 1.0
    test_per_class: int = 100
    partition: str = "dirichlet"     # iid | dirichlet
    dirichlet_beta: float = 0.1
    holdout_fraction: float | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_csv: str | None = None
    test_csv: str | None = None


@dataclass
class ExperimentConfig:
    clients: int
    rounds: int
    name: str = "run"
    seed: int = 0
    sender_fraction: float = 0.5
    local_epochs: int = 1
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    temperature: float = 1.0
    loss: str = "wsm"                        # ce | wsm | ace
    protocol: str = "dfml"
    K: int = 10                              # mutual-learning epochs at aggregation
    weighting: str = "size_weighted"         # size_weighted | vanilla_average
    transfer: str = "mutual"                 # mutual | vanilla
    peak_updates: int | str = "auto"         # "auto" or a positive int
    mu: float = 1.0                          # proximal strength (dec_fedprox)
    defkt_alpha: float = 0.5
    fml_alpha: float = 0.5
    meme_widths: list[int] = field(default_factory=lambda: [32, 64])
    scheduler_mode: str = "cyclic"           # cyclic | fixed:<value>
    alpha_min: float = 0.0
    alpha_max: float = 1.0
    initial_period: int = 10
    period_growth: str = "x2"                # x<m> | +<a>
    component_mode: str = "opposed"
    cycle_shape: str = "rise"                # rise | rise_fall
    topology: str = "mesh"                   # mesh | bridged
    aggregator_mode: str = "rotate"          # rotate | fixed:<id>
    eval_stride: int = 1
    widths: list[list[int]] = field(default_factory=lambda: list(WIDTH_PRESETS["h2"]))
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # -- resolved knobs ----------------------------------------------------
    def growth_rule(self) -> tuple[str, float]:
        """Parse period_growth into (kind, amount)."""
        g = self.period_growth
        try:
            if g.startswith("x"):
                return "mul", float(g[1:])
            if g.startswith("+"):
                return "add", float(g[1:])
        except ValueError:
            pass
        raise ConfigError(f"period_growth: expected 'x<m>' or '+<a>', got {g!r}")

    def fixed_alpha(self) -> float | None:
        """The constant alpha for scheduler_mode 'fixed:<v>', else None."""
        if self.scheduler_mode == "cyclic":
            return None
        value = float(self.scheduler_mode.split(":", 1)[1])
        return value

    def fixed_aggregator(self) -> int | None:
        if self.aggregator_mode == "rotate":
            return None
        return int(self.aggregator_mode.split(":", 1)[1])

    def resolved_peak_updates(self, num_senders: int) -> int:
        """m=1 for majority participation, else about one cycle of coverage."""
        if self.peak_updates != "auto":
            return int(self.peak_updates)
        if self.sender_fraction >= 0.5 or num_senders == 0:
            return 1
        return max(1, round(self.clients / num_senders))


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------

def _expect(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _as_int(value: Any, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    return value


def _as_num(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    return float(value)


def _as_str(value: Any, path: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _resolve_widths(value: Any) -> list[list[int]]:
    if isinstance(value, str):
        if value not in WIDTH_PRESETS:
            raise ConfigError(
                f"widths: unknown preset {value!r} (known: {', '.join(WIDTH_PRESETS)})"
            )
        return [list(w) for w in WIDTH_PRESETS[value]]
    if not isinstance(value, list) or not value:
        raise ConfigError("widths: expected a preset name or a non-empty list of width lists")
    out = []
    for i, wl in enumerate(value):
        if not isinstance(wl, list) or not wl:
            raise ConfigError(f"widths[{i}]: expected a non-empty list of ints")
        for w in wl:
            if isinstance(w, bool) or not isinstance(w, int) or w < 1:
                raise ConfigError(f"widths[{i}]: widths must be positive integers, got {w!r}")
        out.append([int(w) for w in wl])
    return out


def _build_dataset(raw: Any) -> DatasetConfig:
    if not isinstance(raw, dict):
        raise ConfigError("dataset: expected an object")
    known = {f.name for f in dataclasses.fields(DatasetConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"dataset: unknown key(s) {sorted(unknown)}")
    ds = DatasetConfig(**raw)
    _expect(ds.source in ("synth", "idx", "csv"), "dataset.source", f"unknown source {ds.source!r}")
    _expect(_as_int(ds.num_classes, "dataset.num_classes") >= 2, "dataset.num_classes", "must be >= 2")
    _expect(_as_int(ds.dim, "dataset.dim") >= 1, "dataset.dim", "must be >= 1")
    _expect(_as_int(ds.per_class, "dataset.per_class") >= 1, "dataset.per_class", "must be >= 1")
    _expect(_as_num(ds.spread, "dataset.spread") > 0, "dataset.spread", "must be > 0")
    _expect(_as_int(ds.test_per_class, "dataset.test_per_class") >= 1, "dataset.test_per_class", "must be >= 1")
    _expect(ds.partition in ("iid", "dirichlet"), "dataset.partition", f"unknown partition {ds.partition!r}")
    _expect(_as_num(ds.dirichlet_beta, "dataset.dirichlet_beta") > 0, "dataset.dirichlet_beta", "must be > 0")
    if ds.holdout_fraction is not None:
        _expect(
            0.0 < _as_num(ds.holdout_fraction, "dataset.holdout_fraction") < 1.0,
            "dataset.holdout_fraction",
            "must lie in (0, 1)",
        )
    if ds.source == "idx":
        _expect(ds.train_images is not None and ds.train_labels is not None,
                "dataset", "idx source needs train_images and train_labels")
        if ds.holdout_fraction is None:
            _expect(ds.test_images is not None and ds.test_labels is not None,
                    "dataset", "idx source needs test files or holdout_fraction")
    if ds.source == "csv":
        _expect(ds.train_csv is not None, "dataset", "csv source needs train_csv")
        if ds.holdout_fraction is None:
            _expect(ds.test_csv is not None, "dataset", "csv source needs test_csv or holdout_fraction")
    return ds


def _validate(cfg: ExperimentConfig) -> ExperimentConfig:
    _expect(_as_int(cfg.clients, "clients") >= 2, "clients", "must be >= 2")
    _expect(_as_int(cfg.rounds, "rounds") >= 1, "rounds", "must be >= 1")
    _expect(_as_int(cfg.seed, "seed") >= 0, "seed", "must be >= 0")
    _expect(0.0 < _as_num(cfg.sender_fraction, "sender_fraction") <= 1.0,
            "sender_fraction", "must lie in (0, 1]")
    _expect(_as_int(cfg.local_epochs, "local_epochs") >= 0, "local_epochs", "must be >= 0")
    _expect(_as_int(cfg.batch_size, "batch_size") >= 1, "batch_size", "must be >= 1")
    _expect(_as_num(cfg.lr, "lr") >= 0, "lr", "must be >= 0")
    _expect(0.0 <= _as_num(cfg.momentum, "momentum") < 1.0, "momentum", "must lie in [0, 1)")
    _expect(_as_num(cfg.weight_decay, "weight_decay") >= 0, "weight_decay", "must be >= 0")
    _expect(_as_num(cfg.temperature, "temperature") > 0, "temperature", "must be > 0")
    _expect(cfg.loss in ("ce", "wsm", "ace"), "loss", f"unknown loss {cfg.loss!r}")
    _expect(cfg.protocol in PROTOCOLS, "protocol", f"unknown protocol {cfg.protocol!r}")
    _expect(_as_int(cfg.K, "K") >= 0, "K", "must be >= 0")
    _expect(cfg.weighting in ("size_weighted", "vanilla_average"),
            "weighting", f"unknown weighting {cfg.weighting!r}")
    _expect(cfg.transfer in ("mutual", "vanilla"), "transfer", f"unknown transfer {cfg.transfer!r}")
    if cfg.peak_updates != "auto":
        _expect(_as_int(cfg.peak_updates, "peak_updates") >= 1,
                "peak_updates", "must be 'auto' or a positive integer")
    _expect(_as_num(cfg.mu, "mu") >= 0, "mu", "must be >= 0")
    _expect(0.0 <= _as_num(cfg.defkt_alpha, "defkt_alpha") <= 1.0, "defkt_alpha", "must lie in [0, 1]")
    _expect(0.0 <= _as_num(cfg.fml_alpha, "fml_alpha") <= 1.0, "fml_alpha", "must lie in [0, 1]")
    _expect(isinstance(cfg.meme_widths, list) and cfg.meme_widths
            and all(isinstance(w, int) and not isinstance(w, bool) and w >= 1 for w in cfg.meme_widths),
            "meme_widths", "must be a non-empty list of positive ints")

    _as_str(cfg.scheduler_mode, "scheduler_mode")
    if cfg.scheduler_mode != "cyclic":
        _expect(cfg.scheduler_mode.startswith("fixed:"), "scheduler_mode",
                f"expected 'cyclic' or 'fixed:<value>', got {cfg.scheduler_mode!r}")
        try:
            v = float(cfg.scheduler_mode.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"scheduler_mode: bad fixed value in {cfg.scheduler_mode!r}") from None
        _expect(0.0 <= v <= 1.0, "scheduler_mode", "fixed alpha must lie in [0, 1]")
    _expect(0.0 <= _as_num(cfg.alpha_min, "alpha_min") <= _as_num(cfg.alpha_max, "alpha_max") <= 1.0,
            "alpha_min/alpha_max", "need 0 <= alpha_min <= alpha_max <= 1")
    _expect(_as_int(cfg.initial_period, "initial_period") >= 1, "initial_period", "must be >= 1")
    cfg.growth_rule()  # raises on a malformed rule
    _expect(cfg.component_mode in ("opposed", "supervision_only", "distillation_only", "common"),
            "component_mode", f"unknown component mode {cfg.component_mode!r}")
    _expect(cfg.cycle_shape in ("rise", "rise_fall"), "cycle_shape",
            f"unknown cycle shape {cfg.cycle_shape!r}")
    _expect(cfg.topology in ("mesh", "bridged"), "topology", f"unknown topology {cfg.topology!r}")

    _as_str(cfg.aggregator_mode, "aggregator_mode")
    if cfg.aggregator_mode != "rotate":
        _expect(cfg.aggregator_mode.startswith("fixed:"), "aggregator_mode",
                f"expected 'rotate' or 'fixed:<id>', got {cfg.aggregator_mode!r}")
        try:
            fid = int(cfg.aggregator_mode.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"aggregator_mode: bad id in {cfg.aggregator_mode!r}") from None
        _expect(0 <= fid < cfg.clients, "aggregator_mode", f"id {fid} out of range")
    _expect(_as_int(cfg.eval_stride, "eval_stride") >= 1, "eval_stride", "must be >= 1")

    # protocol-specific architecture requirements
    if cfg.protocol == "def_kt":
        distinct = {tuple(w) for w in cfg.widths}
        _expect(len(distinct) == 1, "widths",
                "def_kt needs a homogeneous architecture (one width list)")
    if cfg.protocol in PT_PROTOCOLS:
        depth = len(cfg.widths[0])
        _expect(all(len(w) == depth for w in cfg.widths), "widths",
                "partial-training schemes need equal-depth width lists")
        # any subset of participants must have a coverage order, so the lists
        # must form a nested chain, not merely fit inside the single largest
        chain = sorted(cfg.widths, key=sum)
        for a, b in zip(chain, chain[1:]):
            _expect(all(x <= y for x, y in zip(a, b)), "widths",
                    "partial-training width lists must form a nested chain")
    return cfg


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------

def parse_config(source: str | Path | dict, overrides: list[str] | None = None) -> ExperimentConfig:
    """Load and validate a config from a JSON file path or an already-loaded dict.

    A manifest produced by a previous run (with the config under a "config"
    key) is accepted as-is, which makes reruns trivial.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    else:
        raw = source
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    if "config" in raw and "clients" not in raw:
        raw = raw["config"]  # result manifest
        if not isinstance(raw, dict):
            raise ConfigError("config: manifest 'config' entry must be an object")
    raw = dict(raw)
    if overrides:
        raw = apply_overrides(raw, overrides)

    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)}")
    for req in ("clients", "rounds"):
        if req not in raw:
            raise ConfigError(f"{req}: required key missing")

    ds_raw = raw.pop("dataset", None)
    widths_raw = raw.pop("widths", None)
    cfg = ExperimentConfig(**raw)
    if ds_raw is not None:
        cfg.dataset = _build_dataset(ds_raw)
    if widths_raw is not None:
        cfg.widths = _resolve_widths(widths_raw)
    return _validate(cfg)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` overrides (dots descend into nested objects).

    Values are parsed as JSON; anything that fails to parse is kept as a raw
    string, so ``--override loss=wsm`` works without inner quotes.
    """
    out = json.loads(json.dumps(raw))  # deep copy, JSON types only
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, _, text = item.partition("=")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r}: {part} is not an object")
            node = nxt
        node[parts[-1]] = value
    return out
