"""Run configuration: sectioned key/value files, profiles and a stable hash."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

SECTIONS: dict[str, tuple[str, ...]] = {
    "grid": ("edge_len_m",),
    "walk": ("walks_per_node", "walk_len", "return_p", "inout_q", "window", "negatives",
             "walk_epochs", "walk_lr"),
    "model": ("d", "heads", "ff_hidden", "encoder_layers", "levels", "interaction", "fusion_renorm",
              "deconv_squash", "conv_activation", "sigma_init", "masks", "ratios", "p_successive",
              "p_gamma_min", "p_gamma_max", "lam", "mu", "nu", "smooth_l1_beta"),
    "train": ("epochs", "batch_size", "lr", "lr_decay_every", "lr_decay", "tau", "seed",
              "min_len", "max_len"),
    "synth": ("synth_count", "synth_test_count", "synth_width_m", "synth_height_m", "synth_center_lon",
              "synth_center_lat", "synth_min_step_m", "synth_max_step_m"),
    "eval": ("query_count", "db_size", "db_fractions", "rho_s_grid", "rho_d_grid", "distort_std_factor",
             "embedding_metric", "eps_m", "finetune_epochs", "finetune_count"),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # grid
    edge_len_m: float = 25.0
    # cell embedding walks
    walks_per_node: int = 10
    walk_len: int = 40
    return_p: float = 1.0
    inout_q: float = 1.0
    window: int = 5
    negatives: int = 5
    walk_epochs: int = 5
    walk_lr: float = 0.025
    # model
    d: int = 256
    heads: int = 8
    ff_hidden: int = 1024
    encoder_layers: int = 1
    levels: int = 3
    interaction: str = "attention"
    fusion_renorm: bool = True
    deconv_squash: str = "clamp"
    conv_activation: str = "gelu"
    sigma_init: float = 0.5
    masks: int = 4
    ratios: tuple = (0.10, 0.15, 0.20, 0.25, 0.30)
    p_successive: float = 0.5
    p_gamma_min: float = 0.85
    p_gamma_max: float = 1.0
    lam: float = 0.05
    mu: float = 0.15
    nu: float = 0.8
    smooth_l1_beta: float = 1.0
    # training
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-4
    lr_decay_every: int = 5
    lr_decay: float = 0.5
    tau: float = 0.996
    seed: int = 0
    min_len: int = 20
    max_len: int = 200
    # synthetic data
    synth_count: int = 2000
    synth_test_count: int = 600
    synth_width_m: float = 8000.0
    synth_height_m: float = 8000.0
    synth_center_lon: float = -8.61
    synth_center_lat: float = 41.15
    synth_min_step_m: float = 40.0
    synth_max_step_m: float = 120.0
    # evaluation
    query_count: int = 1000
    db_size: int = 100000
    db_fractions: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    rho_s_grid: tuple = (0.1, 0.2, 0.3, 0.4, 0.5)
    rho_d_grid: tuple = (0.1, 0.2, 0.3, 0.4, 0.5)
    distort_std_factor: float = 0.3
    embedding_metric: str = "euclidean"
    eps_m: float = 0.0
    finetune_epochs: int = 50
    finetune_count: int = 10000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.levels not in (1, 3):
            raise ConfigError("levels must be 1 or 3")
        if self.interaction not in ("attention", "embed_concat", "none"):
            raise ConfigError("interaction must be attention|embed_concat|none")
        if self.deconv_squash not in ("clamp", "sigmoid", "none"):
            raise ConfigError("deconv_squash must be clamp|sigmoid|none")
        if self.conv_activation not in ("gelu", "none"):
            raise ConfigError("conv_activation must be gelu|none")
        if self.embedding_metric not in ("euclidean", "cosine"):
            raise ConfigError("embedding_metric must be euclidean|cosine")
        if self.d % self.heads or (2 * self.d) % self.heads:
            raise ConfigError("d must be divisible by heads")
        if self.edge_len_m <= 0:
            raise ConfigError("edge_len_m must be > 0")
        if not 0 < self.p_gamma_min <= self.p_gamma_max <= 1:
            raise ConfigError("need 0 < p_gamma_min <= p_gamma_max <= 1")
        if not 0 <= self.tau <= 1:
            raise ConfigError("tau must lie in [0, 1]")
        if min(self.lam, self.mu, self.nu) < 0:
            raise ConfigError("loss weights must be >= 0")
        if not 4 <= self.min_len <= self.max_len:
            raise ConfigError("need 4 <= min_len <= max_len")
        if not self.ratios or any(not 0 < r < 1 for r in self.ratios):
            raise ConfigError("ratios must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs >= 1 and batch_size >= 2 required")

    @property
    def effective_eps_m(self) -> float:
        return self.eps_m if self.eps_m > 0 else self.edge_len_m

    @property
    def distort_std_m(self) -> float:
        return self.distort_std_factor * self.edge_len_m

    def estimator_params(self) -> dict:
        return dict(
            d=self.d, heads=self.heads, ff_hidden=self.ff_hidden, encoder_layers=self.encoder_layers,
            levels=self.levels, interaction=self.interaction, fusion_renorm=self.fusion_renorm,
            deconv_squash=self.deconv_squash, conv_activation=self.conv_activation,
            sigma_init=self.sigma_init, masks=self.masks, ratios=tuple(self.ratios),
            p_successive=self.p_successive, p_gamma=(self.p_gamma_min, self.p_gamma_max),
            loss_weights=(self.lam, self.mu, self.nu), smooth_l1_beta=self.smooth_l1_beta,
            tau=self.tau, lr=self.lr, lr_decay_every=self.lr_decay_every, lr_decay=self.lr_decay,
            epochs=self.epochs, batch_size=self.batch_size, max_len=self.max_len,
            edge_len_m=self.edge_len_m, walks_per_node=self.walks_per_node, walk_len=self.walk_len,
            return_p=self.return_p, inout_q=self.inout_q, window=self.window,
            negatives=self.negatives, walk_epochs=self.walk_epochs, walk_lr=self.walk_lr,
            random_state=self.seed)

    # -- serialisation -----------------------------------------------------
    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        d = self.to_dict()
        for section, keys in SECTIONS.items():
            cp[section] = {k: _fmt(d[k]) for k in keys}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp[section].items()]
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())

    def replace(self, **overrides) -> "RunConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        unknown = set(overrides) - set(d)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d.update({k: coerce(k, v) for k, v in overrides.items()})
        return RunConfig(**d)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        return PROFILES["full"].replace(**values)

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.read_string(Path(path).read_text())
        values = {}
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in cp[section].items():
                if key not in SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[key] = raw
        return (base or PROFILES["full"]).replace(**values)


_FIELD_TYPES = {f.name: f.default for f in fields(RunConfig)}


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def coerce(key: str, value):
    """Parse ``value`` (string or native) to the type of field ``key``."""
    default = _FIELD_TYPES[key]
    if not isinstance(value, str):
        if isinstance(default, tuple):
            return tuple(float(x) for x in value)
        if isinstance(default, bool):
            return bool(value)
        return type(default)(value)
    s = value.strip()
    try:
        if isinstance(default, bool):
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if isinstance(default, tuple):
            return tuple(float(x) for x in s.replace("[", "").replace("]", "").split(",") if x.strip())
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
        return s
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


PROFILES: dict[str, RunConfig] = {}
PROFILES["full"] = RunConfig()
PROFILES["desk"] = RunConfig(
    edge_len_m=100.0, d=16, ff_hidden=64, epochs=5, lr=1e-3, max_len=60,
    query_count=200, db_size=500, db_fractions=(0.2, 0.4, 0.6, 0.8, 1.0),
    finetune_epochs=30, finetune_count=1000)
PROFILES["maritime"] = RunConfig(edge_len_m=10_000.0)
