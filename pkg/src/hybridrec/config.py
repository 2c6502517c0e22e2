"""Run configuration: schema, file parser and ``section.key=value`` overrides.

The grammar is documented in docs/config.md.  Every key is checked against
the schema below; unknown sections or keys are errors that carry the
offending line number.
"""
import re
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional, Sequence, Tuple

from .data import SynthConfig
from .errors import ConfigError

MODES = ("sync", "hybrid_raw", "hybrid_opt", "async")
FAULT_TARGETS = ("embedding_worker", "embedding_ps", "nn_worker")


@dataclass
class ClusterConfig:
    nn_workers: int = 4
    embedding_workers: int = 2
    ps_shards: int = 4
    transport: str = "inproc"
    listen_addr: str = "127.0.0.1:0"
    fetch_latency_ms: float = 5.0
    allreduce_latency_ms: float = 1.0


@dataclass
class ModelConfig:
    embedding_dim: int = 8
    hidden: Tuple[int, ...] = (64, 32)
    emb_optimizer: str = "adagrad"
    dense_optimizer: str = "sgd"
    ps_capacity: int = 1 << 20  # per shard
    rng_salt: int = 0
    aggregation: str = "mean"


@dataclass
class DataConfig:
    samples: int = 200_000
    groups: int = 5
    vocab: int = 100_000
    ids_min: int = 1
    ids_max: int = 4
    zipf: float = 1.1
    non_id_dim: int = 8
    label_noise: float = 0.05
    teacher_seed: int = 7
    test_fraction: float = 0.2
    data_file: str = ""

    def synth(self, latent_dim: int) -> SynthConfig:
        return SynthConfig(samples=self.samples, groups=self.groups, vocab=self.vocab, ids_min=self.ids_min,
                           ids_max=self.ids_max, zipf=self.zipf, non_id_dim=self.non_id_dim,
                           latent_dim=latent_dim, label_noise=self.label_noise, teacher_seed=self.teacher_seed)


@dataclass
class TrainConfig:
    mode: str = "hybrid_opt"
    lr: float = 0.5
    emb_lr: float = 0.05
    steps: int = 0  # 0: derive from epochs
    epochs: int = 1
    batch_size: int = 256
    staleness_cap: int = 5
    prefetch_depth: int = 4
    async_depth: int = 8
    async_average_every: int = 50
    codec: bool = False
    codec_pull: bool = True  # per direction, only read when codec is on
    codec_push: bool = True
    kappa: float = 1024.0
    seed: int = 0
    eval_every: int = 50
    eval_samples: int = 5000
    checkpoint_every: int = 200
    checkpoint_dir: str = ""
    verify_every: int = 50
    shuffle: str = "fifo"


@dataclass
class FaultSpec:
    target: str
    step: int

    def __str__(self):
        return f"{self.target}@step={self.step}"


@dataclass
class RunConfig:
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    faults: List[FaultSpec] = field(default_factory=list)

    def with_overrides(self, *pairs: str) -> "RunConfig":
        cfg = copy_config(self)
        for p in pairs:
            apply_override(cfg, p)
        return cfg

    def set(self, **kw) -> "RunConfig":
        """Copy with ``section__key=value`` replacements, e.g. ``train__mode="sync"``."""
        cfg = copy_config(self)
        for k, v in kw.items():
            section, key = k.split("__", 1)
            _assign(cfg, section, key, v, None, None)
        validate(cfg)
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["faults"] = [str(f) for f in self.faults]
        d["model"]["hidden"] = list(self.model.hidden)
        return d


SECTIONS = {"cluster": ClusterConfig, "model": ModelConfig, "data": DataConfig, "train": TrainConfig}

CHOICES = {
    ("cluster", "transport"): ("inproc", "tcp"),
    ("model", "emb_optimizer"): ("adagrad", "sgd"),
    ("model", "dense_optimizer"): ("sgd", "adam"),
    ("model", "aggregation"): ("mean", "sum"),
    ("train", "mode"): MODES,
    ("train", "shuffle"): ("fifo", "random"),
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def copy_config(cfg: RunConfig) -> RunConfig:
    return RunConfig(replace(cfg.cluster), replace(cfg.model), replace(cfg.data), replace(cfg.train),
                     [FaultSpec(f.target, f.step) for f in cfg.faults])


def _field_type(cls, key):
    for f in fields(cls):
        if f.name == key:
            return f
    return None


def _convert(raw, f, where):
    kind = type(f.default)
    try:
        if isinstance(raw, str):
            text = raw.strip()
            if kind is bool:
                low = text.lower()
                if low in _TRUE:
                    return True
                if low in _FALSE:
                    return False
                raise ValueError(f"expected a boolean, got {text!r}")
            if kind is int:
                return int(text.replace("_", ""))
            if kind is float:
                return float(text)
            if kind is tuple:
                return tuple(int(x) for x in text.split(",") if x.strip())
            return text
        if kind is float and isinstance(raw, int):
            return float(raw)
        if kind is tuple:
            return tuple(int(x) for x in raw)
        if not isinstance(raw, kind) or (kind is int and isinstance(raw, bool)):
            raise ValueError(f"expected {kind.__name__}, got {type(raw).__name__}")
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _assign(cfg: RunConfig, section: str, key: str, raw, line: Optional[int], path: Optional[str]):
    if section == "faults":
        if key != "inject":
            raise ConfigError(f"unknown key {key!r} in [faults]", line, path)
        cfg.faults.extend(parse_faults(raw if isinstance(raw, str) else ",".join(map(str, raw)), line, path))
        return
    cls = SECTIONS.get(section)
    if cls is None:
        raise ConfigError(f"unknown section [{section}]", line, path)
    f = _field_type(cls, key)
    if f is None:
        raise ConfigError(f"unknown key {key!r} in [{section}]", line, path)
    try:
        value = _convert(raw, f, f"{section}.{key}")
    except ConfigError as exc:
        raise ConfigError(exc.message, line, path) from None
    choices = CHOICES.get((section, key))
    if choices and value not in choices:
        raise ConfigError(f"{section}.{key} must be one of {', '.join(choices)}; got {value!r}", line, path)
    setattr(getattr(cfg, section), key, value)


_FAULT_RE = re.compile(r"^\s*([a-z_]+)\s*@\s*step\s*=\s*(\d+)\s*$")


def parse_faults(text: str, line=None, path=None) -> List[FaultSpec]:
    out = []
    for part in text.split(","):
        if not part.strip():
            continue
        m = _FAULT_RE.match(part)
        if not m:
            raise ConfigError(f"bad fault spec {part.strip()!r}; expected target@step=N", line, path)
        if m.group(1) not in FAULT_TARGETS:
            raise ConfigError(f"unknown fault target {m.group(1)!r}; one of {', '.join(FAULT_TARGETS)}", line, path)
        out.append(FaultSpec(m.group(1), int(m.group(2))))
    return out


_SECTION_RE = re.compile(r"^\[\s*([A-Za-z_][A-Za-z0-9_]*)\s*\]$")
_KEY_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")


def parse_config(text: str, path: Optional[str] = None, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = copy_config(base) if base is not None else RunConfig()
    section = None
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1)
            if section not in SECTIONS and section != "faults":
                raise ConfigError(f"unknown section [{section}]", lineno, path)
            continue
        m = _KEY_RE.match(line)
        if not m:
            raise ConfigError(f"cannot parse {line!r}; expected key = value or [section]", lineno, path)
        if section is None:
            raise ConfigError(f"key {m.group(1)!r} appears before any [section]", lineno, path)
        key, value = m.group(1), m.group(2)
        # trailing comments need a space before the marker
        value = re.split(r"\s+[#;]", value, maxsplit=1)[0].strip()
        if (section, key) in seen and section != "faults":
            raise ConfigError(f"duplicate key {section}.{key}", lineno, path)
        seen.add((section, key))
        _assign(cfg, section, key, value, lineno, path)
    validate(cfg, path)
    return cfg


def load_config(path: str, base: Optional[RunConfig] = None) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, path) from None
    return parse_config(text, path, base)


def apply_override(cfg: RunConfig, pair: str):
    """Apply one ``section.key=value`` override in place."""
    if "=" not in pair:
        raise ConfigError(f"override {pair!r} is not section.key=value")
    lhs, value = pair.split("=", 1)
    if "." not in lhs:
        raise ConfigError(f"override {pair!r} is not section.key=value")
    section, key = lhs.strip().split(".", 1)
    _assign(cfg, section, key, value, None, "--set")
    validate(cfg, "--set")


def validate(cfg: RunConfig, path: Optional[str] = None):
    c, m, d, t = cfg.cluster, cfg.model, cfg.data, cfg.train

    def need(ok, msg):
        if not ok:
            raise ConfigError(msg, None, path)

    need(1 <= c.nn_workers <= 64, "cluster.nn_workers must lie in [1, 64]")
    need(1 <= c.embedding_workers <= 256, "cluster.embedding_workers must lie in [1, 256]")
    need(c.ps_shards >= 1, "cluster.ps_shards must be >= 1")
    need(c.fetch_latency_ms >= 0 and c.allreduce_latency_ms >= 0, "latencies must be >= 0")
    need(m.embedding_dim >= 1, "model.embedding_dim must be >= 1")
    need(all(h >= 1 for h in m.hidden), "model.hidden sizes must be >= 1")
    need(m.ps_capacity >= 1, "model.ps_capacity must be >= 1")
    need(d.samples >= 2 and d.groups >= 1 and d.vocab >= 1, "data.samples >= 2, groups >= 1, vocab >= 1")
    need(0 <= d.ids_min <= d.ids_max, "data.ids_min must not exceed data.ids_max")
    need(0 <= d.label_noise < 0.5, "data.label_noise must lie in [0, 0.5)")
    need(0 < d.test_fraction < 1, "data.test_fraction must lie in (0, 1)")
    need(t.lr > 0 and t.emb_lr > 0, "learning rates must be > 0")
    need(t.steps >= 0 and t.epochs >= 1, "train.steps >= 0 and train.epochs >= 1")
    need(1 <= t.batch_size <= 65535, "train.batch_size must lie in [1, 65535]")
    need(t.staleness_cap >= 0, "train.staleness_cap must be >= 0")
    need(t.prefetch_depth >= 0 and t.async_depth >= 0, "pipeline depths must be >= 0")
    need(t.async_average_every >= 1, "train.async_average_every must be >= 1")
    need(0 < t.kappa <= 32768, "train.kappa must lie in (0, 32768]")
    need(t.eval_every >= 0 and t.eval_samples >= 0, "eval settings must be >= 0")
    need(t.checkpoint_every >= 0 and t.verify_every >= 0, "checkpoint/verify cadences must be >= 0")
    for f in cfg.faults:
        need(f.target in FAULT_TARGETS, f"unknown fault target {f.target}")
    return cfg

