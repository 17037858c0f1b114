"""Phase and experiment configuration, config files and presets.

Config files are YAML or JSON mirroring :class:`ExperimentConfig`::

    world: {seed: 0, num_languages: 3, ...}      # or a path to world.json
    encoder: {num_layers: 2, hidden_size: 64, ...}
    encoder_seed: 0
    pretrain: {learning_rate: 5e-4, max_steps: 2000, ...}   # or a checkpoint path, or null
    intermediate: {variant: single, tasks: [paraphrase], ...}  # or null
    targets:
      - {task: tatoeba}
      - {task: paraphrase, phase: {learning_rate: 1e-4, ...}}
    extractor: {layer_index: 1}
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .corpus import SyntheticWorldConfig
from .exceptions import ConfigurationError
from .model import EmbeddingExtractor
from .sampling import DEFAULT_ALPHA, DEFAULT_CAP, MaskingPolicy

VARIANTS = ("single", "multi", "single+mlm", "multi+mlm")


@dataclass(frozen=True)
class EarlyStopConfig:
    dev_subset_size: int = 500
    eval_interval_steps: int = 100
    patience: int | None = None

    def __post_init__(self):
        if self.dev_subset_size < 1:
            raise ConfigurationError("dev_subset_size must be >= 1")
        if self.eval_interval_steps < 1:
            raise ConfigurationError("eval_interval_steps must be >= 1")


@dataclass(frozen=True)
class PhaseConfig:
    tasks: tuple = ()
    variant: str = "single"
    include_mlm: bool = False
    learning_rate: float = 1e-4
    batch_size: int = 16
    task_batch_sizes: dict = field(default_factory=dict)
    num_epochs: float = 1.0
    max_steps: int | None = None
    warmup_fraction: float = 0.1
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    seed: int = 0
    cap_K: int = DEFAULT_CAP
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigurationError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if isinstance(self.early_stop, dict):
            object.__setattr__(self, "early_stop", EarlyStopConfig(**self.early_stop))
        if "mlm" in self.variant and not self.include_mlm:
            object.__setattr__(self, "include_mlm", True)

    def batch_size_for(self, task):
        return int(self.task_batch_sizes.get(task, self.batch_size))

    def to_dict(self):
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class TargetConfig:
    task: str
    phase: PhaseConfig | None = None

    def to_dict(self):
        return {"task": self.task, "phase": self.phase.to_dict() if self.phase else None}


@dataclass
class ExperimentConfig:
    world: SyntheticWorldConfig | str = field(default_factory=SyntheticWorldConfig)
    encoder: dict = field(default_factory=dict)
    encoder_seed: int = 0
    pretrain: PhaseConfig | str | None = None
    intermediate: PhaseConfig | None = None
    targets: list = field(default_factory=list)
    extractor: EmbeddingExtractor = field(default_factory=EmbeddingExtractor)
    language_alpha: float = DEFAULT_ALPHA
    masking: MaskingPolicy = field(default_factory=MaskingPolicy)
    max_answer_length: int = 30
    eval_batch_size: int = 64
    output_dir: str | None = None

    def __post_init__(self):
        self.targets = [t if isinstance(t, TargetConfig) else _target_from(t) for t in self.targets]

    def to_dict(self):
        """Everything that determines results; ``output_dir`` is left out."""
        return {
            "world": self.world if isinstance(self.world, str) else self.world.to_dict(),
            "encoder": dict(self.encoder),
            "encoder_seed": self.encoder_seed,
            "pretrain": self.pretrain.to_dict() if isinstance(self.pretrain, PhaseConfig) else self.pretrain,
            "intermediate": self.intermediate.to_dict() if self.intermediate else None,
            "targets": [t.to_dict() for t in self.targets],
            "extractor": asdict(self.extractor),
            "language_alpha": self.language_alpha,
            "masking": asdict(self.masking),
            "max_answer_length": self.max_answer_length,
            "eval_batch_size": self.eval_batch_size,
        }

    @property
    def config_hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        world = d.get("world", {})
        pre = d.get("pretrain")
        inter = d.get("intermediate")
        return cls(
            world=world if isinstance(world, str) else SyntheticWorldConfig.from_dict(world),
            encoder=dict(d.get("encoder", {})),
            encoder_seed=int(d.get("encoder_seed", 0)),
            pretrain=pre if (pre is None or isinstance(pre, str)) else PhaseConfig.from_dict(pre),
            intermediate=PhaseConfig.from_dict(inter) if inter else None,
            targets=[_target_from(t) for t in d.get("targets", [])],
            extractor=EmbeddingExtractor(**d.get("extractor", {})),
            language_alpha=float(d.get("language_alpha", DEFAULT_ALPHA)),
            masking=MaskingPolicy(**d.get("masking", {})),
            max_answer_length=int(d.get("max_answer_length", 30)),
            eval_batch_size=int(d.get("eval_batch_size", 64)),
            output_dir=d.get("output_dir"),
        )


def _target_from(t):
    if isinstance(t, TargetConfig):
        return t
    if isinstance(t, str):
        return TargetConfig(t)
    if isinstance(t, (tuple, list)):
        task, phase = t
        return TargetConfig(task, phase if (phase is None or isinstance(phase, PhaseConfig))
                            else PhaseConfig.from_dict(phase))
    phase = t.get("phase")
    return TargetConfig(t["task"], PhaseConfig.from_dict(phase) if isinstance(phase, dict) else phase)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping at the top level")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"{path}: unknown config keys {unknown}")
    return ExperimentConfig.from_dict(data)


def save_config(config: ExperimentConfig, path):
    path = Path(path)
    d = config.to_dict()
    if config.output_dir:
        d["output_dir"] = config.output_dir
    text = json.dumps(d, indent=1, sort_keys=True) if path.suffix == ".json" else yaml.safe_dump(d, sort_keys=True)
    path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

# Intermediate-task batch size and epochs of the reference setup.
REFERENCE_INTERMEDIATE = {
    "anli+": (24, 2), "ccg": (24, 15), "commonsenseqa": (4, 10), "cosmosqa": (4, 15),
    "hellaswag": (24, 7), "qqp": (24, 3), "squad": (8, 3), "mlm": (8, None), "multi-task": (None, 3),
}
# Target-task batch size and epochs of the reference setup; retrieval tasks are not trained.
REFERENCE_TARGET = {
    "xnli": (4, 2), "pawsx": (32, 5), "xquad": (16, 2), "mlqa": (16, 2), "tydiqa": (16, 2),
    "pos": (32, 10), "ner": (32, 10), "bucc": (None, None), "tatoeba": (None, None),
}
REFERENCE_INTERMEDIATE_LR = 1e-5
REFERENCE_INTERMEDIATE_MLM_LR = 5e-6
REFERENCE_TARGET_LR = 3e-6
REFERENCE_WARMUP = 0.1
REFERENCE_DEV_SUBSET = 500

# Synthetic tasks and the reference task whose schedule they borrow.
SYNTHETIC_INTERMEDIATE_ANALOGUE = {"paraphrase": "qqp", "tagging": "ccg", "span_qa": "squad", "choice": "hellaswag"}
SYNTHETIC_TARGET_ANALOGUE = {"paraphrase": "pawsx", "tagging": "pos", "span_qa": "xquad",
                             "bucc": "bucc", "tatoeba": "tatoeba"}

DESK_ENCODER = {"num_layers": 2, "hidden_size": 64, "num_attention_heads": 4, "ffn_size": 128,
                "max_sequence_length": 64, "dropout": 0.1}


def reference_intermediate_phase(tasks, variant="single", seed=0) -> PhaseConfig:
    tasks = tuple(tasks)
    lr = REFERENCE_INTERMEDIATE_MLM_LR if "mlm" in variant else REFERENCE_INTERMEDIATE_LR
    if variant.startswith("multi"):
        sizes = {t: REFERENCE_INTERMEDIATE[SYNTHETIC_INTERMEDIATE_ANALOGUE.get(t, t)][0] for t in tasks}
        if "mlm" in variant:
            sizes["mlm"] = REFERENCE_INTERMEDIATE["mlm"][0]
        epochs = REFERENCE_INTERMEDIATE["multi-task"][1]
        batch = max(sizes.values())
    else:
        batch, epochs = REFERENCE_INTERMEDIATE[SYNTHETIC_INTERMEDIATE_ANALOGUE.get(tasks[0], tasks[0])]
        sizes = {"mlm": REFERENCE_INTERMEDIATE["mlm"][0]} if "mlm" in variant else {}
    return PhaseConfig(tasks=tasks, variant=variant, learning_rate=lr, batch_size=batch,
                       task_batch_sizes=sizes, num_epochs=epochs, warmup_fraction=REFERENCE_WARMUP,
                       early_stop=EarlyStopConfig(dev_subset_size=REFERENCE_DEV_SUBSET), seed=seed)


def reference_target_phase(task, seed=0) -> PhaseConfig | None:
    batch, epochs = REFERENCE_TARGET[SYNTHETIC_TARGET_ANALOGUE.get(task, task)]
    if batch is None:
        return None
    return PhaseConfig(tasks=(task,), learning_rate=REFERENCE_TARGET_LR, batch_size=batch, num_epochs=epochs,
                       warmup_fraction=REFERENCE_WARMUP, early_stop=EarlyStopConfig(dev_subset_size=REFERENCE_DEV_SUBSET),
                       seed=seed)


DESK_PRETRAIN_LR = 3e-3
# an order of magnitude below pretraining, halved again when MLM is mixed in
DESK_INTERMEDIATE_LR = 3e-4
DESK_TARGET_LR = 3e-4


def desk_preset(seed=0, intermediate=("paraphrase",), variant="single",
                targets=("paraphrase", "tagging", "span_qa", "bucc", "tatoeba"),
                pretrain_steps=2000, intermediate_steps=500, target_steps=300) -> ExperimentConfig:
    """Small world and encoder, a few hundred steps per phase; runs on one CPU core.

    Sentence embeddings come from the last layer of the 2-layer encoder.
    """
    es = EarlyStopConfig(dev_subset_size=100, eval_interval_steps=100)
    pretrain = PhaseConfig(tasks=("mlm",), learning_rate=DESK_PRETRAIN_LR, batch_size=32, max_steps=pretrain_steps,
                           warmup_fraction=0.1, early_stop=es, seed=seed)
    inter = None
    if intermediate:
        inter = PhaseConfig(tasks=tuple(intermediate), variant=variant,
                            learning_rate=DESK_INTERMEDIATE_LR / 2 if "mlm" in variant else DESK_INTERMEDIATE_LR,
                            batch_size=32, max_steps=intermediate_steps, warmup_fraction=0.1,
                            early_stop=es, seed=seed + 1)
    tcfgs = []
    for t in targets:
        phase = None
        if t not in ("bucc", "tatoeba"):
            phase = PhaseConfig(tasks=(t,), learning_rate=DESK_TARGET_LR, batch_size=32, max_steps=target_steps,
                                warmup_fraction=0.1, early_stop=es, seed=seed + 2)
        tcfgs.append(TargetConfig(t, phase))
    return ExperimentConfig(world=SyntheticWorldConfig(seed=0), encoder=dict(DESK_ENCODER), encoder_seed=seed,
                            pretrain=pretrain, intermediate=inter, targets=tcfgs,
                            extractor=EmbeddingExtractor(layer_index=DESK_ENCODER["num_layers"]))


def reference_preset(seed=0, intermediate=("paraphrase",), variant="single",
                 targets=("paraphrase", "tagging", "span_qa", "bucc", "tatoeba")) -> ExperimentConfig:
    """Reference learning rates, batch sizes and epochs on the desk-scale world and encoder."""
    cfg = desk_preset(seed, intermediate, variant, targets)
    if intermediate:
        cfg.intermediate = reference_intermediate_phase(intermediate, variant, seed + 1)
    cfg.targets = [TargetConfig(t, reference_target_phase(t, seed + 2)) for t in targets]
    return cfg


PRESETS = {"desk": desk_preset, "paper": reference_preset}


def with_overrides(config: ExperimentConfig, **kw) -> ExperimentConfig:
    cfg = copy.deepcopy(config)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg
