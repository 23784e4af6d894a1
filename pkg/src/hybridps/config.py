"""Run configuration: strict YAML sections for corpus, model, objectives,
alignment, trainer and eval. Unknown keys and wrong types are rejected with
the offending key path, and the whole resolved config hashes canonically so
checkpoints can verify what produced them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .corpus import DomainSpec, StyleSpec, SynthSpec
from .model import ModelConfig
from .objectives import HyperParams
from .utils import canonical_json, sha256_of


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection:
    pretrain: list = field(default_factory=list)   # manifest paths
    target_train: str = ""
    target_eval: str = ""


@dataclass
class ObjectivesSection:
    eta: float = 1.0
    lam: float = 0.1
    gamma: float = 0.5
    tau: float = 1.0 / 30.0
    con_mode: str = "pooled"           # pooled | per_box

    def hyperparams(self) -> HyperParams:
        return HyperParams(self.eta, self.lam, self.gamma, self.tau).check()


@dataclass
class IamSection:
    enabled: bool = True
    detection: bool = True
    reid: bool = True
    alpha: float = 1.0
    alpha_warmup_steps: int = 0


@dataclass
class AugmentSection:
    flip: bool = True
    scale_crop: bool = True
    photometric: bool = True
    noise: bool = True
    crop_min: float = 0.75
    brightness_delta: float = 0.15
    noise_max: float = 0.03


@dataclass
class TrainerSection:
    steps: int = 2000
    batch: dict = field(default_factory=lambda: {
        "detection": 4, "reid_labeled": 2, "reid_unlabeled": 2})
    lr: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 0.0
    cosine_decay: bool = True
    warmup_frac: float = 0.2
    grad_clip: float = 5.0
    checkpoint_every: int = 500
    enable_con: bool = True
    enable_adv: bool = True
    reid_op: str = "expand_resize"     # expand_resize | random_paste
    expand_ratio: tuple = (1.0, 3.0)
    single_view_supervision: bool = False
    detection_scale_jitter: bool = True
    finetune_steps: int = 500
    finetune_lr: float = 0.003
    finetune_batch: int = 8
    augment: AugmentSection = field(default_factory=AugmentSection)


@dataclass
class EvalSection:
    score_threshold: float = 0.5
    nms_iou: float = 0.4
    iou_hit: float = 0.5
    max_detections: int = 10
    max_queries: int = 0               # 0 = all


@dataclass
class TrainConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    objectives: ObjectivesSection = field(default_factory=ObjectivesSection)
    iam: IamSection = field(default_factory=IamSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "TrainConfig":
        self.objectives.hyperparams()
        comp = self.trainer.batch
        known_roles = {"detection", "reid_labeled", "reid_unlabeled"}
        for role, n in comp.items():
            if role not in known_roles:
                raise ConfigError(f"trainer.batch: unknown role {role!r}")
            if not isinstance(n, int) or isinstance(n, bool) or n < 0:
                raise ConfigError(f"trainer.batch.{role}: expected a non-negative integer")
        if sum(comp.values()) < 1:
            raise ConfigError("trainer.batch: batch composition sums to zero")
        if self.trainer.reid_op not in ("expand_resize", "random_paste"):
            raise ConfigError(f"trainer.reid_op: unknown operation {self.trainer.reid_op!r}")
        if self.objectives.con_mode not in ("pooled", "per_box"):
            raise ConfigError(f"objectives.con_mode: unknown mode {self.objectives.con_mode!r}")
        r0, r1 = self.trainer.expand_ratio
        if not (1.0 <= r0 <= r1):
            raise ConfigError("trainer.expand_ratio: need 1.0 <= min <= max")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["trainer"]["expand_ratio"] = list(self.trainer.expand_ratio)
        d["model"]["encoder_channels"] = list(self.model.encoder_channels)
        d["model"]["anchor_aspects"] = list(self.model.anchor_aspects)
        return d

    def hash(self) -> str:
        return sha256_of(canonical_json(self.to_dict()))


# ---------------------------------------------------------------------------
# Strict merge of YAML data onto dataclass defaults
# ---------------------------------------------------------------------------

def _coerce(value, template, path):
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(template, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(template, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(template, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(template, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(template, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    if isinstance(template, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        return value
    return value


def _merge(obj, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {path}.{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current) and not isinstance(current, type):
            _merge(current, value, f"{path}.{key}")
        else:
            setattr(obj, key, _coerce(value, current, f"{path}.{key}"))
    return obj


def parse_train_config(data: dict) -> TrainConfig:
    cfg = TrainConfig()
    if not isinstance(data, dict):
        raise ConfigError("config root: expected a mapping of sections")
    known = {f.name for f in dataclasses.fields(cfg)}
    for section, content in data.items():
        if section not in known:
            raise ConfigError(f"unknown config section {section!r}")
        _merge(getattr(cfg, section), content, section)
    return cfg.validate()


def load_train_config(path) -> TrainConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    return parse_train_config(data or {})


# ---------------------------------------------------------------------------
# Synthetic corpus spec files
# ---------------------------------------------------------------------------

def parse_synth_spec(data: dict) -> SynthSpec:
    if not isinstance(data, dict) or "domains" not in data:
        raise ConfigError("synthetic spec: expected a mapping with a 'domains' list")
    extra = set(data) - {"domains"}
    if extra:
        raise ConfigError(f"synthetic spec: unknown keys {sorted(extra)}")
    domains = []
    for i, d in enumerate(data["domains"]):
        path = f"domains[{i}]"
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a mapping")
        style_data = d.get("style", {})
        known_style = {"palette", "texture_freq", "texture_angle", "noise"}
        extra = set(style_data) - known_style
        if extra:
            raise ConfigError(f"{path}.style: unknown keys {sorted(extra)}")
        if "palette" not in style_data:
            raise ConfigError(f"{path}.style.palette is required")
        style = StyleSpec(
            palette=[list(map(float, c)) for c in style_data["palette"]],
            texture_freq=float(style_data.get("texture_freq", 5.0)),
            texture_angle=float(style_data.get("texture_angle", 0.0)),
            noise=float(style_data.get("noise", 0.02)))
        known = {"name", "kind", "images", "size", "identities", "glyphs_per_image",
                 "with_identities", "style"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"{path}: unknown keys {sorted(extra)}")
        for req in ("name", "kind", "images", "size"):
            if req not in d:
                raise ConfigError(f"{path}.{req} is required")
        try:
            domains.append(DomainSpec(
                name=str(d["name"]), kind=str(d["kind"]), images=int(d["images"]),
                size=tuple(int(v) for v in d["size"]), style=style,
                identities=int(d.get("identities", 0)),
                glyphs_per_image=tuple(int(v) for v in d.get("glyphs_per_image", (1, 4))),
                with_identities=bool(d.get("with_identities", False))))
        except Exception as e:
            raise ConfigError(f"{path}: {e}") from e
    return SynthSpec(domains=domains)


def load_synth_spec(path) -> SynthSpec:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"spec file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"spec file {path} is not valid YAML: {e}") from e
    return parse_synth_spec(data or {})
