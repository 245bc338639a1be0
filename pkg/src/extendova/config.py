"""Experiment configuration dataclasses and strict JSON (de)serialization.

Configs are plain dataclasses.  ``from_dict`` rejects unknown keys with the
offending dotted path in the message, so a typo in a config file fails
loudly instead of silently running defaults.  ``schema_version`` is pinned
at the top level; bumping the schema means bumping the constant here.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError

SCHEMA_VERSION = 1

METHODS = ("extendova", "baseline", "finetune", "lwf", "joint")


@dataclass
class StreamConfig:
    """Shape of a synthetic multi-camera identity stream."""

    num_steps: int = 3
    initial_cameras: int = 4      # cameras present in step 1
    cameras_per_step: int = 4     # new cameras per later step
    ids_per_camera: int = 100
    samples_per_id: int = 10
    # fraction of each later step's identities drawn from earlier steps;
    # scalar or one value per incremental step (steps 2..num_steps)
    overlap_fraction: float | list = 0.7
    domain_shift_strength: float = 0.2    # camera latent-mixing scale
    # constant per-camera displacement; None means same as the mixing scale.
    # Offsets move every identity the same way, so they pressure the encoder
    # without scrambling identity neighborhoods the way mixing does.
    camera_offset_strength: float | None = 0.1
    # extra shift per later camera: camera k past the initial block gets
    # strength * (1 + ramp * k), so adaptation pressure grows over time
    camera_shift_ramp: float = 0.0
    # per-step multiplier pattern for incremental cameras: the j-th camera a
    # step adds gets strength * cycle[j].  Lets one familiar viewpoint and
    # several alien ones arrive together.  None keeps all cameras uniform.
    camera_shift_cycle: list | None = field(
        default_factory=lambda: [0.5, 1.5, 1.5, 1.5])
    noise_std: float = 0.1
    d_latent: int = 16
    d_in: int = 64
    setup: str = "general"        # "general" or "exceptional"
    step1_global_labels: bool = True
    test_ids_per_step: int = 80
    test_samples_per_id: int = 4
    seed: int = 0

    def overlap_at(self, step: int) -> float:
        """Overlap fraction for incremental step ``step`` (2-based)."""
        if step < 2 or step > self.num_steps:
            raise ValueError(f"step {step} out of range for overlap lookup")
        if isinstance(self.overlap_fraction, list):
            return float(self.overlap_fraction[step - 2])
        return float(self.overlap_fraction)

    def validate(self) -> None:
        if self.num_steps < 2:
            raise ConfigError("stream.num_steps must be at least 2")
        if self.initial_cameras < 2:
            raise ConfigError("stream.initial_cameras must be at least 2 "
                              "(retrieval needs cross-camera positives)")
        if self.cameras_per_step < 1:
            raise ConfigError("stream.cameras_per_step must be positive")
        for name in ("ids_per_camera", "samples_per_id", "d_latent", "d_in",
                     "test_ids_per_step", "test_samples_per_id"):
            if getattr(self, name) < 1:
                raise ConfigError(f"stream.{name} must be positive")
        if self.noise_std < 0 or self.domain_shift_strength < 0:
            raise ConfigError("stream noise/shift strengths must be non-negative")
        if self.camera_shift_ramp < 0:
            raise ConfigError("stream.camera_shift_ramp must be non-negative")
        if self.camera_offset_strength is not None \
                and self.camera_offset_strength < 0:
            raise ConfigError("stream.camera_offset_strength must be "
                              "non-negative")
        if self.camera_shift_cycle is not None:
            if not self.camera_shift_cycle:
                raise ConfigError("stream.camera_shift_cycle must be a "
                                  "non-empty list or null")
            for v in self.camera_shift_cycle:
                if float(v) < 0:
                    raise ConfigError("stream.camera_shift_cycle entries must "
                                      "be non-negative")
        if self.setup not in ("general", "exceptional"):
            raise ConfigError(f"stream.setup must be general or exceptional, "
                              f"got {self.setup!r}")
        fracs = (self.overlap_fraction if isinstance(self.overlap_fraction, list)
                 else [self.overlap_fraction] * (self.num_steps - 1))
        if len(fracs) != self.num_steps - 1:
            raise ConfigError("stream.overlap_fraction list must have one entry "
                              "per incremental step")
        for f in fracs:
            if not (0.0 <= float(f) <= 1.0):
                raise ConfigError(f"overlap fraction {f} outside [0, 1]")
        if self.setup == "exceptional":
            for f in fracs:
                if float(f) <= 0.5:
                    raise ConfigError("exceptional setup needs overlap > 0.5 at "
                                      "every incremental step (seen must outnumber "
                                      "unseen)")
        else:
            # general setup: the per-step count of never-before-seen
            # identities must be non-decreasing over time
            per_cam = self.ids_per_camera * self.cameras_per_step
            fresh = [round(per_cam * (1.0 - float(f))) for f in fracs]
            if any(b < a for a, b in zip(fresh, fresh[1:])):
                raise ConfigError("general setup requires a non-decreasing count "
                                  "of fresh identities per step")


@dataclass
class ModelConfig:
    hidden_dim: int = 48
    feature_dim: int = 32
    bn_momentum: float = 0.3
    bn_eps: float = 1e-5
    temperature: float = 0.05       # prototype softmax temperature
    prototype_momentum: float = 0.9
    ema_alpha: float = 0.99
    prototype_update_source: str = "online"   # or "ema"

    def validate(self) -> None:
        if self.hidden_dim < 1 or self.feature_dim < 2:
            raise ConfigError("model dims must be positive (feature_dim >= 2)")
        if not (0.0 < self.temperature):
            raise ConfigError("model.temperature must be positive")
        for name in ("bn_momentum", "prototype_momentum", "ema_alpha"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"model.{name} must lie in [0, 1]")
        if self.prototype_update_source not in ("online", "ema"):
            raise ConfigError("model.prototype_update_source must be "
                              "'online' or 'ema'")


@dataclass
class LossWeights:
    kd: float = 1.0          # old-logit distillation weight (baseline, lwf)
    aux: float = 0.9         # early pull of new-labelled samples to old classes
    cd: float = 0.6          # surrogate cosine-structure distillation weight
    triplet_margin: float = 0.3
    # Softening for the distillation KL only: cosine logits are divided by
    # this before both softmaxes.  The confidence head keeps its own sharper
    # scale; distilling at that scale pins the old geometry almost exactly.
    kd_temperature: float = 0.2

    def validate(self) -> None:
        for name in ("kd", "aux", "cd"):
            if getattr(self, name) < 0:
                raise ConfigError(f"plan.weights.{name} must be non-negative")
        if self.triplet_margin < 0:
            raise ConfigError("plan.weights.triplet_margin must be non-negative")
        if self.kd_temperature <= 0:
            raise ConfigError("plan.weights.kd_temperature must be positive")


@dataclass
class DetectorPlan:
    """Training schedule for the per-class seen/unseen heads."""

    iters: int = 50
    lr: float = 1e-2
    batch: int = 512         # 0 means full batch

    def validate(self) -> None:
        if self.iters < 1 or self.lr <= 0 or self.batch < 0:
            raise ConfigError("plan.detector settings out of range")


@dataclass
class StepPlan:
    """Per-step training schedule, shared by all methods unless overridden."""

    epochs: int = 40
    early_reg_epochs: int = 10    # epochs with the auxiliary old-class pull
    lr: float = 3.5e-4
    incremental_lr_scale: float = 0.1  # encoder rate multiplier after step 1
    p: int = 16                   # identities per batch
    k: int = 4                    # samples per identity
    softmax_threshold: float = 0.5     # baseline max-softmax acceptance
    cd_whole_step: bool = True    # structure distillation active all epochs
    cd_pairwise: bool = True      # compare all surrogate pairs, not aligned ones
    weights: LossWeights = field(default_factory=LossWeights)
    detector: DetectorPlan = field(default_factory=DetectorPlan)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("plan.epochs must be positive")
        if not (0 <= self.early_reg_epochs <= self.epochs):
            raise ConfigError("plan.early_reg_epochs must lie in [0, epochs]")
        if self.lr <= 0 or self.incremental_lr_scale <= 0:
            raise ConfigError("plan learning rates must be positive")
        if self.p < 1 or self.k < 1:
            raise ConfigError("plan.p and plan.k must be positive")
        if not (0.0 <= self.softmax_threshold <= 1.0):
            raise ConfigError("plan.softmax_threshold must lie in [0, 1]")
        self.weights.validate()
        self.detector.validate()


@dataclass
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: StepPlan = field(default_factory=StepPlan)
    # method -> partial plan patch, applied to incremental steps.  The
    # oracle upper bound revisits all accumulated data every step, so it
    # converges in fewer passes than the single-step methods need.
    plan_overrides: dict = field(
        default_factory=lambda: {"joint": {"epochs": 20}})
    methods: list = field(default_factory=lambda: ["extendova", "baseline",
                                                   "finetune", "joint"])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    stream_path: str | None = None   # pregenerated stream file; else inline
    output_dir: str | None = None
    checkpoint_policy: str = "step"  # "step" or "none"

    def validate(self) -> None:
        self.stream.validate()
        self.model.validate()
        self.plan.validate()
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods list contains duplicates")
        if not self.seeds:
            raise ConfigError("seeds list is empty")
        for s in self.seeds:
            if not isinstance(s, int) or s < 0:
                raise ConfigError(f"seeds must be non-negative ints, got {s!r}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds list contains duplicates")
        if self.checkpoint_policy not in ("step", "none"):
            raise ConfigError("checkpoint_policy must be 'step' or 'none'")
        for m, ov in self.plan_overrides.items():
            if m not in METHODS:
                raise ConfigError(f"plan_overrides key {m!r} is not a method")
            if not isinstance(ov, dict):
                raise ConfigError(f"plan_overrides[{m!r}] must be an object")
        # materialize each override once so bad values fail at load time
        for m in self.plan_overrides:
            self.plan_for(m)

    def plan_for(self, method: str) -> StepPlan:
        """Plan with any per-method override folded in."""
        base = dataclasses.asdict(self.plan)
        override = self.plan_overrides.get(method, {})
        merged = _merge_plan_dict(base, override, f"plan_overrides.{method}")
        plan = _plan_from_dict(merged, f"plan_overrides.{method}")
        plan.validate()
        return plan


# --- strict dict <-> dataclass plumbing ---------------------------------


def _check_keys(d: dict, allowed, path: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown config key: {path}.{k}" if path
                              else f"unknown config key: {k}")


def _fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


def _simple_from_dict(cls, d: dict, path: str):
    flds = _fields(cls)
    _check_keys(d, flds.keys(), path)
    return cls(**d)


def _merge_plan_dict(base: dict, override: dict, path: str) -> dict:
    merged = dict(base)
    for k, v in override.items():
        if k in ("weights", "detector"):
            if not isinstance(v, dict):
                raise ConfigError(f"{path}.{k}: expected an object")
            sub = dict(merged[k])
            sub.update(v)
            merged[k] = sub
        else:
            merged[k] = v
    return merged


def _plan_from_dict(d: dict, path: str) -> StepPlan:
    flds = _fields(StepPlan)
    _check_keys(d, flds.keys(), path)
    d = dict(d)
    weights = d.pop("weights", {})
    detector = d.pop("detector", {})
    plan = StepPlan(**d)
    plan.weights = _simple_from_dict(LossWeights, weights, f"{path}.weights") \
        if not isinstance(weights, LossWeights) else weights
    plan.detector = _simple_from_dict(DetectorPlan, detector, f"{path}.detector") \
        if not isinstance(detector, DetectorPlan) else detector
    return plan


def experiment_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("top-level config must be a JSON object")
    d = dict(d)
    version = d.pop("schema_version", None)
    if version is None:
        raise ConfigError("config is missing schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}; "
                          f"this build reads version {SCHEMA_VERSION}")
    flds = _fields(ExperimentConfig)
    _check_keys(d, flds.keys(), "")
    cfg = ExperimentConfig()
    if "stream" in d:
        cfg.stream = _simple_from_dict(StreamConfig, d.pop("stream"), "stream")
    if "model" in d:
        cfg.model = _simple_from_dict(ModelConfig, d.pop("model"), "model")
    if "plan" in d:
        cfg.plan = _plan_from_dict(d.pop("plan"), "plan")
    for key, value in d.items():
        setattr(cfg, key, value)
    try:
        cfg.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def experiment_to_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["schema_version"] = SCHEMA_VERSION
    return d


def load_experiment_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    try:
        return experiment_from_dict(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def save_experiment_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(experiment_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
