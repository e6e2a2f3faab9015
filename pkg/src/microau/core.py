"""Domain types, configuration schema, and validation shared across the pipeline.

All types here are plain immutable containers; nothing in this module touches
torch or the filesystem except the small key/value config readers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

# FACS action unit codes run 1..46 (head/eye codes excluded). Labels outside
# this range in a manifest are typos, not merely out-of-task AUs.
FACS_AU_RANGE = (1, 46)

N_LANDMARKS = 68


class MicroAUError(Exception):
    """Base class for all errors raised by this package."""


class UnknownDatasetError(MicroAUError):
    pass


class ConfigError(MicroAUError):
    """Bad, missing, or unknown configuration keys/values."""


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.message}"


class TaskSpecError(MicroAUError):
    """Raised by validate_task_spec; carries every violation found."""

    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


@dataclass(frozen=True)
class AUTaskSpec:
    """The ordered AU targets: ids, landmark index sets, and prompt pairs.

    landmark_indices[i] lists 0-based 68-point indices for au_ids[i];
    prompts[i] is the (positive, negative) text pair for au_ids[i].
    """

    au_ids: tuple[int, ...]
    landmark_indices: tuple[tuple[int, ...], ...]
    prompts: tuple[tuple[str, str], ...]

    @property
    def n_aus(self) -> int:
        return len(self.au_ids)

    def index_of(self, au_id: int) -> int:
        return self.au_ids.index(au_id)


@dataclass(frozen=True)
class FlowField:
    """Dense onset->apex motion field, (h0, w0, 2) float array in pixels/frame."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 2:
            raise MicroAUError(f"flow field must be (h, w, 2), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise MicroAUError("flow field contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def h0(self) -> int:
        return self.data.shape[0]

    @property
    def w0(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class TokenGrid:
    """h x w grid of d-dimensional visual patch tokens (torch tensor)."""

    tokens: "object"  # torch.Tensor (h, w, d); typed loosely to keep core torch-free

    @property
    def h(self) -> int:
        return self.tokens.shape[0]

    @property
    def w(self) -> int:
        return self.tokens.shape[1]

    @property
    def d(self) -> int:
        return self.tokens.shape[2]


@dataclass(frozen=True)
class Sample:
    """One micro-expression instance as loaded from a manifest row."""

    sample_id: str
    subject_id: str
    landmarks: np.ndarray  # (68, 2) int, (x, y) apex-frame pixels
    au_labels: np.ndarray  # (N,) uint8 over {0, 1}, ordered as the task spec
    onset_path: Optional[str] = None
    apex_path: Optional[str] = None
    flow_path: Optional[str] = None
    emotion: Optional[str] = None

    def __post_init__(self):
        lm = np.asarray(self.landmarks)
        if lm.shape != (N_LANDMARKS, 2):
            raise MicroAUError(f"expected (68, 2) landmarks, got {lm.shape}")
        if np.any(lm < 0):
            raise MicroAUError(f"sample {self.sample_id}: negative landmark coordinate")
        if self.flow_path is None and (self.onset_path is None or self.apex_path is None):
            raise MicroAUError(f"sample {self.sample_id}: needs flow or an onset/apex pair")


# ---------------------------------------------------------------------------
# Task spec validation and dataset defaults
# ---------------------------------------------------------------------------

# Landmark groups per AU, 0-based 68-point indices. AU1/2/4 share the
# mid-eyebrow band, AU7 the lower eyelids, AU12/15 the mouth corners,
# AU14 the mid/side mouth, AU17 the chin center.
AU_LANDMARK_MAP: dict[int, tuple[int, ...]] = {
    1: (19, 20, 21, 22, 23, 24),
    2: (19, 20, 21, 22, 23, 24),
    4: (19, 20, 21, 22, 23, 24),
    7: (38, 41, 44, 47),
    12: (48, 54),
    14: (55, 59, 60, 64),
    15: (48, 54),
    17: (7, 8, 9, 57),
}

# "The <region> is/are <action>" positive/negative pattern; overridable via a
# task-spec file.
DEFAULT_PROMPTS: dict[int, tuple[str, str]] = {
    1: ("The inner eyebrows are raised", "The inner eyebrows are not raised"),
    2: ("The outer eyebrows are raised", "The outer eyebrows are not raised"),
    4: ("The eyebrows are lowering", "The eyebrows are not lowering"),
    7: ("The eyelids are tightened", "The eyelids are not tightened"),
    12: ("The lip corners are pulled up", "The lip corners are not pulled up"),
    14: ("The lip corners are dimpled", "The lip corners are not dimpled"),
    15: ("The lip corners are pulled down", "The lip corners are not pulled down"),
    17: ("The chin is raised", "The chin is not raised"),
}

DATASET_AUS = {
    "casme2": (1, 2, 4, 7, 12, 14, 15, 17),
    "samm": (2, 4, 7, 12),
}


def validate_task_spec(spec: AUTaskSpec) -> AUTaskSpec:
    """Return the spec unchanged iff every invariant holds, else raise TaskSpecError.

    Collected violations: DuplicateAU, EmptyLandmarkSet, LandmarkOutOfRange,
    MissingPrompt. Idempotent on valid specs.
    """
    violations: list[Violation] = []
    if len(spec.au_ids) == 0:
        violations.append(Violation("EmptyLandmarkSet", "task spec lists no AUs"))
    seen = set()
    for au in spec.au_ids:
        if au in seen:
            violations.append(Violation("DuplicateAU", f"AU{au} listed more than once"))
        seen.add(au)
    if len(spec.landmark_indices) != len(spec.au_ids) or len(spec.prompts) != len(spec.au_ids):
        violations.append(
            Violation("MissingPrompt", "landmark/prompt lists do not match au_ids length")
        )
        raise TaskSpecError(violations)
    for au, indices, (pos, neg) in zip(spec.au_ids, spec.landmark_indices, spec.prompts):
        if len(indices) == 0:
            violations.append(Violation("EmptyLandmarkSet", f"AU{au} has no landmarks"))
        for idx in indices:
            if not (0 <= idx < N_LANDMARKS):
                violations.append(
                    Violation("LandmarkOutOfRange", f"AU{au} landmark index {idx} outside [0, 67]")
                )
        if not pos or not neg:
            violations.append(Violation("MissingPrompt", f"AU{au} is missing a prompt"))
        elif pos == neg:
            violations.append(Violation("MissingPrompt", f"AU{au} positive and negative prompts are identical"))
    if violations:
        raise TaskSpecError(violations)
    return spec


def default_task_spec(dataset: str) -> AUTaskSpec:
    """Built-in AU targets for the two supported dataset protocols."""
    if dataset not in DATASET_AUS:
        raise UnknownDatasetError(f"unknown dataset {dataset!r}; expected one of {sorted(DATASET_AUS)}")
    aus = DATASET_AUS[dataset]
    spec = AUTaskSpec(
        au_ids=aus,
        landmark_indices=tuple(AU_LANDMARK_MAP[a] for a in aus),
        prompts=tuple(DEFAULT_PROMPTS[a] for a in aus),
    )
    return validate_task_spec(spec)


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

ENCODER_KINDS = ("toy", "pretrained-adapter")
POOLING_MODES = ("pta", "maxpool", "meanpool")
FUSION_MODES = ("gda", "add_mlp", "cat_mlp")
CL_VARIANTS = ("none", "global_orig", "local_orig", "miauc")
MIAUC_FEATURES = ("pre_gsd", "post_gsd")


@dataclass(frozen=True)
class Config:
    """Training/evaluation hyperparameters. Defaults follow the reference protocol
    (80 epochs, batch 8, SGD 1e-3/1e-2 decayed 10x at epoch 40, magnification 3,
    224 input, seed 1, last 3 encoder blocks fine-tuned)."""

    alpha: float = 0.6
    beta: float = 1.0
    batch_size: int = 8
    epochs: int = 80
    lr_encoders: float = 0.001
    lr_heads: float = 0.01
    lr_decay_epoch: int = 40
    magnification: float = 3.0
    input_size: int = 224
    seed: int = 1
    encoder_kind: str = "toy"
    pooling: str = "pta"
    fusion: str = "gda"
    cl_variant: str = "miauc"
    finetune_last_k_layers: int = 3
    # Auxiliary knobs (optional in config files):
    momentum: float = 0.9
    gd_normalize_labels: bool = False
    miauc_feature: str = "post_gsd"
    pta_shared: bool = False
    temperature_init: float = 0.07
    freeze_temperature: bool = False
    flow_method: str = "farneback"
    pretrained_path: str = ""
    toy_patch_size: int = 32
    toy_dim: int = 32
    toy_depth: int = 1

    def validate(self) -> "Config":
        problems = []
        if self.alpha < 0:
            problems.append("alpha must be >= 0")
        if self.beta < 0:
            problems.append("beta must be >= 0")
        for key in ("batch_size", "epochs", "input_size"):
            if getattr(self, key) <= 0:
                problems.append(f"{key} must be positive")
        if self.lr_decay_epoch < 0 or self.finetune_last_k_layers < 0:
            problems.append("lr_decay_epoch and finetune_last_k_layers must be >= 0")
        if self.magnification <= 0:
            problems.append("magnification must be positive")
        if self.temperature_init <= 0:
            problems.append("temperature_init must be positive")
        for key, allowed in (
            ("encoder_kind", ENCODER_KINDS),
            ("pooling", POOLING_MODES),
            ("fusion", FUSION_MODES),
            ("cl_variant", CL_VARIANTS),
            ("miauc_feature", MIAUC_FEATURES),
        ):
            if getattr(self, key) not in allowed:
                problems.append(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


# The protocol keys every config file must state explicitly; the rest fall
# back to the defaults above. Silent hyperparameter typos invalidate ablations,
# hence unknown keys are a hard error.
REQUIRED_CONFIG_KEYS = (
    "alpha",
    "beta",
    "batch_size",
    "epochs",
    "lr_encoders",
    "lr_heads",
    "lr_decay_epoch",
    "magnification",
    "input_size",
    "seed",
    "encoder_kind",
    "pooling",
    "fusion",
    "cl_variant",
    "finetune_last_k_layers",
)


def parse_kv(text: str) -> dict[str, str]:
    """Parse the flat 'key = value' document format used by every config asset.

    '#' starts a comment; blank lines are skipped; later duplicates are a hard
    error (a typo shadowing an earlier value must not pass silently).
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _parse_bool(value: str, key: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {value!r}")


def config_from_kv(kv: dict[str, str]) -> Config:
    fields = {f.name: f for f in dataclasses.fields(Config)}
    missing = [k for k in REQUIRED_CONFIG_KEYS if k not in kv]
    unknown = [k for k in kv if k not in fields]
    problems = [f"missing required key {k!r}" for k in missing]
    problems += [f"unknown key {k!r}" for k in unknown]
    if problems:
        raise ConfigError("; ".join(problems))
    values = {}
    for key, raw in kv.items():
        ftype = fields[key].type
        try:
            if ftype == "bool":
                values[key] = _parse_bool(raw, key)
            elif ftype == "int":
                values[key] = int(raw)
            elif ftype == "float":
                values[key] = float(raw)
            else:
                values[key] = raw
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    return Config(**values).validate()


def load_config(path: str) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_kv(parse_kv(fh.read()))


def default_config_text() -> str:
    """A complete, commented config file with the reference defaults."""
    cfg = Config()
    lines = ["# microau training configuration", "# protocol keys (required):"]
    for key in REQUIRED_CONFIG_KEYS:
        lines.append(f"{key} = {_format_value(getattr(cfg, key))}")
    lines.append("# auxiliary keys (optional; defaults shown):")
    for f in dataclasses.fields(Config):
        if f.name not in REQUIRED_CONFIG_KEYS:
            lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


# ---------------------------------------------------------------------------
# Task-spec override files (same key/value format)
# ---------------------------------------------------------------------------


def _parse_int_list(raw: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"{key}: expected integers, got {raw!r}") from exc


def task_spec_from_kv(kv: dict[str, str]) -> AUTaskSpec:
    if "au_ids" not in kv:
        raise ConfigError("task spec file must list au_ids")
    au_ids = _parse_int_list(kv["au_ids"], "au_ids")
    landmarks = []
    prompts = []
    known = {"au_ids"}
    for au in au_ids:
        lm_key, pos_key, neg_key = f"landmarks.{au}", f"prompt_pos.{au}", f"prompt_neg.{au}"
        known.update((lm_key, pos_key, neg_key))
        if lm_key in kv:
            landmarks.append(_parse_int_list(kv[lm_key], lm_key))
        elif au in AU_LANDMARK_MAP:
            landmarks.append(AU_LANDMARK_MAP[au])
        else:
            raise ConfigError(f"no landmark indices for AU{au}; add {lm_key}")
        if pos_key in kv and neg_key in kv:
            prompts.append((kv[pos_key], kv[neg_key]))
        elif au in DEFAULT_PROMPTS:
            prompts.append(DEFAULT_PROMPTS[au])
        else:
            raise ConfigError(f"no prompts for AU{au}; add {pos_key} and {neg_key}")
    unknown = [k for k in kv if k not in known]
    if unknown:
        raise ConfigError(f"unknown task spec keys: {unknown}")
    return validate_task_spec(
        AUTaskSpec(au_ids=au_ids, landmark_indices=tuple(landmarks), prompts=tuple(prompts))
    )


def load_task_spec(path: str) -> AUTaskSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return task_spec_from_kv(parse_kv(fh.read()))


def task_spec_text(spec: AUTaskSpec) -> str:
    lines = [f"au_ids = {','.join(str(a) for a in spec.au_ids)}"]
    for au, indices, (pos, neg) in zip(spec.au_ids, spec.landmark_indices, spec.prompts):
        lines.append(f"landmarks.{au} = {','.join(str(i) for i in indices)}")
        lines.append(f"prompt_pos.{au} = {pos}")
        lines.append(f"prompt_neg.{au} = {neg}")
    return "\n".join(lines) + "\n"
