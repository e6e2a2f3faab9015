"""Dataset ingestion via a manifest plus a synthetic generator.

The manifest decouples training from any restricted dataset layout: one
tab-separated row per sample pointing at frames (or a precomputed flow file),
a landmark file, the active AU ids, and an optional emotion label. The
synthetic generator fabricates textured frames with known in-region motion so
every pipeline stage can be verified without CASME II / SAMM.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .core import (
    AUTaskSpec,
    ConfigError,
    FACS_AU_RANGE,
    MicroAUError,
    N_LANDMARKS,
    Sample,
    parse_kv,
    task_spec_text,
)

MANIFEST_COLUMNS = ("sample_id", "subject_id", "onset", "apex", "flow", "landmarks", "aus", "emotion")
MISSING = "-"


class ManifestError(MicroAUError):
    def __init__(self, kind: str, message: str):
        self.kind = kind  # MissingFile | UnknownAULabel | MalformedRow
        super().__init__(f"{kind}: {message}")


class RegionOutOfBoundsError(MicroAUError):
    pass


def read_landmarks(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        rows = [line.split() for line in fh.read().splitlines() if line.strip()]
    if len(rows) != N_LANDMARKS or any(len(r) != 2 for r in rows):
        raise MicroAUError(f"{path}: expected 68 'x y' lines")
    return np.array([[int(x), int(y)] for x, y in rows], dtype=np.int64)


def write_landmarks(path: str, landmarks: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in landmarks:
            fh.write(f"{int(x)} {int(y)}\n")


def _parse_au_field(field: str, row_id: str, spec: AUTaskSpec) -> np.ndarray:
    labels = np.zeros(spec.n_aus, dtype=np.uint8)
    if field == MISSING or field == "":
        return labels
    for part in field.split(","):
        try:
            au = int(part)
        except ValueError:
            raise ManifestError("MalformedRow", f"row {row_id}: bad AU id {part!r}") from None
        if not (FACS_AU_RANGE[0] <= au <= FACS_AU_RANGE[1]):
            raise ManifestError("UnknownAULabel", f"row {row_id}: AU{au} is not a FACS action unit")
        if au in spec.au_ids:
            labels[spec.index_of(au)] = 1
        # in-vocabulary AUs outside the task spec contribute nothing; the
        # sample is kept with zeros for the unlisted AUs
    return labels


def _resolve(base: Path, field: str, row_id: str, what: str) -> Optional[str]:
    if field == MISSING or field == "":
        return None
    path = Path(field)
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise ManifestError("MissingFile", f"row {row_id}: {what} file {path} does not exist")
    return str(path)


def load_manifest(path: str, spec: AUTaskSpec, drop_zero_label: bool = False) -> list[Sample]:
    """Parse a manifest into Samples with resolved paths and loaded landmarks."""
    base = Path(path).parent
    samples: list[Sample] = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != len(MANIFEST_COLUMNS):
            raise ManifestError(
                "MalformedRow",
                f"line {lineno}: expected {len(MANIFEST_COLUMNS)} tab-separated fields, got {len(fields)}",
            )
        sample_id, subject_id = fields[0], fields[1]
        if not subject_id or subject_id == MISSING:
            raise ManifestError("MalformedRow", f"row {sample_id}: empty subject id")
        onset = _resolve(base, fields[2], sample_id, "onset")
        apex = _resolve(base, fields[3], sample_id, "apex")
        flow = _resolve(base, fields[4], sample_id, "flow")
        lm_path = _resolve(base, fields[5], sample_id, "landmark")
        if lm_path is None:
            raise ManifestError("MissingFile", f"row {sample_id}: landmark file is required")
        if flow is None and (onset is None or apex is None):
            raise ManifestError(
                "MalformedRow", f"row {sample_id}: needs a flow file or an onset/apex pair"
            )
        labels = _parse_au_field(fields[6], sample_id, spec)
        if drop_zero_label and labels.sum() == 0:
            continue
        emotion = None if fields[7] in (MISSING, "") else fields[7]
        samples.append(
            Sample(
                sample_id=sample_id,
                subject_id=subject_id,
                landmarks=read_landmarks(lm_path),
                au_labels=labels,
                onset_path=onset,
                apex_path=apex,
                flow_path=flow,
                emotion=emotion,
            )
        )
    return samples


def write_manifest(path: str, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#" + "\t".join(MANIFEST_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join(str(row.get(c, MISSING)) or MISSING for c in MANIFEST_COLUMNS) + "\n")


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

LABEL_MODES = ("independent", "exclusive", "onehot")


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    """Generation recipe: which AUs exist, where their motion lives, and how
    labels are drawn.

    regions are inclusive-exclusive (x0, y0, x1, y1) pixel boxes, one per AU
    in task_spec order. label modes: 'independent' draws each AU as a
    Bernoulli(activation_rate) with co_occur pairs forced on together;
    'exclusive' cycles through at-most-one-active patterns (including the
    all-zero one); 'onehot' cycles exactly-one-active patterns.
    """

    task_spec: AUTaskSpec
    regions: tuple[tuple[int, int, int, int], ...]
    n_subjects: int = 2
    samples_per_subject: int = 8
    image_size: int = 224
    displacement: float = 4.0
    label_mode: str = "exclusive"
    activation_rate: float = 0.5
    co_occur: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if len(self.regions) != self.task_spec.n_aus:
            raise ConfigError("one region per AU required")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"label_mode must be one of {LABEL_MODES}")
        margin = int(np.ceil(self.displacement)) + 1
        for au, (x0, y0, x1, y1) in zip(self.task_spec.au_ids, self.regions):
            if not (0 <= x0 < x1 <= self.image_size and 0 <= y0 < y1 <= self.image_size):
                raise RegionOutOfBoundsError(f"AU{au} region {(x0, y0, x1, y1)} outside image")
            if x0 < margin or y0 < margin or x1 > self.image_size - margin or y1 > self.image_size - margin:
                raise RegionOutOfBoundsError(
                    f"AU{au} region must keep a {margin}px margin for the injected motion"
                )
        for a, b in self.co_occur:
            if a not in self.task_spec.au_ids or b not in self.task_spec.au_ids:
                raise ConfigError(f"co_occur pair ({a}, {b}) references unknown AUs")


def synthetic_spec_from_kv(kv: dict[str, str]) -> SyntheticSpec:
    from .core import task_spec_from_kv

    gen_keys = {
        "n_subjects", "samples_per_subject", "image_size", "displacement",
        "label_mode", "activation_rate", "co_occur",
    }
    spec_kv = {k: v for k, v in kv.items() if k not in gen_keys and not k.startswith("region.")}
    task_spec = task_spec_from_kv(spec_kv)
    regions = []
    for au in task_spec.au_ids:
        key = f"region.{au}"
        if key not in kv:
            raise ConfigError(f"synthetic spec missing {key}")
        parts = [int(p) for p in kv[key].replace(",", " ").split()]
        if len(parts) != 4:
            raise ConfigError(f"{key}: expected 'x0,y0,x1,y1'")
        regions.append(tuple(parts))
    co_occur = []
    if kv.get("co_occur"):
        for pair in kv["co_occur"].split(","):
            a, _, b = pair.partition(">")
            co_occur.append((int(a), int(b)))
    return SyntheticSpec(
        task_spec=task_spec,
        regions=tuple(regions),
        n_subjects=int(kv.get("n_subjects", 2)),
        samples_per_subject=int(kv.get("samples_per_subject", 8)),
        image_size=int(kv.get("image_size", 224)),
        displacement=float(kv.get("displacement", 4.0)),
        label_mode=kv.get("label_mode", "exclusive"),
        activation_rate=float(kv.get("activation_rate", 0.5)),
        co_occur=tuple(co_occur),
    )


def load_synthetic_spec(path: str) -> SyntheticSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return synthetic_spec_from_kv(parse_kv(fh.read()))


def default_synthetic_spec_text() -> str:
    """A ready-to-run two-AU recipe (eyebrow and mouth-corner regions)."""
    return "\n".join(
        [
            "au_ids = 1,12",
            "landmarks.1 = 19,20,21,22,23,24",
            "landmarks.12 = 48,54",
            "region.1 = 48,32,112,80",
            "region.12 = 112,144,176,192",
            "n_subjects = 2",
            "samples_per_subject = 8",
            "image_size = 224",
            "displacement = 4",
            "label_mode = exclusive",
        ]
    ) + "\n"


def emotion_rule(labels: np.ndarray) -> str:
    """The fixed AU->emotion rule used for synthetic ground truth: the first
    AU active -> positive, else the second active -> negative, else surprise."""
    if labels[0] == 1:
        return "positive"
    if len(labels) > 1 and labels[1] == 1:
        return "negative"
    return "surprise"


def rule_emotion_spec_text(task_spec: AUTaskSpec) -> str:
    """Emotion spec matching emotion_rule: label embeddings composed from the
    first two AUs' prompt embeddings, with matching contribution filters."""
    a = task_spec.au_ids[0]
    b = task_spec.au_ids[1] if task_spec.n_aus > 1 else task_spec.au_ids[0]
    return "\n".join(
        [
            "emotions = positive,negative,surprise",
            "text.positive = The face shows a positive emotion",
            "text.negative = The face shows a negative emotion",
            "text.surprise = The face shows surprise",
            f"compose.positive = {a}:pos",
            f"aus.positive = {a}",
            f"compose.negative = {b}:pos",
            f"aus.negative = {b}",
            f"compose.surprise = {a}:neg,{b}:neg",
            f"aus.surprise = {a},{b}",
        ]
    ) + "\n"


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = rng.uniform(0.0, 1.0, size=(size, size))
    smooth = cv2.GaussianBlur(noise, ksize=(0, 0), sigmaX=3.0)
    lo, hi = smooth.min(), smooth.max()
    scaled = (smooth - lo) / (hi - lo)
    return np.round(40 + scaled * 175).astype(np.uint8)


def _displacement_vector(au_index: int, n_aus: int, magnitude: float) -> tuple[int, int]:
    angle = 2.0 * np.pi * au_index / max(n_aus, 1)
    dx = int(round(magnitude * np.cos(angle)))
    dy = int(round(magnitude * np.sin(angle)))
    if dx == 0 and dy == 0:
        dx = max(int(round(magnitude)), 1)
    return dx, dy


def _label_patterns(spec: SyntheticSpec) -> list[np.ndarray]:
    n = spec.task_spec.n_aus
    patterns = [np.eye(n, dtype=np.uint8)[i] for i in range(n)]
    if spec.label_mode == "exclusive":
        patterns.append(np.zeros(n, dtype=np.uint8))
    return patterns


def _draw_labels(spec: SyntheticSpec, rng: np.random.Generator, index: int) -> np.ndarray:
    if spec.label_mode == "independent":
        labels = (rng.random(spec.task_spec.n_aus) < spec.activation_rate).astype(np.uint8)
        for a, b in spec.co_occur:
            ia, ib = spec.task_spec.index_of(a), spec.task_spec.index_of(b)
            if labels[ia] == 1:
                labels[ib] = 1
        return labels
    patterns = _label_patterns(spec)
    return patterns[index % len(patterns)].copy()


def _place_landmarks(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    landmarks = np.zeros((N_LANDMARKS, 2), dtype=np.int64)
    # default spread keeps unused indices deterministic and in-bounds
    for i in range(N_LANDMARKS):
        landmarks[i] = (8 + (i * 13) % (size - 16), 8 + (i * 29) % (size - 16))
    for indices, (x0, y0, x1, y1) in zip(spec.task_spec.landmark_indices, spec.regions):
        cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
        span_x = max((x1 - x0) // 4, 1)
        span_y = max((y1 - y0) // 4, 1)
        for j, lm_index in enumerate(indices):
            off_x = ((j * 7) % (2 * span_x)) - span_x
            off_y = ((j * 11) % (2 * span_y)) - span_y
            landmarks[lm_index] = (
                int(np.clip(cx + off_x, x0, x1 - 1)),
                int(np.clip(cy + off_y, y0, y1 - 1)),
            )
    return landmarks


def generate_synthetic(spec: SyntheticSpec, seed: int, out_dir: str) -> str:
    """Write frames, landmarks, manifest, task spec, and the rule-matched
    emotion spec under out_dir; returns the manifest path. Deterministic in
    (spec, seed): generating twice produces bitwise-identical files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    n = spec.task_spec.n_aus
    for s in range(spec.n_subjects):
        subject = f"sub{s + 1:02d}"
        for k in range(spec.samples_per_subject):
            sample_id = f"{subject}_{k + 1:03d}"
            labels = _draw_labels(spec, rng, index=k)
            onset = _texture(rng, spec.image_size)
            apex = onset.copy()
            for idx in range(n):
                if labels[idx] != 1:
                    continue
                x0, y0, x1, y1 = spec.regions[idx]
                dx, dy = _displacement_vector(idx, n, spec.displacement)
                apex[y0:y1, x0:x1] = onset[y0 - dy : y1 - dy, x0 - dx : x1 - dx]
            landmarks = _place_landmarks(spec, rng)
            onset_name, apex_name, lm_name = (
                f"{sample_id}_onset.png",
                f"{sample_id}_apex.png",
                f"{sample_id}_landmarks.txt",
            )
            if not cv2.imwrite(str(out / onset_name), onset):
                raise MicroAUError(f"could not write {out / onset_name}")
            cv2.imwrite(str(out / apex_name), apex)
            write_landmarks(str(out / lm_name), landmarks)
            active = [str(au) for au, flag in zip(spec.task_spec.au_ids, labels) if flag]
            rows.append(
                {
                    "sample_id": sample_id,
                    "subject_id": subject,
                    "onset": onset_name,
                    "apex": apex_name,
                    "flow": MISSING,
                    "landmarks": lm_name,
                    "aus": ",".join(active) if active else MISSING,
                    "emotion": emotion_rule(labels),
                }
            )
    manifest_path = out / "manifest.tsv"
    write_manifest(str(manifest_path), rows)
    with open(out / "task_spec.txt", "w", encoding="utf-8") as fh:
        fh.write(task_spec_text(spec.task_spec))
    with open(out / "emotions.txt", "w", encoding="utf-8") as fh:
        fh.write(rule_emotion_spec_text(spec.task_spec))
    return str(manifest_path)
