"""LOSO cross-validation harness: optimizer schedule, per-fold training,
metric accumulation, and a deterministic checkpoint container.

Folds reinitialize from the same seed so nothing leaks across subjects;
metric merges are associative and commutative, so accumulation order never
changes the reported numbers.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
import torch

from .core import AUTaskSpec, Config, MicroAUError, Sample, validate_task_spec
from .model import AUDetector
from .preprocess import au_token_indices, prepare_flow, compute_flow, read_flow

CHECKPOINT_MAGIC = b"MAUCKPT1"
CHECKPOINT_VERSION = 1


class SingleSubjectError(MicroAUError):
    pass


class EmptyAccumulatorError(MicroAUError):
    pass


class DivergedLossError(MicroAUError):
    pass


class CheckpointError(MicroAUError):
    pass


@dataclasses.dataclass(frozen=True)
class Fold:
    held_out_subject: str
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def loso_split(samples: Sequence[Sample]) -> list[Fold]:
    """One fold per subject; the held-out subject's samples form the test set."""
    subjects = sorted({s.subject_id for s in samples})
    if len(subjects) < 2:
        raise SingleSubjectError(f"LOSO needs >= 2 subjects, found {len(subjects)}")
    folds = []
    for subject in subjects:
        test = tuple(s.sample_id for s in samples if s.subject_id == subject)
        train = tuple(s.sample_id for s in samples if s.subject_id != subject)
        folds.append(Fold(held_out_subject=subject, train_ids=train, test_ids=test))
    return folds


def lr_schedule(epoch: int, config: Optional[Config] = None) -> tuple[float, float]:
    """(encoder lr, head lr) at a 0-indexed epoch; both drop 10x from epoch
    index lr_decay_epoch onward (index 39 is the last undecayed epoch)."""
    cfg = config or Config()
    if epoch >= cfg.lr_decay_epoch:
        return cfg.lr_encoders / 10.0, cfg.lr_heads / 10.0
    return cfg.lr_encoders, cfg.lr_heads


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


class MetricAccumulator:
    """Running TP/FP/FN/TN per AU plus an emotion confusion matrix."""

    def __init__(self, n_aus: int, n_emotions: int = 0):
        self.au_counts = np.zeros((n_aus, 4), dtype=np.int64)  # tp, fp, fn, tn
        self.emotion_confusion = np.zeros((n_emotions, n_emotions), dtype=np.int64)
        self.n_samples = 0

    def update_au(self, predictions: np.ndarray, labels: np.ndarray) -> None:
        predictions = np.asarray(predictions, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        self.au_counts[:, 0] += (predictions == 1) & (labels == 1)
        self.au_counts[:, 1] += (predictions == 1) & (labels == 0)
        self.au_counts[:, 2] += (predictions == 0) & (labels == 1)
        self.au_counts[:, 3] += (predictions == 0) & (labels == 0)
        self.n_samples += 1

    def update_emotion(self, true_index: int, pred_index: int) -> None:
        self.emotion_confusion[true_index, pred_index] += 1

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        self.au_counts += other.au_counts
        if other.emotion_confusion.size:
            self.emotion_confusion += other.emotion_confusion
        self.n_samples += other.n_samples
        return self


def f1_and_acc(acc: MetricAccumulator, au_ids: Sequence[int]) -> dict:
    """Per-AU binary F1 / accuracy over accumulated counts, macro-averaged.
    F1 is 0 when its denominator is 0 (AU never predicted nor present)."""
    if acc.n_samples == 0:
        raise EmptyAccumulatorError("no samples accumulated")
    per_au = []
    f1s, accs = [], []
    for i, au in enumerate(au_ids):
        tp, fp, fn, tn = (int(v) for v in acc.au_counts[i])
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom > 0 else 0.0
        accuracy = (tp + tn) / max(tp + fp + fn + tn, 1)
        per_au.append(
            {"au": int(au), "f1": f1, "acc": accuracy, "tp": tp, "fp": fp, "fn": fn, "tn": tn}
        )
        f1s.append(f1)
        accs.append(accuracy)
    return {
        "per_au": per_au,
        "mean_f1": float(np.mean(f1s)),
        "mean_acc": float(np.mean(accs)),
        "n_samples": acc.n_samples,
    }


# ---------------------------------------------------------------------------
# Input preparation
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class PreparedSample:
    sample_id: str
    subject_id: str
    image: torch.Tensor  # (3, S, S)
    token_indices: list[np.ndarray]  # per AU, (N_L,) flat cells
    labels: np.ndarray
    emotion: Optional[str]
    apex_path: Optional[str]


def _read_frame(path: str) -> np.ndarray:
    frame = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if frame is None:
        raise MicroAUError(f"could not read frame {path}")
    return frame


def prepare_sample(sample: Sample, config: Config, spec: AUTaskSpec,
                   grid_size: tuple[int, int]) -> PreparedSample:
    """Flow -> magnify -> resize -> render, plus landmark cell lookup."""
    if sample.flow_path is not None:
        flow = read_flow(sample.flow_path)
    else:
        onset = _read_frame(sample.onset_path)
        apex = _read_frame(sample.apex_path)
        flow = compute_flow(onset, apex, method=config.flow_method)
    frame_size = (flow.h0, flow.w0)
    _, image = prepare_flow(flow, config.magnification, config.input_size)
    indices = au_token_indices(spec, sample.landmarks, frame_size, grid_size)
    return PreparedSample(
        sample_id=sample.sample_id,
        subject_id=sample.subject_id,
        image=image,
        token_indices=indices,
        labels=sample.au_labels.copy(),
        emotion=sample.emotion,
        apex_path=sample.apex_path,
    )


def prepare_all(samples: Sequence[Sample], config: Config, spec: AUTaskSpec) -> dict[str, PreparedSample]:
    grid = grid_size_for(config)
    prepared = {}
    for sample in samples:
        if sample.sample_id in prepared:
            raise MicroAUError(f"duplicate sample id {sample.sample_id}")
        prepared[sample.sample_id] = prepare_sample(sample, config, spec, grid)
    return prepared


def grid_size_for(config: Config) -> tuple[int, int]:
    if config.encoder_kind == "toy":
        g = config.input_size // config.toy_patch_size
    else:
        g = config.input_size // 32
    return g, g


def collate(prepared: Sequence[PreparedSample]) -> tuple[torch.Tensor, list[torch.Tensor], torch.Tensor]:
    images = torch.stack([p.image for p in prepared])
    n_aus = len(prepared[0].token_indices)
    indices = [
        torch.from_numpy(np.stack([p.token_indices[n] for p in prepared])) for n in range(n_aus)
    ]
    labels = torch.from_numpy(np.stack([p.labels for p in prepared])).to(torch.long)
    return images, indices, labels


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class FoldResult:
    fold: Fold
    model: AUDetector
    final_train_loss: float
    train_metrics: MetricAccumulator
    test_metrics: MetricAccumulator
    test_predictions: dict[str, dict]


def _predict(model: AUDetector, batch: Sequence[PreparedSample]) -> tuple[np.ndarray, np.ndarray]:
    images, indices, _ = collate(batch)
    with torch.no_grad():
        output = model(images, indices)
    probs = output.gsd.probabilities.detach().numpy()
    preds = probs.argmax(axis=-1)
    return probs, preds


def evaluate(model: AUDetector, prepared: Sequence[PreparedSample]) -> tuple[MetricAccumulator, dict[str, dict]]:
    model.eval()
    acc = MetricAccumulator(model.task_spec.n_aus)
    predictions: dict[str, dict] = {}
    for start in range(0, len(prepared), 64):
        batch = prepared[start : start + 64]
        probs, preds = _predict(model, batch)
        for p, prob_row, pred_row in zip(batch, probs, preds):
            acc.update_au(pred_row, p.labels)
            predictions[p.sample_id] = {
                "labels": [int(v) for v in p.labels],
                "pred": [int(v) for v in pred_row],
                "probs": [[round(float(a), 6), round(float(b), 6)] for a, b in prob_row],
            }
    return acc, predictions


def train_fold(
    fold: Fold,
    prepared: dict[str, PreparedSample],
    config: Config,
    spec: AUTaskSpec,
    fold_index: int = 0,
) -> FoldResult:
    """One LOSO fold: fresh seeded model, SGD with the two-group schedule."""
    torch.manual_seed(config.seed)
    model = AUDetector(config, spec)
    shuffler = np.random.default_rng([config.seed, fold_index])
    encoder_params = [p for p in model.encoder_parameters() if p.requires_grad]
    head_params = [p for p in model.head_parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(
        [
            {"params": encoder_params, "lr": config.lr_encoders},
            {"params": head_params, "lr": config.lr_heads},
        ],
        momentum=config.momentum,
    )
    train_items = [prepared[i] for i in fold.train_ids]
    final_loss = float("nan")
    model.train()
    for epoch in range(config.epochs):
        lr_enc, lr_head = lr_schedule(epoch, config)
        optimizer.param_groups[0]["lr"] = lr_enc
        optimizer.param_groups[1]["lr"] = lr_head
        order = shuffler.permutation(len(train_items))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_items[i] for i in order[start : start + config.batch_size]]
            images, indices, labels = collate(batch)
            output = model(images, indices)
            losses = model.training_losses(output, labels)
            loss = losses["total"]
            if not torch.isfinite(loss):
                raise DivergedLossError(
                    f"non-finite loss at fold {fold.held_out_subject!r} epoch {epoch}: "
                    + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in losses.items())
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        final_loss = epoch_loss / max(n_batches, 1)
    train_metrics, _ = evaluate(model, train_items)
    test_items = [prepared[i] for i in fold.test_ids]
    test_metrics, test_predictions = evaluate(model, test_items)
    return FoldResult(
        fold=fold,
        model=model,
        final_train_loss=final_loss,
        train_metrics=train_metrics,
        test_metrics=test_metrics,
        test_predictions=test_predictions,
    )


def run_loso(
    samples: Sequence[Sample],
    config: Config,
    spec: AUTaskSpec,
    out_dir: str,
) -> dict:
    """Train every fold, write per-fold checkpoints and the aggregate metrics
    file (metrics.json); returns the metrics dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prepared = prepare_all(samples, config, spec)
    folds = loso_split(samples)
    loso_acc = MetricAccumulator(spec.n_aus)
    train_acc = MetricAccumulator(spec.n_aus)
    fold_reports = []
    for fold_index, fold in enumerate(folds):
        result = train_fold(fold, prepared, config, spec, fold_index=fold_index)
        loso_acc.merge(result.test_metrics)
        train_acc.merge(result.train_metrics)
        ckpt_dir = out / f"fold_{fold.held_out_subject}"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(
            str(ckpt_dir / "checkpoint.bin"),
            result.model,
            config,
            spec,
            fold_id=fold.held_out_subject,
            epoch=config.epochs,
        )
        fold_reports.append(
            {
                "held_out_subject": fold.held_out_subject,
                "n_train": len(fold.train_ids),
                "n_test": len(fold.test_ids),
                "final_train_loss": round(result.final_train_loss, 6),
                "test": f1_and_acc(result.test_metrics, spec.au_ids),
                "predictions": result.test_predictions,
            }
        )
    metrics = {
        "config": config.as_dict(),
        "au_ids": [int(a) for a in spec.au_ids],
        "n_folds": len(folds),
        "loso": f1_and_acc(loso_acc, spec.au_ids),
        "train_accumulated": f1_and_acc(train_acc, spec.au_ids),
        "folds": fold_reports,
    }
    write_metrics(str(out / "metrics.json"), metrics)
    return metrics


def write_metrics(path: str, metrics: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class Checkpoint:
    config: Config
    task_spec: AUTaskSpec
    fold_id: str
    epoch: int
    state: dict[str, np.ndarray]
    rng_state: bytes

    def build_model(self) -> AUDetector:
        torch.manual_seed(self.config.seed)
        model = AUDetector(self.config, self.task_spec)
        tensors = {k: torch.from_numpy(v.copy()) for k, v in self.state.items()}
        model.load_state_dict(tensors)
        model.eval()
        return model


def _spec_to_jsonable(spec: AUTaskSpec) -> dict:
    return {
        "au_ids": list(spec.au_ids),
        "landmark_indices": [list(t) for t in spec.landmark_indices],
        "prompts": [list(p) for p in spec.prompts],
    }


def _spec_from_jsonable(obj: dict) -> AUTaskSpec:
    return validate_task_spec(
        AUTaskSpec(
            au_ids=tuple(obj["au_ids"]),
            landmark_indices=tuple(tuple(t) for t in obj["landmark_indices"]),
            prompts=tuple((p[0], p[1]) for p in obj["prompts"]),
        )
    )


def save_checkpoint(
    path: str,
    model: AUDetector,
    config: Config,
    spec: AUTaskSpec,
    fold_id: str,
    epoch: int,
) -> None:
    """Versioned container; writing the same model twice yields identical bytes."""
    state = {name: tensor.detach().numpy() for name, tensor in model.state_dict().items()}
    names = sorted(state)
    tensor_meta = []
    for name in names:
        arr = np.ascontiguousarray(state[name])
        state[name] = arr
        tensor_meta.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": config.as_dict(),
        "task_spec": _spec_to_jsonable(spec),
        "fold_id": fold_id,
        "epoch": epoch,
        "tensors": tensor_meta,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    rng_bytes = bytes(torch.get_rng_state().numpy().tobytes())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<Q", len(rng_bytes)))
        fh.write(rng_bytes)
        for name in names:
            fh.write(state[name].tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
        view = io.BytesIO(blob)
        if view.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (meta_len,) = struct.unpack("<Q", view.read(8))
        meta = json.loads(view.read(meta_len).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}"
            )
        (rng_len,) = struct.unpack("<Q", view.read(8))
        rng_state = view.read(rng_len)
        state: dict[str, np.ndarray] = {}
        for entry in meta["tensors"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = view.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise CheckpointError(f"{path}: truncated tensor data for {entry['name']}")
            state[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if view.read(1):
            raise CheckpointError(f"{path}: trailing bytes after tensor data")
        config = Config(**meta["config"]).validate()
        spec = _spec_from_jsonable(meta["task_spec"])
        return Checkpoint(
            config=config,
            task_spec=spec,
            fold_id=meta["fold_id"],
            epoch=int(meta["epoch"]),
            state=state,
            rng_state=rng_state,
        )
    except CheckpointError:
        raise
    except MicroAUError as exc:
        raise CheckpointError(f"{path}: invalid checkpoint payload: {exc}") from exc
    except Exception as exc:
        raise CheckpointError(f"{path}: corrupted checkpoint: {exc}") from exc
