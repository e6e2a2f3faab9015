import json
import time
from pathlib import Path

import pytest

from microau.cli import main
from microau.data import default_synthetic_spec_text

# Small enough to finish in seconds, long enough to overfit the synthetic set.
# finetune_last_k_layers=1 matches the 1-block toy encoders.
OVERFIT_CONFIG = """\
alpha = 0.6
beta = 1.0
batch_size = 8
epochs = 120
lr_encoders = 0.001
lr_heads = 0.01
lr_decay_epoch = 60
magnification = 3
input_size = 224
seed = 1
encoder_kind = toy
pooling = pta
fusion = gda
cl_variant = miauc
finetune_last_k_layers = 1
"""


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """One shared synthetic dataset plus the trained runs the acceptance
    criteria inspect: base, seeded repeat, two ablations, and zero-shot MER."""
    root = tmp_path_factory.mktemp("overfit")
    spec_path = root / "synth_spec.txt"
    spec_path.write_text(default_synthetic_spec_text())
    config_path = root / "run.cfg"
    config_path.write_text(OVERFIT_CONFIG)
    data_dir = root / "data"

    t0 = time.time()
    assert main(["synth", "--spec", str(spec_path), "--out", str(data_dir), "--seed", "1"]) == 0
    manifest = data_dir / "manifest.tsv"
    task_spec = data_dir / "task_spec.txt"
    base_args = [
        "train",
        "--config", str(config_path),
        "--manifest", str(manifest),
        "--spec", str(task_spec),
    ]
    assert main(base_args + ["--out", str(root / "run_base")]) == 0
    base_wall = time.time() - t0
    assert main(base_args + ["--out", str(root / "run_repeat")]) == 0
    assert main(base_args + ["--out", str(root / "run_meanpool"), "--pooling", "meanpool"]) == 0
    assert main(base_args + ["--out", str(root / "run_nocl"), "--cl-variant", "none"]) == 0

    checkpoint = root / "run_base" / "fold_sub01" / "checkpoint.bin"
    assert main([
        "mer",
        "--checkpoint", str(checkpoint),
        "--manifest", str(manifest),
        "--emotion-spec", str(data_dir / "emotions.txt"),
        "--out", str(root / "mer"),
    ]) == 0

    return {
        "root": root,
        "data_dir": data_dir,
        "manifest": manifest,
        "task_spec": task_spec,
        "emotion_spec": data_dir / "emotions.txt",
        "config": config_path,
        "synth_spec": spec_path,
        "base": root / "run_base" / "metrics.json",
        "repeat": root / "run_repeat" / "metrics.json",
        "meanpool": root / "run_meanpool" / "metrics.json",
        "nocl": root / "run_nocl" / "metrics.json",
        "checkpoint": checkpoint,
        "mer_metrics": root / "mer" / "mer_metrics.json",
        "base_wall_seconds": base_wall,
    }


def load_json(path: Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
