"""Command-line entry point.

Subcommands: synth, train, eval, mer, visualize, config. All diagnostics go
to stderr, all data to files; exit codes are stable so ablation sweeps can be
scripted:

    2  synthetic-data / IO error
    3  training diverged (non-finite loss)
    4  configuration error (missing/unknown/bad keys)
    5  checkpoint unreadable, wrong version, or task-spec mismatch
    6  manifest lacks emotion labels (mer)
    7  unknown sample id (visualize)
    1  any other pipeline error
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import torch

from . import data as data_mod
from .core import (
    ConfigError,
    MicroAUError,
    default_config_text,
    default_task_spec,
    load_config,
    load_task_spec,
)
from .mer import (
    EmotionSpec,
    classify_emotion,
    emotion_scores,
    filter_matrix,
    label_text_embeddings,
    load_emotion_spec,
    macro_f1,
)
from .train import (
    CheckpointError,
    DivergedLossError,
    MetricAccumulator,
    evaluate,
    f1_and_acc,
    load_checkpoint,
    prepare_all,
    run_loso,
    write_metrics,
)
from .visualize import UnknownSampleError, render_heatmap, render_simmatrix

EXIT_IO = 2
EXIT_DIVERGED = 3
EXIT_CONFIG = 4
EXIT_CHECKPOINT = 5
EXIT_NO_EMOTION = 6
EXIT_UNKNOWN_SAMPLE = 7


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_synth(args) -> int:
    try:
        spec = data_mod.load_synthetic_spec(args.spec)
        manifest = data_mod.generate_synthetic(spec, seed=args.seed, out_dir=args.out)
    except (MicroAUError, OSError) as exc:
        return _fail(EXIT_IO, str(exc))
    print(manifest)
    return 0


def _load_run_inputs(args):
    config = load_config(args.config)
    overrides = {}
    for key in ("pooling", "fusion", "alpha", "beta", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "cl_variant", None) is not None:
        overrides["cl_variant"] = args.cl_variant
    if overrides:
        config = dataclasses.replace(config, **overrides).validate()
    if args.spec:
        task_spec = load_task_spec(args.spec)
    else:
        task_spec = default_task_spec(args.dataset)
    samples = data_mod.load_manifest(args.manifest, task_spec)
    return config, task_spec, samples


def cmd_train(args) -> int:
    try:
        config, task_spec, samples = _load_run_inputs(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except (MicroAUError, OSError) as exc:
        return _fail(1, str(exc))
    try:
        metrics = run_loso(samples, config, task_spec, args.out)
    except DivergedLossError as exc:
        return _fail(EXIT_DIVERGED, str(exc))
    except (MicroAUError, OSError) as exc:
        return _fail(1, str(exc))
    print(str(Path(args.out) / "metrics.json"))
    print(
        f"LOSO mean F1 {metrics['loso']['mean_f1']:.4f} ACC {metrics['loso']['mean_acc']:.4f} "
        f"(train F1 {metrics['train_accumulated']['mean_f1']:.4f})",
        file=sys.stderr,
    )
    return 0


def _model_from_checkpoint(path: str):
    ckpt = load_checkpoint(path)
    return ckpt, ckpt.build_model()


def cmd_eval(args) -> int:
    try:
        ckpt, model = _model_from_checkpoint(args.checkpoint)
        if args.spec:
            requested = load_task_spec(args.spec)
            if requested != ckpt.task_spec:
                return _fail(
                    EXIT_CHECKPOINT,
                    "task spec mismatch: the checkpoint was trained with different "
                    "AUs/landmarks/prompts than the requested spec",
                )
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, str(exc))
    except (MicroAUError, OSError) as exc:
        return _fail(1, str(exc))
    try:
        samples = data_mod.load_manifest(args.manifest, ckpt.task_spec)
        prepared = prepare_all(samples, ckpt.config, ckpt.task_spec)
        acc, predictions = evaluate(model, list(prepared.values()))
        metrics = {
            "checkpoint": Path(args.checkpoint).name,
            "fold_id": ckpt.fold_id,
            "au_ids": [int(a) for a in ckpt.task_spec.au_ids],
            "metrics": f1_and_acc(acc, ckpt.task_spec.au_ids),
            "predictions": predictions,
        }
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(str(out / "eval_metrics.json"), metrics)
    except (MicroAUError, OSError) as exc:
        return _fail(1, str(exc))
    print(str(out / "eval_metrics.json"))
    return 0


def cmd_mer(args) -> int:
    try:
        ckpt, model = _model_from_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, str(exc))
    except (MicroAUError, OSError) as exc:
        return _fail(1, str(exc))
    try:
        espec = load_emotion_spec(args.emotion_spec) if args.emotion_spec else EmotionSpec()
        samples = data_mod.load_manifest(args.manifest, ckpt.task_spec)
        missing = [s.sample_id for s in samples if s.emotion is None]
        if missing:
            return _fail(
                EXIT_NO_EMOTION,
                f"manifest lacks emotion labels for {len(missing)} samples (e.g. {missing[0]})",
            )
        unknown = sorted({s.emotion for s in samples} - set(espec.emotions))
        if unknown:
            return _fail(1, f"manifest emotions {unknown} not in the emotion spec")
        prepared = prepare_all(samples, ckpt.config, ckpt.task_spec)
        with torch.no_grad():
            prompts = model.encode_prompts(espec.label_texts)
            pos = prompts.pos / prompts.pos.norm(dim=-1, keepdim=True)
            neg = prompts.neg / prompts.neg.norm(dim=-1, keepdim=True)
            encoded = prompts.emotion / prompts.emotion.norm(dim=-1, keepdim=True)
            label_embs = label_text_embeddings(espec, ckpt.task_spec, pos, neg, encoded)
            mask = filter_matrix(espec, ckpt.task_spec)
            acc = MetricAccumulator(ckpt.task_spec.n_aus, n_emotions=espec.n_emotions)
            predictions = {}
            items = list(prepared.values())
            for start in range(0, len(items), 64):
                batch = items[start : start + 64]
                from .train import collate

                images, indices, _ = collate(batch)
                output = model(images, indices)
                for p, visual in zip(batch, output.au_visual):
                    scores = emotion_scores(visual, label_embs, mask)
                    pred = classify_emotion(scores)
                    acc.update_emotion(espec.index_of(p.emotion), pred)
                    predictions[p.sample_id] = {
                        "true": p.emotion,
                        "pred": espec.emotions[pred],
                        "scores": [round(float(v), 6) for v in scores],
                    }
        per_class, macro = macro_f1(acc.emotion_confusion)
        report = {
            "emotions": list(espec.emotions),
            "per_class_f1": {e: round(float(f), 6) for e, f in zip(espec.emotions, per_class)},
            "macro_f1": round(float(macro), 6),
            "confusion": [[int(v) for v in row] for row in acc.emotion_confusion],
            "predictions": predictions,
        }
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(str(out / "mer_metrics.json"), report)
    except (MicroAUError, OSError) as exc:
        return _fail(1, str(exc))
    print(str(out / "mer_metrics.json"))
    return 0


def cmd_visualize(args) -> int:
    try:
        ckpt, model = _model_from_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, str(exc))
    except (MicroAUError, OSError) as exc:
        return _fail(1, str(exc))
    try:
        samples = data_mod.load_manifest(args.manifest, ckpt.task_spec)
        prepared = prepare_all(samples, ckpt.config, ckpt.task_spec)
        wanted = [s.strip() for s in args.sample.split(",")] if args.sample else []
        for sid in wanted:
            if sid not in prepared:
                raise UnknownSampleError(f"sample id {sid!r} not in the manifest")
        if args.kind == "heatmap":
            if len(wanted) != 1:
                raise MicroAUError("heatmap needs exactly one --sample id")
            written = render_heatmap(model, prepared[wanted[0]], args.out, f"heatmap_{wanted[0]}")
        else:
            batch_ids = wanted or list(prepared)[: ckpt.config.batch_size]
            if ckpt.task_spec.n_aus == 0:
                raise MicroAUError("empty task spec")
            au_id = args.au if args.au is not None else ckpt.task_spec.au_ids[0]
            if au_id not in ckpt.task_spec.au_ids:
                raise MicroAUError(f"AU{au_id} not in the checkpoint's task spec")
            written = render_simmatrix(
                model,
                [prepared[s] for s in batch_ids],
                ckpt.task_spec.index_of(au_id),
                args.out,
                f"simmatrix_au{au_id}",
            )
    except UnknownSampleError as exc:
        return _fail(EXIT_UNKNOWN_SAMPLE, str(exc))
    except (MicroAUError, OSError) as exc:
        return _fail(1, str(exc))
    for path in written:
        print(path)
    return 0


def cmd_config(args) -> int:
    text = default_config_text()
    if args.out:
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as exc:
            return _fail(EXIT_IO, str(exc))
        print(args.out)
    else:
        print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microau",
        description="Micro-expression AU detection: synthetic data, LOSO training, "
        "evaluation, zero-shot emotion recognition, and visualization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset from a recipe file")
    p_synth.add_argument("--spec", required=True, help="synthetic recipe (key = value)")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--seed", type=int, default=1)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="LOSO training over a manifest")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--manifest", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--spec", help="task-spec override file")
    p_train.add_argument("--dataset", default="casme2", choices=("casme2", "samm"))
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--pooling", choices=("pta", "maxpool", "meanpool"), default=None)
    p_train.add_argument("--fusion", choices=("gda", "add_mlp", "cat_mlp"), default=None)
    p_train.add_argument(
        "--cl-variant", dest="cl_variant",
        choices=("none", "global_orig", "local_orig", "miauc"), default=None,
    )
    p_train.add_argument("--alpha", type=float, default=None)
    p_train.add_argument("--beta", type=float, default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--spec", help="expected task spec; mismatch is an error")
    p_eval.set_defaults(func=cmd_eval)

    p_mer = sub.add_parser("mer", help="zero-shot emotion recognition from AU features")
    p_mer.add_argument("--checkpoint", required=True)
    p_mer.add_argument("--manifest", required=True)
    p_mer.add_argument("--emotion-spec", dest="emotion_spec", default=None)
    p_mer.add_argument("--out", required=True)
    p_mer.set_defaults(func=cmd_mer)

    p_vis = sub.add_parser("visualize", help="render attention heatmaps or similarity matrices")
    p_vis.add_argument("--checkpoint", required=True)
    p_vis.add_argument("--manifest", required=True)
    p_vis.add_argument("--sample", default=None, help="sample id (heatmap) or comma list (simmatrix)")
    p_vis.add_argument("--kind", required=True, choices=("heatmap", "simmatrix"))
    p_vis.add_argument("--au", type=int, default=None, help="AU id for simmatrix")
    p_vis.add_argument("--out", required=True)
    p_vis.set_defaults(func=cmd_visualize)

    p_cfg = sub.add_parser("config", help="emit the documented default config file")
    p_cfg.add_argument("--out", default=None)
    p_cfg.set_defaults(func=cmd_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
