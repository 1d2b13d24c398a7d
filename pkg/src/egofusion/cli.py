"""Command-line entry point: preprocessing, partitioning, training, fusion and evaluation.

Every subcommand accepts ``--config FILE``: a flat ``key = value`` text file
whose keys are the long option names (dashes or underscores). Flags given on
the command line override file values.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from egofusion.audio import SpectrogramConfig, compute_spectrogram, read_wav
from egofusion.dataops import (
    AnnotationRecord,
    LabelSpace,
    homemade_partition,
    marginalize,
    parse_annotations,
    read_partition,
    unseen_participant_partition,
    write_partition,
)
from egofusion.evalkit import (
    accuracy_difference,
    confusion_matrix,
    evaluate,
    largest_class_baseline,
    random_baseline,
    write_matrix,
    write_report,
)
from egofusion.formats import read_checkpoint, read_frames, read_spectrogram, write_checkpoint, write_spectrogram
from egofusion.fusion import (
    FcFusionHead,
    FeatureInputs,
    StreamScores,
    concat_penultimate,
    grid_search_weights,
    read_scores,
    train_fc_fusion,
    weighted_sum_fuse,
    write_scores,
)
from egofusion.nets import (
    STREAM_ORDER,
    DilatedNet,
    DilatedNetConfig,
    FrameInputs,
    SpectrogramInputs,
    TrainHyper,
    TsnModel,
    VisualBackbone,
    VisualBackboneConfig,
    build_model,
    predict,
    train_stream,
    write_history,
)

log = logging.getLogger("egofusion")

TASKS = ("verb", "noun", "action")
FUSION_METHODS = ("none", "unweighted", "weighted", "fc")


class CliError(ValueError):
    """Invalid invocation or inputs (exit code 1)."""


@dataclass(frozen=True)
class RunConfig:
    task: str = "action"
    streams: tuple[str, ...] = ("audio",)
    fusion: str = "none"
    lr: float = 1e-4
    momentum: float = 0.9
    batch: int = 6
    epochs: int = 30
    patience: int = 10
    seed: int = 0
    monitor: str = "top1"

    def __post_init__(self):
        if self.task not in TASKS:
            raise CliError(f"task must be one of {TASKS}")
        unknown = set(self.streams) - set(STREAM_ORDER)
        if unknown or not self.streams:
            raise CliError(f"streams must be a non-empty subset of {STREAM_ORDER}")
        if self.fusion not in FUSION_METHODS:
            raise CliError(f"fusion must be one of {FUSION_METHODS}")
        if self.fusion != "none" and len(self.streams) < 2:
            raise CliError("fusion needs at least two streams")
        if not self.lr > 0:
            raise CliError("lr must be positive")
        if self.batch < 1 or self.epochs < 1 or self.patience < 1:
            raise CliError("batch, epochs and patience must be positive")
        if self.monitor not in ("top1", "loss"):
            raise CliError("monitor must be top1 or loss")

    @property
    def hyper(self) -> TrainHyper:
        return TrainHyper(self.lr, self.momentum, self.batch, self.epochs, self.patience, self.seed, self.monitor)


def read_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path} line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _run_config(args) -> RunConfig:
    streams = tuple(s for s in args.streams.split(",") if s) if isinstance(args.streams, str) else tuple(args.streams)
    return RunConfig(args.task, streams, args.fusion, args.lr, args.momentum, args.batch, args.epochs,
                     args.patience, args.seed, args.monitor)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v)
    except ValueError as exc:
        raise CliError(f"expected comma-separated integers, got {text!r}") from exc


# --------------------------------------------------------------------------- data helpers


def _records(path) -> list[AnnotationRecord]:
    return parse_annotations(path)


def _split_records(records, partition_path, split: str) -> list[AnnotationRecord]:
    if split == "all":
        return list(records)
    part = read_partition(partition_path)
    missing = [r.segment_id for r in records if r.segment_id not in part.assignment]
    if missing:
        raise CliError(f"partition lacks {len(missing)} annotated segments, e.g. {missing[0]}")
    return [r for r in records if part.assignment[r.segment_id] == split]


def _stream_inputs(stream: str, records, data_dir: Path, spec_dir: Path | None, k: int, crop: int | None):
    ids = [r.segment_id for r in records]
    if stream == "audio":
        spec_dir = spec_dir or data_dir / "spectrograms"
        return SpectrogramInputs(np.stack([read_spectrogram(spec_dir / f"{i}.spg") for i in ids]))
    sub = "frames" if stream == "rgb" else "flow"
    return FrameInputs([read_frames(data_dir / sub / f"{i}.img") for i in ids], k, crop)


def _sidecar(checkpoint: Path) -> Path:
    return checkpoint.with_suffix(".json")


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> None:
    from egofusion.synth import SynthConfig, synth_multimodal_generate

    cfg = SynthConfig(num_verbs=args.verbs, num_nouns=args.nouns, samples_per_action=args.samples)
    synth_multimodal_generate(cfg, args.seed).save(args.out_dir)
    print(f"wrote {cfg.num_verbs * cfg.num_nouns * cfg.samples_per_action} segments to {args.out_dir}")


def cmd_spectrogram(args) -> None:
    cfg = SpectrogramConfig.from_profile(args.profile)
    wavs = sorted(Path(args.audio_dir).glob("*.wav"))
    if not wavs:
        raise CliError(f"no .wav files in {args.audio_dir}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for wav in wavs:
        write_spectrogram(out / f"{wav.stem}.spg", compute_spectrogram(read_wav(wav), cfg).data)
    print(f"wrote {len(wavs)} spectrograms ({args.profile}, {cfg.expected_shape()}) to {out}")


def cmd_partition(args) -> None:
    records = _records(args.annotations)
    if args.scheme == "homemade":
        spec = homemade_partition(records, args.seed)
    else:
        spec = unseen_participant_partition(records, args.seed)
    write_partition(args.out, spec)
    print(" ".join(f"{k}={v}" for k, v in spec.counts().items()))


def cmd_train(args) -> None:
    run = _run_config(args)
    if len(run.streams) != 1:
        raise CliError("train takes exactly one stream")
    stream = run.streams[0]
    data = Path(args.data)
    records = _records(data / "annotations.csv")
    space = LabelSpace.from_records(records, run.task)
    train_recs = _split_records(records, args.partition, "train")
    val_recs = _split_records(records, args.partition, "val")
    both = train_recs + val_recs
    spec_dir = Path(args.spectrograms) if args.spectrograms else None
    inputs = _stream_inputs(stream, both, data, spec_dir, args.k, args.crop)
    labels = space.index(both)
    if stream == "audio":
        shape = inputs.spectrograms.shape[1:]
        config = DilatedNetConfig.scaled(space.size, _int_list(args.widths), shape) if args.widths \
            else DilatedNetConfig(space.size, tuple(shape))
        model = DilatedNet(config, run.seed)
    else:
        channels = inputs.frames[0].shape[1]
        size = args.crop or inputs.frames[0].shape[2]
        widths = _int_list(args.widths) if args.widths else (8, 16, 16, 32)
        config = VisualBackboneConfig(space.size, channels, size, widths)
        model = TsnModel(VisualBackbone(config, run.seed), args.k)
    n_train = len(train_recs)
    result = train_stream(model, inputs, labels, range(n_train), range(n_train, len(both)), run.hyper)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.egf"
    write_checkpoint(ckpt, model.state_dict())
    sidecar = {"stream": stream, "task": run.task, "labels": list(space.ids), "model": config.to_dict(),
               "k": args.k, "crop": args.crop, "best_epoch": result.best_epoch,
               "best_val_top1": result.best_val_top1, "best_val_loss": result.best_val_loss}
    _sidecar(ckpt).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    write_history(out / "history.csv", result.history)
    print(f"{stream}: best val top-1 {result.best_val_top1:.4f} at epoch {result.best_epoch}; wrote {ckpt}")


def _load_model(checkpoint: Path):
    meta_path = _sidecar(checkpoint)
    if not meta_path.exists():
        raise CliError(f"missing model config {meta_path}")
    meta = json.loads(meta_path.read_text())
    model = build_model(meta["model"], k=meta.get("k", 3))
    model.load_state_dict(read_checkpoint(checkpoint))
    model.freeze()
    return model, meta


def cmd_scores(args) -> None:
    checkpoint = Path(args.checkpoint)
    model, meta = _load_model(checkpoint)
    data = Path(args.data)
    records = _split_records(_records(data / "annotations.csv"), args.partition, args.split)
    spec_dir = Path(args.spectrograms) if args.spectrograms else None
    inputs = _stream_inputs(meta["stream"], records, data, spec_dir, meta.get("k", 3), meta.get("crop"))
    probs, pen = predict(model, inputs, range(len(records)))
    write_scores(args.out, [r.segment_id for r in records], probs, pen)
    print(f"wrote {meta['stream']} scores for {len(records)} segments to {args.out}")


def _aligned_scores(paths: Sequence[str], streams: Sequence[str]) -> tuple[list[str], list[StreamScores]]:
    if len(paths) != len(streams):
        raise CliError("one score file per stream required")
    ids, out = None, []
    for path, sid in zip(paths, streams):
        file_ids, probs, pen = read_scores(path)
        if ids is None:
            ids = file_ids
        elif file_ids != ids:
            raise CliError(f"{path} covers different segments than {paths[0]}")
        out.append(StreamScores(sid, probs, pen))
    return ids, out


def cmd_fuse(args) -> None:
    run = _run_config(args)
    if run.fusion == "none":
        raise CliError("fuse needs --fusion unweighted, weighted or fc")
    ids, scores = _aligned_scores(args.scores, run.streams)
    records = {r.segment_id: r for r in _records(args.annotations)}
    part = read_partition(args.partition)
    space = LabelSpace.from_records(list(records.values()), run.task)
    labels = space.index([records[i] for i in ids])
    split = np.array([part.assignment[i] for i in ids])
    train_idx, val_idx = np.flatnonzero(split == "train"), np.flatnonzero(split == "val")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probs = [s.probs for s in scores]
    if run.fusion == "unweighted":
        fused = weighted_sum_fuse(probs)
        weights = (1.0,) * len(probs)
    elif run.fusion == "weighted":
        if val_idx.size == 0:
            raise CliError("weighted fusion needs validation segments in the score files")
        weights = grid_search_weights([p[val_idx] for p in probs], labels[val_idx])
        fused = weighted_sum_fuse(probs, weights)
    else:
        features = concat_penultimate(scores)
        head = FcFusionHead(features.shape[1], space.size, args.hidden, seed=run.seed)
        result = train_fc_fusion(head, features, labels, train_idx, val_idx, run.hyper)
        fused, _ = head.scores(FeatureInputs(features).batch(np.arange(len(ids))))
        write_checkpoint(out / "head.egf", head.state_dict())
        (out / "head.json").write_text(json.dumps(
            {"input_dim": head.input_dim, "hidden_dim": head.hidden_dim, "num_classes": head.num_classes,
             "streams": list(run.streams), "task": run.task, "labels": list(space.ids)},
            indent=2, sort_keys=True) + "\n")
        write_history(out / "history.csv", result.history)
        weights = None
    if weights is not None:
        _write_csv(out / "weights.csv", ["stream", "weight"], [[s, f"{w:.1f}"] for s, w in zip(run.streams, weights)])
    write_scores(out / "predictions.csv", ids, fused, None)
    print(f"{run.fusion} fusion of {','.join(run.streams)} -> {out / 'predictions.csv'}")


def cmd_eval(args) -> None:
    records_all = _records(args.annotations)
    by_id = {r.segment_id: r for r in records_all}
    part = read_partition(args.partition)
    target = LabelSpace.from_records(records_all, args.task)
    source_task = args.scores_task or args.task
    source = LabelSpace.from_records(records_all, source_task)

    def load(path):
        ids, probs, _ = read_scores(path)
        if probs.shape[1] != source.size:
            raise CliError(f"{path}: {probs.shape[1]} score columns but {source.size} {source_task} classes")
        keep = [i for i, sid in enumerate(ids) if part.assignment.get(sid) == args.split]
        if not keep:
            raise CliError(f"{path}: no segments in split {args.split!r}")
        probs = probs[keep]
        if source_task != args.task:
            if source_task != "action":
                raise CliError("only action scores can be marginalized to another task")
            probs = marginalize(probs, source, target)
        return [ids[i] for i in keep], probs

    ids, probs = load(args.predictions)
    labels = target.index([by_id[i] for i in ids])
    reports = [(args.method_name, evaluate(probs, labels, target.size))]
    if args.compare:
        cmp_ids, cmp_probs = load(args.compare)
        if cmp_ids != ids:
            raise CliError("compared prediction files cover different segments")
        reports.insert(0, (args.compare_name, evaluate(cmp_probs, labels, target.size)))
    if args.baselines:
        train_labels = target.index([r for r in records_all if part.assignment.get(r.segment_id) == "train"])
        reports.append(("Largest class", largest_class_baseline(train_labels, labels, target.size)))
        reports.append(("Chance/Random", random_baseline(train_labels, labels, target.size, args.trials, args.seed)))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = target.names()
    write_report(out / "report.csv", reports, names)
    cm, kept = confusion_matrix(probs.argmax(axis=1), labels, target.size, min_support=args.min_support)
    write_matrix(out / "confusion.csv", cm, [names[c] for c in kept])
    delta = None
    if args.compare:
        delta = accuracy_difference(cmp_probs, probs, labels)
        _write_csv(out / "accdiff.csv", ["class", "delta"], [[names[c], f"{d:.6f}"] for c, d in delta.items()])
    if args.plots:
        from egofusion import plotting

        plotting.confusion_figure(cm, [names[c] for c in kept], out / "confusion.png",
                                  title=f"{args.method_name}, {args.task}")
        if delta is not None:
            plotting.accuracy_difference_figure(delta, names, out / "accdiff.png",
                                                title=f"{args.compare_name} to {args.method_name}")
    main_report = dict(reports)[args.method_name]
    print(f"{args.method_name} {args.task} top-1 {main_report.top1:.4f} top-5 {main_report.top5:.4f} "
          f"on {len(ids)} segments")


def cmd_experiment(args) -> None:
    from egofusion.pipeline import ExperimentConfig, run_experiment

    result = run_experiment(ExperimentConfig(seed=args.seed, plots=args.plots), args.out_dir)
    for key in ("verb/Audio/top1", "noun/RGB+Flow/top1", "action/RGB+Flow+Audio FC/top1"):
        print(f"{key} {result.summary[key]:.4f}")
    print(f"finished in {result.elapsed_s:.1f}s; reports in {result.out_dir}")


# --------------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def _add_run_options(p, streams_default: str) -> None:
    p.add_argument("--task", choices=TASKS, default="action")
    p.add_argument("--streams", default=streams_default, help="comma-separated subset of rgb,flow,audio")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch", type=int, default=6)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--monitor", choices=("top1", "loss"), default="top1", help="early-stopping signal")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="egofusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "generate the synthetic audio-visual corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--verbs", type=int, default=4)
    p.add_argument("--nouns", type=int, default=4)
    p.add_argument("--samples", type=int, default=25, help="samples per action")
    p.add_argument("--seed", type=int, default=0)

    p = command("spectrogram", cmd_spectrogram, "cache normalized log-power spectrograms as SPG1 files")
    p.add_argument("--audio-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--profile", choices=("paper-shape", "faithful"), default="paper-shape")

    p = command("partition", cmd_partition, "split annotations into train/val/test")
    p.add_argument("--annotations", required=True)
    p.add_argument("--scheme", choices=("homemade", "unseen"), default="homemade")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = command("train", cmd_train, "train one stream; writes model.egf, model.json, history.csv")
    _add_run_options(p, "audio")
    p.set_defaults(fusion="none")
    p.add_argument("--data", required=True, help="corpus directory with annotations.csv")
    p.add_argument("--partition", required=True)
    p.add_argument("--spectrograms", help="SPG1 directory (default DATA/spectrograms)")
    p.add_argument("--widths", default="", help="conv widths; empty keeps the full audio architecture")
    p.add_argument("--k", type=int, default=3, help="TSN segments")
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--out-dir", required=True)

    p = command("scores", cmd_scores, "write per-segment stream scores from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--partition")
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--spectrograms")
    p.add_argument("--out", required=True)

    p = command("fuse", cmd_fuse, "late-fuse stream score files")
    _add_run_options(p, "rgb,flow,audio")
    p.add_argument("--fusion", choices=FUSION_METHODS[1:], default="unweighted")
    p.add_argument("--scores", nargs="+", required=True, help="score CSVs in --streams order")
    p.add_argument("--annotations", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--hidden", type=int, default=512)
    p.add_argument("--out-dir", required=True)

    p = command("eval", cmd_eval, "metrics report, baselines, confusion matrix and plots")
    p.add_argument("--predictions", required=True)
    p.add_argument("--method-name", default="Predictions")
    p.add_argument("--compare", help="reference predictions for the accuracy-difference report")
    p.add_argument("--compare-name", default="Reference")
    p.add_argument("--annotations", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--task", choices=TASKS, default="action")
    p.add_argument("--scores-task", choices=TASKS, help="task of the score columns (default --task)")
    p.add_argument("--baselines", action="store_true")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-support", type=int, default=None)
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out-dir", required=True)

    p = command("experiment", cmd_experiment, "full synthetic three-stream experiment")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True)
    return parser


def _config_path(argv: Sequence[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _with_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse ``argv`` with values from ``--config`` acting as defaults."""
    path = _config_path(argv)
    command = next((t for t in argv if not t.startswith("-")), None)
    commands = parser._subparsers._group_actions[0].choices
    if path is None or command not in commands:
        return parser.parse_args(argv)
    sub = commands[command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in read_config_file(path).items():
        if key not in known or key in ("config", "help"):
            raise CliError(f"{path}: unknown key {key!r} for {command}")
        action = known[key]
        if isinstance(action, argparse.BooleanOptionalAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.nargs in ("+", "*"):
            defaults[key] = raw.split()
        else:
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except ValueError as exc:
                raise CliError(f"{path}: bad value for {key}: {raw!r}") from exc
        if action.choices is not None and defaults[key] not in action.choices:
            raise CliError(f"{path}: {key} must be one of {list(action.choices)}")
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _with_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except (CliError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
