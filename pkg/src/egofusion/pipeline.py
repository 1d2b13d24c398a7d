"""End-to-end synthetic experiment: three streams, late fusion, reports."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from egofusion.audio import SpectrogramConfig, compute_spectrogram
from egofusion.dataops import LabelSpace, homemade_partition, marginalize, write_partition
from egofusion.evalkit import (
    accuracy_difference,
    confusion_matrix,
    evaluate,
    largest_class_baseline,
    random_baseline,
    write_matrix,
    write_report,
)
from egofusion.fusion import FcFusionHead, StreamScores, concat_penultimate, grid_search_weights, \
    train_fc_fusion, weighted_sum_fuse
from egofusion.nets import (
    DilatedNet,
    DilatedNetConfig,
    FrameInputs,
    SpectrogramInputs,
    TrainHyper,
    TsnModel,
    VisualBackbone,
    VisualBackboneConfig,
    predict,
    train_stream,
    write_history,
)
from egofusion.synth import SynthConfig, synth_multimodal_generate

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    audio_widths: tuple[int, ...] = (4, 4, 4, 4)
    audio_hyper: TrainHyper = field(default_factory=lambda: TrainHyper(learning_rate=1e-3, epochs=10, patience=3, monitor="loss"))
    visual_widths: tuple[int, ...] = (8, 16, 16, 32)
    crop_size: int = 56
    k: int = 3
    rgb_hyper: TrainHyper = field(default_factory=lambda: TrainHyper(learning_rate=3e-3, epochs=12, patience=4, monitor="loss"))
    flow_hyper: TrainHyper = field(default_factory=lambda: TrainHyper(learning_rate=3e-3, epochs=12, patience=4, monitor="loss"))
    fusion_hyper: TrainHyper = field(default_factory=lambda: TrainHyper(learning_rate=1e-3, epochs=80, patience=20))
    random_trials: int = 100
    plots: bool = True


@dataclass
class ExperimentResult:
    summary: dict[str, float]
    elapsed_s: float
    out_dir: Path


def _seeded(h: TrainHyper, seed: int) -> TrainHyper:
    return replace(h, seed=seed)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path) -> ExperimentResult:
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = synth_multimodal_generate(cfg.synth, cfg.seed)
    records = data.records
    part = homemade_partition(records, cfg.seed)
    write_partition(out / "partition.csv", part)
    pos = {r.segment_id: i for i, r in enumerate(records)}
    split_idx = {s: np.array(sorted(pos[i] for i in part.ids(s))) for s in ("train", "val", "test")}

    actions = LabelSpace.from_records(records, "action")
    verbs = LabelSpace.from_records(records, "verb")
    nouns = LabelSpace.from_records(records, "noun")
    y = {"action": actions.index(records), "verb": verbs.index(records), "noun": nouns.index(records)}
    all_idx = np.arange(len(records))

    spec_cfg = SpectrogramConfig.paper_shape()
    specs = np.stack([compute_spectrogram(c, spec_cfg).data for c in data.audio])
    log.info("spectrograms %s ready after %.1fs", specs.shape, time.perf_counter() - t0)

    streams = {}
    audio_net = DilatedNet(DilatedNetConfig.scaled(actions.size, cfg.audio_widths), seed=cfg.seed)
    streams["audio"] = (audio_net, SpectrogramInputs(specs), cfg.audio_hyper)
    for sid, frames, channels, hyper in (("rgb", data.frames, 3, cfg.rgb_hyper),
                                          ("flow", data.flow, 2, cfg.flow_hyper)):
        backbone = VisualBackbone(VisualBackboneConfig(actions.size, channels, cfg.crop_size, cfg.visual_widths),
                                  seed=cfg.seed + 1)
        streams[sid] = (TsnModel(backbone, cfg.k), FrameInputs(frames, cfg.k, cfg.crop_size), hyper)

    scores: dict[str, StreamScores] = {}
    for i, sid in enumerate(("rgb", "flow", "audio")):
        model, inputs, hyper = streams[sid]
        result = train_stream(model, inputs, y["action"], split_idx["train"], split_idx["val"],
                              _seeded(hyper, cfg.seed + 10 + i))
        write_history(out / f"history_{sid}.csv", result.history)
        model.freeze()
        probs, pen = predict(model, inputs, all_idx)
        scores[sid] = StreamScores(sid, probs, pen)
        log.info("%s stream best val loss %.3f, top-1 %.3f (epoch %d) after %.1fs", sid, result.best_val_loss,
                 result.best_val_top1, result.best_epoch, time.perf_counter() - t0)

    val, test = split_idx["val"], split_idx["test"]
    features = concat_penultimate([scores[s] for s in ("rgb", "flow", "audio")])
    head = FcFusionHead(features.shape[1], actions.size, 512, seed=cfg.seed + 2)
    fc_result = train_fc_fusion(head, features, y["action"], split_idx["train"], val,
                                _seeded(cfg.fusion_hyper, cfg.seed + 20), streams=[m for m, _, _ in streams.values()])
    write_history(out / "history_fc.csv", fc_result.history)
    fc_probs, _ = head.scores(features.astype(np.float32))

    three = [scores[s].probs for s in ("rgb", "flow", "audio")]
    weights = grid_search_weights([p[val] for p in three], y["action"][val])
    methods = {
        "Audio": scores["audio"].probs,
        "RGB": scores["rgb"].probs,
        "Flow": scores["flow"].probs,
        "RGB+Flow": weighted_sum_fuse(three[:2]),
        "RGB+Flow+Audio unweighted": weighted_sum_fuse(three),
        "RGB+Flow+Audio weighted": weighted_sum_fuse(three, weights),
        "RGB+Flow+Audio FC": fc_probs,
    }

    summary: dict[str, float] = {}
    spaces = {"action": actions, "verb": verbs, "noun": nouns}
    train = split_idx["train"]
    for task, space in spaces.items():
        reports = []
        for name, probs in methods.items():
            p = probs if task == "action" else marginalize(probs, actions, space)
            rep = evaluate(p[test], y[task][test], space.size)
            reports.append((name, rep))
            summary[f"{task}/{name}/top1"] = rep.top1
        reports.append(("Largest class", largest_class_baseline(y[task][train], y[task][test], space.size)))
        reports.append(("Chance/Random", random_baseline(y[task][train], y[task][test], space.size,
                                                         cfg.random_trials, cfg.seed)))
        write_report(out / f"report_{task}.csv", reports, space.names())

    fc_pred = fc_probs[test].argmax(axis=1)
    cm, kept = confusion_matrix(fc_pred, y["action"][test], actions.size)
    write_matrix(out / "confusion_action_fc.csv", cm, [actions.names()[c] for c in kept])
    delta = accuracy_difference(methods["RGB+Flow"][test], fc_probs[test], y["action"][test])
    with open(out / "accdiff_action.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "delta"])
        for c, d in delta.items():
            w.writerow([actions.names()[c], f"{d:.6f}"])
    with open(out / "weights.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stream", "weight"])
        for s, wt in zip(("rgb", "flow", "audio"), weights):
            w.writerow([s, f"{wt:.1f}"])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in summary.items():
            w.writerow([k, f"{v:.6f}"])

    if cfg.plots:
        from egofusion import plotting

        plotting.confusion_figure(cm, [actions.names()[c] for c in kept], out / "confusion_action_fc.png",
                                  title="FC fusion, action")
        plotting.accuracy_difference_figure(delta, actions.names(), out / "accdiff_action.png",
                                            title="RGB+Flow to RGB+Flow+Audio (FC)")
        plotting.history_figure({s: out / f"history_{s}.csv" for s in ("rgb", "flow", "audio", "fc")},
                                out / "training_history.png")
    return ExperimentResult(summary, time.perf_counter() - t0, out)
