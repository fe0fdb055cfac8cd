"""Command-line drivers: split, train, tune, apply, eval, report, synth.

Every command resolves its options (``--config`` file, then flags) into one
run configuration, writes it as ``config.yaml`` inside a run directory
``<out>/<command>-<hash>`` and puts all artifacts there. Re-running with
``--config <run dir>/config.yaml`` reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from scipy.io import wavfile

from .annotations import Annotation, VoiceClass, parse_uem, read_rttm
from .audio import SPLITS, ManifestEntry, read_manifest, select_split, write_manifest
from .evaluation import DEFAULT_GRID, EvalReport, evaluate, format_table, tune
from .inference import SlidingSpec, Thresholds, apply, hypothesis, make_scorer, score_file, write_scores
from .model import Checkpoint, ModelConfig
from .training import TrainConfig, train, train_binary_suite

logger = logging.getLogger("voicetype")

MODEL_PRESETS = {
    "default": ModelConfig,
    "figure": ModelConfig.figure_variant,
    "sincnet80": ModelConfig.sincnet_original,
    "desk": ModelConfig.desk,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = ""
    out: str = "runs"
    manifest: str | None = None
    subset: str | None = None
    seed: int = 0
    model_preset: str = "default"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    step: float = 0.5
    grid: list[float] = field(default_factory=lambda: list(DEFAULT_GRID))
    fractions: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    inputs: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        if self.model_preset not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {self.model_preset!r}")
        base = MODEL_PRESETS[self.model_preset]().to_dict()
        base.update(self.model)
        return ModelConfig.from_dict(base)

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        d.setdefault("seed", self.seed)
        return TrainConfig.from_dict(d)

    def run_id(self) -> str:
        d = asdict(self)
        d.pop("out")
        digest = hashlib.sha1(json.dumps(d, sort_keys=True).encode()).hexdigest()[:8]
        return f"{self.command}-{digest}"

    def run_dir(self) -> Path:
        path = Path(self.out) / self.run_id()
        path.mkdir(parents=True, exist_ok=True)
        (path / "config.yaml").write_text(yaml.safe_dump(asdict(self), sort_keys=True))
        return path


# ---------------------------------------------------------------------------
# split


def audio_duration(entry: ManifestEntry) -> float:
    if "duration" in entry.extra:
        return float(entry.extra["duration"])
    rate, data = wavfile.read(entry.audio, mmap=True)
    return len(data) / rate


def cmd_split(
    entries: Sequence[ManifestEntry],
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    durations: dict[str, float] | None = None,
) -> list[ManifestEntry]:
    """Assign train/dev/test by child so that no child spans two splits.

    Children are visited by decreasing total duration (seed-shuffled first, so
    ties are broken reproducibly) and each goes to the split that is furthest
    below its target share. Entries carrying ``pin_split`` keep that split.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("need three positive split fractions")
    total_fraction = sum(fractions)
    fractions = [f / total_fraction for f in fractions]
    durations = durations or {e.uri: audio_duration(e) for e in entries}
    child_duration: dict[str, float] = defaultdict(float)
    load = dict.fromkeys(SPLITS, 0.0)
    for e in entries:
        if not e.child_id:
            raise ValueError(f"{e.uri}: missing child_id")
        if e.pin_split:
            if e.pin_split not in SPLITS:
                raise ValueError(f"{e.uri}: invalid pin_split {e.pin_split!r}")
            load[e.pin_split] += durations[e.uri]
        else:
            child_duration[e.child_id] += durations[e.uri]
    pinned_children = {e.child_id for e in entries if e.pin_split}
    if pinned_children & set(child_duration):
        raise ValueError("a child has both pinned and unpinned files")
    if len(child_duration) < 3:
        raise ValueError("at least 3 children are needed for a child-disjoint split")

    rng = np.random.default_rng(seed)
    children = sorted(child_duration)
    children = [children[i] for i in rng.permutation(len(children))]
    children.sort(key=lambda c: -child_duration[c])
    total = sum(child_duration.values()) + sum(load.values())
    assignment = {}
    for child in children:
        split = min(SPLITS, key=lambda s: load[s] / (fractions[SPLITS.index(s)] * total))
        assignment[child] = split
        load[split] += child_duration[child]
    return [replace(e, split=e.pin_split or assignment[e.child_id]) for e in entries]


# ---------------------------------------------------------------------------
# helpers


def _entries(cfg: RunConfig, default_subset: str | None = None) -> list[ManifestEntry]:
    if not cfg.manifest:
        raise ConfigError("--manifest is required")
    return select_split(read_manifest(cfg.manifest), cfg.subset or default_subset)


def _references(entries: Sequence[ManifestEntry]) -> dict[str, Annotation]:
    return {e.uri: e.reference() for e in entries}


def _find_checkpoints(path: str | Path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    found = sorted(path.rglob("epoch_*.ckpt"))
    if not found:
        raise ConfigError(f"no checkpoints under {path}")
    return found


def _load_uem(cfg: RunConfig):
    uem = cfg.inputs.get("uem")
    return parse_uem(Path(uem).read_text()).regions if uem else None


def _read_hypotheses(path: str | Path) -> dict[str, Annotation]:
    path = Path(path)
    files = [path] if path.is_file() else sorted(path.rglob("*.rttm"))
    hyps: dict[str, Annotation] = {}
    for f in files:
        for a in read_rttm(f):
            hyps[a.uri] = Annotation(a.uri, hyps[a.uri].entries + a.entries) if a.uri in hyps else a
        # an empty RTTM named after its uri is an empty hypothesis
        hyps.setdefault(f.stem, Annotation(f.stem))
    return hyps


# ---------------------------------------------------------------------------
# commands


def run_split(cfg: RunConfig) -> int:
    entries = read_manifest(cfg.manifest) if cfg.manifest else []
    if not entries:
        raise ConfigError("--manifest is required")
    out = cfg.run_dir()
    split = cmd_split(entries, cfg.fractions, cfg.seed)
    write_manifest(out / "manifest.jsonl", split)
    for s in SPLITS:
        print(f"{s}: {sum(e.split == s for e in split)} files")
    print(out / "manifest.jsonl")
    return 0


def run_train(cfg: RunConfig) -> int:
    suite = cfg.train.get("mode") == "binary:all"
    model_config = cfg.model_config()
    train_config = replace(cfg, train={**cfg.train, "mode": "multitask"}).train_config() if suite else cfg.train_config()
    entries = _entries(cfg, "train")
    if not entries:
        raise ConfigError("no training recordings in manifest")
    out = cfg.run_dir()
    if suite:
        train_binary_suite(model_config, train_config, entries, out)
    else:
        train(model_config, train_config, entries, out)
    print(out)
    return 0


def _score_all(checkpoint: Checkpoint, entries, spec):
    scorer = make_scorer(checkpoint)
    return {e.uri: score_file(scorer, e, spec) for e in entries}


def run_tune(cfg: RunConfig) -> int:
    if not cfg.inputs.get("checkpoints"):
        raise ConfigError("--checkpoints is required")
    if not cfg.grid:
        raise ConfigError("threshold grid is empty")
    paths = _find_checkpoints(cfg.inputs["checkpoints"])
    entries = _entries(cfg, "dev")
    refs = _references(entries)
    uem = _load_uem(cfg)
    out = cfg.run_dir()

    # checkpoints predicting the same classes form one group (one group, or five for a binary suite)
    groups: dict[tuple, dict[int, Path]] = defaultdict(dict)
    for p in paths:
        ck = Checkpoint.load(p)
        groups[ck.config.classes][ck.epoch] = p

    models, thresholds, class_f, curves = [], {}, {}, {}
    for classes, by_epoch in groups.items():
        name = "-".join(classes)
        dumps = {}
        for epoch, path in sorted(by_epoch.items()):
            ck = Checkpoint.load(path)
            spec = SlidingSpec(ck.config.chunk_duration, cfg.step)
            dumps[epoch] = _score_all(ck, entries, spec)
            for uri, (track, duration) in dumps[epoch].items():
                write_scores(out / "scores" / name / f"epoch_{epoch:03d}" / f"{uri}.scores", uri, track, duration)
        result = tune(dumps, refs, cfg.grid, classes, uem)
        models.append({"checkpoint": str(Path(by_epoch[result.epoch]).resolve()), "epoch": result.epoch,
                       "classes": list(classes)})
        thresholds.update(result.thresholds.to_dict())
        class_f.update({c.value: f for c, f in result.class_f.items()})
        curves[name] = result.to_dict()

    average = float(np.mean(list(class_f.values())))
    summary = {
        "models": models,
        "thresholds": thresholds,
        "dev_class_f": class_f,
        "dev_average_f": average,
        "step": cfg.step,
        "grid": list(cfg.grid),
    }
    (out / "thresholds.json").write_text(json.dumps(summary, indent=2) + "\n")
    (out / "tune.json").write_text(json.dumps(curves, indent=2) + "\n")
    print(json.dumps({"dev_class_f": class_f, "dev_average_f": average, "thresholds": thresholds}, indent=2))
    print(out / "thresholds.json")
    return 0


def run_apply(cfg: RunConfig) -> int:
    th_path = cfg.inputs.get("thresholds")
    checkpoint = cfg.inputs.get("checkpoint")
    if not th_path and not checkpoint:
        raise ConfigError("--thresholds or --checkpoint is required")
    summary = json.loads(Path(th_path).read_text()) if th_path else {}
    if checkpoint:
        checkpoints = [Checkpoint.load(p) for p in _find_checkpoints(checkpoint)[-1:]]
    else:
        checkpoints = [Checkpoint.load(m["checkpoint"]) for m in summary["models"]]
    if summary:
        thresholds = Thresholds.from_dict(summary["thresholds"])
    else:
        thresholds = Thresholds.uniform([c for ck in checkpoints for c in ck.config.classes], 0.5)
    entries = _entries(cfg)
    out = cfg.run_dir()
    spec = SlidingSpec(checkpoints[0].config.chunk_duration, cfg.step)
    outputs, failures = apply(checkpoints, thresholds, entries, spec, out)
    print(f"{len(outputs)} hypotheses written to {out / 'rttm'}")
    if failures:
        print(f"{len(failures)} files failed: {', '.join(failures)}", file=sys.stderr)
        return 1
    return 0


def run_eval(cfg: RunConfig) -> int:
    hyp = cfg.inputs.get("hyp")
    if not hyp:
        raise ConfigError("--hyp is required")
    if cfg.inputs.get("ref"):
        refs = {a.uri: a for a in read_rttm(cfg.inputs["ref"])}
    else:
        refs = _references(_entries(cfg))
    hyps = _read_hypotheses(hyp)
    report = evaluate(refs, hyps, uem=_load_uem(cfg), accumulation=cfg.inputs.get("accumulation", "micro"))
    out = cfg.run_dir()
    (out / "report.json").write_text(report.to_json() + "\n")
    table = report.table(cfg.inputs.get("name", "system"))
    (out / "report.txt").write_text(table)
    print(table, end="")
    return 0


def run_report(cfg: RunConfig) -> int:
    paths = cfg.inputs.get("reports") or []
    if not paths:
        raise ConfigError("at least one report is required")
    names = cfg.inputs.get("names") or [Path(p).parent.name for p in paths]
    if len(names) != len(paths):
        raise ConfigError("--names must match the number of reports")
    rows = [(n, EvalReport.from_dict(json.loads(Path(p).read_text()))) for n, p in zip(names, paths)]
    table = format_table(rows)
    out = cfg.run_dir()
    (out / "table.txt").write_text(table)
    with open(out / "table.csv", "w", newline="") as f:
        writer = csv.writer(f)
        classes = rows[0][1].classes
        writer.writerow(["system"] + [c.value for c in classes] + ["Ave."])
        for name, r in rows:
            writer.writerow([name] + [f"{100 * r.f(c):.1f}" for c in classes] + [f"{100 * r.average:.1f}"])
    if cfg.inputs.get("tune"):
        write_curves(json.loads(Path(cfg.inputs["tune"]).read_text()), out)
    print(table, end="")
    return 0


def write_curves(tune_summary: dict, out: Path) -> None:
    """F-vs-threshold curves of each tuned model at its selected epoch (CSV + PNG)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, result in tune_summary.items():
        grid = result["grid"]
        curves = result["curves"][str(result["epoch"])]
        with open(out / f"curves_{name}.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["threshold"] + list(curves))
            for i, g in enumerate(grid):
                writer.writerow([g] + [curves[c][i] for c in curves])
        for cls, values in curves.items():
            ax.plot(grid, values, label=cls)
    ax.set_xlabel("threshold")
    ax.set_ylabel("F-measure")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=100)
    plt.close(fig)


def run_synth(cfg: RunConfig) -> int:
    from .synthetic import make_corpus

    opts = cfg.inputs
    manifest = make_corpus(
        cfg.out,
        n_recordings=int(opts.get("recordings", 10)),
        duration=float(opts.get("duration", 60.0)),
        seed=cfg.seed,
    )
    print(manifest)
    return 0


COMMANDS = {
    "split": run_split,
    "train": run_train,
    "tune": run_tune,
    "apply": run_apply,
    "eval": run_eval,
    "report": run_report,
    "synth": run_synth,
}


# ---------------------------------------------------------------------------
# argument parsing


def _grid(text: str) -> list[float]:
    """``0.1,0.2,0.3`` or ``start:stop:step`` (inclusive)."""
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        n = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 6) for i in range(n)]
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run configuration")
    common.add_argument("--manifest", help="JSON-lines manifest")
    common.add_argument("--out", help="output root directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--subset", choices=["train", "dev", "test", "all"])
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="voicetype", description="Voice type classifier toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", parents=[common], help="child-disjoint train/dev/test split")
    p.add_argument("--fractions", type=float, nargs=3)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--mode", help="multitask, binary:CLASS or binary:all")
    p.add_argument("--epochs", type=int)
    p.add_argument("--preset", choices=sorted(MODEL_PRESETS), help="model architecture preset")
    p.add_argument("--noise-dir", help="directory of noise WAVs; enables augmentation")

    p = sub.add_parser("tune", parents=[common], help="select epoch and thresholds on dev")
    p.add_argument("--checkpoints", help="training run directory or checkpoint file")
    p.add_argument("--step", type=float, help="sliding window step (s)")
    p.add_argument("--grid", type=_grid, help="thresholds, '0.1,0.5' or 'start:stop:step'")
    p.add_argument("--uem")

    p = sub.add_parser("apply", parents=[common], help="score files and write hypotheses")
    p.add_argument("--thresholds", help="thresholds.json written by tune")
    p.add_argument("--checkpoint", help="checkpoint (overrides the one named in thresholds.json)")
    p.add_argument("--step", type=float)

    p = sub.add_parser("eval", parents=[common], help="score hypotheses against references")
    p.add_argument("--hyp", help="hypothesis RTTM file or directory")
    p.add_argument("--ref", help="reference RTTM (instead of manifest references)")
    p.add_argument("--uem")
    p.add_argument("--name", help="system name in the table")
    p.add_argument("--accumulation", choices=["micro", "macro"])

    p = sub.add_parser("report", parents=[common], help="comparison table from eval reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--names", nargs="+")
    p.add_argument("--tune", help="tune.json to plot F-vs-threshold curves from")

    p = sub.add_parser("synth", parents=[common], help="write the synthetic test corpus")
    p.add_argument("--recordings", type=int)
    p.add_argument("--duration", type=float)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    data: dict = {}
    if args.config:
        text = Path(args.config).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: expected a mapping")
    known = {f for f in RunConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**data)
    cfg.command = args.command
    cfg.model = dict(cfg.model)
    cfg.train = dict(cfg.train)
    cfg.inputs = dict(cfg.inputs)
    for name in ("manifest", "out", "seed", "subset", "step", "grid", "fractions"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if cfg.manifest:
        cfg.manifest = str(Path(cfg.manifest).resolve())
    if getattr(args, "preset", None):
        cfg.model_preset = args.preset
    if getattr(args, "mode", None):
        cfg.train["mode"] = args.mode
    if getattr(args, "epochs", None) is not None:
        cfg.train["epochs"] = args.epochs
    if getattr(args, "noise_dir", None):
        cfg.train["noise_dir"] = str(Path(args.noise_dir).resolve())
        cfg.train["augmentation"] = True
    if args.seed is not None:
        cfg.train["seed"] = args.seed
    for name in ("checkpoints", "checkpoint", "thresholds", "hyp", "ref", "uem", "tune"):
        value = getattr(args, name, None)
        if value is not None:
            cfg.inputs[name] = str(Path(value).resolve())
    for name in ("name", "accumulation", "recordings", "duration", "names"):
        value = getattr(args, name, None)
        if value is not None:
            cfg.inputs[name] = value
    if getattr(args, "reports", None):
        cfg.inputs["reports"] = [str(Path(p).resolve()) for p in args.reports]
    return cfg


def validate(cfg: RunConfig) -> None:
    """Fail fast on configuration errors, before any data is touched."""
    if cfg.command == "train":
        cfg.model_config()
        train = dict(cfg.train)
        if train.get("mode") == "binary:all":
            train["mode"] = "multitask"
        replace(cfg, train=train).train_config()
    if not 0 < cfg.step:
        raise ConfigError("--step must be positive")
    if cfg.command == "tune" and any(not 0 <= g <= 1 for g in cfg.grid):
        raise ConfigError("thresholds must lie in [0, 1]")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        validate(cfg)
        return COMMANDS[cfg.command](cfg)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
