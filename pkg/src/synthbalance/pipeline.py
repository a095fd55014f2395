"""Experiment configuration and the staged end-to-end pipeline.

An experiment directory has a fixed layout::

    config.snapshot        resolved configuration (JSON)
    record.json            stage timings, artifact paths, seeds, versions, status
    data/train, data/test  prepared snapshots (images/ + manifest.csv + metadata.json)
    checkpoints/           translator.ckpt, classifier.ckpt, periodic translator checkpoints
    synthetic/             synthesized malignant snapshot
    logs/                  loss tables and the classifier's training-set manifest
    report/                eval_report.json, roc.csv, saliency/, feature tables

Stages read their inputs from this directory, so running them one by one
gives the same result as :func:`run_pipeline`.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import __version__
from .benchmark import BenchmarkConfig, generate
from .classifier import (
    ClassifierSpec,
    ClassifierTrainConfig,
    FocalLossParams,
    IMPROVEMENT_TOL,
    build_classifier,
    load_classifier,
    predict_proba,
    save_classifier,
    train_classifier,
    write_training_log,
)
from .data import (
    PAD_VALUE,
    RESAMPLE_KERNEL,
    AugmentationSpec,
    LabelledDataset,
    augment_offline,
    load_manifest,
    load_snapshot,
    merge_and_shuffle,
    pad_and_resize,
    save_snapshot,
    undersample_balance,
)
from .errors import ConfigError, DataError, EvaluationError, PipelineError
from .explain import CAM_TARGET, export_features, grad_cam, write_saliency
from .metrics import EvalReport, evaluate, fingerprint
from .translation import (
    INPUT_MAPPING,
    CycleGanConfig,
    DiscriminatorSpec,
    GeneratorSpec,
    load_checkpoint,
    save_checkpoint,
    synthesize,
    train_cyclegan,
    write_loss_history,
)

log = logging.getLogger(__name__)

MODES = ("melanet", "baseline_plain", "baseline_augment")
STAGES = ("prepare", "train_translator", "synthesize", "train_classifier", "evaluate", "explain")
MODE_STAGES = {
    "melanet": STAGES,
    "baseline_plain": ("prepare", "train_classifier", "evaluate", "explain"),
    "baseline_augment": ("prepare", "train_classifier", "evaluate", "explain"),
}


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class DatasetSource:
    train_manifest: str | None = None
    test_manifest: str | None = None
    image_root: str | None = None
    test_image_root: str | None = None
    synthetic: BenchmarkConfig | None = None
    holdout_fraction: float = 0.0


@dataclass
class TranslationSection:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    config: CycleGanConfig = field(default_factory=CycleGanConfig)


@dataclass
class ClassifierSection:
    spec: ClassifierSpec = field(default_factory=ClassifierSpec)
    focal: FocalLossParams = field(default_factory=FocalLossParams)
    train: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)


@dataclass
class ExplainSection:
    enabled: bool = True
    n_saliency: int = 4


@dataclass
class ExperimentConfig:
    """Seeds inside the sub-sections are ignored: every stage gets a seed
    derived from ``seed`` (see :func:`stage_seed`). The benchmark seed is part
    of the dataset definition and is kept as given."""

    dataset: DatasetSource
    output_dir: str = "experiments/run"
    mode: str = "melanet"
    image_side: int = 256
    translation: TranslationSection = field(default_factory=TranslationSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    augmentation: AugmentationSpec | None = None
    explain: ExplainSection = field(default_factory=ExplainSection)
    threshold: float = 0.5
    seed: int = 0
    name: str = ""

    def validate(self) -> "ExperimentConfig":
        d = self.dataset
        if (d.synthetic is None) == (d.train_manifest is None):
            raise ConfigError("set exactly one dataset source: 'synthetic' or 'train_manifest'")
        if d.train_manifest is not None and d.test_manifest is None:
            raise ConfigError("a manifest dataset needs 'test_manifest' too")
        if not 0.0 <= d.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "baseline_augment" and self.augmentation is None:
            raise ConfigError("baseline_augment mode needs an 'augmentation' section")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.image_side < 8:
            raise ConfigError("image_side must be >= 8")
        return self

    @property
    def method_name(self) -> str:
        return self.name or self.mode

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _build(cls, data: Any, where: str):
    if dataclasses.is_dataclass(data):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    nested = {
        DatasetSource: {"synthetic": BenchmarkConfig},
        TranslationSection: {"generator": GeneratorSpec, "discriminator": DiscriminatorSpec, "config": CycleGanConfig},
        ClassifierSection: {"spec": ClassifierSpec, "focal": FocalLossParams, "train": ClassifierTrainConfig},
        ExperimentConfig: {
            "dataset": DatasetSource,
            "translation": TranslationSection,
            "classifier": ClassifierSection,
            "augmentation": AugmentationSpec,
            "explain": ExplainSection,
        },
    }.get(cls, {})
    kwargs = {}
    for k, v in data.items():
        if k in nested and v is not None:
            v = _build(nested[k], v, f"{where}.{k}")
        elif cls is AugmentationSpec and k == "magnitudes":
            v = {name: tuple(r) for name, r in v.items()}
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict[str, Any], base_dir: str | Path | None = None) -> ExperimentConfig:
    """Build a config; relative dataset paths resolve against ``base_dir``."""
    cfg = _build(ExperimentConfig, data, "config")
    if base_dir is not None:
        base = Path(base_dir)
        d = cfg.dataset
        for attr in ("train_manifest", "test_manifest", "image_root", "test_image_root"):
            value = getattr(d, attr)
            if value is not None and not Path(value).is_absolute():
                setattr(d, attr, str(base / value))
    return cfg.validate()


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    return config_from_dict(data, base_dir=path.parent)


def stage_seed(master_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{stage}:{master_seed}".encode()).hexdigest()
    return int(digest[:8], 16) & 0x7FFFFFFF


def seeds_for(config: ExperimentConfig) -> dict[str, int]:
    names = ("balance", "translator", "augment", "shuffle", "classifier", "holdout")
    return {n: stage_seed(config.seed, n) for n in names}


# ---------------------------------------------------------------------------
# Stages


class Experiment:
    def __init__(self, config: ExperimentConfig):
        self.config = config.validate()
        self.root = Path(config.output_dir)
        self.seeds = seeds_for(config)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    @property
    def translator_ckpt(self) -> Path:
        return self.path("checkpoints", "translator.ckpt")

    @property
    def classifier_ckpt(self) -> Path:
        return self.path("checkpoints", "classifier.ckpt")

    def require(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise DataError(f"missing prerequisite artifact: {what} ({path})")
        return path

    def load_split(self, name: str) -> LabelledDataset:
        self.require(self.path("data", name, "manifest.csv"), f"prepared {name} set")
        return load_snapshot(self.path("data", name))[0]

    def translation_config(self) -> CycleGanConfig:
        return dataclasses.replace(self.config.translation.config, seed=self.seeds["translator"])

    def classifier_train_config(self) -> ClassifierTrainConfig:
        return dataclasses.replace(self.config.classifier.train, seed=self.seeds["classifier"])

    def augmentation_spec(self) -> AugmentationSpec | None:
        aug = self.config.augmentation
        return dataclasses.replace(aug, seed=self.seeds["augment"]) if aug else None

    def classifier_training_set(self) -> LabelledDataset:
        train = self.load_split("train")
        mode = self.config.mode
        if mode == "melanet":
            self.require(self.path("synthetic", "manifest.csv"), "synthetic set (run 'synthesize' first)")
            extra = load_snapshot(self.path("synthetic"))[0]
        else:
            extra = LabelledDataset()
            if mode == "baseline_augment":
                train = augment_offline(train, self.augmentation_spec())
        return merge_and_shuffle(train, extra, self.seeds["shuffle"])

    # -- individual stages -------------------------------------------------

    def prepare(self) -> dict[str, Any]:
        cfg, side = self.config, self.config.image_side
        src = cfg.dataset
        if src.synthetic is not None:
            train, test = generate(src.synthetic)
            origin = {"source": "synthetic_benchmark", "benchmark": asdict(src.synthetic)}
        else:
            train = load_manifest(src.train_manifest, src.image_root or Path(src.train_manifest).parent)
            test = load_manifest(src.test_manifest, src.test_image_root or src.image_root or Path(src.test_manifest).parent)
            origin = {"source": "manifest", "train_manifest": src.train_manifest, "test_manifest": src.test_manifest}
        resize = lambda im: pad_and_resize(im, side)  # noqa: E731
        train, test = train.map_images(resize), test.map_images(resize)
        meta = {**origin, "image_side": side, "resample_kernel": RESAMPLE_KERNEL, "pad_value": PAD_VALUE}
        out = {}
        if src.holdout_fraction > 0:
            train, holdout = _split_holdout(train, src.holdout_fraction, self.seeds["holdout"])
            out["holdout"] = str(save_snapshot(holdout, self.path("data", "holdout"), {**meta, "split": "holdout"}))
        out["train"] = str(save_snapshot(train, self.path("data", "train"), {**meta, "split": "train"}))
        out["test"] = str(save_snapshot(test, self.path("data", "test"), {**meta, "split": "test"}))
        return {"artifacts": out, "train_counts": train.class_counts, "test_counts": test.class_counts}

    def train_translator(self) -> dict[str, Any]:
        train = self.load_split("train")
        balanced = undersample_balance(train, self.seeds["balance"])
        t = self.config.translation
        config = self.translation_config()
        state = train_cyclegan(
            balanced.with_label(0), balanced.with_label(1), t.generator, t.discriminator, config,
            checkpoint_dir=self.path("checkpoints"),
        )
        save_checkpoint(state, self.translator_ckpt)
        loss_log = write_loss_history(state, self.path("logs", "translator_loss.csv"))
        ids_path = self.path("logs", "translator_balanced_ids.csv")
        with ids_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("id", "label"))
            w.writerows((s.id, s.label) for s in balanced)
        return {
            "artifacts": {"checkpoint": str(self.translator_ckpt), "loss_log": str(loss_log), "balanced_ids": str(ids_path)},
            "balanced_counts": balanced.class_counts,
            "epochs": state.epoch,
        }

    def synthesize(self) -> dict[str, Any]:
        state = load_checkpoint(self.require(self.translator_ckpt, "translator checkpoint (run 'train_translator' first)"))
        train = self.load_split("train")
        synthetic = synthesize(state, train)
        meta = {"direction": "B_to_M", "translator_epoch": state.epoch, "input_mapping": INPUT_MAPPING}
        out = save_snapshot(synthetic, self.path("synthetic"), meta)
        return {"artifacts": {"synthetic": str(out)}, "n_synthetic": len(synthetic)}

    def train_classifier(self) -> dict[str, Any]:
        train = self.classifier_training_set()
        c = self.config.classifier
        config = self.classifier_train_config()
        state = build_classifier(c.spec, self.config.image_side, self.seeds["classifier"])
        state = train_classifier(state, train, c.focal, config)
        save_classifier(state, self.classifier_ckpt)
        train_log = write_training_log(state, self.path("logs", "classifier_train.csv"))
        manifest = self.path("logs", "classifier_train_manifest.csv")
        with manifest.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("id", "label", "provenance", "source_id"))
            w.writerows((s.id, s.label, s.provenance, s.source_id or "") for s in train)
        return {
            "artifacts": {"checkpoint": str(self.classifier_ckpt), "train_log": str(train_log), "train_manifest": str(manifest)},
            "n_train": len(train),
            "train_counts": train.class_counts,
            "epochs": state.epoch,
            "best_epoch": state.best_epoch,
        }

    def evaluate(self) -> dict[str, Any]:
        state = load_classifier(self.require(self.classifier_ckpt, "classifier checkpoint (run 'train_classifier' first)"))
        out: dict[str, Any] = {"artifacts": {}}
        splits = ["test"] + (["holdout"] if self.path("data", "holdout", "manifest.csv").exists() else [])
        for split in splits:
            data = self.load_split(split)
            probas = predict_proba(state, data.images)
            try:
                report = evaluate(
                    data.ids, probas[:, 1], data.labels, self.config.threshold,
                    method=self.config.method_name, config_fingerprint=fingerprint(self.config.to_dict()),
                )
            except PipelineError as exc:
                raise EvaluationError(f"{split} evaluation failed: {exc}") from exc
            report.metadata = {"split": split, "mode": self.config.mode, "n_samples": len(data)}
            directory = self.path("report") if split == "test" else self.path("report", split)
            json_path, roc_path = report.write(directory)
            out["artifacts"][f"{split}_report"] = str(json_path)
            out["artifacts"][f"{split}_roc"] = str(roc_path)
            if split == "test":
                out.update(auc=report.auc, sensitivity=report.sensitivity, fn=report.counts.fn)
        return out

    def explain(self) -> dict[str, Any]:
        state = load_classifier(self.require(self.classifier_ckpt, "classifier checkpoint (run 'train_classifier' first)"))
        test = self.load_split("test")
        saliency_dir = self.path("report", "saliency")
        written = []
        targets = [s for s in test if s.label == 1][: self.config.explain.n_saliency]
        for i, s in enumerate(targets):
            sal = grad_cam(state, s.image, 1, s.id)
            written += write_saliency(sal, s.image, saliency_dir, f"{i:03d}")
        features = {
            "features_train": export_features(state, self.classifier_training_set()),
            "features_test": export_features(state, test),
        }
        out = {name: str(fm.write_csv(self.path("report", f"{name}.csv"))) for name, fm in features.items()}
        if written:
            out["saliency"] = str(saliency_dir)
        return {"artifacts": out, "cam_layer": state.model.last_conv_layer, "n_saliency": len(targets)}

    def run_stage(self, stage: str) -> dict[str, Any]:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
        self.root.mkdir(parents=True, exist_ok=True)
        snapshot = self.path("config.snapshot")
        if not snapshot.exists():
            write_config_snapshot(self.config, snapshot)
        return getattr(self, stage)()


def _split_holdout(dataset: LabelledDataset, fraction: float, seed: int) -> tuple[LabelledDataset, LabelledDataset]:
    rng = np.random.default_rng(seed)
    held: set[int] = set()
    labels = dataset.labels
    for lab in (0, 1):
        idx = np.flatnonzero(labels == lab)
        held.update(rng.choice(idx, size=int(round(fraction * len(idx))), replace=False).tolist())
    keep = tuple(s for i, s in enumerate(dataset) if i not in held)
    out = tuple(s for i, s in enumerate(dataset) if i in held)
    return LabelledDataset(keep), LabelledDataset(out)


def write_config_snapshot(config: ExperimentConfig, path: Path) -> Path:
    data = {**config.to_dict(), "derived_seeds": seeds_for(config)}
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def run_stage(stage: str, config: ExperimentConfig) -> dict[str, Any]:
    return Experiment(config).run_stage(stage)


def _record_metadata(config: ExperimentConfig) -> dict[str, Any]:
    meta: dict[str, Any] = {
        "resample_kernel": RESAMPLE_KERNEL,
        "pad_value": PAD_VALUE,
        "translator_input_mapping": INPUT_MAPPING,
        "plateau_monitor": "training focal loss",
        "improvement_tolerance": IMPROVEMENT_TOL,
        "grad_cam_target": CAM_TARGET,
        "synthesis_direction": "B_to_M",
    }
    if config.augmentation is not None:
        meta["augmentation_factor"] = config.augmentation.factor
        meta["augmentation_target_total"] = config.augmentation.target_total
    return meta


def run_pipeline(config: ExperimentConfig, overwrite: bool = False) -> EvalReport:
    """Run every stage of the configured mode and return the test-set report."""
    exp = Experiment(config)
    record_path = exp.path("record.json")
    if record_path.exists() and not overwrite:
        raise ConfigError(f"{exp.root} already holds an experiment; choose a fresh output directory")
    exp.root.mkdir(parents=True, exist_ok=True)
    record: dict[str, Any] = {
        "config": config.to_dict(),
        "seeds": {"master": config.seed, **exp.seeds},
        "versions": {
            "synthbalance": __version__,
            "torch": torch.__version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "metadata": _record_metadata(config),
        "stages": {},
        "stage_order": [],
        "status": "running",
    }
    write_config_snapshot(config, exp.path("config.snapshot"))
    stages = MODE_STAGES[config.mode]
    if not config.explain.enabled:
        stages = tuple(s for s in stages if s != "explain")
    for stage in stages:
        log.info("stage %s", stage)
        t0 = time.perf_counter()
        try:
            result = exp.run_stage(stage)
        except Exception as exc:
            record.update(status="failed", failed_stage=stage, error=f"{type(exc).__name__}: {exc}")
            _write_record(record, record_path)
            raise
        record["stages"][stage] = {"seconds": round(time.perf_counter() - t0, 3), **result}
        record["stage_order"].append(stage)
    record["status"] = "completed"
    _write_record(record, record_path)
    return EvalReport.from_dict(json.loads(exp.path("report", "eval_report.json").read_text()))


def _write_record(record: dict[str, Any], path: Path) -> None:
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
