"""Run configuration and the stage functions behind the command line.

A run directory holds ``dataset.pgds`` (poisoned training set), ``testset.pgds``
(held-out clean data), ``model.pgnn``, ``model_neutralized.pgnn``,
``signal_<class>.ppm`` and ``report.json``. Every stage reads its inputs from
the directory and merges its section into ``report.json``.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import defense, extraction, nn, poisonlab

log = logging.getLogger(__name__)

OUT_ENV = "GRADSHIELD_OUT"

DATASET_FILE = "dataset.pgds"
TESTSET_FILE = "testset.pgds"
MODEL_FILE = "model.pgnn"
NEUTRALIZED_FILE = "model_neutralized.pgnn"
REPORT_FILE = "report.json"


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"missing {path.name} in {path.parent}; run the '{stage}' stage first")
        self.stage = stage


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | file | cifar10
    path: str | None = None
    test_path: str | None = None
    classes: int = 6
    shape: tuple[int, int, int] = (16, 16, 1)
    samples_per_class: int = 500
    test_samples_per_class: int = 200
    noise: float = 20.0


@dataclass
class PoisonConfig:
    enabled: bool = True
    kind: str = "dot"  # dot | overlay
    target_class: int | None = None  # None: drawn from the run seed
    base_class: int | None = None
    ratio: float = 0.1
    dot_size: int = 3
    pixels: list | None = None  # explicit [[row, col], ...] for dot poisons
    color: list | None = None
    opacity: float = 0.2
    pattern_path: str | None = None  # PPM used as the overlay image


@dataclass
class ModelConfig:
    hidden: tuple[int, ...] = (256,)
    normalize_input: bool = True  # map [0, pixel_max] to [-1, 1] inside the network


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    poison: PoisonConfig = field(default_factory=PoisonConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: nn.TrainConfig = field(default_factory=lambda: nn.TrainConfig(epochs=10))
    neutralize: defense.NeutralizeConfig = field(default_factory=defense.NeutralizeConfig)

    _SECTIONS = {
        "data": DataConfig, "poison": PoisonConfig, "model": ModelConfig,
        "train": nn.TrainConfig, "neutralize": defense.NeutralizeConfig,
    }

    def resolved_output(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUT_ENV, "runs")) / f"seed{self.seed}"

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "output_dir": str(self.resolved_output())}
        for name in self._SECTIONS:
            d[name] = _jsonable(asdict(getattr(self, name)))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {"seed", "output_dir", *cls._SECTIONS}
        if unknown:
            raise ValueError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        kwargs = {"seed": int(d.get("seed", 0)), "output_dir": d.get("output_dir")}
        for name, typ in cls._SECTIONS.items():
            sec = dict(d.get(name) or {})
            allowed = {f.name for f in fields(typ)}
            bad = set(sec) - allowed
            if bad:
                raise ValueError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
            for key in ("shape", "hidden", "clip_range"):
                if sec.get(key) is not None and key in allowed:
                    sec[key] = tuple(sec[key])
            if name == "train" and "epochs" not in sec:
                sec["epochs"] = 10
            kwargs[name] = typ(**sec)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply dotted overrides such as ``{"train.epochs": 5}``; None values are skipped."""
        d = self.to_dict()
        if self.output_dir is None:
            d["output_dir"] = None
        for key, value in overrides.items():
            if value is None:
                continue
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return RunConfig.from_dict(d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# -- report handling ------------------------------------------------------------

def read_report(run_dir: Path) -> dict:
    p = run_dir / REPORT_FILE
    return json.loads(p.read_text()) if p.exists() else {}


def update_report(run_dir: Path, cfg: RunConfig, **sections) -> dict:
    rep = read_report(run_dir)
    rep["config"] = cfg.to_dict()
    for k, v in sections.items():
        rep[k] = _jsonable(v)
    (run_dir / REPORT_FILE).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    return rep


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, stage)
    return path


# -- stages -----------------------------------------------------------------------

def _pick_classes(cfg: RunConfig, class_count: int) -> tuple[int, int]:
    rng = np.random.default_rng([cfg.seed, 1])
    pair = rng.choice(class_count, size=2, replace=False)
    target = cfg.poison.target_class if cfg.poison.target_class is not None else int(pair[0])
    base = cfg.poison.base_class if cfg.poison.base_class is not None else int(pair[1])
    if base == target and cfg.poison.base_class is None:
        base = (target + 1) % class_count
    return target, base


def build_poison_spec(cfg: RunConfig, data: poisonlab.Dataset) -> poisonlab.PoisonSpec:
    target, base = _pick_classes(cfg, data.class_count)
    pc = cfg.poison
    if pc.kind == "dot":
        if pc.pixels:
            color = pc.color if pc.color is not None else data.pixel_max
            return poisonlab.PoisonSpec.dot(
                data.shape, [tuple(p) for p in pc.pixels], tuple(np.atleast_1d(color)), target, base, pc.ratio
            )
        spec = poisonlab.PoisonSpec.random_dot(
            data.shape, target, base, pc.ratio, seed=cfg.seed, size=pc.dot_size, pixel_max=data.pixel_max
        )
        if pc.color is not None:
            spec = poisonlab.PoisonSpec.dot(
                data.shape, [tuple(p) for p in spec.params["pixels"]], tuple(np.atleast_1d(pc.color)),
                target, base, pc.ratio,
            )
        return spec
    if pc.kind == "overlay":
        if pc.pattern_path:
            img = poisonlab.read_ppm(pc.pattern_path).astype(np.float64) / 255.0 * data.pixel_max
            h, w, c = data.shape
            if img.shape[:2] != (h, w):
                raise ValueError(f"overlay image is {img.shape[:2]}, dataset images are {(h, w)}")
            pattern = img[:, :, :c] if c == 3 else img.mean(axis=2, keepdims=True)
        else:
            pattern = poisonlab.procedural_texture(data.shape, seed=cfg.seed, pixel_max=data.pixel_max)
        return poisonlab.PoisonSpec.overlay(pattern, pc.opacity, target, base, pc.ratio)
    raise ValueError(f"unknown poison kind {pc.kind!r}")


def load_source_data(cfg: RunConfig) -> tuple[poisonlab.Dataset, poisonlab.Dataset | None]:
    dc = cfg.data
    if dc.source == "synthetic":
        train = poisonlab.make_synthetic_image_task(
            dc.classes, dc.shape, dc.samples_per_class, dc.noise, seed=cfg.seed
        )
        test = poisonlab.make_synthetic_image_task(
            dc.classes, dc.shape, dc.test_samples_per_class, dc.noise, seed=cfg.seed + 100_003
        )
        return train, test
    if dc.source == "file":
        if not dc.path:
            raise ValueError("data.source=file needs data.path")
        train = poisonlab.load_dataset(dc.path)
        test = poisonlab.load_dataset(dc.test_path) if dc.test_path else None
        return train, test
    if dc.source == "cifar10":
        if not dc.path:
            raise ValueError("data.source=cifar10 needs data.path (the batch directory)")
        return poisonlab.load_cifar10_dir(dc.path, train=True), poisonlab.load_cifar10_dir(dc.path, train=False)
    raise ValueError(f"unknown data source {dc.source!r}")


def stage_poison(cfg: RunConfig) -> dict:
    run_dir = cfg.resolved_output()
    run_dir.mkdir(parents=True, exist_ok=True)
    train, test = load_source_data(cfg)
    summary = {"train_samples": len(train), "poisoned": 0, "spec": None}
    if cfg.poison.enabled:
        spec = build_poison_spec(cfg, train)
        train = poisonlab.poison_dataset(train, spec, seed=cfg.seed)
        if test is not None:
            test.poison_spec = spec.to_dict()
        summary.update(poisoned=int(train.poisoned_flags.sum()), spec={
            k: v for k, v in spec.to_dict().items() if k != "pattern"
        })
    poisonlab.save_dataset(train, run_dir / DATASET_FILE)
    if test is not None:
        poisonlab.save_dataset(test, run_dir / TESTSET_FILE)
        summary["test_samples"] = len(test)
    update_report(run_dir, cfg, poison=summary)
    return summary


def _load_train(run_dir: Path) -> poisonlab.Dataset:
    return poisonlab.load_dataset(_require(run_dir / DATASET_FILE, "poison"))


def _load_model(run_dir: Path, name: str = MODEL_FILE, stage: str = "train") -> nn.Network:
    return nn.load_network(_require(run_dir / name, stage))


def stage_train(cfg: RunConfig) -> dict:
    run_dir = cfg.resolved_output()
    data = _load_train(run_dir)
    scale, offset = 1.0, 0.0
    if cfg.model.normalize_input:
        scale, offset = 2.0 / data.pixel_max, data.pixel_max / 2.0
    net = nn.init_mlp(data.n_pixels, cfg.model.hidden, data.class_count, seed=cfg.seed,
                      input_scale=scale, input_offset=offset)
    res = nn.train(net, data, cfg.train)
    nn.save_network(res.network, run_dir / MODEL_FILE)
    summary = {"loss_history": res.loss_history, "train_metrics": nn.evaluate(res.network, data)}
    summary["test_metrics"] = evaluation_table(res.network, run_dir)
    update_report(run_dir, cfg, train=summary)
    return summary


def evaluation_table(net: nn.Network, run_dir: Path) -> dict:
    """Clean test accuracy and, when a poison spec is known, accuracy on
    triggered base-class test images (fraction still predicted as the base class)."""
    test_path = run_dir / TESTSET_FILE
    if not test_path.exists():
        return {}
    test = poisonlab.load_dataset(test_path)
    out = {"clean_accuracy": nn.evaluate(net, test)["accuracy"], "poisoned_accuracy": None,
           "attack_success": None}
    if test.poison_spec:
        spec = poisonlab.PoisonSpec.from_dict(test.poison_spec, test.shape)
        trig = poisonlab.triggered_copy(test, spec)
        if len(trig):
            pred = nn.predict(net, trig.images)
            out["poisoned_accuracy"] = float(np.mean(pred == spec.base_class))
            out["attack_success"] = float(np.mean(pred == spec.target_class))
    return out


def _export_signal(run_dir: Path, cls: int, v: np.ndarray, shape, tag: str = "") -> str:
    name = f"signal_{cls}{tag}.ppm"
    extraction.export_signal_ppm(run_dir / name, v, shape)
    return name


def stage_extract(cfg: RunConfig, label: int | None = None, class_id: int | None = None) -> dict:
    """Signal of one class's gradients (default: the recorded or configured target)."""
    run_dir = cfg.resolved_output()
    data = _load_train(run_dir)
    net = _load_model(run_dir)
    if class_id is None:
        class_id = _known_classes(run_dir, data)[0]
    if class_id is None:
        raise ValueError("no class given and no target recorded; pass --class")
    label = class_id if label is None else label
    ids = data.indices_of(class_id)
    gm = extraction.gradient_matrix(net, data.images[ids], label, center=cfg.neutralize.center, sample_ids=ids)
    sig = extraction.extract_signal(gm, seed=cfg.seed)
    t = extraction.principal_scores(gm, sig)
    name = _export_signal(run_dir, class_id, sig.v, data.shape)
    flags = data.poisoned_flags[gm.sample_ids]
    summary = {
        "class": class_id, "label_used": label, "rows": len(gm), "rayleigh": sig.rayleigh,
        "converged": sig.converged, "image": name,
        "mean_score_poisoned": float(t[flags].mean()) if flags.any() else None,
        "mean_score_clean": float(t[~flags].mean()) if (~flags).any() else None,
    }
    update_report(run_dir, cfg, extract=summary)
    return summary


def _known_classes(run_dir: Path, data: poisonlab.Dataset) -> tuple[int | None, int | None]:
    """Target/base from a previous detection, else from the poison ground truth."""
    det = read_report(run_dir).get("detect") or {}
    if det.get("flagged"):
        return det["target_class"], det["base_class"]
    if data.poison_spec:
        return data.poison_spec["target_class"], data.poison_spec["base_class"]
    return None, None


def stage_detect(cfg: RunConfig) -> dict:
    run_dir = cfg.resolved_output()
    data = _load_train(run_dir)
    net = _load_model(run_dir)
    rep = defense.detect_poison_classes(net, data, cfg.neutralize)
    summary = rep.to_dict()
    summary["signal_images"] = {
        str(y): _export_signal(run_dir, y, v, data.shape) for y, v in sorted(rep.signals.items())
    }
    if data.poison_spec:
        summary["correct"] = (rep.target_class == data.poison_spec["target_class"]
                              and rep.base_class == data.poison_spec["base_class"])
    update_report(run_dir, cfg, detect=summary)
    return summary


def stage_filter(cfg: RunConfig, target: int | None = None, base: int | None = None) -> dict:
    run_dir = cfg.resolved_output()
    data = _load_train(run_dir)
    net = _load_model(run_dir)
    kt, kb = _known_classes(run_dir, data)
    target = kt if target is None else target
    base = kb if base is None else base
    if target is None or base is None:
        raise ValueError("target/base unknown; run 'detect' first or pass --target/--base")
    res = defense.filter_poisoned(net, data, target, base, center=cfg.neutralize.center, seed=cfg.seed)
    summary = filter_summary(res, data)
    update_report(run_dir, cfg, filter=summary)
    return summary


def filter_summary(res: defense.FilterResult, data: poisonlab.Dataset) -> dict:
    out = {"label_used": res.label_used, "poisoned_count": int(len(res.poisoned_ids)),
           "clean_count": int(len(res.clean_ids)), **res.confusion(data)}
    if res.gmm is not None:
        out["gmm"] = defense._gmm_summary(res.gmm)
    return out


def stage_neutralize(cfg: RunConfig) -> dict:
    run_dir = cfg.resolved_output()
    data = _load_train(run_dir)
    net = _load_model(run_dir)
    res = defense.neutralize(net, data, cfg.neutralize, cfg.train)
    nn.save_network(res.network, run_dir / NEUTRALIZED_FILE)
    det = res.detection.to_dict()
    det["signal_images"] = {
        str(y): _export_signal(run_dir, y, v, data.shape) for y, v in sorted(res.detection.signals.items())
    }
    if data.poison_spec:
        det["correct"] = (res.detection.target_class == data.poison_spec["target_class"]
                          and res.detection.base_class == data.poison_spec["base_class"])
    summary = {
        "neutralized": res.neutralized,
        "relabeled_count": int(len(res.relabeled_ids)),
        "relabeled_correct": int(data.poisoned_flags[res.relabeled_ids].sum()) if len(res.relabeled_ids) else 0,
        "retrain_loss": res.loss_history,
        "counter_signal_images": {
            str(y): _export_signal(run_dir, y, v, data.shape, "_counter")
            for y, v in sorted(res.counter_signals.items())
        },
        "accuracy_table": {
            "before": evaluation_table(net, run_dir),
            "after": evaluation_table(res.network, run_dir),
        },
    }
    sections = {"detect": det, "neutralize": summary}
    if res.filter is not None:
        sections["filter"] = filter_summary(res.filter, data)
    update_report(run_dir, cfg, **sections)
    return summary


def run_all(cfg: RunConfig) -> dict:
    """Poison, train, then detect/filter/counter-poison/relabel/retrain."""
    run_dir = cfg.resolved_output()
    run_dir.mkdir(parents=True, exist_ok=True)
    report = run_dir / REPORT_FILE
    if report.exists():
        report.unlink()
    stage_poison(cfg)
    stage_train(cfg)
    stage_neutralize(cfg)
    return read_report(run_dir)
