"""Run directories: configuration, manifest, pipeline stages, attacks and reports."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .attacks import (AttackResult, Timer, finetune, jbda_steal, preprocess_inputs, prune_weights,
                      quantize_weights, steal_model)
from .construction import (NUM_SOURCES, WatermarkSpec, build_watermark_dataset, draw_composites,
                           extract_class_centroids, select_source_classes, select_target_label)
from .data import (LabeledDataset, fashion_mnist_cache, load_dataset, load_image_dir,
                   save_image_dir, to_float)
from .embedding import EmbeddingConfig, embed_watermark, write_training_log
from .keys import DEFAULT_M, KeySampleSet, stage1_filter, stage2_topk, train_surrogate
from .models import build_model, load_checkpoint, predict, save_checkpoint
from .training import TrainingSchedule, black_box, evaluate_accuracy, train_classifier
from .verification import DEFAULT_THRESHOLD, decide, verify_ownership, watermark_success_rate

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
LOCK = ".lock"
STAGES = ("train-benign", "construct-watermark", "embed", "generate-keys", "self-verify")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


# --------------------------------------------------------------------------- config

@dataclass
class DataSlice:
    source: str = "fashion-mnist"
    split: str = "train"
    offset: int = 0
    limit: int | None = None
    seed: int = 0

    def load(self) -> LabeledDataset:
        return load_dataset(self.source, self.split, self.limit, self.seed, self.offset)


@dataclass
class DataConfig:
    task: DataSlice = field(default_factory=lambda: DataSlice(limit=10000))
    test: DataSlice = field(default_factory=lambda: DataSlice(split="test"))
    # disjoint train windows: victim 0-10k, defender's surrogate 10k-35k,
    # attacker queries 35k-55k, attacker fine-tuning data 55k-60k
    transfer: DataSlice = field(default_factory=lambda: DataSlice(offset=10000, limit=25000))
    attacker: DataSlice = field(default_factory=lambda: DataSlice(offset=35000, limit=20000))
    attacker_holdout: DataSlice = field(default_factory=lambda: DataSlice(offset=55000, limit=5000))


@dataclass
class ModelConfig:
    victim_arch: str = "naivenet"
    surrogate_arch: str = "naivenet"
    student_arch: str = "naivenet"


@dataclass
class WatermarkConfig:
    num_sources: int = NUM_SOURCES
    resize_filter: str = "bilinear"
    kmeans_seed: int = 0
    target_probe_count: int = 1000
    holdout_count: int = 1000
    seed: int = 0


@dataclass
class KeyConfig:
    M: int = DEFAULT_M
    candidate_factor: int = 4
    seed: int = 1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    models: ModelConfig = field(default_factory=ModelConfig)
    benign: TrainingSchedule = field(default_factory=TrainingSchedule)
    embedding: EmbeddingConfig = field(default_factory=lambda: EmbeddingConfig(
        phase1=TrainingSchedule(seed=1), phase2=TrainingSchedule(seed=2)))
    surrogate: TrainingSchedule = field(default_factory=lambda: TrainingSchedule(seed=3))
    attack: TrainingSchedule = field(default_factory=lambda: TrainingSchedule(seed=4))
    watermark: WatermarkConfig = field(default_factory=WatermarkConfig)
    keys: KeyConfig = field(default_factory=KeyConfig)
    threshold: float = DEFAULT_THRESHOLD
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        return _build(cls, d or {}, "")

    @classmethod
    def from_yaml(cls, path: str | os.PathLike) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def validate(self) -> None:
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold: must lie in (0, 1)")
        if self.watermark.num_sources != NUM_SOURCES:
            raise ConfigError(f"watermark.num_sources: only {NUM_SOURCES} is supported")
        if self.keys.M < 1 or self.keys.candidate_factor < 1:
            raise ConfigError("keys: M and candidate_factor must be >= 1")
        try:
            self.embedding.check()
        except ValueError as exc:
            raise ConfigError(f"embedding: {exc}") from exc
        for name in ("task", "test", "transfer", "attacker", "attacker_holdout"):
            src = getattr(self.data, name).source
            if src == "fashion-mnist":
                if not fashion_mnist_cache().exists():
                    raise ConfigError(f"data.{name}.source: Fashion-MNIST cache missing at "
                                      f"{fashion_mnist_cache()} (run `wmlab fetch-data`)")
            elif not src.startswith("synthetic") and not Path(src).is_dir():
                raise ConfigError(f"data.{name}.source: dataset path {src!r} does not exist")


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, f in names.items():
        key = f"{where}.{name}" if where else name
        if name not in d:
            continue
        value = d[name]
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            merged = asdict(current)
            merged.update(value or {})
            kwargs[name] = _build(type(current), merged, key)
        else:
            kwargs[name] = value
    try:
        return dataclasses.replace(defaults, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


# --------------------------------------------------------------------------- run dir

def sha256_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


class RunDir:
    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)

    def __truediv__(self, other) -> Path:
        return self.path / other

    @property
    def manifest_path(self) -> Path:
        return self.path / MANIFEST

    def exists(self) -> bool:
        return self.manifest_path.exists()

    def manifest(self) -> dict:
        if not self.exists():
            raise FileNotFoundError(f"no manifest in {self.path}")
        return json.loads(self.manifest_path.read_text())

    def write_manifest(self, m: dict) -> None:
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.manifest_path)

    def config(self) -> RunConfig:
        return RunConfig.from_dict(self.manifest()["config"])

    def init(self, config: RunConfig) -> None:
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "config.yaml").write_text(config.to_yaml())
        self.write_manifest({"tool_version": __version__, "config": config.to_dict(),
                             "config_hash": config.digest(), "stages": {}, "artifacts": {},
                             "metrics": {}})

    def record(self, stage: str | None = None, artifacts: dict | None = None, **updates) -> None:
        m = self.manifest()
        for name, rel in (artifacts or {}).items():
            m["artifacts"][name] = {"path": rel, "sha256": sha256_path(self.path / rel)}
        for key, value in updates.items():
            if isinstance(value, dict) and isinstance(m.get(key), dict):
                m[key].update(value)
            else:
                m[key] = value
        if stage:
            m["stages"][stage] = "done"
        self.write_manifest(m)

    def artifact(self, name: str, check: bool = True) -> Path:
        entry = self.manifest()["artifacts"].get(name)
        if entry is None:
            raise FileNotFoundError(f"artifact {name!r} missing from {self.path}")
        path = self.path / entry["path"]
        if not path.exists():
            raise FileNotFoundError(f"artifact {name!r} missing: {path}")
        if check and sha256_path(path) != entry["sha256"]:
            raise ValueError(f"artifact {name!r} does not match its recorded hash")
        return path

    def verify_artifacts(self) -> None:
        for name in self.manifest()["artifacts"]:
            self.artifact(name)

    @contextmanager
    def lock(self):
        self.path.mkdir(parents=True, exist_ok=True)
        lock = self.path / LOCK
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"run directory {self.path} is locked by another writer ({lock})")
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            lock.unlink(missing_ok=True)


# --------------------------------------------------------------------------- stages

def load_test_set(run: RunDir) -> LabeledDataset:
    return load_image_dir(run.artifact("test_set"), split="test", remap=False,
                          num_classes=run.manifest()["metrics"]["num_classes"])


def load_model(run: RunDir, name: str):
    return load_checkpoint(run.artifact(name))


def load_keys(run: RunDir) -> KeySampleSet:
    m = run.manifest()
    return KeySampleSet.load(run.artifact("keys"), m["metrics"]["num_classes"], m["config"]["keys"]["M"])


def stage_train_benign(run: RunDir, cfg: RunConfig) -> None:
    data = cfg.data.task.load()
    test = cfg.data.test.load()
    if test.num_classes != data.num_classes:
        raise ValueError("task and test splits disagree on the class count")
    benign = train_classifier(cfg.models.victim_arch, data, cfg.benign)
    save_checkpoint(benign, run / "benign.ckpt")
    save_image_dir(test, run / "data" / "test")
    run.record("train-benign", {"benign": "benign.ckpt", "test_set": "data/test"},
               metrics={"num_classes": data.num_classes, "benign_acc": evaluate_accuracy(benign, test),
                        "train_size": len(data), "skipped_samples": data.skipped + test.skipped},
               normalization={"mean": benign.input_mean.flatten().tolist(),
                              "std": benign.input_std.flatten().tolist()})


def stage_construct_watermark(run: RunDir, cfg: RunConfig) -> None:
    data = cfg.data.task.load()
    benign = load_model(run, "benign")
    wcfg = cfg.watermark
    centroids = extract_class_centroids(benign, data)
    sources = select_source_classes(centroids, wcfg.num_sources, wcfg.kmeans_seed)
    probe, _ = draw_composites(data, sorted(sources), wcfg.target_probe_count, wcfg.seed,
                               wcfg.resize_filter)
    target = select_target_label(benign, probe)
    spec = WatermarkSpec(tuple(sources), target, data.input_shape, resize_filter=wcfg.resize_filter,
                         seed=wcfg.seed)
    pool_size = math.ceil(cfg.embedding.phase2_ratio * len(data))
    pool = build_watermark_dataset(data, spec, pool_size, wcfg.seed + 1)
    test = load_test_set(run)
    holdout = build_watermark_dataset(test, spec, wcfg.holdout_count, wcfg.seed + 2, split="holdout")
    wdir = run / "watermark"
    wdir.mkdir(exist_ok=True)
    (wdir / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    save_image_dir(pool, wdir / "pool", _provenance_rows(pool))
    save_image_dir(holdout, wdir / "holdout", _provenance_rows(holdout))
    run.record("construct-watermark",
               {"watermark_spec": "watermark/spec.json", "watermark_pool": "watermark/pool",
                "watermark_holdout": "watermark/holdout"},
               watermark=dict(spec.to_dict(), digest=spec.digest()),
               metrics={"class_centroid_counts": centroids.counts.tolist()})


def _provenance_rows(ds: LabeledDataset) -> list[dict]:
    return [{"sources": " ".join(map(str, row))} for row in ds.provenance]


def load_spec(run: RunDir) -> WatermarkSpec:
    return WatermarkSpec.from_dict(json.loads(run.artifact("watermark_spec").read_text()))


def load_wm_dir(run: RunDir, name: str, split: str) -> LabeledDataset:
    return load_image_dir(run.artifact(name), split=split, remap=False,
                          num_classes=run.manifest()["metrics"]["num_classes"])


def stage_embed(run: RunDir, cfg: RunConfig) -> None:
    data = cfg.data.task.load()
    benign = load_model(run, "benign")
    pool = load_wm_dir(run, "watermark_pool", data.split)
    holdout = load_wm_dir(run, "watermark_holdout", "holdout")
    ecfg = cfg.embedding
    if ecfg.phase1_from_benign:
        init = copy.deepcopy(benign)
    else:
        init = build_model(cfg.models.victim_arch, data.num_classes, data.input_shape,
                           seed=ecfg.phase1.seed, mean=benign.input_mean.flatten().tolist(),
                           std=benign.input_std.flatten().tolist())
    victim, history = embed_watermark(init, data, pool, ecfg, holdout)
    save_checkpoint(victim, run / "victim.ckpt")
    write_training_log(history, run / "training_log.csv")
    test = load_test_set(run)
    run.record("embed", {"victim": "victim.ckpt", "training_log": "training_log.csv"},
               metrics={"victim_acc": evaluate_accuracy(victim, test),
                        "victim_holdout_wsr": watermark_success_rate(victim, holdout),
                        "benign_holdout_wsr": watermark_success_rate(benign, holdout)})


def stage_generate_keys(run: RunDir, cfg: RunConfig) -> None:
    victim = load_model(run, "victim")
    benign = load_model(run, "benign")
    spec = load_spec(run)
    surrogate = train_surrogate(black_box(victim), cfg.data.transfer.load(),
                                cfg.models.surrogate_arch, cfg.surrogate)
    save_checkpoint(surrogate, run / "surrogate.ckpt")
    test = load_test_set(run)
    S0 = build_watermark_dataset(test, spec, cfg.keys.candidate_factor * cfg.keys.M, cfg.keys.seed,
                                 split="candidates")
    S1 = stage1_filter(S0, victim, surrogate, benign)
    keys = stage2_topk(S1, surrogate, cfg.keys.M, spec.digest())
    if len(keys) == 0:
        raise RuntimeError("no candidate survived the stage-1 filter")
    keys.save(run / "keys")
    agreement = float(np.mean(predict(surrogate, to_float(test.images)) ==
                              predict(victim, to_float(test.images))))
    run.record("generate-keys", {"surrogate": "surrogate.ckpt", "keys": "keys"},
               metrics={"surrogate_acc": evaluate_accuracy(surrogate, test),
                        "surrogate_agreement": agreement, "candidates": len(S0),
                        "stage1_survivors": len(S1), "key_count": len(keys),
                        "key_warnings": keys.warnings})


def stage_self_verify(run: RunDir, cfg: RunConfig) -> None:
    keys = load_keys(run)
    vdir = run / "verification"
    vdir.mkdir(exist_ok=True)
    out = {}
    for name in ("victim", "benign"):
        rep = verify_ownership(load_model(run, name), keys, cfg.threshold, name, "keys",
                               vdir / f"{name}.json")
        out[f"{name}_key_wsr"] = rep.wsr
        out[f"{name}_decision"] = rep.decision
    run.record("self-verify", metrics=out)


STAGE_FUNCS = {
    "train-benign": stage_train_benign,
    "construct-watermark": stage_construct_watermark,
    "embed": stage_embed,
    "generate-keys": stage_generate_keys,
    "self-verify": stage_self_verify,
}


def run_stage(run: RunDir, stage: str, config: RunConfig | None = None) -> None:
    """Run one stage under the run-directory lock, initializing the run if needed."""
    if config is not None:
        config.validate()
    with run.lock():
        if not run.exists():
            if config is None:
                raise ConfigError(f"{run.path} has no manifest; pass a config")
            run.init(config)
        cfg = run.config()
        try:
            STAGE_FUNCS[stage](run, cfg)
        except (ConfigError, StageError):
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc


def run_pipeline(config: RunConfig, output_dir: str | os.PathLike | None = None) -> RunDir:
    """Run every stage in order; artifacts of finished stages survive a failure."""
    config.validate()
    run = RunDir(output_dir or config.output_dir)
    with run.lock():
        run.init(config)
    for stage in STAGES:
        log.info("stage %s", stage)
        run_stage(run, stage)
    return run


# --------------------------------------------------------------------------- attacks

ATTACKS = ("steal", "jbda", "finetune", "prune", "quantize", "preprocess")
ATTACK_PARAMS = {
    "steal": {"label_mode", "temperature", "query_slice", "student_arch"},
    "jbda": {"seed_count", "rounds", "student_arch", "label_mode", "lambda_step", "cap"},
    "finetune": {"mode"},
    "prune": {"rate"},
    "quantize": {"bits"},
    "preprocess": {"method", "strength"},
}


def _slice_from(cfg: RunConfig, name: str) -> LabeledDataset:
    return getattr(cfg.data, name).load()


def run_attack(run: RunDir, attack: str, params: dict | None = None, attack_id: str | None = None,
               target: str = "victim") -> AttackResult:
    """Apply one attack to the run's ``target`` model and persist an AttackResult.

    Attacks write only under ``attacks/<attack_id>/`` so several may run at once.
    """
    if attack not in ATTACKS:
        raise ConfigError(f"unknown attack {attack!r}; choose from {ATTACKS}")
    params = dict(params or {})
    unknown = sorted(set(params) - ATTACK_PARAMS[attack] - {"schedule"})
    if unknown:
        raise ConfigError(f"unknown parameter(s) for {attack}: {', '.join(unknown)}")
    cfg = run.config()
    keys = load_keys(run)
    test = load_test_set(run)
    model_in = load_checkpoint(run.artifact(target)) if target in run.manifest()["artifacts"] \
        else load_checkpoint(target)
    schedule = dataclasses.replace(cfg.attack, **params.pop("schedule", {}))
    seed = schedule.seed
    attack_id = attack_id or _default_id(attack, params)
    out_dir = run / "attacks" / attack_id
    out_dir.mkdir(parents=True, exist_ok=True)

    eval_test, eval_keys = test, keys
    with Timer() as timer:
        if attack == "steal":
            mode = params.setdefault("label_mode", "soft")
            temp = float(params.setdefault("temperature", 1.0))
            queries = _slice_from(cfg, params.setdefault("query_slice", "attacker"))
            model = steal_model(black_box(model_in), queries, mode,
                                params.setdefault("student_arch", cfg.models.student_arch),
                                test.num_classes, schedule, temp)
        elif attack == "jbda":
            seeds = _slice_from(cfg, "attacker").subset(np.arange(params.setdefault("seed_count", 500)))
            model, grown = jbda_steal(black_box(model_in), seeds, params.setdefault("rounds", 3),
                                      params.setdefault("student_arch", cfg.models.student_arch),
                                      test.num_classes, schedule,
                                      params.setdefault("label_mode", "soft"),
                                      params.setdefault("lambda_step", 0.1),
                                      params.setdefault("cap", 20000))
            params["query_count"] = len(grown)
        elif attack == "finetune":
            model = finetune(model_in, _slice_from(cfg, "attacker_holdout"),
                             params.setdefault("mode", "FTLL"), schedule)
        elif attack == "prune":
            model = prune_weights(model_in, float(params.setdefault("rate", 0.5)))
        elif attack == "quantize":
            model = quantize_weights(model_in, int(params.setdefault("bits", 8)))
        else:
            method = params.setdefault("method", "noise")
            strength = float(params.setdefault("strength", 0.05))
            model = model_in
            eval_test, eval_keys = _preprocessed(test, keys, method, strength, seed)
    ckpt = save_checkpoint(model, out_dir / "model.ckpt")
    acc = evaluate_accuracy(model, eval_test)
    wsr = watermark_success_rate(model, eval_keys)
    hits = round(wsr * len(keys))
    result = AttackResult(attack, dict(params, schedule=schedule.to_dict(), target=target), acc, wsr,
                          seed, str(ckpt.relative_to(run.path)), timer.elapsed,
                          "owned" if decide(hits, len(keys), cfg.threshold) else "not-owned")
    result.save(out_dir / "result.json")
    return result


def _default_id(attack: str, params: dict) -> str:
    parts = [attack] + [f"{k}-{v}" for k, v in sorted(params.items()) if not isinstance(v, dict)]
    return "_".join(str(p) for p in parts).replace("/", "-")


def _preprocessed(test: LabeledDataset, keys: KeySampleSet, method: str, strength: float, seed: int):
    """Preprocessed copies of the test and key sets, as float inputs."""
    t = FloatSet(preprocess_inputs(test.tensors()[0], method, strength, seed), test.labels,
                 test.num_classes)
    k = FloatSet(preprocess_inputs(to_float(keys.images), method, strength, seed + 1),
                 np.full(len(keys), keys.target_label), keys.num_classes)
    return t, k


@dataclass
class FloatSet:
    """Evaluation set of float inputs, e.g. after preprocessing."""

    images: torch.Tensor
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.images)

    def tensors(self):
        return self.images, torch.from_numpy(np.asarray(self.labels))


def recompute_attack(run: RunDir, result: AttackResult) -> tuple[float, float]:
    """Acc and WSR of a persisted attack result, recomputed from its checkpoint."""
    model = load_checkpoint(run / result.model_path)
    test, keys = load_test_set(run), load_keys(run)
    if result.attack == "preprocess":
        test, keys = _preprocessed(test, keys, result.params["method"], result.params["strength"],
                                   result.seed)
    return evaluate_accuracy(model, test), watermark_success_rate(model, keys)


# --------------------------------------------------------------------------- report

REPORT_COLUMNS = ["row", "attack", "acc", "delta_acc", "wsr", "decision"]


def emit_report(run_dir: str | os.PathLike, results: list[AttackResult] | None = None) -> dict:
    """Consolidate benign, victim and attack rows into report.json and report.csv."""
    run = RunDir(run_dir)
    m = run.manifest()
    missing = [a for a in ("benign", "victim", "keys", "test_set") if a not in m["artifacts"]]
    if missing:
        raise FileNotFoundError(f"run directory lacks artifacts: {', '.join(missing)}")
    run.verify_artifacts()
    threshold = m["config"]["threshold"]
    test, keys = load_test_set(run), load_keys(run)
    rows = []
    benign_acc = None
    for name in ("benign", "victim"):
        model = load_model(run, name)
        acc = evaluate_accuracy(model, test)
        wsr = watermark_success_rate(model, keys)
        if name == "benign":
            benign_acc = acc
        rows.append({"row": name, "attack": "", "acc": acc,
                     "delta_acc": acc - benign_acc, "wsr": wsr,
                     "decision": "owned" if decide(round(wsr * len(keys)), len(keys), threshold)
                     else "not-owned"})
    if results is None:
        results = [AttackResult.load(p) for p in sorted((run / "attacks").glob("*/result.json"))]
    for r in results:
        rows.append({"row": Path(r.model_path).parent.name if r.model_path else r.attack,
                     "attack": r.attack, "acc": r.acc, "delta_acc": r.acc - rows[1]["acc"],
                     "wsr": r.wsr, "decision": r.decision})
    report = {"run": str(run.path), "config_hash": m["config_hash"], "key_count": len(keys),
              "threshold": threshold, "rows": rows}
    (run / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    with open(run / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return report
