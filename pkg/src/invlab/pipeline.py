"""End-to-end experiments: manifests, content-addressed stage cache, scenario matrix."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from filelock import FileLock

from . import desk
from .core import AttackScenario, DataCondition, FTLevel, Modality, minmax_fit
from .dataio import Pipeline, split_disjoint, synthetic_faces
from .errors import ConfigError, InvlabError, StageError
from .evalkit import (SAME_IMAGE, SAME_SUBJECT, EvaluationReport, dssim_batch, emit_report, ensemble_attack,
                      identification_accuracy, perceptual_distance, verify_reconstructions)
from .inference import AuxiliaryClassifierSpec, predict_stream, train_auxiliary_classifier
from .reconstruct import (LossConfig, ReconstructorSpec, TrainConfig, autoencode, build_reconstructor,
                          mean_image, reconstruct, train_reconstructor)
from .zoo import ExtractorSpec, FineTuneConfig, IdentificationHead, extract_embeddings, fine_tune, train_extractor

log = logging.getLogger(__name__)

# world offsets: pretraining faces, attacker/target population, fine-tuning faces
PRETRAIN_WORLD, PEOPLE_WORLD, FT_WORLD = 0, 1, 2
ATTACKER_SUBJECT_OFFSET = 10_000


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def content_hash(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


@dataclass(frozen=True)
class DataConfig:
    """Synthetic desk data.

    Under SameIdentities each target subject has attacker_samples +
    target_samples images and the attacker keeps the first half of them.
    """

    world_seed: int = 0
    image_size: int = 64
    pretrain_subjects: int = 50
    pretrain_samples: int = 20
    attacker_subjects: int = 300
    attacker_samples: int = 10
    target_subjects: int = 50
    target_samples: int = 6
    ft_subjects: int = 100
    ft_samples: int = 10


@dataclass(frozen=True)
class ZooConfig:
    pool: tuple = ()  # ExtractorSpec dicts; empty = desk pool
    epochs: int = 8
    layer_id: str = "emb"

    def specs(self) -> list:
        if not self.pool:
            return desk.pool_specs()
        return [ExtractorSpec.from_dict(d) for d in self.pool]


@dataclass(frozen=True)
class AuxConfig:
    hidden: tuple = (512, 256, 128, 64, 32)
    epochs: int = 40
    batch_size: int = 256
    lr: float = 1e-3
    patience: int = 4


@dataclass(frozen=True)
class ReconConfig:
    width_divisor: int = 2
    mode: str = "attack"
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20))


@dataclass(frozen=True)
class MetricConfig:
    far: float = 0.01
    impostor_ratio: int = 10
    ensemble: tuple = (1, 3)
    metric: str = "euclidean"


@dataclass(frozen=True)
class ExperimentManifest:
    name: str
    scenario: AttackScenario
    modality: Modality = Modality.FACE
    data: DataConfig = field(default_factory=DataConfig)
    zoo: ZooConfig = field(default_factory=ZooConfig)
    ft: FineTuneConfig = None  # None = desk ladder entry for the scenario's level
    aux: AuxConfig = field(default_factory=AuxConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    seed: int = 0
    output_dir: str = "runs/default"
    cache_dir: str = ""  # shared stage cache; empty = <output_dir>/cache

    def __post_init__(self):
        if not self.name:
            raise ConfigError("manifest needs a name")
        sc = self.scenario
        if not sc.target_model_id:
            raise ConfigError("scenario.target_model_id is required")
        pool_ids = [s.model_id for s in self.zoo.specs()]
        if tuple(sc.model_pool) != tuple(pool_ids):
            raise ConfigError(f"scenario pool {list(sc.model_pool)} != zoo pool {pool_ids}")
        if not sc.target_in_pool and self.base_target_id() not in pool_ids:
            raise ConfigError(f"out-of-pool target {sc.target_model_id!r} must name a sibling of a pool model "
                              f"('<pool id>-bn')")
        if self.modality is not Modality.FACE:
            raise ConfigError("desk experiments render faces only")
        if self.recon.mode not in ("attack", "autoencoder"):
            raise ConfigError(f"unknown reconstruction mode {self.recon.mode!r}")

    def base_target_id(self) -> str:
        """Pool architecture the target derives from."""
        tid = self.scenario.target_model_id
        return tid if self.scenario.target_in_pool else tid.rsplit("-", 1)[0]

    def ft_config(self):
        level = self.scenario.ft_level
        if level is FTLevel.NO_ADAPT:
            return None
        return self.ft if self.ft is not None else desk.ft_ladder()[level]

    def to_dict(self) -> dict:
        ft = self.ft_config()
        return {
            "name": self.name,
            "scenario": self.scenario.to_dict(),
            "modality": self.modality.value,
            "data": dataclasses.asdict(self.data),
            "zoo": {"pool": [s.to_dict() for s in self.zoo.specs()], "epochs": self.zoo.epochs,
                    "layer_id": self.zoo.layer_id},
            "ft": ft.to_dict() if ft is not None else None,
            "aux": dataclasses.asdict(self.aux),
            "recon": {"width_divisor": self.recon.width_divisor, "mode": self.recon.mode,
                      "loss": self.recon.loss.to_dict(), "train": self.recon.train.to_dict()},
            "metrics": dataclasses.asdict(self.metrics),
            "seed": self.seed,
            "output_dir": self.output_dir,
            "cache_dir": self.cache_dir,
        }

    @property
    def content_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("cache_dir")
        d.pop("name")
        return content_hash(d)

    @classmethod
    def from_dict(cls, d) -> "ExperimentManifest":
        try:
            zoo = d.get("zoo", {})
            recon = d.get("recon", {})
            loss = recon.get("loss", {})
            ft = d.get("ft")
            return cls(
                name=d["name"],
                scenario=AttackScenario.from_dict(d["scenario"]),
                modality=Modality(d.get("modality", "face")),
                data=DataConfig(**d.get("data", {})),
                zoo=ZooConfig(tuple(zoo.get("pool", ())), zoo.get("epochs", 8), zoo.get("layer_id", "emb")),
                ft=FineTuneConfig.from_dict(ft) if ft else None,
                aux=AuxConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.get("aux", {}).items()}),
                recon=ReconConfig(recon.get("width_divisor", 2), recon.get("mode", "attack"),
                                  LossConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in loss.items()}),
                                  TrainConfig(**recon.get("train", {"epochs": 20}))),
                metrics=MetricConfig(**{k: tuple(v) if isinstance(v, list) else v
                                        for k, v in d.get("metrics", {}).items()}),
                seed=int(d["seed"]),
                output_dir=d.get("output_dir", "runs/default"),
                cache_dir=d.get("cache_dir", ""),
            )
        except KeyError as exc:
            raise ConfigError(f"manifest missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvlabError):
                raise
            raise ConfigError(f"invalid manifest: {exc}") from None

    @classmethod
    def read(cls, path) -> "ExperimentManifest":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc}") from None
        return cls.from_dict(d)

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def default_manifest(name="desk", condition=DataCondition.SAME_PREPROCESSING, ft_level=FTLevel.NO_ADAPT,
                     target="cnn-a", in_pool=True, seed=0, output_dir="runs/desk", **overrides):
    pool = tuple(s.model_id for s in desk.pool_specs())
    scenario = AttackScenario(condition, ft_level, pool, target, in_pool)
    return ExperimentManifest(name, scenario, seed=seed, output_dir=output_dir, **overrides)


# ---------------------------------------------------------------------------
# Stage cache


class StageCache:
    """Pickled stage outputs keyed by sha256 of (stage, config, upstream keys).

    Readers never block; writers take a per-entry file lock and write through a
    temporary file so concurrent experiments sharing upstream stages are safe.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits, self.misses = [], []

    def key(self, stage: str, config, upstream: Sequence[str] = ()) -> str:
        return content_hash({"stage": stage, "config": config, "upstream": list(upstream)})

    def path(self, stage: str, key: str) -> Path:
        return self.root / f"{stage}-{key[:24]}.pkl"

    def get_or_compute(self, stage: str, key: str, fn: Callable):
        path = self.path(stage, key)
        if path.exists():
            self.hits.append(stage)
            with open(path, "rb") as fh:
                return pickle.load(fh)
        with FileLock(str(path) + ".lock"):
            if path.exists():
                self.hits.append(stage)
                with open(path, "rb") as fh:
                    return pickle.load(fh)
            value = fn()
            tmp = path.with_suffix(".tmp")
            with open(tmp, "wb") as fh:
                pickle.dump(value, fh, protocol=pickle.HIGHEST_PROTOCOL)
            tmp.replace(path)
        self.misses.append(stage)
        return value


class _StageLog:
    def __init__(self, path: Path, manifest_hash: str, seed: int):
        self.path, self.manifest_hash, self.seed = path, manifest_hash, seed

    def write(self, **entry):
        entry.update(manifest=self.manifest_hash[:16], seed=self.seed)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Stage functions


def build_datasets(data: DataConfig, condition: DataCondition) -> dict:
    """Pretraining, attacker, target (train/test) and fine-tuning image sets."""
    condition = DataCondition(condition)
    w = data.world_seed * 10
    size = data.image_size
    pretrain = synthetic_faces(w + PRETRAIN_WORLD, range(data.pretrain_subjects), range(data.pretrain_samples),
                               Pipeline.A, size)
    if condition is DataCondition.SAME_IDENTITIES:
        n = data.attacker_samples + data.target_samples
        raw = synthetic_faces(w + PEOPLE_WORLD, range(data.target_subjects), range(n), Pipeline.A, size)
        attacker, target_train, target_test = split_disjoint(raw, raw, condition)
    else:
        target_pipe = Pipeline.A if condition is DataCondition.SAME_PREPROCESSING else Pipeline.B
        a_raw = synthetic_faces(w + PEOPLE_WORLD, range(ATTACKER_SUBJECT_OFFSET,
                                                        ATTACKER_SUBJECT_OFFSET + data.attacker_subjects),
                                range(data.attacker_samples), Pipeline.A, size)
        t_raw = synthetic_faces(w + PEOPLE_WORLD, range(data.target_subjects), range(data.target_samples),
                                target_pipe, size)
        attacker, target_train, target_test = split_disjoint(a_raw, t_raw, condition)
    ft = synthetic_faces(w + FT_WORLD, range(data.ft_subjects), range(data.ft_samples), Pipeline.A, size)
    return {"pretrain": pretrain, "attacker": attacker, "target_train": target_train,
            "target_test": target_test, "ft": ft}


def train_pool(specs: Sequence[ExtractorSpec], images, epochs: int, seed: int) -> dict:
    """Train every pool model; model i uses seed + i."""
    return {s.model_id: train_extractor(s, images, seed=seed + i, epochs=epochs) for i, s in enumerate(specs)}


def build_target(manifest: ExperimentManifest, pool: dict, pool_seeds: dict, datasets: dict):
    """The deployed extractor Φ: a pool model or its out-of-pool sibling, then fine-tuned."""
    sc = manifest.scenario
    base = pool[manifest.base_target_id()]
    if not sc.target_in_pool:
        spec = desk.sibling_spec(base.spec, sc.target_model_id.rsplit("-", 1)[1])
        pretrain = datasets["pretrain"]
        base = train_extractor(spec, pretrain, seed=pool_seeds[manifest.base_target_id()],
                               epochs=manifest.zoo.epochs)
    cfg = manifest.ft_config()
    if cfg is None:
        return base
    lo, hi = cfg.size_range
    n = min(max(desk.ft_dataset_size(sc.ft_level), lo), hi)
    ft_images = datasets["ft"][:n]
    return fine_tune(base, ft_images, cfg, seed=manifest.seed, model_id=f"{sc.target_model_id}-{sc.ft_level.label}")


def _group(samples) -> dict:
    out: dict = {}
    for s in samples:
        out.setdefault(s.subject_id, []).append(s)
    return out


def evaluate_attack(manifest: ExperimentManifest, target, reference, datasets: dict, recons: list,
                    extra: dict) -> EvaluationReport:
    m = manifest.metrics
    layer = manifest.zoo.layer_id
    originals = datasets["target_test"]
    gallery = datasets["target_train"] + originals
    x = np.stack([o.pixels for o in originals])
    x_hat = np.stack([r.pixels for r in recons])
    d = dssim_batch(x, x_hat)
    perc = np.atleast_1d(perceptual_distance(x, x_hat, reference, layer))
    enrol = datasets["target_train"]
    head = IdentificationHead().fit(target.embed(enrol, layer), [s.subject_id for s in enrol])
    ident = identification_accuracy(recons, target, layer, head)
    verification = {mode: verify_reconstructions(recons, gallery, mode, target, layer, m.far, m.impostor_ratio,
                                                 manifest.seed, m.metric)
                    for mode in (SAME_IMAGE, SAME_SUBJECT)}
    per_subject = _group(recons)
    ensembles = {}
    for n in m.ensemble:
        try:
            res = ensemble_attack(per_subject, n, target, layer, head, gallery, m.far, m.impostor_ratio,
                                  manifest.seed, m.metric)
            ensembles[str(n)] = {"identification": res.identification, "tar": res.tar, "subjects": res.subjects}
        except InvlabError as exc:
            log.info("ensemble N=%d skipped: %s", n, exc)
    extra = dict(extra)
    extra["ensemble"] = ensembles
    extra["impostor_ratio"] = m.impostor_ratio
    extra["original_identification"] = identification_accuracy(originals, target, layer, head)
    extra["mean_image_median_dssim"] = float(np.median(dssim_batch(x, np.broadcast_to(
        mean_image(datasets["attacker"]), x.shape))))
    scenario = manifest.scenario.to_dict()
    scenario["out_of_pool"] = not manifest.scenario.target_in_pool
    return EvaluationReport([float(v) for v in d], [float(v) for v in perc], ident, len(head.classes),
                            verification, scenario, extra)


def run_experiment(manifest: ExperimentManifest, cache: StageCache = None):
    """Run every stage (cached by content hash) and emit the report.

    Returns (EvaluationReport, artifacts) where artifacts maps names to written
    paths plus the in-memory handles of the run.
    """
    torch.set_num_threads(1)
    mhash = manifest.content_hash
    out = Path(manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = cache or StageCache(manifest.cache_dir or out / "cache")
    logbook = _StageLog(out / "log.jsonl", mhash, manifest.seed)
    md = manifest.to_dict()
    sc = manifest.scenario
    layer = manifest.zoo.layer_id
    state: dict = {}

    def stage(name, config, upstream, fn):
        key = cache.key(name, config, upstream)
        t0 = time.time()
        n_hits = len(cache.hits)
        try:
            value = cache.get_or_compute(name, key, fn)
        except Exception as exc:
            logbook.write(stage=name, status="failed", error=str(exc), seconds=round(time.time() - t0, 3))
            raise StageError(name, mhash, exc) from exc
        logbook.write(stage=name, status="cached" if len(cache.hits) > n_hits else "computed",
                      key=key[:16], seconds=round(time.time() - t0, 3))
        state[name] = key
        return value

    data_cfg = {"data": md["data"], "condition": sc.attacker_data_condition.value}
    datasets = stage("data", data_cfg, [], lambda: build_datasets(manifest.data, sc.attacker_data_condition))

    pool_specs = manifest.zoo.specs()
    pool_seed = manifest.seed * 100
    pool_cfg = {"pool": md["zoo"]["pool"], "epochs": manifest.zoo.epochs, "seed": pool_seed,
                "pretrain": md["data"]}
    pool = stage("pool", pool_cfg, [], lambda: train_pool(pool_specs, datasets["pretrain"],
                                                          manifest.zoo.epochs, pool_seed))
    pool_seeds = {s.model_id: pool_seed + i for i, s in enumerate(pool_specs)}
    ref_spec = desk.reference_spec(sc.embedding_length)
    reference = stage("reference", {"spec": ref_spec.to_dict(), "pretrain": md["data"], "seed": 9_999},
                      [], lambda: train_extractor(ref_spec, datasets["pretrain"], seed=9_999,
                                                  epochs=manifest.zoo.epochs))

    target_cfg = {"target": sc.target_model_id, "in_pool": sc.target_in_pool, "ft": md["ft"],
                  "level": sc.ft_level.label, "seed": manifest.seed}
    target = stage("target", target_cfg, [state["pool"], state["data"]],
                   lambda: build_target(manifest, pool, pool_seeds, datasets))

    def aux_fn():
        batches = [extract_embeddings(h, datasets["attacker"], layer) for h in pool.values()]
        spec = AuxiliaryClassifierSpec(sc.embedding_length, tuple((mid, layer) for mid in pool),
                                       seed=manifest.seed, **dataclasses.asdict(manifest.aux))
        return train_auxiliary_classifier(batches, spec)

    aux = stage("aux", {"aux": md["aux"], "layer": layer, "seed": manifest.seed},
                [state["pool"], state["data"]], aux_fn)

    target_stream = extract_embeddings(target, datasets["target_test"], layer)

    def infer_fn():
        (phi_hat_id, _), idx = predict_stream(aux, target_stream)
        true_idx = list(pool).index(manifest.base_target_id())
        return {"phi_hat": phi_hat_id, "fraction_true": float(np.mean(idx == true_idx)),
                "votes": np.bincount(idx, minlength=len(pool)).tolist()}

    inference = stage("inference", {}, [state["aux"], state["target"], state["data"]], infer_fn)
    # out of pool, the reconstructor is trained against the pool model the
    # target derives from; the inferred model is still reported
    phi_id = inference["phi_hat"] if sc.target_in_pool else manifest.base_target_id()
    phi_hat = pool[phi_id]

    recon_cfg = {"recon": md["recon"], "phi_hat": phi_id, "layer": layer}

    def recon_fn():
        rc = manifest.recon
        g = build_reconstructor(ReconstructorSpec(sc.embedding_length, rc.width_divisor), seed=rc.train.seed)
        return train_reconstructor(g, phi_hat, datasets["attacker"], rc.loss, rc.train, layer, rc.mode)

    g = stage("reconstructor", recon_cfg, [state["pool"], state["data"]], recon_fn)

    def reconstruct_fn():
        if manifest.recon.mode == "autoencoder":
            # full-access baseline: target images go through the co-trained encoder
            return autoencode(g, datasets["target_test"])
        params = "stored" if sc.target_in_pool else minmax_fit(target_stream)
        return reconstruct(g, target_stream, params)

    recons = stage("reconstruct", {"in_pool": sc.target_in_pool, "mode": manifest.recon.mode},
                   [state["reconstructor"], state["target"], state["data"]], reconstruct_fn)

    extra = {"phi_hat": inference["phi_hat"], "phi_recon": phi_id,
             "phi_hat_fraction_true": inference["fraction_true"], "aux_heldout_accuracy": aux.heldout_accuracy,
             "target_model": target.model_id, "target_val_acc": target.meta.get("val_acc"), "manifest_hash": mhash}
    report = stage("evaluate", {"metrics": md["metrics"], "seed": manifest.seed},
                   [state["reconstruct"], state["reference"]],
                   lambda: evaluate_attack(manifest, target, reference, datasets, recons, extra))

    t0 = time.time()
    try:
        paths = emit_report(report, out)
    except OSError as exc:
        raise StageError("report", mhash, exc) from exc
    logbook.write(stage="report", status="computed", seconds=round(time.time() - t0, 3))
    artifacts = {"paths": [str(p) for p in paths], "pool": pool, "target": target, "reconstructor": g,
                 "reconstructions": recons, "datasets": datasets, "aux": aux, "reference": reference,
                 "stage_keys": dict(state)}
    return report, artifacts


# ---------------------------------------------------------------------------
# Scenario matrix

MATRIX_COLUMNS = ["name", "condition", "ft_level", "target", "in_pool", "phi_hat", "median_dssim",
                  "median_perceptual", "identification", "chance", "tar_same_image", "tar_same_subject"]


def scenario_matrix(manifests: Sequence[ExperimentManifest], out_dir, runner: Callable = None) -> list:
    """Run each manifest and tabulate one row per (condition, FT level, model).

    Rows are sorted by condition, FT level and target; the table is written as
    ``matrix.csv`` plus a plot of median DSSIM per FT level.
    """
    manifests = list(manifests)
    if not manifests:
        raise ConfigError("scenario matrix needs at least one manifest")
    modalities = {m.modality for m in manifests}
    if len(modalities) > 1:
        raise ConfigError(f"mixed modalities in one table: {sorted(x.value for x in modalities)}")
    runner = runner or (lambda m: run_experiment(m)[0])
    rows = []
    for m in manifests:
        report = runner(m)
        ver = report.verification
        rows.append({
            "name": m.name,
            "condition": m.scenario.attacker_data_condition.value,
            "ft_level": m.scenario.ft_level.label,
            "target": m.scenario.target_model_id,
            "in_pool": m.scenario.target_in_pool,
            "phi_hat": report.extra.get("phi_hat", ""),
            "median_dssim": report.median_dssim,
            "median_perceptual": report.median_perceptual,
            "identification": report.identification_accuracy,
            "chance": report.chance,
            "tar_same_image": ver[SAME_IMAGE].tar if SAME_IMAGE in ver else float("nan"),
            "tar_same_subject": ver[SAME_SUBJECT].tar if SAME_SUBJECT in ver else float("nan"),
        })
    order = {lvl.label: int(lvl) for lvl in FTLevel}
    rows.sort(key=lambda r: (r["condition"], order[r["ft_level"]], r["target"], r["name"]))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "matrix.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, MATRIX_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    _plot_matrix(rows, out / "matrix.png")
    return rows


def _plot_matrix(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    order = [lvl.label for lvl in FTLevel]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for cond in sorted({r["condition"] for r in rows}):
        sub = [r for r in rows if r["condition"] == cond]
        xs = [order.index(r["ft_level"]) for r in sub]
        ax.plot(xs, [r["median_dssim"] for r in sub], "o-", label=cond)
    ax.set_xticks(range(len(order)))
    ax.set_xticklabels(order)
    ax.set_ylabel("median DSSIM")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
