"""Command-line entry point: ``invlab <group> <command> [options]``.

Exit codes: 0 success, 2 validation error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import InvlabError, NumericError, StageError, TrainError

log = logging.getLogger("invlab")

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 2, 3


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _load_images(path, size=64):
    from .dataio import DatasetManifest, load_dataset

    manifest = DatasetManifest.read(path)
    return load_dataset(manifest, (size, size))


def _spec_for(args):
    from . import desk
    from .zoo import ExtractorSpec

    if getattr(args, "spec", None):
        return ExtractorSpec.from_dict(json.loads(Path(args.spec).read_text()))
    specs = {s.model_id: s for s in desk.pool_specs()}
    ref = desk.reference_spec()
    specs[ref.model_id] = ref
    if args.model in specs:
        return specs[args.model]
    base, _, suffix = args.model.rpartition("-")
    if base in specs and suffix:
        return desk.sibling_spec(specs[base], suffix)
    raise InvlabError(f"unknown model {args.model!r}; give --spec or one of {sorted(specs)}")


def _embeddings_from(args, model_id=None):
    """Embedding matrix from --embedding FILE.npy or --store DIR --model --layer."""
    from .store import EmbeddingStore

    if getattr(args, "embedding", None):
        mat = np.load(args.embedding)
        return np.atleast_2d(mat), None
    if getattr(args, "store", None):
        batch = EmbeddingStore(args.store).read(model_id or args.model, args.layer)
        return batch.vectors, batch
    raise InvlabError("give --embedding FILE.npy or --store DIR with --model/--layer")


# ---------------------------------------------------------------------------
# data


def cmd_data_ingest(args):
    from .dataio import write_dataset

    samples = _load_images(args.manifest, args.size)
    manifest = write_dataset(samples, args.out)
    _print_json({"samples": len(samples), "subjects": len(manifest.subjects), "out": str(args.out)})


def cmd_data_augment(args):
    from .core import Modality
    from .dataio import AugmentationPolicy, augment, write_dataset

    policy = AugmentationPolicy.from_json(args.policy) if args.policy else AugmentationPolicy()
    if args.multiplier:
        policy = AugmentationPolicy(**{**policy.to_dict(), "multiplier": args.multiplier})
    samples = _load_images(args.data, args.size)
    out = [v for s in samples for v in augment(s, policy, Modality(args.modality))]
    write_dataset(out, args.out, Modality(args.modality))
    _print_json({"inputs": len(samples), "outputs": len(out), "multiplier": policy.multiplier})


def cmd_data_synth(args):
    from .dataio import Pipeline, synthetic_faces, write_dataset

    samples = synthetic_faces(args.world, range(args.subject_offset, args.subject_offset + args.subjects),
                              range(args.samples), Pipeline(args.pipeline), args.size)
    write_dataset(samples, args.out)
    _print_json({"samples": len(samples), "out": str(args.out)})


# ---------------------------------------------------------------------------
# zoo


def cmd_zoo_train(args):
    from .zoo import Registry, train_extractor

    handle = train_extractor(_spec_for(args), _load_images(args.data), seed=args.seed, epochs=args.epochs)
    Registry(args.registry).save(handle)
    _print_json({"model": handle.model_id, "checksum": handle.checksum})


def cmd_zoo_finetune(args):
    from . import desk
    from .core import FTLevel
    from .zoo import FineTuneConfig, Registry, fine_tune

    reg = Registry(args.registry)
    level = FTLevel.parse(args.ft_level)
    if args.config:
        config = FineTuneConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        config = desk.ft_ladder()[level]
    handle = fine_tune(reg.load(args.model), _load_images(args.data), config, seed=args.seed,
                       model_id=args.out_id or f"{args.model}-{level.label}")
    reg.save(handle)
    _print_json({"model": handle.model_id, "val_acc": handle.meta.get("val_acc"),
                 "floor_met": handle.meta.get("floor_met")})


def cmd_zoo_extract(args):
    from .store import EmbeddingStore
    from .zoo import Registry, extract_embeddings

    handle = Registry(args.registry).load(args.model)
    batch = extract_embeddings(handle, _load_images(args.data), args.layer)
    EmbeddingStore(args.store, batch.modality).append(batch)
    _print_json({"model": args.model, "layer": args.layer, "count": len(batch), "length": batch.length})


def cmd_zoo_eval(args):
    from .zoo import Registry, evaluate_recognition

    rep = evaluate_recognition(Registry(args.registry).load(args.model), args.layer,
                               _load_images(args.data), args.far)
    _print_json(vars(rep))


# ---------------------------------------------------------------------------
# infer


def cmd_infer_train(args):
    from .inference import AuxiliaryClassifierSpec, train_auxiliary_classifier
    from .store import EmbeddingStore

    store = EmbeddingStore(args.pool)
    shards = [(m, l) for m, l in store.shards()]
    batches = [store.read(m, l) for m, l in shards]
    batches = [b for b in batches if b.length == args.length]
    if len(batches) < 2:
        raise InvlabError(f"need at least two shards of length {args.length} in {args.pool}")
    spec = AuxiliaryClassifierSpec(args.length, tuple((b.source_model_id, b.layer_id) for b in batches),
                                   epochs=args.epochs, seed=args.seed)
    clf = train_auxiliary_classifier(batches, spec, shuffle_labels=args.shuffle)
    clf.save(args.out)
    _print_json({"classifier_id": clf.classifier_id, "heldout_accuracy": clf.heldout_accuracy,
                 "classes": spec.labels})


def cmd_infer_predict(args):
    from .inference import AuxiliaryClassifier, predict_model

    clf = AuxiliaryClassifier.load(args.classifier)
    mat, _ = _embeddings_from(args)
    preds = [predict_model(clf, v).to_dict() for v in mat]
    _print_json(preds[0] if len(preds) == 1 else preds)


def cmd_infer_attributes(args):
    from .inference import AttributeSchema, train_attribute_predictor
    from .store import EmbeddingStore

    schema = AttributeSchema.from_json(args.schema)
    labels = json.loads(Path(args.labels).read_text())  # {model_id: {attribute: value}}
    store = EmbeddingStore(args.store)
    labeled = [(store.read(m, args.layer), attrs) for m, attrs in sorted(labels.items())]
    pred = train_attribute_predictor(labeled, schema, epochs=args.epochs, seed=args.seed)
    _print_json({"heldout_accuracy": pred.heldout_accuracy, "chance": pred.chance,
                 "heldout_models": list(pred.heldout_models)})


# ---------------------------------------------------------------------------
# recon


def _loss_config(path):
    from .reconstruct import LossConfig

    if not path:
        return LossConfig()
    d = json.loads(Path(path).read_text())
    return LossConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _train_config(args):
    from .reconstruct import TrainConfig

    return TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed)


def _manifest_checksum(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_recon_build(args):
    from .reconstruct import ReconstructorSpec, build_reconstructor

    g = build_reconstructor(ReconstructorSpec(args.length, args.divisor), seed=args.seed)
    g.save(args.out)
    _print_json({"length": args.length, "parameters": g.parameter_count, "out": str(args.out)})


def cmd_recon_search_layers(args):
    from .reconstruct import ReconstructorSpec, build_reconstructor, search_layer_subset
    from .zoo import Registry

    phi = Registry(args.registry).load(args.phi)
    images = _load_images(args.data)
    val = _load_images(args.val) if args.val else images[::5]
    candidates = json.loads(Path(args.candidates).read_text())
    g = build_reconstructor(ReconstructorSpec(args.length, args.divisor), seed=args.seed)
    best, scores = search_layer_subset(g, phi, candidates, images, val, _loss_config(args.loss),
                                       _train_config(args), args.layer, args.budget)
    _print_json({"best": list(best), "scores": [[list(s), f] for s, f in scores]})


def cmd_recon_train(args):
    from .reconstruct import ReconstructorSpec, build_reconstructor, train_reconstructor
    from .zoo import Registry

    phi = Registry(args.registry).load(args.phi)
    g = build_reconstructor(ReconstructorSpec(args.length, args.divisor), seed=args.seed)
    loss = _loss_config(args.loss)
    trained = train_reconstructor(g, phi, _load_images(args.data), loss, _train_config(args), args.layer,
                                  args.mode)
    trained.meta.update({"phi": args.phi, "phi_checksum": phi.checksum, "loss": loss.to_dict(),
                         "subset": list(loss.layers), "data_manifest_sha256": _manifest_checksum(args.data)})
    trained.save(args.out)
    _print_json({"out": str(args.out), "final_loss": trained.trace[-1]["loss"] if trained.trace else None})


def cmd_recon_run(args):
    from .core import ImageSample, minmax_fit
    from .dataio import write_dataset
    from .reconstruct import ReconstructorHandle, reconstruct

    g = ReconstructorHandle.load(args.model)
    mat, batch = _embeddings_from(args, args.model_id)
    params = minmax_fit(mat) if args.normalize == "stream" else "stored"
    images = reconstruct(g, batch if batch is not None else mat, params)
    if batch is None:
        images = [ImageSample(im, f"s{i:05d}", f"r{i:05d}", "reconstruction") for i, im in enumerate(images)]
    write_dataset(images, args.out)
    _print_json({"reconstructions": len(images), "out": str(args.out)})


# ---------------------------------------------------------------------------
# lipschitz


def cmd_lipschitz_bound(args):
    from .lipschitz import network_lipschitz_bound
    from .reconstruct import ReconstructorHandle

    nb = network_lipschitz_bound(ReconstructorHandle.load(args.model), conservative=args.conservative)
    _print_json(nb.to_dict())


def cmd_lipschitz_verify(args):
    from .lipschitz import network_lipschitz_bound, verify_bound
    from .reconstruct import ReconstructorHandle

    g = ReconstructorHandle.load(args.model)
    nb = network_lipschitz_bound(g, conservative=args.conservative)
    rep = verify_bound(g, nb.L, probes=args.probes, seed=args.seed)
    out = nb.to_dict()
    out.update(rep)
    _print_json(out)
    if rep["violations"]:
        raise NumericError(f"{rep['violations']} bound violations")


# ---------------------------------------------------------------------------
# eval / run / matrix / report


def cmd_eval(args):
    from .evalkit import (EvaluationReport, SAME_IMAGE, SAME_SUBJECT, dssim_batch, emit_report,
                          ensemble_attack, identification_accuracy, verify_reconstructions)
    from .zoo import IdentificationHead, Registry

    target = Registry(args.registry).load(args.target)
    recons = _load_images(args.recon)
    gallery = _load_images(args.gallery)
    # written reconstructions are named after their source sample id with "/" flattened to "_"
    by_stem = {g.sample_id.replace("/", "_"): g.sample_id for g in gallery}
    recons = [r.replace(sample_id=by_stem.get(r.sample_id.rsplit("/", 1)[-1], r.sample_id)) for r in recons]
    mode = SAME_IMAGE if args.mode == "same-image" else SAME_SUBJECT
    sources = {r.sample_id for r in recons}
    enrol = [g for g in gallery if g.sample_id not in sources] or gallery
    head = IdentificationHead().fit(target.embed(enrol, args.layer), [g.subject_id for g in enrol])
    ident = identification_accuracy(recons, target, args.layer, head)
    ver = verify_reconstructions(recons, gallery, mode, target, args.layer, args.far, seed=args.seed)
    originals = {g.sample_id: g for g in gallery}
    paired = [(originals[r.sample_id], r) for r in recons if r.sample_id in originals]
    dssim = [float(v) for v in dssim_batch(np.stack([o.pixels for o, _ in paired]),
                                           np.stack([r.pixels for _, r in paired]))] if paired else []
    extra = {}
    if args.ensemble > 1:
        per = {}
        for r in recons:
            per.setdefault(r.subject_id, []).append(r)
        res = ensemble_attack(per, args.ensemble, target, args.layer, head, gallery, args.far, seed=args.seed)
        extra["ensemble"] = {str(args.ensemble): {"identification": res.identification, "tar": res.tar,
                                                  "subjects": res.subjects}}
    report = EvaluationReport(dssim, [], ident, len(head.classes), {mode: ver}, {}, extra)
    emit_report(report, args.out)
    _print_json({"identification": ident, "tar": ver.tar, "median_dssim": report.median_dssim, **extra})


def cmd_run(args):
    from .pipeline import ExperimentManifest, run_experiment

    manifest = ExperimentManifest.read(args.manifest)
    report, artifacts = run_experiment(manifest)
    _print_json({"manifest_hash": manifest.content_hash, "median_dssim": report.median_dssim,
                 "identification": report.identification_accuracy, "chance": report.chance,
                 "phi_hat": report.extra.get("phi_hat"), "paths": artifacts["paths"]})


def cmd_matrix(args):
    from .pipeline import ExperimentManifest, scenario_matrix

    paths = sorted(Path(args.dir).glob("*.json"))
    rows = scenario_matrix([ExperimentManifest.read(p) for p in paths], args.out)
    _print_json(rows)


def cmd_report(args):
    from .evalkit import EvaluationReport, VerificationResult, emit_report

    src = Path(args.inp)
    d = json.loads((src / "report.json" if src.is_dir() else src).read_text())
    ver = {m: VerificationResult(**v) for m, v in d.get("verification", {}).items()}
    report = EvaluationReport(d["dssim"], d["perceptual"], d["identification_accuracy"], d["identities"],
                              ver, d.get("scenario", {}), d.get("extra", {}))
    paths = emit_report(report, args.out)
    _print_json({"paths": [str(p) for p in paths]})


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invlab", description="Embedding inversion experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="group", required=True)

    def cmd(parent, name, fn, help_=None):
        sp = parent.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    data = sub.add_parser("data", help="dataset ingest, augmentation and synthesis").add_subparsers(
        dest="cmd", required=True)
    c = cmd(data, "ingest", cmd_data_ingest)
    c.add_argument("--manifest", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--size", type=int, default=64)
    c = cmd(data, "augment", cmd_data_augment)
    c.add_argument("--data", required=True, help="dataset manifest.json")
    c.add_argument("--policy")
    c.add_argument("--multiplier", type=int, default=0)
    c.add_argument("--modality", default="fingerprint")
    c.add_argument("--size", type=int, default=64)
    c.add_argument("--out", required=True)
    c = cmd(data, "synth", cmd_data_synth)
    c.add_argument("--out", required=True)
    c.add_argument("--world", type=int, default=0)
    c.add_argument("--subjects", type=int, default=10)
    c.add_argument("--subject-offset", type=int, default=0)
    c.add_argument("--samples", type=int, default=4)
    c.add_argument("--pipeline", choices=["A", "B"], default="A")
    c.add_argument("--size", type=int, default=64)

    zoo = sub.add_parser("zoo", help="extractor training, fine-tuning and extraction").add_subparsers(
        dest="cmd", required=True)
    for name, fn in (("train", cmd_zoo_train), ("finetune", cmd_zoo_finetune), ("extract", cmd_zoo_extract),
                     ("eval", cmd_zoo_eval)):
        c = cmd(zoo, name, fn)
        c.add_argument("--model", required=True)
        c.add_argument("--registry", default="zoo")
        c.add_argument("--data", required=True)
        c.add_argument("--seed", type=int, default=0)
        c.add_argument("--layer", default="emb")
        if name == "train":
            c.add_argument("--spec")
            c.add_argument("--epochs", type=int, default=8)
        if name == "finetune":
            c.add_argument("--ft-level", required=True)
            c.add_argument("--config")
            c.add_argument("--out-id")
        if name == "extract":
            c.add_argument("--store", required=True)
        if name == "eval":
            c.add_argument("--far", type=float, default=0.01)

    infer = sub.add_parser("infer", help="model inference from embeddings").add_subparsers(
        dest="cmd", required=True)
    c = cmd(infer, "train", cmd_infer_train)
    c.add_argument("--pool", required=True, help="embedding store with one shard per pool model")
    c.add_argument("--length", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--epochs", type=int, default=40)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--shuffle", action="store_true", help="shuffled-label control")
    c = cmd(infer, "predict", cmd_infer_predict)
    c.add_argument("--classifier", required=True)
    c.add_argument("--embedding")
    c.add_argument("--store")
    c.add_argument("--model")
    c.add_argument("--layer", default="emb")
    c = cmd(infer, "attributes", cmd_infer_attributes)
    c.add_argument("--schema", required=True)
    c.add_argument("--labels", required=True, help="JSON {model_id: {attribute: value}}")
    c.add_argument("--store", required=True)
    c.add_argument("--layer", default="emb")
    c.add_argument("--epochs", type=int, default=30)
    c.add_argument("--seed", type=int, default=0)

    recon = sub.add_parser("recon", help="reconstructor build/train/run").add_subparsers(
        dest="cmd", required=True)
    for name, fn in (("build", cmd_recon_build), ("search-layers", cmd_recon_search_layers),
                     ("train", cmd_recon_train), ("run", cmd_recon_run)):
        c = cmd(recon, name, fn)
        c.add_argument("--seed", type=int, default=0)
        if name in ("build", "search-layers", "train"):
            c.add_argument("--length", type=int, default=128)
            c.add_argument("--divisor", type=int, default=2)
        if name in ("search-layers", "train"):
            c.add_argument("--phi", required=True)
            c.add_argument("--registry", default="zoo")
            c.add_argument("--data", required=True)
            c.add_argument("--loss")
            c.add_argument("--epochs", type=int, default=20)
            c.add_argument("--batch", type=int, default=16)
            c.add_argument("--layer", default="emb")
        if name == "search-layers":
            c.add_argument("--candidates", required=True, help="JSON list of layer-id lists")
            c.add_argument("--val")
            c.add_argument("--budget", type=float, default=0.1)
        if name == "train":
            c.add_argument("--mode", choices=["attack", "autoencoder"], default="attack")
        if name in ("build", "train", "run"):
            c.add_argument("--out", required=True)
        if name == "run":
            c.add_argument("--model", required=True, help="trained reconstructor directory")
            c.add_argument("--embedding")
            c.add_argument("--store")
            c.add_argument("--source", dest="model_id")
            c.add_argument("--layer", default="emb")
            c.add_argument("--normalize", choices=["stored", "stream"], default="stored")

    lip = sub.add_parser("lipschitz", help="certified Lipschitz bounds").add_subparsers(dest="cmd", required=True)
    for name, fn in (("bound", cmd_lipschitz_bound), ("verify", cmd_lipschitz_verify)):
        c = cmd(lip, name, fn)
        c.add_argument("--model", required=True)
        c.add_argument("--conservative", action="store_true")
        if name == "verify":
            c.add_argument("--probes", type=int, default=1000)
            c.add_argument("--seed", type=int, default=0)

    c = cmd(sub, "eval", cmd_eval, "evaluate reconstructions against a target")
    c.add_argument("--recon", required=True, help="reconstruction dataset manifest")
    c.add_argument("--gallery", required=True, help="real target samples manifest")
    c.add_argument("--target", required=True)
    c.add_argument("--registry", default="zoo")
    c.add_argument("--layer", default="emb")
    c.add_argument("--mode", choices=["same-image", "same-subject"], default="same-subject")
    c.add_argument("--far", type=float, default=0.01)
    c.add_argument("--ensemble", type=int, default=1)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)

    c = cmd(sub, "run", cmd_run, "run one experiment manifest")
    c.add_argument("--manifest", required=True)
    c = cmd(sub, "matrix", cmd_matrix, "run a directory of manifests as a scenario matrix")
    c.add_argument("--dir", required=True)
    c.add_argument("--out", default="matrix")
    c = cmd(sub, "report", cmd_report, "re-emit a run's report files")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (StageError, TrainError, NumericError) as exc:
        print(f"invlab: stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (InvlabError, ValueError, KeyError, OSError) as exc:
        print(f"invlab: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
