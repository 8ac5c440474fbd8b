"""Command-line entry point: ``xaln <command> ...``.

Errors are reported on stderr as one JSON line ``{"error": kind, "message": ...}``
with exit status 2; ``gradcheck`` exits with 1 when the check fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, audio, downstream as D, pipeline as P, synthetic, tags as T, tensorfile
from .gradcheck_suite import run_suite
from .model import variant_config
from .tensor import NonFiniteError
from .trainer import CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint, train

log = logging.getLogger("xaln")

GRADCHECK_TOLERANCE = 1e-3


class UsageError(ValueError):
    pass


def _seed(default: int) -> int:
    env = os.environ.get("XALN_SEED")
    if env is None:
        return default
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"XALN_SEED must be an integer, got {env!r}") from None


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(d, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return d


def _train_config(path: str | None) -> TrainConfig:
    d = _read_json(path)
    d["seed"] = _seed(d.get("seed", 0))
    return TrainConfig.from_dict(d)


def _write_json(path: Path, obj) -> None:
    tensorfile.atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- commands --------------------------------------------------------------------

def cmd_synth(a) -> None:
    clips = synthetic.generate(a.n, seed=_seed(a.seed), seconds=a.seconds, prefix=a.prefix)
    manifest = synthetic.write_corpus(clips, a.out, test_fraction=a.test_fraction, seed=_seed(a.seed))
    print(f"manifest\t{manifest}\t{len(clips)}")


def cmd_prepare_data(a) -> None:
    stats = P.prepare(a.manifest, a.out)
    n = sum(1 for _ in (Path(a.out) / "patches").iterdir())
    print(f"prepared\t{n}\tmin={stats['min']:.6g}\tmax={stats['max']:.6g}")


def cmd_train_w2v(a) -> None:
    records = P.read_manifest(a.manifest)
    wv = P.build_word_vectors([r.tags for r in records], a.dim, seed=_seed(a.seed), epochs=a.epochs,
                              size=a.vocab_size)
    P.save_word_vectors(wv, a.out)
    print(f"w2v\t{len(wv.vocab)}x{wv.dim}\tfinal_loss={wv.config['loss_history'][-1]:.6g}")


def cmd_train(a) -> None:
    cfg = _train_config(a.config)
    wv = P.load_word_vectors(a.w2v)
    if wv.dim != cfg.model_config.tags.word_dim:
        raise CheckpointError(f"variant {cfg.variant} needs {cfg.model_config.tags.word_dim}-dim word vectors; "
                              f"{a.w2v} holds {wv.dim}-dim vectors")
    prep = P.load_prepared(a.data)
    data = P.paired_dataset(prep, wv)
    extra = {"scaling": prep.stats.to_dict(), "table_digest": tensorfile.array_digest(wv.table)}
    state = None
    if a.resume:
        state = load_checkpoint(a.resume, expect=cfg.model_config)
        if state.config != cfg:
            raise CheckpointError("resume checkpoint was trained with a different config")
        if state.extra.get("table_digest") != extra["table_digest"]:
            raise CheckpointError("resume checkpoint was trained with different word vectors")
    state = train(data, wv.table, cfg, a.out, state=state, stop_after_epoch=a.stop_after_epoch, extra=extra)
    last = [r for r in state.history if r["epoch"] == state.epoch]
    for r in last:
        print(f"epoch\t{r['epoch']}\t{r['split']}\t{r['loss_total']:.6g}\t{r['loss_gkl']:.6g}\t{r['loss_ntxent']:.6g}")


def cmd_gradcheck(a) -> int:
    d = _read_json(a.config)
    variant = d.get("variant", a.variant)
    report = run_suite(variant_config(variant), seed=_seed(d.get("seed", 0)), n_samples=a.samples)
    for name, err, n in report.entries:
        print(f"check\t{name}\t{err:.3e}\t{n}")
    name, err, _ = report.worst
    ok = err < GRADCHECK_TOLERANCE
    print(f"max_rel_error\t{err:.3e}\tworst={name}\t{'pass' if ok else 'FAIL'}\t{report.seconds:.1f}s")
    return 0 if ok else 1


def _records_features(a):
    records = P.read_manifest(a.task_manifest)
    if any(r.label is None for r in records):
        raise P.ManifestError("every task record needs a label")
    if any(r.split is None for r in records):
        raise P.ManifestError("every task record needs a split (train/test or a fold id)")
    labels = [r.label for r in records]
    splits = [r.split for r in records]
    return records, labels, splits


def _load_audio(records) -> list[np.ndarray]:
    out = []
    for r in records:
        try:
            out.append(audio.load_audio(r.audio_path))
        except (OSError, audio.AudioError) as exc:
            raise P.ManifestError(f"clip {r.id}: {exc}") from None
    return out


def cmd_probe(a) -> None:
    records, labels, splits = _records_features(a)
    pcfg = D.ProbeConfig(**_read_json(a.probe_config))
    task = a.task or Path(a.task_manifest).stem
    if a.mfcc:
        feats = np.stack([audio.mfcc_baseline(s) for s in _load_audio(records)])
        res = D.evaluate_features(feats, labels, splits, pcfg, task, "mfcc", tensorfile.digest({"mfcc": 20}))
    else:
        state = load_checkpoint(a.checkpoint)
        model = state.model.eval()
        digest = tensorfile.digest(model.cfg.to_dict())
        if a.tags:
            if not a.w2v:
                raise UsageError("--tags needs --w2v")
            wv = P.load_word_vectors(a.w2v)
            idx, keep = P.tag_matrix([r.tags for r in records], wv.vocab)
            z, mask = T.lookup(idx, wv.table)
            feats = D.tag_embeddings(model, z, mask)
            labels, splits = [labels[i] for i in keep], [splits[i] for i in keep]
        else:
            stats = audio.ScalingStats.from_dict(state.extra["scaling"])
            feats = D.extract_embeddings(model, [audio.stft_logmel(s) for s in _load_audio(records)], stats)
        res = D.evaluate_features(feats, labels, splits, pcfg, task, state.config.variant, digest)
    out = Path(a.out)
    _write_json(out / f"{task}_{res.variant}.json", res.to_dict())
    print(f"probe\t{task}\t{res.variant}\t{res.protocol}\tmean={res.mean:.4f}\tstd={res.std:.4f}")


def cmd_retrieve(a) -> None:
    state = load_checkpoint(a.checkpoint)
    model = state.model.eval()
    wv = P.load_word_vectors(a.w2v)
    records = P.read_manifest(a.index_manifest)
    if a.query_tags is not None:
        ts = P.query_tagset([t for t in a.query_tags.split(",")], wv.vocab)
        z, mask = T.embed_tags(ts, wv.vocab, wv.table)
        query = D.tag_embeddings(model, z[None], mask[None])[0]
        stats = audio.ScalingStats.from_dict(state.extra["scaling"])
        zs = D.extract_embeddings(model, [audio.stft_logmel(s) for s in _load_audio(records)], stats)
        index, ids = D.project(model, zs), [r.id for r in records]
    else:
        stats = audio.ScalingStats.from_dict(state.extra["scaling"])
        samples = audio.load_audio(a.query_audio)
        query = D.project(model, D.extract_embeddings(model, [audio.stft_logmel(samples)], stats))[0]
        idx, keep = P.tag_matrix([r.tags for r in records], wv.vocab)
        z, mask = T.lookup(idx, wv.table)
        index, ids = D.tag_embeddings(model, z, mask), [records[i].id for i in keep]
    order, scores = D.rank(query, index, a.k)
    for r, (i, s) in enumerate(zip(order, scores), 1):
        print(f"{r}\t{ids[i]}\t{s:.6f}")


def cmd_report(a) -> None:
    from . import report
    written = report.build_report([Path(r) for r in a.runs], [Path(p) for p in a.results], Path(a.out))
    for p in written:
        print(f"wrote\t{p}")


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xaln", description="Audio/tag contrastive alignment toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic four-class corpus")
    s.add_argument("--n", type=int, default=400)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seconds", type=float, default=3.0)
    s.add_argument("--prefix", default="clip")
    s.add_argument("--test-fraction", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare-data", help="compute log-mel patches and scaling stats")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare_data)

    s = sub.add_parser("train-w2v", help="build the tag vocabulary and CBOW table")
    s.add_argument("--manifest", required=True)
    s.add_argument("--dim", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=15)
    s.add_argument("--vocab-size", type=int, default=T.VOCAB_SIZE)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_w2v)

    s = sub.add_parser("train", help="joint alignment training")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--w2v", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.add_argument("--stop-after-epoch", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--config")
    s.add_argument("--variant", default="w2v-128-1h")
    s.add_argument("--samples", type=int, default=200)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("probe", help="downstream MLP probe evaluation")
    s.add_argument("--task-manifest", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--mfcc", action="store_true")
    s.add_argument("--tags", action="store_true", help="probe contextual tag embeddings instead of audio")
    s.add_argument("--w2v")
    s.add_argument("--probe-config")
    s.add_argument("--task")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("retrieve", help="cross-modal nearest-neighbour retrieval")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--w2v", required=True)
    s.add_argument("--index-manifest", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--query-tags", help="comma-separated tags")
    g.add_argument("--query-audio")
    s.add_argument("--k", type=int, default=10)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("report", help="render training curves and probe results")
    s.add_argument("--runs", nargs="*", default=[], help="training output folders")
    s.add_argument("--results", nargs="*", default=[], help="probe results JSON files")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


_ERRORS = (
    (UsageError, "usage"), (P.ManifestError, "manifest"), (tensorfile.TensorFileError, "corrupt-file"),
    (CheckpointError, "config-mismatch"), (T.OutOfVocabularyError, "out-of-vocabulary"),
    (T.EmptyTagSetError, "empty-tagset"), (TrainingDiverged, "diverged"), (NonFiniteError, "non-finite"),
    (audio.AudioError, "audio"), (FileNotFoundError, "not-found"), (ValueError, "invalid"),
)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return int(args.func(args) or 0)
    except Exception as exc:
        for cls, kind in _ERRORS:
            if isinstance(exc, cls):
                msg = str(exc).replace("\n", " ")
                print(json.dumps({"error": kind, "message": msg}), file=sys.stderr)
                return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
