"""Command-line entry point: ``pick run | train-reward | eval | decompose``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from .backend import MAX_IN_FLIGHT, MAX_RETRIES, TIMEOUT_SECS, Gateway, HttpBackend, MockBackend, load_templates
from .errors import PickError
from .geometry import annotate_focus, decompose, load_detections, load_image
from .harness import (
    EMOTION_CLASSES,
    Pipeline,
    PipelineConfig,
    build_report,
    compute_metrics,
    dump_report,
    load_manifest,
    load_report,
)
from .knowledge import HashedTrigramEmbedder, HttpEmbedder, ingest_kb
from .policy import GROUP_SIZE, LEARNING_RATE, SLOT_BUDGET, FeaturePolicy, FeatureVocabulary
from .reward import BINARY_CLASSES, TextScorer, train_scorer

log = logging.getLogger("pickhtp")

EXIT_OK, EXIT_FATAL, EXIT_CASE_ERRORS = 0, 1, 2


def _data_path(name: str) -> Path:
    return Path(str(resources.files("pickhtp").joinpath("data", name)))


def _class_names(args) -> tuple[str, ...]:
    if getattr(args, "classes", None):
        return tuple(c.strip() for c in args.classes.split(",") if c.strip())
    return EMOTION_CLASSES if getattr(args, "task", "htp") == "emotion" else BINARY_CLASSES


def _embedder(args):
    if getattr(args, "embed_endpoint", None):
        return HttpEmbedder(args.embed_endpoint, timeout=args.timeout_secs, max_retries=args.max_retries)
    return HashedTrigramEmbedder()


def bundled_kb(task: str) -> tuple[Path, Path | None]:
    """Sample KB and lexicon shipped with the package for ``task``."""
    if task == "emotion":
        return _data_path("emotion_kb_sample.jsonl"), None
    return _data_path("htp_kb_sample.jsonl"), _data_path("lexicon.json")


def _load_kb(args, class_names):
    kb_path, lexicon_path = bundled_kb(args.task)
    if args.kb:
        kb_path = args.kb
        lexicon_path = lexicon_path if args.task == "htp" else None
    return ingest_kb(kb_path, args.lexicon or lexicon_path, _embedder(args), class_names)


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def cmd_run(args) -> int:
    try:
        class_names = _class_names(args)
        config = PipelineConfig(
            task=args.task,
            class_names=class_names,
            n_dynamic=args.n_dynamic,
            group_size=args.group_size,
            slot_budget=args.slot_budget,
            seed=args.seed,
            max_concurrent_cases=args.concurrency,
            record_timing=args.record_timing,
        )
        cases = load_manifest(args.manifest)
        kb = _load_kb(args, class_names)
        if args.scorer:
            scorer = TextScorer.load(args.scorer)
        else:
            scorer = train_scorer([(r.head, r.soft_label) for r in kb.records])
        vocab = FeatureVocabulary.load(args.vocab or _data_path("vocabulary.json"))
        policy = FeaturePolicy(vocab, seed=args.seed, learning_rate=args.lr)
        if args.backend == "mock":
            backend = MockBackend(seed=args.seed)
        else:
            if not args.endpoint:
                raise PickError("--endpoint is required with --backend http")
            backend = HttpBackend(args.endpoint, args.model, timeout=args.timeout_secs)
        gateway = Gateway(
            backend,
            class_names,
            max_retries=args.max_retries,
            max_in_flight=args.max_in_flight,
            templates=load_templates(args.templates) if args.templates else None,
        )
        pipeline = Pipeline(gateway, kb, scorer, policy, config, detector_endpoint=args.detector_endpoint)
    except (PickError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    try:
        reports, metrics = pipeline.run(cases)
    except PickError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    _write(args.out, dump_report(build_report(reports, metrics, config)))
    if args.policy_out:
        policy.save(args.policy_out)
    n_err = sum(r.errored for r in reports)
    log.info("%d cases, %d errored", len(reports), n_err)
    return EXIT_CASE_ERRORS if n_err else EXIT_OK


def cmd_train_reward(args) -> int:
    try:
        kb = _load_kb(args, _class_names(args))
        scorer = train_scorer([(r.head, r.soft_label) for r in kb.records], epochs=args.epochs,
                              learning_rate=args.lr)
    except (PickError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    scorer.save(args.out)
    meta = scorer.training_meta
    log.info("trained on %d triplets: loss %.4f -> %.4f", meta["n_examples"], meta["initial_loss"], meta["final_loss"])
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        report = load_report(args.reports)
        class_names = report["class_names"]
        pairs = [(c["gold"], c["label"]) for c in report["cases"] if c.get("error") is None and c.get("gold") is not None]
        metrics = compute_metrics(pairs, class_names)
    except (PickError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    out = {"class_names": class_names, "n_errored": report.get("n_errored", 0), **metrics.to_dict()}
    _write(args.out, json.dumps(out, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_decompose(args) -> int:
    try:
        image_id = args.image_id or Path(args.detections).stem
        result = decompose(load_detections(args.detections), image_id)
        if args.image and args.out_dir:
            out_dir = Path(args.out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            image = load_image(args.image)
            views = [("single", i, v) for i, v in enumerate(result.singles)]
            views += [("multi", i, v) for i, v in enumerate(result.multis)]
            for kind, i, view in views:
                annotate_focus(image, view.focus_box).save(out_dir / f"{image_id}_{kind}{i}.png")
    except (PickError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    _write(args.out, json.dumps(result.to_dict(), sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def _add_kb_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kb", help="triplet JSONL (default: bundled sample for the task)")
    p.add_argument("--lexicon", help="tail -> soft label JSON (default: bundled binary lexicon for htp)")
    p.add_argument("--embed-endpoint", help="HTTP embedding service; default is the hashed trigram embedder")
    p.add_argument("--task", choices=("htp", "emotion"), default="htp")
    p.add_argument("--classes", help="comma-separated class names (overrides the task default)")
    p.add_argument("--max-retries", type=int, default=MAX_RETRIES)
    p.add_argument("--timeout-secs", type=float, default=TIMEOUT_SECS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pick", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="analyse every drawing in a manifest")
    run.add_argument("--manifest", required=True)
    _add_kb_args(run)
    run.add_argument("--backend", choices=("mock", "http"), default="mock")
    run.add_argument("--endpoint")
    run.add_argument("--model", default="default")
    run.add_argument("--max-in-flight", type=int, default=MAX_IN_FLIGHT)
    run.add_argument("--templates", help="prompt template JSON (default: bundled)")
    run.add_argument("--vocab", help="feature vocabulary JSON (default: bundled)")
    run.add_argument("--scorer", help="trained reward scorer JSON; trained from the KB when omitted")
    run.add_argument("--detector-endpoint", help="HTTP detection service for cases without detections")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--n-dynamic", type=int, default=2)
    run.add_argument("--group-size", type=int, default=GROUP_SIZE)
    run.add_argument("--slot-budget", type=int, default=SLOT_BUDGET)
    run.add_argument("--lr", type=float, default=LEARNING_RATE)
    run.add_argument("--concurrency", type=int, default=2)
    run.add_argument("--record-timing", action="store_true", help="include wall-clock timings (breaks byte-stable output)")
    run.add_argument("--policy-out", help="write the adapted policy checkpoint here")
    run.add_argument("--out", help="report JSON path (default: stdout)")
    run.set_defaults(func=cmd_run)

    tr = sub.add_parser("train-reward", help="train the reward scorer on KB soft labels")
    _add_kb_args(tr)
    tr.add_argument("--epochs", type=int, default=200)
    tr.add_argument("--lr", type=float, default=0.1)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train_reward)

    ev = sub.add_parser("eval", help="recompute metrics from a run report")
    ev.add_argument("--reports", required=True)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    dc = sub.add_parser("decompose", help="print the sub-drawing decomposition for one detections file")
    dc.add_argument("--detections", required=True)
    dc.add_argument("--image", help="drawing to annotate")
    dc.add_argument("--image-id")
    dc.add_argument("--out-dir", help="write annotated PNGs here")
    dc.add_argument("--out")
    dc.set_defaults(func=cmd_decompose)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
