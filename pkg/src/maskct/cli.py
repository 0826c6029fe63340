"""``maskct`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

from maskct.augment import MaskConfig, PhotometricRanges, run_mask1
from maskct.bench import run_bench
from maskct.checkpoint import atomic_write_bytes, config_hash
from maskct.config import ConfigError, home_dir, load_config
from maskct.data import DataError, DatasetManifest, VideoClipSpec, decode_image, extract_frames, prepare_sample, split_dataset
from maskct.labels import LabelVocabulary, pinned
from maskct.metrics import aggregate, binarize, report_emit
from maskct.training import NumericalAbort, Samples, load_checkpoint, predict_probs, train_loop

log = logging.getLogger("maskct")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _dump(obj: Any) -> bytes:
    return (json.dumps(obj, indent=2, allow_nan=False) + "\n").encode()


def _read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    return DatasetManifest.read(path).resolve(path.parent)


def _parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(item, "override must look like section.key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def cmd_train(config: str | Path, overrides: dict[str, Any] | None = None) -> list[dict[str, Any]]:
    cfg = load_config(config, overrides)
    if not cfg.data.vocab:
        raise ConfigError("data.vocab", "a vocabulary file is required")
    for name in ("vocab", "train", "val"):
        p = getattr(cfg.data, name)
        if not p or not Path(p).exists():
            raise DataError(f"data.{name}: file not found: {p}")
    vocab = LabelVocabulary.read(cfg.data.vocab).names
    train_m, val_m = _read_manifest(cfg.data.train), _read_manifest(cfg.data.val)
    for m, p in ((train_m, cfg.data.train), (val_m, cfg.data.val)):
        if m.vocab != vocab:
            raise DataError(f"{p}: manifest vocabulary {m.vocab} differs from {vocab}")
    out = Path(cfg.out_dir)
    if not out.is_absolute():
        out = home_dir() / out
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "config.json", _dump({"config": cfg.to_dict(), "config_hash": config_hash(cfg.to_dict())}))
    _, history = train_loop(Samples.from_manifest(train_m), Samples.from_manifest(val_m), cfg, vocab, out)
    log.info("training finished: %d epochs, artifacts in %s", len(history), out)
    return history


def cmd_eval(checkpoint: str | Path, manifest: str | Path, threshold: float = 0.5, out: str | Path | None = None) -> str:
    model, cfg, vocab, meta = load_checkpoint(checkpoint)
    m = _read_manifest(manifest)
    if m.vocab != vocab:
        raise DataError(f"manifest vocabulary {m.vocab} does not match checkpoint vocabulary {vocab}")
    samples = Samples.from_manifest(m)
    probs = predict_probs(model, samples, cfg.model.image_size, cfg.train.batch_size)
    report = aggregate(samples.truth, binarize(probs, threshold), threshold, vocab, dataset=Path(manifest).name)
    report.config_hash = meta["config_hash"]
    text = report_emit(report)
    if out:
        atomic_write_bytes(Path(out), text.encode())
    return text


def cmd_predict(checkpoint: str | Path, images: Sequence[str], known: dict[str, int] | None = None) -> list[dict[str, Any]]:
    model, cfg, vocab, meta = load_checkpoint(checkpoint)
    evidence = {}
    for name, v in (known or {}).items():
        if name not in vocab:
            raise DataError(f"unknown label {name!r}; vocabulary is {vocab}")
        evidence[vocab.index(name)] = int(v)
    zeros = np.zeros(len(vocab), dtype=np.int64)
    states = np.stack([pinned(zeros, evidence).state for _ in images]) if images else None
    samples = Samples([decode_image(p) for p in images], np.zeros((len(images), len(vocab)), dtype=np.int64))
    probs = predict_probs(model, samples, cfg.model.image_size, cfg.train.batch_size, states)
    return [
        {"image": str(p), "config_hash": meta["config_hash"], "probs": dict(zip(vocab, map(float, row)))}
        for p, row in zip(images, probs)
    ]


def cmd_bench(
    checkpoint: str | Path,
    frames: str | Path,
    mode: str = "model",
    batch_size: int = 32,
    threshold: float = 0.5,
    deterministic: bool = True,
    out: str | Path | None = None,
) -> dict[str, Any]:
    model, cfg, vocab, meta = load_checkpoint(checkpoint)
    m = _read_manifest(frames)
    if m.vocab != vocab:
        raise DataError(f"frame manifest vocabulary {m.vocab} does not match checkpoint vocabulary {vocab}")
    if len(m) == 0:
        raise DataError("empty frame stream")
    subsets = {name or "stream": Samples.from_manifest(sub, preload=(mode == "model")) for name, sub in m.subsets().items()}
    result = run_bench(model, subsets, batch_size, mode, threshold, deterministic, class_names=vocab)
    report = {"config_hash": meta["config_hash"], "threshold": threshold, **result.to_dict()}
    if out:
        atomic_write_bytes(Path(out), _dump(report))
    return report


def cmd_augment_preview(
    image: str | Path,
    out_dir: str | Path,
    seed: int = 0,
    fragments: int = 4,
    box: int = 18,
    fill: float = 0.0,
    size: int | None = None,
) -> dict[str, Any]:
    img = decode_image(image)
    if size:
        img = prepare_sample(img, "eval", size)
    cfg = MaskConfig(box, fill)
    ranges = PhotometricRanges()
    res = run_mask1(img, fragments, cfg, seed, ranges)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (box_i, pre, post) in enumerate(zip(res.batch.boxes, res.adjusted, res.masked)):
        Image.fromarray(pre).save(out / f"fragment_{i:02d}_pre.png")
        Image.fromarray(post).save(out / f"fragment_{i:02d}_post.png")
        p = res.params.get(i)
        entries.append({
            "index": i,
            "crop": {"top": box_i[0], "left": box_i[1], "side": box_i[2]},
            "photometric": None if p is None else {"beta": p.beta, "threshold": p.threshold, "alpha": p.alpha},
            "occluders": [{"top": t, "left": l, "height": cfg.patch, "width": cfg.patch} for t, l in res.occluders[i]],
        })
    params = {"fragments": fragments, "box": box, "stride": cfg.stride, "patch": cfg.patch, "fill": fill,
              "beta_range": list(ranges.beta), "alpha_range": list(ranges.alpha), "size": size}
    sidecar = {
        "image": str(image),
        "seed": seed,
        "params": params,
        "config_hash": config_hash(params),
        "photometric_subset": res.batch.photometric_subset,
        "selected": res.selected,
        "fragments": entries,
    }
    atomic_write_bytes(out / "preview.json", _dump(sidecar))
    return sidecar


def cmd_split(manifest: str | Path, out_dir: str | Path, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> dict[str, int]:
    m = DatasetManifest.read(manifest)
    parts = split_dataset(m, tuple(ratios), seed)
    out = Path(out_dir)
    counts = {}
    for name, part in zip(("train", "val", "test"), parts):
        part.write(out / f"{name}.jsonl")
        counts[name] = len(part)
    return counts


def cmd_ingest_video(clip: str | Path, vocab: str | Path, out: str | Path, frames_dir: str | Path | None = None) -> int:
    spec = VideoClipSpec.read(clip)
    src = Path(spec.source)
    if not src.is_absolute():
        spec.source = str(Path(clip).parent / src)
    names = LabelVocabulary.read(vocab).names
    m = extract_frames(spec, names, frames_dir)
    m.write(out)
    return len(m)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskct", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a TOML run config")
    t.add_argument("config")
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--out-dir")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")

    e = sub.add_parser("eval", help="metrics report for a checkpoint on a manifest")
    e.add_argument("checkpoint")
    e.add_argument("manifest")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--out")

    pr = sub.add_parser("predict", help="label probabilities for images")
    pr.add_argument("checkpoint")
    pr.add_argument("images", nargs="+")
    pr.add_argument("--known", action="append", default=[], metavar="LABEL=0|1",
                    help="pin a label as known evidence")

    b = sub.add_parser("bench", help="frame-stream FPS benchmark")
    b.add_argument("checkpoint")
    b.add_argument("frames", help="frame manifest; the 'source' field names the subset")
    b.add_argument("--mode", choices=("model", "end-to-end"), default="model")
    b.add_argument("--batch-size", type=int, default=32)
    b.add_argument("--threshold", type=float, default=0.5)
    b.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    b.add_argument("--out")

    a = sub.add_parser("augment-preview", help="write MASK-I fragments and a JSON sidecar")
    a.add_argument("image")
    a.add_argument("out_dir")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--fragments", type=int, default=4)
    a.add_argument("--box", type=int, default=18)
    a.add_argument("--fill", type=float, default=0.0)
    a.add_argument("--size", type=int)

    s = sub.add_parser("split", help="70/10/20 train/val/test split of a manifest")
    s.add_argument("manifest")
    s.add_argument("out_dir")
    s.add_argument("--ratios", type=float, nargs=3, default=(0.7, 0.1, 0.2))
    s.add_argument("--seed", type=int, default=0)

    v = sub.add_parser("ingest-video", help="frame manifest from a clip spec")
    v.add_argument("clip", help="JSON clip spec: source, fps, segments")
    v.add_argument("vocab")
    v.add_argument("out")
    v.add_argument("--frames-dir")
    return p


def _run(args: argparse.Namespace) -> None:
    if args.command == "train":
        overrides = dict(_parse_override(s) for s in args.set)
        if args.max_epochs is not None:
            overrides["train.max_epochs"] = args.max_epochs
        if args.out_dir:
            overrides["out_dir"] = args.out_dir
        history = cmd_train(args.config, overrides)
        print(json.dumps({"epochs": len(history), "final": history[-1] if history else None}))
    elif args.command == "eval":
        text = cmd_eval(args.checkpoint, args.manifest, args.threshold, args.out)
        if not args.out:
            sys.stdout.write(text)
    elif args.command == "predict":
        known = {}
        for item in args.known:
            name, _, val = item.partition("=")
            if val not in ("0", "1"):
                raise ConfigError("--known", f"expected LABEL=0 or LABEL=1, got {item!r}")
            known[name] = int(val)
        print(json.dumps(cmd_predict(args.checkpoint, args.images, known), indent=2))
    elif args.command == "bench":
        report = cmd_bench(args.checkpoint, args.frames, args.mode, args.batch_size, args.threshold,
                           args.deterministic, args.out)
        if not args.out:
            print(json.dumps(report, indent=2))
    elif args.command == "augment-preview":
        cmd_augment_preview(args.image, args.out_dir, args.seed, args.fragments, args.box, args.fill, args.size)
    elif args.command == "split":
        print(json.dumps(cmd_split(args.manifest, args.out_dir, args.ratios, args.seed)))
    elif args.command == "ingest-video":
        print(json.dumps({"records": cmd_ingest_video(args.clip, args.vocab, args.out, args.frames_dir)}))


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        _run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
