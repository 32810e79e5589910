"""Command-line entry point: ``melgraph <command> [options]``.

Exit codes: 0 success, 1 usage error (bad flags, unknown config keys),
2 data error (missing or unreadable inputs, inconsistent data).
"""

import os

# thread caps have to be in place before numpy loads its BLAS
_threads = os.environ.get("MELGRAPH_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import ast
import csv
import json
import logging
import sys
import time

import numpy as np

log = logging.getLogger("melgraph")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ config

MODEL_PRESETS = {
    "default": dict(dim=96, depth=8, heads=8, head_hidden=512),
    "scaled": dict(dim=32, depth=2, heads=4, head_hidden=128),
}
# left unset, these follow from the preset and dim/depth
_DERIVED = ("dim", "depth", "heads", "head_hidden", "k_schedule", "stem_channels")


def default_run_config():
    from .gtransformer import ModelConfig
    from .training import TrainConfig

    cfg = {f"model.{k}": (None if k in _DERIVED else v) for k, v in ModelConfig().to_dict().items()}
    cfg["model.preset"] = "default"
    cfg.update({f"train.{k}": v for k, v in TrainConfig().to_dict().items()})
    cfg["seed"] = 0
    return cfg


def parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    try:
        value = ast.literal_eval(text)
        return list(value) if isinstance(value, tuple) else value
    except (ValueError, SyntaxError):
        pass
    if "," in text:
        return [parse_value(t) for t in text.split(",")]
    return text


def parse_config_text(text, known):
    """Flat ``key = value`` lines; ``#`` starts a comment; keys must be known."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        out[key] = parse_value(value)
    return out


def format_config(cfg):
    def fmt(v):
        if isinstance(v, (list, tuple)):
            return ",".join(str(x) for x in v)
        return str(v)
    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in sorted(cfg))


def resolve_config(path=None, overrides=None):
    """defaults < config file < flags."""
    cfg = default_run_config()
    if path:
        with open(path, encoding="utf-8") as fh:
            cfg.update(parse_config_text(fh.read(), cfg))
    for k, v in (overrides or {}).items():
        if k not in cfg:
            raise UsageError(f"unknown key {k!r}")
        if v is not None:
            cfg[k] = v
    return cfg


def build_model_config(cfg, n_classes=None):
    """ModelConfig from resolved ``model.*`` keys; unset keys come from the preset."""
    from .gtransformer import ModelConfig

    model = {k[6:]: v for k, v in cfg.items() if k.startswith("model.")}
    preset = model.pop("preset")
    if preset not in MODEL_PRESETS:
        raise UsageError(f"unknown model preset {preset!r}; choose from {sorted(MODEL_PRESETS)}")
    merged = dict(MODEL_PRESETS[preset])
    merged.update({k: v for k, v in model.items() if v is not None})
    if n_classes is not None:
        merged["n_classes"] = n_classes
    if isinstance(merged.get("k_schedule"), int):
        merged["k_schedule"] = [merged["k_schedule"]]
    if merged.get("stem_channels") is None:
        d = merged["dim"]
        merged["stem_channels"] = [max(1, d // 8), max(1, d // 4), max(1, d // 2), d, d]
    return ModelConfig(**merged)


def build_train_config(cfg):
    from .training import TrainConfig
    d = {k[6:]: v for k, v in cfg.items() if k.startswith("train.")}
    return TrainConfig(**d)


def write_resolved(out_dir, cfg):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))


def _sidecar(out_dir, message):
    # timestamps live only here, never in primary outputs
    with open(os.path.join(out_dir, "run.log"), "a", encoding="utf-8") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {message}\n")


def _require(path, what):
    if not path:
        raise UsageError(f"{what} is required")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")


# ------------------------------------------------------------------ commands

def cmd_featurize(args):
    from .audio_io import read_manifest, load_segments, split_by_time
    from .features import FeatureStats, mel_spectrogram, save_feature_cache

    _require(args.manifest, "--manifest")
    if not args.out:
        raise UsageError("--out is required")
    os.makedirs(args.out, exist_ok=True)
    rows = read_manifest(args.manifest)
    entries = []
    plain_segs = []
    for r in rows:
        segs = load_segments(r)
        if r.split:
            entries += [(s, r.split) for s in segs]
        else:
            plain_segs += segs
    if plain_segs:
        lookup = {(s.source_id, s.start_offset): s for s in plain_segs}
        entries += [(lookup[(e.source_id, e.start_offset_s)], e.split)
                    for e in split_by_time(plain_segs).entries]
    index = []
    train_specs = []
    for i, (seg, split) in enumerate(entries):
        spec = mel_spectrogram(seg.samples)
        name = f"seg{i:06d}.melf"
        save_feature_cache(os.path.join(args.out, name), spec)
        if split == "train":
            train_specs.append(spec)
        index.append([name, seg.source_id, repr(float(seg.start_offset)), seg.class_label, split])
    with open(os.path.join(args.out, "features.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cache", "source", "start_offset_s", "label", "split"])
        w.writerows(index)
    if train_specs:
        st = FeatureStats.from_arrays(train_specs)
        with open(os.path.join(args.out, "stats.json"), "w", encoding="utf-8") as fh:
            json.dump({"mean": st.mean, "std": st.std}, fh, indent=2)
    write_resolved(args.out, {"manifest": os.path.abspath(args.manifest)})
    print(f"wrote {len(index)} feature caches to {args.out}")


def cmd_hinich(args):
    from .audio_io import load_wav
    from .hinich import batch_test, write_results_csv

    _require(args.wav, "wav file")
    buf = load_wav(args.wav)
    results = batch_test(buf, window=args.window_s)
    out = args.out or os.path.splitext(args.wav)[0] + "_hinich.csv"
    d = os.path.dirname(os.path.abspath(out))
    os.makedirs(d, exist_ok=True)
    write_results_csv(results, out)
    write_resolved(d, {"wav": os.path.abspath(args.wav), "window_s": args.window_s})
    n_gauss = sum(r.decision == "accept_H0" for r in results)
    print(f"{len(results)} windows, {n_gauss} accept Gaussianity -> {out}")


def cmd_synth(args):
    from .synthgen import PRESETS, gen_dataset

    if not args.out:
        raise UsageError("--out is required")
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    splits = None
    if args.splits:
        try:
            splits = tuple(int(s) for s in args.splits.split(","))
        except ValueError:
            raise UsageError("--splits expects three integers like 50,10,10")
        if len(splits) != 3:
            raise UsageError("--splits expects three integers like 50,10,10")
        n = sum(splits)
    else:
        n = args.n_per_class
    manifest = gen_dataset(PRESETS[args.preset], n, args.seed, args.out, splits=splits)
    write_resolved(args.out, {"preset": args.preset, "n_per_class": n, "seed": args.seed,
                              "splits": list(splits) if splits else None})
    print(manifest)


def cmd_train(args):
    from .gtransformer import GTransformer
    from .training import fit, load_dataset

    _require(args.manifest, "--manifest")
    if not args.out:
        raise UsageError("--out is required")
    overrides = dict(_parse_sets(args.set))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.preset is not None:
        overrides["model.preset"] = args.preset
    cfg = resolve_config(args.config, overrides)
    cfg["train.seed"] = cfg["seed"]
    splits, stats = load_dataset(args.manifest)
    n_classes = int(max(int(s.y.max()) for s in splits.values() if len(s.y)) + 1)
    try:
        mcfg = build_model_config(cfg, n_classes)
        tcfg = build_train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))
    cfg.update({f"model.{k}": v for k, v in mcfg.to_dict().items()})
    write_resolved(args.out, cfg)
    _sidecar(args.out, f"train start manifest={args.manifest}")
    model = GTransformer(mcfg, seed=cfg["seed"])
    log.info("model with %d parameters", model.num_parameters())
    meta = {"stats": {"mean": stats.mean, "std": stats.std}, "seed": cfg["seed"],
            "config_hash": _hash(cfg)}
    result = fit(model, (splits["train"].X, splits["train"].y), (splits["val"].X, splits["val"].y),
                 tcfg, out_dir=args.out, meta=meta)
    _sidecar(args.out, "train done")
    print(f"best epoch {result.best_epoch} val_oa {result.best_val_oa:.4f} -> {result.checkpoint}")


def _hash(cfg):
    from .evaluation import config_hash
    return config_hash(cfg)


def _load_model(path):
    from .features import FeatureStats
    from .gtransformer import load_checkpoint

    _require(path, "--checkpoint")
    model, meta = load_checkpoint(path)
    st = meta.get("stats")
    if not st:
        raise ValueError(f"{path}: checkpoint lacks normalisation statistics")
    return model, meta, FeatureStats(st["mean"], st["std"])


def cmd_eval(args):
    from .evaluation import MetricsReport
    from .training import load_dataset, predict

    model, meta, stats = _load_model(args.checkpoint)
    _require(args.manifest, "--manifest")
    splits, _ = load_dataset(args.manifest, stats=stats)
    data = splits[args.split]
    if not len(data.y):
        raise ValueError(f"split {args.split!r} is empty")
    report = MetricsReport.from_predictions(data.y, predict(model, data.X), model.cfg.n_classes)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), f"metrics_{args.split}.json")
    d = os.path.dirname(os.path.abspath(out))
    os.makedirs(d, exist_ok=True)
    report.write(out, config=model.cfg.to_dict(), seed=meta.get("seed"))
    write_resolved(d, {"checkpoint": os.path.abspath(args.checkpoint),
                       "manifest": os.path.abspath(args.manifest), "split": args.split})
    print(f"oa {report.oa:.4f} aa {report.aa:.4f} kappa {report.kappa:.4f} f1 {report.f1:.4f} -> {out}")


def _segment_specs(wav, stats):
    from .audio_io import load_wav, resample, segment
    from .features import mel_spectrogram, normalize

    buf = resample(load_wav(wav))
    segs = segment(buf)
    if not segs:
        raise ValueError(f"{wav}: shorter than one 5 s segment")
    X = np.stack([normalize(mel_spectrogram(s.samples), stats) for s in segs]).astype(np.float32)
    return segs, X


def cmd_predict(args):
    model, _, stats = _load_model(args.checkpoint)
    _require(args.wav, "wav file")
    segs, X = _segment_specs(args.wav, stats)
    probs = np.concatenate([model.predict_proba(X[i:i + 16]) for i in range(0, len(X), 16)])
    header = ["segment", "start_offset_s", "class"] + [f"p{c}" for c in range(probs.shape[1])]
    rows = [[i, repr(float(s.start_offset)), int(np.argmax(p))] + [f"{v:.9f}" for v in p]
            for i, (s, p) in enumerate(zip(segs, probs))]
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()


GRADCHECK_PRESETS = {
    "scaled": dict(dim=32, depth=2, heads=4),
    "tiny": dict(dim=16, depth=1, heads=2),
}


def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck

    if args.preset not in GRADCHECK_PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(GRADCHECK_PRESETS)}")
    report = run_gradcheck(seed=args.seed, max_coords=args.max_coords, **GRADCHECK_PRESETS[args.preset])
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.json"), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(f"max relative error {report['max_rel_error']:.3e} "
          f"({'PASS' if report['passed'] else 'FAIL'}, tolerance {report['tolerance']:g})")
    return EXIT_OK if report["passed"] else EXIT_DATA


def cmd_export(args):
    from .gtransformer import graph_edges, write_attention_csv, write_graph_csv

    model, _, stats = _load_model(args.checkpoint)
    _require(args.wav, "wav file")
    if args.block is None or not 1 <= args.block <= model.cfg.depth:
        raise UsageError(f"--block must be in 1..{model.cfg.depth}")
    if not args.out:
        raise UsageError("--out is required")
    os.makedirs(args.out, exist_ok=True)
    _, X = _segment_specs(args.wav, stats)
    spec = X[args.segment]
    if args.kind == "attention":
        paths = write_attention_csv(model.attention_maps(spec, args.block), args.out, args.block)
        print(f"wrote {len(paths)} attention matrices to {args.out}")
    else:
        if args.center is not None and not 0 <= args.center < model.cfg.n_nodes:
            raise UsageError(f"--center must be in 0..{model.cfg.n_nodes - 1}")
        edges = graph_edges(model, spec, args.block, args.center)
        path = os.path.join(args.out, f"graph_block{args.block}.csv")
        write_graph_csv(edges, path)
        print(f"wrote {len(edges)} edges to {path}")
    write_resolved(args.out, {"checkpoint": os.path.abspath(args.checkpoint), "wav": os.path.abspath(args.wav),
                              "kind": args.kind, "block": args.block, "segment": args.segment,
                              "center": args.center})


def _parse_sets(items):
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        yield k.strip(), parse_value(v)


# ------------------------------------------------------------------ parser

def build_parser():
    p = _Parser(prog="melgraph", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("featurize", help="log-Mel feature caches for a manifest")
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("hinich", help="windowed Hinich Gaussianity/linearity tests")
    s.add_argument("wav")
    s.add_argument("--window-s", type=float, default=0.5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_hinich)

    s = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    s.add_argument("--preset", default="default")
    s.add_argument("--n-per-class", type=int, default=50)
    s.add_argument("--splits", help="fixed per-class split counts, e.g. 50,10,10")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model on a manifest")
    s.add_argument("--manifest")
    s.add_argument("--config")
    s.add_argument("--preset", help="model preset: default or scaled")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics of a checkpoint on one split")
    s.add_argument("--checkpoint")
    s.add_argument("--manifest")
    s.add_argument("--split", choices=["train", "val", "test"], default="test")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="per-segment class probabilities for a WAV file")
    s.add_argument("wav")
    s.add_argument("--checkpoint")
    s.add_argument("--out")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    s.add_argument("--preset", default="scaled")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-coords", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("export", help="attention matrices or Mel-graph edges as CSV")
    s.add_argument("wav")
    s.add_argument("--checkpoint")
    s.add_argument("--kind", choices=["attention", "graph"], default="attention")
    s.add_argument("--block", type=int)
    s.add_argument("--segment", type=int, default=0)
    s.add_argument("--center", type=int, help="graph export: one centre node instead of all")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        code = args.func(args)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(f"melgraph: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, IndexError) as exc:
        print(f"melgraph: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
