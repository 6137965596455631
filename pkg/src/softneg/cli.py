"""Command-line entry point.

Subcommands: gen-corpus, train, gen-align, eval, ablate, grad-check.
Every run is seeded, writes its artifacts under --out-dir, and records a
manifest with the resolved config, its hash, and library versions.  Exit
codes: 0 success, 2 bad flags, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .benchmark import (
    OracleModel,
    RandomEmbeddingModel,
    TrainedModel,
    build_align_set,
    corpus_entity_weights,
    eval_adversarial,
    eval_align,
    eval_normal_detection,
    eval_retrieval,
    eval_zeroshot,
    load_triplets_jsonl,
    random_model,
    save_triplets_jsonl,
    write_adversarial_csv,
    write_align_csv,
    write_normal_csv,
    write_retrieval_csv,
    write_zeroshot_csv,
)
from .clinical import label_vector
from .encoders import load_checkpoint
from .loss import build_batch, gradient_check
from .reports import (
    NO_FINDINGS,
    TEMPLATED_NORMALS,
    CorpusSpec,
    entity_index,
    generate_corpus,
    load_corpus_jsonl,
    save_corpus_jsonl,
)
from .trainer import (
    STANDARD_ABLATION,
    TrainConfig,
    ablation_matrix,
    standard_ablation,
    train,
    write_ablation_csv,
)

logger = logging.getLogger(__name__)

GRAD_CHECK_LIMIT = 1e-4

_PRESETS = ("desk", "paper")


def _setup_logging() -> None:
    level = os.environ.get("SOFTNEG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _preset_dict(name: str) -> dict:
    ref = resources.files("softneg").joinpath("presets", f"{name}.json")
    return json.loads(ref.read_text(encoding="utf-8"))


def _config_dict(args: argparse.Namespace) -> dict:
    """Resolve configuration with precedence flag > file > preset > default."""
    base: dict = {}
    if getattr(args, "preset", None):
        base.update(_preset_dict(args.preset))
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            base.update(json.load(fh))
    return base


def _apply_flag_overrides(base: dict, args: argparse.Namespace, fields: dict[str, str]) -> dict:
    for flag, key in fields.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    return base


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config: dict, artifacts: list[str]) -> None:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "backend": kernels.backend_name(),
        "versions": {
            "softneg": __version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
            "numpy": np.__version__,
        },
        "artifacts": sorted(artifacts),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- subcommands ------------------------------------------------------------

def _cmd_gen_corpus(args: argparse.Namespace) -> int:
    cfg = _config_dict(args)
    cfg = _apply_flag_overrides(cfg, args, {
        "n": "n_reports",
        "seed": "seed",
        "normal_fraction": "normal_fraction",
        "duplicate_mass": "duplicate_mass",
        "noise_sigma": "noise_sigma",
        "image_dim": "image_dim",
    })
    cfg.setdefault("seed", 0)
    known = {f for f in CorpusSpec.__dataclass_fields__}
    unknown = set(cfg) - known
    if unknown:
        raise ValueError(f"unknown corpus config keys: {sorted(unknown)}")
    spec = CorpusSpec(**cfg)
    pairs = generate_corpus(spec)
    out = _out_dir(args)
    save_corpus_jsonl(pairs, out / "corpus.jsonl")
    recorded = dict(cfg)
    if "entity_frequency" in recorded and recorded["entity_frequency"] is not None:
        recorded["entity_frequency"] = [float(v) for v in recorded["entity_frequency"]]
    _write_manifest(out, "gen-corpus", recorded, ["corpus.jsonl"])
    print(f"wrote {len(pairs)} pairs to {out / 'corpus.jsonl'}")
    return 0


_TRAIN_FLAGS = {
    "seed": "seed",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "lr",
    "optimizer": "optimizer",
    "hardneg_rate": "hardneg_rate",
    "dump_targets": "dump_targets",
}


def _resolved_train_config(args: argparse.Namespace) -> TrainConfig:
    cfg = _apply_flag_overrides(_config_dict(args), args, _TRAIN_FLAGS)
    return TrainConfig.from_dict(cfg)


def _cmd_train(args: argparse.Namespace) -> int:
    config = _resolved_train_config(args)
    corpus = load_corpus_jsonl(args.corpus)
    out = _out_dir(args)
    result = train(config, corpus, out_dir=out)
    artifacts = ["checkpoint.json", "metrics.csv", "timing.csv"]
    if config.dump_targets:
        artifacts.append("targets.csv")
    _write_manifest(out, "train", config.to_dict(), artifacts)
    final = result.metrics[-1]["loss"] if result.metrics else float("nan")
    print(f"trained {config.epochs} epochs, final loss {final:.6f}, "
          f"checkpoint {result.checkpoint_path}")
    return 0


def _cmd_gen_align(args: argparse.Namespace) -> int:
    pairs = load_corpus_jsonl(args.corpus)
    triplets = build_align_set(
        pairs,
        _seed(args),
        entity_weights=corpus_entity_weights(pairs),
        priority_multiplier=args.priority_multiplier,
        n_triplets=args.n_triplets,
    )
    out = _out_dir(args)
    save_triplets_jsonl(triplets, out / "triplets.jsonl")
    config = {
        "seed": _seed(args),
        "corpus": str(args.corpus),
        "priority_multiplier": args.priority_multiplier,
        "n_triplets": args.n_triplets,
    }
    _write_manifest(out, "gen-align", config, ["triplets.jsonl"])
    print(f"wrote {len(triplets)} triplets to {out / 'triplets.jsonl'}")
    return 0


def _load_model(args: argparse.Namespace):
    if args.model == "checkpoint":
        if not args.checkpoint:
            raise ValueError("--checkpoint is required with --model checkpoint")
        return TrainedModel(load_checkpoint(args.checkpoint))
    if args.model == "random":
        return random_model(seed=_seed(args))
    if args.model == "null":
        return RandomEmbeddingModel(seed=_seed(args))
    return OracleModel()


def _cmd_eval(args: argparse.Namespace) -> int:
    model = _load_model(args)
    protocols = [args.protocol] if args.protocol != "all" else [
        "align", "zeroshot", "retrieval", "normal", "adversarial"]
    out = _out_dir(args)
    pairs = load_corpus_jsonl(args.corpus) if args.corpus else None
    artifacts = []
    summary = {}
    for protocol in protocols:
        if protocol == "align":
            if not args.triplets:
                raise ValueError("align protocol needs --triplets")
            triplets = load_triplets_jsonl(args.triplets)
            res = eval_align(model, triplets, threads=args.threads)
            write_align_csv(res, out / "align.csv")
            artifacts.append("align.csv")
            summary["align_accuracy"] = res.accuracy
        elif protocol == "zeroshot":
            if pairs is None:
                raise ValueError("zeroshot protocol needs --corpus")
            res = eval_zeroshot(model, pairs, threads=args.threads)
            write_zeroshot_csv(res, out / "zeroshot.csv")
            artifacts.append("zeroshot.csv")
            summary["zeroshot_macro_accuracy"] = res.macro_accuracy()
        elif protocol == "retrieval":
            if pairs is None:
                raise ValueError("retrieval protocol needs --corpus")
            res = eval_retrieval(model, pairs, [p.report for p in pairs],
                                 threads=args.threads)
            write_retrieval_csv(res, out / "retrieval.csv")
            artifacts.append("retrieval.csv")
            summary["retrieval_macro_f1"] = res.macro_f1
        elif protocol == "normal":
            if pairs is None:
                raise ValueError("normal protocol needs --corpus")
            normal_images = [p.image for p in pairs
                             if label_vector(p.report)[NO_FINDINGS] == 1]
            abnormal = [p.report for p in pairs
                        if label_vector(p.report)[NO_FINDINGS] == 0]
            if not normal_images or not abnormal:
                raise ValueError("normal protocol needs both normal images and "
                                 "abnormal reports in --corpus")
            res = eval_normal_detection(model, TEMPLATED_NORMALS[0], abnormal,
                                        np.stack(normal_images), threads=args.threads)
            write_normal_csv(res, out / "normal.csv")
            artifacts.append("normal.csv")
            summary["normal_median_rank"] = res.median_rank
        else:
            if pairs is None:
                raise ValueError("adversarial protocol needs --corpus")
            a, b = (entity_index(e.strip()) for e in args.entities.split(","))
            res = eval_adversarial(model, pairs, a, b, threads=args.threads)
            write_adversarial_csv(res, out / "adversarial.csv")
            artifacts.append("adversarial.csv")
            summary["adversarial_n"] = res.n
    config = {
        "model": args.model,
        "checkpoint": str(args.checkpoint) if args.checkpoint else None,
        "protocol": args.protocol,
        "corpus": str(args.corpus) if args.corpus else None,
        "triplets": str(args.triplets) if args.triplets else None,
        "entities": args.entities,
        "seed": _seed(args),
    }
    _write_manifest(out, "eval", config, artifacts)
    for key, value in summary.items():
        print(f"{key} {value:.4f}" if isinstance(value, float) else f"{key} {value}")
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    if not 1 <= args.configs <= len(STANDARD_ABLATION):
        raise ValueError(f"--configs must lie in [1, {len(STANDARD_ABLATION)}]")
    base = _resolved_train_config(args)
    configs = standard_ablation(base)[: args.configs]
    corpus = load_corpus_jsonl(args.corpus)
    eval_pairs = load_corpus_jsonl(args.eval_corpus) if args.eval_corpus else corpus
    rows = ablation_matrix(configs, corpus, eval_pairs,
                           triplet_seed=args.triplet_seed)
    out = _out_dir(args)
    write_ablation_csv(rows, out / "ablation.csv")
    config = base.to_dict()
    config.update({"configs": args.configs, "triplet_seed": args.triplet_seed,
                   "corpus": str(args.corpus),
                   "eval_corpus": str(args.eval_corpus) if args.eval_corpus else None})
    _write_manifest(out, "ablate", config, ["ablation.csv"])
    for row in rows:
        print(f"{row['config']} final_loss {row['final_loss']:.4f} "
              f"align {row['align_accuracy']:.4f}")
    return 0


def _cmd_grad_check(args: argparse.Namespace) -> int:
    from .encoders import init_model

    pairs = generate_corpus(CorpusSpec(n_reports=args.batch_size, seed=_seed(args)))
    params = init_model(_seed(args))
    batch = build_batch(pairs, params, hardneg_rate=0.5, seed=_seed(args))
    err = gradient_check(params, batch, epsilon=args.epsilon,
                         max_coords=args.max_coords, coord_seed=_seed(args))
    print(f"max relative error {err:.3e} (limit {GRAD_CHECK_LIMIT:.0e})")
    return 0 if err < GRAD_CHECK_LIMIT else 1


# --- parser -----------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser, *, out_dir: bool = True) -> None:
    # None marks "not set on the command line" so file/preset values survive.
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=1)
    if out_dir:
        parser.add_argument("--out-dir", default=".", help="artifact directory")


def _seed(args: argparse.Namespace, fallback: int = 0) -> int:
    return args.seed if args.seed is not None else fallback


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--config", help="JSON config file")
    group.add_argument("--preset", choices=_PRESETS, help="shipped named config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softneg",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic paired corpus")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--n", type=int, default=None, help="number of report/image pairs")
    p.add_argument("--normal-fraction", type=float, default=None)
    p.add_argument("--duplicate-mass", type=float, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--image-dim", type=int, default=None)
    p.set_defaults(func=_cmd_gen_corpus)

    p = sub.add_parser("train", help="train towers on a corpus")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--optimizer", choices=("sgd", "adamw"), default=None)
    p.add_argument("--hardneg-rate", type=float, default=None)
    p.add_argument("--dump-targets", action="store_const", const=True, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("gen-align", help="build negation benchmark triplets")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--n-triplets", type=int, default=None)
    p.add_argument("--priority-multiplier", type=float, default=2.0)
    p.set_defaults(func=_cmd_gen_align)

    p = sub.add_parser("eval", help="run evaluation protocols")
    _add_common(p)
    p.add_argument("--model", choices=("checkpoint", "random", "oracle", "null"),
                   default="checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--protocol", default="all",
                   choices=("align", "zeroshot", "retrieval", "normal",
                            "adversarial", "all"))
    p.add_argument("--corpus")
    p.add_argument("--triplets")
    p.add_argument("--entities", default="Pleural Effusion,Pneumothorax",
                   help="comma-separated entity pair for the adversarial protocol")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run the standard ablation matrix")
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--eval-corpus", help="held-out pairs for triplets; "
                                         "defaults to the training corpus")
    p.add_argument("--configs", type=int, default=len(STANDARD_ABLATION))
    p.add_argument("--triplet-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--optimizer", choices=("sgd", "adamw"), default=None)
    p.add_argument("--hardneg-rate", type=float, default=None)
    p.set_defaults(func=_cmd_ablate, dump_targets=None)

    p = sub.add_parser("grad-check", help="verify analytic gradients")
    _add_common(p, out_dir=False)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--max-coords", type=int, default=400)
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=_cmd_grad_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a diagnostic, not a traceback
        logger.debug("failure detail", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
