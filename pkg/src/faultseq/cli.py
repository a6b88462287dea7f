"""Command-line surface for the whole pipeline.

Subcommands: generate, fit-tokenizer, pretrain, finetune, evaluate,
attn-dump, grad-check. Every command honors --seed, --config, --out,
writes a run manifest with checksums next to its artifacts, and removes
partial outputs on failure. Exit codes: 0 success, 2 validation error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .classifier import (
    FinetuneConfig,
    classify,
    extract_features,
    finetune_head,
    labels_matrix,
)
from .checks import run_grad_check_suite
from .encoder import DTC_TO_ENV, ENV_TO_DTC, EncoderConfig, attn_aggregate
from .events import write_jsonl
from .metrics import evaluate_scores
from .pipeline import (
    TokenizerArtifact,
    TokenizerConfig,
    fit_tokenizer,
    load_rules,
    load_split,
    oracle_scores,
)
from .pretrain import (
    MultimodalPretrainModel,
    PretrainConfig,
    UnimodalPretrainModel,
    pretrain,
)
from .synth import GeneratorConfig, generate
from .tokens import collate

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class NumericalFailure(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunContext:
    """Tracks artifacts for the manifest and cleans them up on failure."""

    def __init__(self, command: str, out_dir: str, seed, config_text: str | None):
        self.command = command
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.config_hash = hashlib.sha256((config_text or "").encode()).hexdigest()
        self.inputs: dict[str, str] = {}
        self.artifacts: list[Path] = []
        self.t0 = time.time()

    def path(self, name: str) -> Path:
        p = self.out / name
        self.artifacts.append(p)
        return p

    def track_tree(self, root: Path) -> None:
        self.artifacts.append(root)

    def add_input(self, name: str, value) -> None:
        self.inputs[name] = str(value)

    def cleanup(self) -> None:
        import shutil

        for p in self.artifacts:
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()

    def write_manifest(self) -> None:
        outputs = {}
        for p in self.artifacts:
            if p.is_dir():
                for f in sorted(p.rglob("*")):
                    if f.is_file():
                        outputs[str(f.relative_to(self.out))] = _sha256(f)
            elif p.exists():
                outputs[str(p.relative_to(self.out))] = _sha256(p)
        manifest = {
            "command": self.command,
            "argv": sys.argv[1:],
            "seed": self.seed,
            "config_hash": self.config_hash,
            "inputs": self.inputs,
            "outputs": outputs,
            "elapsed_seconds": round(time.time() - self.t0, 3),
        }
        (self.out / "run_manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))


def _read_config(path: str | None) -> str | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise ValueError(f"config file not found: {path}")
    return p.read_text()


def _with_seed(cfg, seed):
    return dataclasses.replace(cfg, seed=seed) if seed is not None else cfg


# -- subcommands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    text = _read_config(args.config)
    cfg = GeneratorConfig.from_json(text) if text else GeneratorConfig()
    cfg = _with_seed(cfg, args.seed)
    ctx = RunContext("generate", args.out, cfg.seed, text)
    try:
        bundle = generate(cfg)
        for split, seqs in (("train", bundle.train), ("val", bundle.val), ("test", bundle.test)):
            with open(ctx.path(f"{split}.jsonl"), "w") as fh:
                write_jsonl(seqs, fh)
        ctx.path("rules.json").write_text(json.dumps(bundle.manifest(), sort_keys=True, indent=2))
    except Exception:
        ctx.cleanup()
        raise
    ctx.write_manifest()
    print(f"generated {cfg.n_sequences} sequences ({len(bundle.train)} train) into {ctx.out}")
    return EXIT_OK


def cmd_fit_tokenizer(args) -> int:
    text = _read_config(args.config)
    cfg = TokenizerConfig.from_json(text) if text else TokenizerConfig()
    ctx = RunContext("fit-tokenizer", args.out, args.seed, text)
    ctx.add_input("corpus", args.corpus)
    try:
        train = load_split(args.corpus, "train")
        artifact = fit_tokenizer(train, cfg)
        ctx.path("tokenizer.json").write_text(artifact.to_json())
    except Exception:
        ctx.cleanup()
        raise
    ctx.write_manifest()
    print(
        f"fitted tokenizer: {len(artifact.retained_units)} units, "
        f"{artifact.sizes.value_tokens} value tokens"
    )
    return EXIT_OK


def _load_artifact(path: str) -> TokenizerArtifact:
    p = Path(path)
    if not p.exists():
        raise ValueError(f"tokenizer artifact not found: {path}")
    return TokenizerArtifact.from_json(p.read_text())


def cmd_pretrain(args) -> int:
    text = _read_config(args.config)
    cfg = PretrainConfig.from_json(text) if text else PretrainConfig()
    cfg = _with_seed(cfg, args.seed)
    enc_text = _read_config(args.encoder_config)
    enc_cfg = EncoderConfig(**json.loads(enc_text)) if enc_text else EncoderConfig()
    ctx = RunContext("pretrain", args.out, cfg.seed, (text or "") + (enc_text or ""))
    ctx.add_input("corpus", args.corpus)
    ctx.add_input("tokenizer", args.tokenizer)
    try:
        artifact = _load_artifact(args.tokenizer)
        train = artifact.prepare_all(load_split(args.corpus, "train"))
        if args.unimodal:
            model = UnimodalPretrainModel(artifact.sizes, enc_cfg, seed=cfg.seed)
        else:
            model = MultimodalPretrainModel(
                artifact.sizes, enc_cfg, seed=cfg.seed, env_fusion=args.env_fusion
            )
        result = pretrain(train, model, cfg, progress=args.progress)
        result.write_csv(ctx.path("training_log.csv"))
        ckpt_dir = ctx.out / "checkpoint"
        ctx.track_tree(ckpt_dir)
        ckpt.save_pretrain_model(ckpt_dir, model, {"pretrain_config": json.loads(cfg.to_json())})
        if result.aborted:
            raise NumericalFailure("pretraining diverged; last good checkpoint kept")
    except NumericalFailure:
        ctx.write_manifest()
        raise
    except Exception:
        ctx.cleanup()
        raise
    ctx.write_manifest()
    print(f"pretrained {'unimodal' if args.unimodal else 'multimodal'}: "
          f"final l_dtc {result.final_l_dtc:.4f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    text = _read_config(args.config)
    cfg = FinetuneConfig.from_json(text) if text else FinetuneConfig()
    cfg = _with_seed(cfg, args.seed)
    ctx = RunContext("finetune", args.out, cfg.seed, text)
    ctx.add_input("corpus", args.corpus)
    ctx.add_input("checkpoint", args.checkpoint)
    try:
        artifact = _load_artifact(args.tokenizer)
        _, k_labels = load_rules(args.corpus)
        model = ckpt.load_pretrain_model(args.checkpoint)
        model.encoder.freeze()
        train = artifact.prepare_all(load_split(args.corpus, "train"))
        val = artifact.prepare_all(load_split(args.corpus, "val"))
        x_train = extract_features(model.encoder, train)
        x_val = extract_features(model.encoder, val)
        y_train = labels_matrix(train, k_labels)
        y_val = labels_matrix(val, k_labels)
        head = finetune_head(
            x_train, y_train, x_val, y_val, k_labels, cfg, width=2 * model.encoder.cfg.d
        )
        head_dir = ctx.out / "head"
        ctx.track_tree(head_dir)
        ckpt.save_head(head_dir, head, {"finetune_config": json.loads(cfg.to_json())})
    except Exception:
        ctx.cleanup()
        raise
    ctx.write_manifest()
    print(f"finetuned head over {k_labels} labels")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    text = _read_config(args.config)
    threshold = args.threshold
    if text:
        obj = json.loads(text)
        unknown = set(obj) - {"threshold"}
        if unknown:
            raise ValueError(f"unknown config field(s): {sorted(unknown)}")
        if args.threshold == 0.8:  # flag not overridden, config takes effect
            threshold = obj.get("threshold", threshold)
    ctx = RunContext("evaluate", args.out, args.seed, text)
    ctx.add_input("corpus", args.corpus)
    try:
        seqs = load_split(args.corpus, args.split)
        rules, k_labels = load_rules(args.corpus)
        if args.oracle:
            scores = oracle_scores(seqs, rules, k_labels)
            prepared_labels = [s.labels for s in seqs]
            labels = np.zeros((len(seqs), k_labels))
            for i, ls in enumerate(prepared_labels):
                for label in ls:
                    labels[i, label] = 1.0
        else:
            if not args.checkpoint or not args.head:
                raise ValueError("evaluate needs --checkpoint and --head (or --oracle)")
            ctx.add_input("checkpoint", args.checkpoint)
            ctx.add_input("head", args.head)
            artifact = _load_artifact(args.tokenizer)
            model = ckpt.load_pretrain_model(args.checkpoint)
            model.encoder.freeze()
            head = ckpt.load_head(args.head)
            prepared = artifact.prepare_all(seqs)
            features = extract_features(model.encoder, prepared)
            scores = classify(features, head)
            labels = labels_matrix(prepared, k_labels)
        report = evaluate_scores(scores, labels, threshold)
        ctx.path("metrics.json").write_text(report.to_json())
        if not report.is_complete():
            raise NumericalFailure("a metric is undefined on this split (AUROC needs both classes)")
    except NumericalFailure:
        ctx.write_manifest()
        raise
    except Exception:
        ctx.cleanup()
        raise
    ctx.write_manifest()
    print(report.to_json())
    return EXIT_OK


def cmd_attn_dump(args) -> int:
    ctx = RunContext("attn-dump", args.out, args.seed, None)
    ctx.add_input("corpus", args.corpus)
    ctx.add_input("checkpoint", args.checkpoint)
    try:
        artifact = _load_artifact(args.tokenizer)
        seqs = load_split(args.corpus, args.split)
        if not 0 <= args.index < len(seqs):
            raise ValueError(f"--index {args.index} out of range for {len(seqs)} sequences")
        model = ckpt.load_pretrain_model(args.checkpoint)
        if not isinstance(model, MultimodalPretrainModel):
            raise ValueError("attn-dump needs a multimodal checkpoint")
        model.encoder.freeze()
        pair, prepared = artifact.prepare_pair(seqs[args.index])
        batch = collate([prepared])
        _, _, records = model.encoder.encode_batch(batch, trace=True)
        layer = args.layer if args.layer >= 0 else model.encoder.cfg.layers - 1
        chosen = [
            r
            for r in records
            if r.layer == layer
            and r.direction == args.direction
            and (args.head < 0 or r.head == args.head)
        ]
        if not chosen:
            raise ValueError(
                f"no attention records for layer {layer}, direction {args.direction}"
            )
        with open(ctx.path("scores.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "head", "direction", "query_index", "key_index", "score"])
            for rec in chosen:
                for qi in range(rec.scores.shape[0]):
                    for ki in range(rec.scores.shape[1]):
                        s = rec.scores[qi, ki]
                        if s >= 1e-6:  # omit negligible mass to bound file size
                            writer.writerow([rec.layer, rec.head, rec.direction, qi, ki, repr(s)])
        if args.aggregate:
            key_units = [t.unit for t in pair.env_seq]
            table = attn_aggregate(chosen, key_units, mode=args.aggregate)
            with open(ctx.path("aggregate.csv"), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["layer", "head", "unit", "mass"])
                for (head, key), mass in sorted(table.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
                    writer.writerow([layer, head, key, repr(mass)])
    except Exception:
        ctx.cleanup()
        raise
    ctx.write_manifest()
    print(f"dumped {len(chosen)} attention matrices from layer {layer}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    ctx = RunContext("grad-check", args.out, args.seed, None)
    results = run_grad_check_suite(seed=args.seed if args.seed is not None else 0)
    with open(ctx.path("grad_check.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["check", "max_rel_error", "tolerance", "passed"])
        for r in results:
            writer.writerow([r.name, repr(r.error), repr(r.tolerance), r.passed])
    ctx.write_manifest()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.error:.3e} (tol {r.tolerance:.0e})")
    if not all(r.passed for r in results):
        raise NumericalFailure("gradient check failed")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faultseq",
        description="Multimodal vehicle event-sequence modeling pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate", help="synthesize a labeled corpus")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit-tokenizer", help="fit quantile bins and vocabularies on the train split")
    common(p)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_fit_tokenizer)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--encoder-config", default=None, help="JSON EncoderConfig file")
    p.add_argument("--unimodal", action="store_true", help="train the DTC-only baseline")
    p.add_argument("--env-fusion", choices=["concat", "sum"], default="concat")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the classification head on a frozen backbone")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="multi-label metrics on a split")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--tokenizer", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--head", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--oracle", action="store_true", help="score with the planted-rule oracle")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attn-dump", help="export cross-attention scores as CSV")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--layer", type=int, default=-1, help="-1 means last layer")
    p.add_argument("--head", type=int, default=-1, help="-1 means all heads")
    p.add_argument("--direction", choices=[DTC_TO_ENV, ENV_TO_DTC], default=DTC_TO_ENV)
    p.add_argument("--aggregate", choices=["per_token", "per_unit"], default=None)
    p.set_defaults(func=cmd_attn_dump)

    p = sub.add_parser("grad-check", help="run the finite-difference verification suite")
    common(p)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
