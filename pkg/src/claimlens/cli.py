"""Command-line entry point binding every pipeline behind one binary.

Subcommands: train, eval, gen-instruct, retrieve, ablate, gradcheck.  Global
flags --seed/--precision/--config apply to all of them and must precede the
subcommand.  Values resolve flag > config file > built-in default, and every
output artifact is stamped with the merged configuration's digest.

Exit codes: 0 success, 1 runtime failure (single-line "error: <Class>: <msg>"
on stderr), 2 usage errors (argparse).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .ablations import (CORRUPT_PROPORTIONS, DeskRun, ablate_evidence, ablate_joint,
                        ablate_tokens, synth_splits, train_desk_model)
from .config import RunConfig
from .data import (build_desk_vocab, load_dataset, synthesize_alignment,
                   synthesize_conversation, to_example)
from .evaluation import evaluate
from .evidence import CorpusIndex, retrieve_direct, retrieve_inverse
from .instruct import HintPolicy, HttpBackend, StubBackend, run_pipeline
from .model import ClaimVerifier, desk_config
from .training import TrainConfig, load_checkpoint, train_all

PRECISIONS = ("single", "double")


def _resolve(flag_value, rc: RunConfig, section: str, key: str, default, cast):
    """Flag wins when given; otherwise the config file; otherwise the default."""
    if flag_value is not None:
        return flag_value
    raw = rc.get(section, key)
    if raw is not None:
        return cast(raw)
    return default


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _float_list(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _stamp(payload: dict, rc: RunConfig) -> str:
    payload = dict(payload)
    payload["run_digest"] = rc.digest
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args, rc: RunConfig) -> int:
    seed = _resolve(args.seed, rc, "run", "seed", 0, int)
    precision = _resolve(args.precision, rc, "run", "precision", "double", str)
    batch = _resolve(args.batch, rc, "train", "batch_size", 4, int)
    epochs = _resolve(args.epochs, rc, "train", "epochs", [4, 4, 8], _int_list)
    align_n = _resolve(args.align_n, rc, "train", "align_n", 128, int)
    conv_n = _resolve(args.conv_n, rc, "train", "conv_n", 96, int)
    lr = _resolve(args.lr, rc, "train", "lr", 2e-3, float)
    lr_vision = _resolve(args.lr_vision, rc, "train", "lr_vision", 2e-5, float)
    num_tokens = _resolve(args.num_tokens, rc, "train", "num_tokens", 32, int)
    num_layers = _resolve(args.num_layers, rc, "train", "num_layers", 6, int)
    if len(epochs) != 3:
        raise ValueError("--epochs takes exactly three comma-separated counts")

    if args.reasoning:
        records = load_dataset(args.reasoning)
    else:
        run = DeskRun(n_per_kind=args.synthetic, seed=seed)
        records = [r for kind in ("textual", "visual", "cross_modal")
                   for r in synth_splits(run)[kind][0]]
    stage3 = [to_example(r, args.prompt_style, args.response_style) for r in records]

    vocab = build_desk_vocab()
    cfg = desk_config(len(vocab), num_tokens=num_tokens, num_layers=num_layers)
    model = ClaimVerifier(cfg, vocab, seed=seed, precision=precision)
    tc = TrainConfig(batch_size=batch, seed=seed, precision=precision,
                     lr_llm=lr, lr_vision=lr_vision,
                     stage_epochs=(epochs[0], epochs[1], epochs[2]))
    datasets = {"alignment": synthesize_alignment(align_n, seed),
                "conversation": synthesize_conversation(conv_n, seed),
                "reasoning": stage3}
    manifest = train_all(model, datasets, tc, args.out)
    (Path(args.out) / "run_config.json").write_text(
        _stamp({"seed": seed, "precision": precision}, rc), encoding="utf-8")
    print(f"trained 3 stages -> {manifest['final_checkpoint']}")
    print(f"run digest: {rc.digest}")
    return 0


def cmd_eval(args, rc: RunConfig) -> int:
    model = load_checkpoint(args.checkpoint, precision=args.precision)
    records = load_dataset(args.data)
    max_new = _resolve(args.max_new, rc, "eval", "max_new", 4, int)
    style = _resolve(args.prompt_style, rc, "eval", "prompt_style", "compact", str)
    report = evaluate(model, records, prompt_style=style, max_new=max_new)
    payload = json.loads(report.to_json())
    _emit(_stamp(payload, rc), args.out)
    print(f"accuracy {report.metrics.accuracy:.3f}  macro_f1 "
          f"{report.metrics.macro_f1:.3f}  unparseable {report.unparseable}")
    print(f"run digest: {rc.digest}")
    return 0


def cmd_gen_instruct(args, rc: RunConfig) -> int:
    records = load_dataset(args.data)
    rounds = _resolve(args.rounds, rc, "gen_instruct", "rounds", 3, int)
    workers = _resolve(args.workers, rc, "gen_instruct", "workers", 1, int)
    if args.backend == "http":
        if not args.url:
            raise ValueError("--backend http requires --url")
        backend = HttpBackend(args.url, model=args.model)
    else:
        gold = {r.text: "Real" if r.label == "real" else "Fake" for r in records}
        backend = StubBackend(mode=args.mode, gold_by_caption=gold, seed=args.seed or 0)
    report = run_pipeline(records, backend, HintPolicy(max_rounds=rounds),
                          workers=workers, out_path=args.out)
    summary = {"counts": report.counts,
               "accepted": report.total("accepted"),
               "rejected": report.total("rejected"),
               "transport": report.total("transport")}
    _emit(_stamp(summary, rc), args.summary)
    print(f"accepted {summary['accepted']}  rejected {summary['rejected']}  "
          f"transport {summary['transport']} -> {args.out}")
    print(f"run digest: {rc.digest}")
    return 0


def cmd_retrieve(args, rc: RunConfig) -> int:
    index = CorpusIndex.load_jsonl(args.corpus)
    direct = retrieve_direct(args.claim, index, args.m)
    inverse = []
    if args.features:
        feats = np.asarray(json.loads(Path(args.features).read_text(encoding="utf-8")))
        inverse = retrieve_inverse(feats, index, args.n)
    payload = {"direct": [{"id": d.id, "kind": d.kind, "text": d.text} for d in direct],
               "inverse": [{"id": d.id, "kind": d.kind, "text": d.text} for d in inverse]}
    _emit(_stamp(payload, rc), args.out)
    if args.out:
        print(f"retrieved {len(direct)} direct, {len(inverse)} inverse -> {args.out}")
    return 0


def cmd_ablate(args, rc: RunConfig) -> int:
    seed = _resolve(args.seed, rc, "run", "seed", 0, int)
    n_per_kind = _resolve(args.n_per_kind, rc, "ablate", "n_per_kind", 600, int)
    base = DeskRun(n_per_kind=n_per_kind, seed=seed)
    if args.kind == "tokens":
        k_list = _resolve(args.k, rc, "ablate", "k", [4, 8, 16, 32, 64], _int_list)
        report = ablate_tokens(k_list, base)
    elif args.kind == "joint":
        report = ablate_joint(seed, base)
    else:
        proportions = _resolve(args.proportions, rc, "ablate", "proportions",
                               list(CORRUPT_PROPORTIONS), _float_list)
        train, test = synth_splits(base)["textual"]
        if args.checkpoint:
            model = load_checkpoint(args.checkpoint)
        else:
            model = train_desk_model(base, [to_example(r, base.prompt_style,
                                                       base.response_style)
                                            for r in train])
        report = ablate_evidence(model, test, proportions, seed)
    payload = json.loads(report.to_json())
    _emit(_stamp(payload, rc), args.out)
    print(report.to_text())
    print(f"run digest: {rc.digest}")
    return 0


def cmd_gradcheck(args, rc: RunConfig) -> int:
    seeds = _resolve(args.seeds, rc, "gradcheck", "seeds", gc.DEFAULT_SEEDS, int)
    eps = _resolve(args.eps, rc, "gradcheck", "eps", gc.DEFAULT_EPS, float)
    tol = _resolve(args.tol, rc, "gradcheck", "tol", gc.DEFAULT_TOL, float)
    modules = list(gc.MODULES) if args.module == "all" else [args.module]
    suite = gc.run_suite(modules, seeds=seeds, eps=eps, tol=tol)
    print(suite.to_text())
    print(f"run digest: {rc.digest}")
    if not suite.passed:
        print(f"error: GradcheckFailure: max relative error {suite.max_rel_err:.3e} "
              f"exceeds {tol:.1e}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="claimlens",
        description="Desk-scale multimodal claim verification toolkit.")
    parser.add_argument("--seed", type=int, default=None, help="global RNG seed")
    parser.add_argument("--precision", choices=PRECISIONS, default=None)
    parser.add_argument("--config", default=None, help="INI-style config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the three-stage training schedule")
    p.add_argument("--out", required=True, help="checkpoint/manifest directory")
    p.add_argument("--synthetic", type=int, default=60,
                   help="records per distortion kind when no --reasoning file")
    p.add_argument("--reasoning", default=None, help="stage-3 claim JSONL")
    p.add_argument("--prompt-style", choices=("full", "compact"), default="compact")
    p.add_argument("--response-style", choices=("chain", "verdict"), default="verdict")
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--epochs", type=_int_list, default=None, metavar="E1,E2,E3")
    p.add_argument("--align-n", type=int, default=None)
    p.add_argument("--conv-n", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-vision", type=float, default=None)
    p.add_argument("--num-tokens", type=int, default=None)
    p.add_argument("--num-layers", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a claim JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="report JSON path (default stdout)")
    p.add_argument("--prompt-style", choices=("full", "compact"), default=None)
    p.add_argument("--max-new", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-instruct", help="generate verified instruction records")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="accepted-record JSONL path")
    p.add_argument("--summary", default=None, help="summary JSON path (default stdout)")
    p.add_argument("--backend", choices=("stub", "http"), default="stub")
    p.add_argument("--mode", default="agree", help="stub behaviour mode")
    p.add_argument("--url", default=None, help="chat-completion endpoint (http)")
    p.add_argument("--model", default="generator")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_gen_instruct)

    p = sub.add_parser("retrieve", help="query the local evidence corpus")
    p.add_argument("--corpus", required=True, help="corpus JSONL path")
    p.add_argument("--claim", required=True, help="claim text query")
    p.add_argument("--features", default=None,
                   help="JSON array of image features for inverse retrieval")
    p.add_argument("--m", type=int, default=3, help="direct results")
    p.add_argument("--n", type=int, default=3, help="inverse results")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("ablate", help="run one ablation driver")
    p.add_argument("--kind", required=True, choices=("tokens", "joint", "evidence"))
    p.add_argument("--k", type=_int_list, default=None, metavar="K1,K2,...")
    p.add_argument("--proportions", type=_float_list, default=None)
    p.add_argument("--n-per-kind", type=int, default=None)
    p.add_argument("--checkpoint", default=None,
                   help="reuse a trained model for --kind evidence")
    p.add_argument("--out", default=None, help="report JSON path (default stdout)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--module", default="all", choices=("all",) + gc.MODULES)
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.precision is not None:
        overrides["run.precision"] = str(args.precision)
    try:
        rc = RunConfig.load(args.config, overrides)
        return args.func(args, rc)
    except Exception as e:  # noqa: BLE001 - single reporting point by design
        message = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
