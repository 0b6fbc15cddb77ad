"""Command-line entry point.

Subcommands: make-data, train, generate, eval, gradcheck, bench, inspect-attn.
Machine-readable results go to stdout (JSON or CSV); diagnostics go to stderr.
Exit codes: 0 success, 1 runtime error, 2 usage/config error. All randomness
flows from --seed / the config seed; MUDAIF_THREADS caps eval workers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, core, data, model, plots, training
from .config import SchemaError, load_run_config
from .data import EOS_ID, Vocabulary, load_image, load_manifest, record_image_path
from .model import DecodeRule, init_params


class UsageError(Exception):
    """Bad arguments or configuration; exits with code 2."""


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MUDAIF_THREADS", "1")))
    except ValueError:
        return 1


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ------------------------------------------------------------------ make-data

def cmd_make_data(args) -> int:
    spec = data.SceneSpec()
    if args.spec:
        try:
            spec = data.SceneSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except (ValueError, TypeError) as exc:
            raise UsageError(f"scene spec {args.spec}: {exc}") from exc
    manifest = data.generate_dataset(spec, args.n, args.seed, args.out)
    _emit({"manifest": str(manifest), "records": args.n})
    return 0


# ------------------------------------------------------------------ train

def _phase_samples(phase: training.TrainingPhase, vocab: Vocabulary) -> list:
    records = load_manifest(phase.manifest, split=phase.split)
    if phase.tag == "pretrain":
        records = [r for r in records if r.prompt is None]
    elif phase.tag == "finetune":
        records = [r for r in records if r.prompt is not None]
    samples = []
    for record in records:
        image = load_image(record_image_path(phase.manifest, record))
        target = vocab.encode(record.caption) + [EOS_ID]
        if phase.tag == "pretrain":
            samples.append((record.image, image, target))
        elif phase.tag == "finetune":
            samples.append((record.image, image, vocab.encode(record.prompt), target))
        else:
            prompt = vocab.encode(record.prompt) if record.prompt else None
            samples.append((record.image, image, prompt, target))
    return samples


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    texts: list[str] = []
    for phase in run.phases:
        for record in load_manifest(phase.manifest):
            texts.append(record.caption)
            if record.prompt:
                texts.append(record.prompt)
    if not texts:
        raise UsageError("no records found in the configured manifests")
    vocab = Vocabulary.from_texts(texts)
    cfg = run.model_config(vocab_size=len(vocab))
    params = init_params(cfg, seed=run.seed)

    cache: dict[int, list] = {}

    def batches_for(phase):
        key = id(phase)
        if key not in cache:
            cache[key] = _phase_samples(phase, vocab)
        return cache[key]

    report = training.train(cfg, params, run.phases, batches_for,
                            weights=run.loss_weights, seed=run.seed,
                            grad_clip=run.grad_clip)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.bin"
    checkpoint.save_model(ckpt, cfg, params, vocab.tokens)
    report.checkpoint_path = ckpt.name  # relative: the summary is the determinism surface

    rows = [s.report_row() for s in report.steps]
    with (out / "report.jsonl").open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    summary = report.summary()
    summary["config_sha256"] = checkpoint.config_hash(
        {"model": cfg.to_dict(), "vocab": vocab.tokens})
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    (out / "timing.json").write_text(json.dumps(
        {"wall_s_per_step": [s.wall_s for s in report.steps],
         "total_wall_s": sum(s.wall_s for s in report.steps)}, indent=2) + "\n")
    plots.loss_curve(rows, out / "loss_curve.png")
    _emit(summary)
    return 0


# ------------------------------------------------------------------ generate

def _decode_rule(args) -> DecodeRule:
    rule = DecodeRule(kind=args.decode.replace("-", "_"),
                      temperature=args.temperature, top_k=args.top_k)
    try:
        rule.validate(vocab_size=1 << 30)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return rule


def cmd_generate(args) -> int:
    cfg, params, tokens, _ = checkpoint.load_model(args.checkpoint)
    vocab = Vocabulary(tokens)
    image = load_image(args.image)
    prompt_ids = vocab.encode(args.prompt) if args.prompt else []
    ids = model.generate(image, prompt_ids, params, cfg, _decode_rule(args),
                         max_new=args.max_new, seed=args.seed)
    print(vocab.decode(ids))
    return 0


# ------------------------------------------------------------------ eval

def cmd_eval(args) -> int:
    cfg, params, tokens, _ = checkpoint.load_model(args.checkpoint)
    vocab = Vocabulary(tokens)
    records = load_manifest(args.manifest, split=args.split)
    if not records:
        raise UsageError(f"no records in split {args.split!r} of {args.manifest}")

    def score(record):
        image = load_image(record_image_path(args.manifest, record))
        target = vocab.encode(record.caption) + [EOS_ID]
        prompt_ids = vocab.encode(record.prompt) if record.prompt else []
        logits = model.forward(image, target, prompt_ids or None, params, cfg)
        nll = core.cross_entropy_next_token(logits, target).item() * len(target)
        generated = vocab.decode(model.generate(image, prompt_ids, params, cfg,
                                                DecodeRule("greedy"), max_new=cfg.max_seq_len,
                                                seed=args.seed))
        return nll, len(target), generated == record.caption, record.prompt is not None

    with core.no_grad():
        workers = worker_count()
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                scored = list(pool.map(score, records))
        else:
            scored = [score(r) for r in records]

    total_nll = sum(s[0] for s in scored)
    total_tokens = sum(s[1] for s in scored)
    caption_hits = [s[2] for s in scored if not s[3]]
    answer_hits = [s[2] for s in scored if s[3]]
    gold_answers = [r.caption for r in records if r.prompt is not None]
    majority = max(gold_answers.count(a) for a in set(gold_answers)) / len(gold_answers) \
        if gold_answers else None
    _emit({
        "split": args.split,
        "records": len(records),
        "perplexity": float(np.exp(total_nll / total_tokens)),
        "caption_records": len(caption_hits),
        "caption_exact_match": (sum(caption_hits) / len(caption_hits)) if caption_hits else None,
        "qa_records": len(answer_hits),
        "answer_exact_match": (sum(answer_hits) / len(answer_hits)) if answer_hits else None,
        "majority_baseline": majority,
    })
    return 0


# ------------------------------------------------------------------ gradcheck

def cmd_gradcheck(args) -> int:
    run = load_run_config(args.config)
    cfg = run.model_config()
    params = init_params(cfg, seed=run.seed)
    if params.count() > 6000:
        raise UsageError(
            f"model has {params.count()} parameters; finite differences are capped "
            "near 5k — shrink the config")
    training.randomize_for_grad_check(params, seed=run.seed)
    rng = np.random.default_rng(np.random.SeedSequence([run.seed, 2]))
    size = max(2, cfg.patch_size)

    def sample(with_prompt):
        image = core.Tensor(rng.random((size + 1, size, 3)))
        text = list(rng.integers(3, cfg.vocab_size, size=3))
        return (image, [4 % cfg.vocab_size], text) if with_prompt else (image, text)

    cap_batch = [sample(False) for _ in range(2)]
    qa_batch = [sample(True) for _ in range(2)]

    def loss():
        return training.combined_loss(
            training.pretrain_loss(cap_batch, params, cfg),
            training.task_loss(qa_batch, params, cfg),
            run.loss_weights)

    t0 = time.perf_counter()
    err, name = training.grad_check(params, loss, step=args.step)
    result = {"max_relative_error": err, "parameter": name, "threshold": 1e-4,
              "parameters_checked": params.count(),
              "wall_s": round(time.perf_counter() - t0, 3), "pass": bool(err < 1e-4)}
    _emit(result)
    return 0 if result["pass"] else 1


# ------------------------------------------------------------------ bench

def _parse_sizes(text: str) -> list[tuple[int, int]]:
    sizes = []
    for item in text.split(","):
        try:
            h, w = item.lower().split("x")
            sizes.append((int(h), int(w)))
        except ValueError:
            raise UsageError(f"bad image size {item!r}; expected HxW like 32x32") from None
    return sizes


def cmd_bench(args) -> int:
    run = load_run_config(args.config)
    cfg = run.model_config()
    params = init_params(cfg, seed=run.seed)
    rng = np.random.default_rng(run.seed)
    text = list(rng.integers(3, cfg.vocab_size, size=args.text_len))
    rows = []
    for h, w in _parse_sizes(args.image_sizes):
        counted = analysis.count_params_flops(cfg, (h, w), text_len=len(text))
        image = core.Tensor(rng.random((h, w, 3)))
        timings = []
        with core.no_grad():
            for _ in range(3):
                t0 = time.perf_counter()
                model.forward(image, text, None, params, cfg)
                timings.append(time.perf_counter() - t0)
        rows.append({
            "height": h, "width": w, "tokens": counted["tokens"],
            "params_encoder_free": counted["encoder_free"]["params"],
            "params_encoder_based": counted["encoder_based"]["params"],
            "flops_encoder_free": counted["encoder_free"]["flops"],
            "flops_encoder_based": counted["encoder_based"]["flops"],
            "forward_ms": round(sorted(timings)[1] * 1000, 3),
        })
    header = list(rows[0])
    lines = [",".join(header)] + [",".join(str(r[k]) for k in header) for r in rows]
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text("\n".join(lines) + "\n")
        plots.bench_curves(rows, out / "bench.png")
    return 0


# ------------------------------------------------------------------ inspect-attn

def cmd_inspect_attn(args) -> int:
    cfg, params, tokens, _ = checkpoint.load_model(args.checkpoint)
    vocab = Vocabulary(tokens)
    image = load_image(args.image)
    text_ids = vocab.encode(args.text)
    prompt_ids = vocab.encode(args.prompt) if args.prompt else None
    sink: list = []
    with core.no_grad():
        model.forward(image, text_ids, prompt_ids, params, cfg, attn_sink=sink)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, matrix in sink:
        base = name.replace(".", "_")
        csv_path = out / f"attn_{base}.csv"
        np.savetxt(csv_path, matrix, delimiter=",", fmt="%.17g")
        plots.attention_heatmap(matrix, out / f"attn_{base}.png", title=name)
        files.append(str(csv_path))
    _emit({"files": sorted(files), "matrices": len(sink)})
    return 0


# ------------------------------------------------------------------ wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mudaif",
                                     description="encoder-free vision-language model")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="render a synthetic image-caption dataset")
    p.add_argument("--spec", help="scene spec JSON file (defaults built in)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="run the configured training phases")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="caption an image / answer a prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", default=None)
    p.add_argument("--decode", choices=["greedy", "temperature", "top-k"], default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=1, dest="top_k")
    p.add_argument("--max-new", type=int, default=32, dest="max_new")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="perplexity and exact-match over a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--step", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="analytic params/FLOPs plus measured forward times")
    p.add_argument("--config", required=True)
    p.add_argument("--image-sizes", default="16x16,32x32,64x64", dest="image_sizes")
    p.add_argument("--text-len", type=int, default=8, dest="text_len")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect-attn", help="dump co-attention and decoder attention maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--prompt", default=None)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_inspect_attn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, SchemaError, model.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
