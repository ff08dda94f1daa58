"""Command-line interface.

Subcommands: gen-fixtures, train, encode, index, search, eval,
grad-check, gate-trace.  All results go to stdout as line-delimited
text; artifacts (models, indexes, token matrices) go to disk.

Exit codes: 0 success, 1 usage or configuration error, 2 data or
verification error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .config import build_run_config
from .encoder import encode, gate_trace_summary
from .errors import ConfigError, RetfusionError
from .features import read_feature_file
from .fixtures import (FixtureSpec, batch_iterator, gen_fixtures, load_manifest,
                       load_query_stacks, load_training_pairs)
from .index import RetrievalIndex
from .metrics import EvalRecord, pseudo_recall_at_k, recall_at_k
from .model import init_model, load_model, save_model
from .training import grad_check, init_train_state, train_step


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_config_flags(sub):
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config key (repeatable)")


def build_parser() -> _Parser:
    parser = _Parser(prog="retfusion",
                     description="Late-interaction multimodal retrieval toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fixtures", help="generate a planted synthetic corpus")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train-queries", type=int, default=64)
    p.add_argument("--heldout-queries", type=int, default=32)
    p.add_argument("--docs", type=int, default=256)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--image-fraction", type=float, default=0.5)
    p.set_defaults(func=cmd_gen_fixtures)

    p = sub.add_parser("train", help="contrastively train both encoders")
    _add_config_flags(p)
    p.add_argument("--data", help="fixture directory with manifest.json")
    p.add_argument("--out", required=True, help="model output path (.npz)")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode one item into a token matrix")
    p.add_argument("--model", required=True)
    p.add_argument("--text", required=True, help="text feature file")
    p.add_argument("--vis", help="visual feature file")
    p.add_argument("--mask-visual", action="store_true",
                   help="force the masked visual path")
    p.add_argument("--side", choices=("query", "document"), default="query")
    p.add_argument("--out", required=True, help="output .npy path")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("index", help="encode and index a document collection")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="index output path")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="rank indexed documents for one query")
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--vis")
    p.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="recall metrics over a fixture's queries")
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "heldout", "all"), default="all")
    p.add_argument("--k-values", default="1,5,10")
    p.add_argument("--pseudo-k", type=int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="verify autodiff against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--samples-per-group", type=int, default=1)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("gate-trace", help="mean gate activations per recurrent step")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "heldout", "all"), default="all")
    p.add_argument("--limit", type=int, default=100)
    p.set_defaults(func=cmd_gate_trace)

    return parser


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_fixtures(args) -> int:
    cfg = build_run_config(args.config, args.set)
    spec = FixtureSpec(
        n_train_queries=args.train_queries,
        n_heldout_queries=args.heldout_queries,
        n_docs=args.docs,
        n_layers=args.layers,
        text_dim=cfg.text_dim,
        vis_dim=cfg.vis_dim,
        noise_sigma=args.noise,
        doc_image_fraction=args.image_fraction,
        seed=cfg.seed,
    )
    manifest = gen_fixtures(spec, args.out)
    print(f"fixtures {args.out}")
    print(f"queries {len(manifest['queries'])}")
    print(f"documents {len(manifest['documents'])}")
    return 0


def _resolved_encoder_config(cfg, manifest):
    depth = manifest["spec"]["n_layers"]
    for key in ("text_dim", "vis_dim"):
        if manifest["spec"][key] != getattr(cfg, key):
            raise ConfigError(
                f"config {key}={getattr(cfg, key)} but fixture data has {manifest['spec'][key]}"
            )
    return cfg.encoder_config(resolve_depth=(depth, depth))


def cmd_train(args) -> int:
    cfg = build_run_config(args.config, args.set)
    data_dir = args.data or cfg.data_dir
    if not data_dir:
        raise ConfigError("train needs --data (or data_dir in the config)")
    manifest = load_manifest(data_dir)
    ecfg = _resolved_encoder_config(cfg, manifest)

    pairs = load_training_pairs(data_dir, manifest, split="train")
    model = init_model(ecfg, cfg.seed)
    state = init_train_state(model, cfg.learning_rate, cfg.train_steps, cfg.tau)
    batches = batch_iterator(pairs, cfg.batch_size, cfg.seed)

    for step in range(cfg.train_steps):
        loss = train_step(state, next(batches))
        if step % args.log_every == 0 or step == cfg.train_steps - 1:
            from .training import cosine_lr
            lr = cosine_lr(cfg.learning_rate, step, cfg.train_steps)
            print(f"step {step} loss {loss:.6f} lr {lr:.3e}")
    save_model(model, args.out)
    print(f"model {args.out}")
    return 0


def cmd_encode(args) -> int:
    model = load_model(args.model)
    text = read_feature_file(args.text)
    vis = read_feature_file(args.vis) if args.vis else None
    params = model.query_params if args.side == "query" else model.doc_params
    tokens, _ = encode(text, vis, model.cfg, params,
                       mask_visual=args.mask_visual, owner=args.side)
    np.save(args.out, tokens.data)
    print(f"tokens {args.out} shape {tokens.data.shape[0]}x{tokens.data.shape[1]}")
    return 0


def cmd_index(args) -> int:
    model = load_model(args.model)
    manifest = load_manifest(args.data)
    index = RetrievalIndex()
    for doc in manifest["documents"]:
        text, vis = load_query_stacks(args.data, doc)
        tokens, _ = encode(text, vis, model.cfg, model.doc_params,
                           owner="document", item_id=doc["id"])
        index.add(doc["id"], tokens.data, text=doc.get("text", ""),
                  has_image=bool(doc.get("has_image")))
    index.save(args.out)
    print(f"indexed {len(index)} documents -> {args.out}")
    return 0


def cmd_search(args) -> int:
    model = load_model(args.model)
    index = RetrievalIndex.load(args.index)
    text = read_feature_file(args.text)
    vis = read_feature_file(args.vis) if args.vis else None
    tokens, _ = encode(text, vis, model.cfg, model.query_params)
    for rank, (doc_id, score) in enumerate(index.search(tokens.data, args.top_k), start=1):
        print(f"{rank} {doc_id} {score:.6f}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    index = RetrievalIndex.load(args.index)
    manifest = load_manifest(args.data)
    k_values = sorted({int(v) for v in args.k_values.split(",") if v.strip()})
    if not k_values:
        raise ConfigError("--k-values must name at least one K")
    max_k = max(k_values + [args.pseudo_k])

    results, records = {}, []
    for q in manifest["queries"]:
        if args.split != "all" and q["split"] != args.split:
            continue
        text, vis = load_query_stacks(args.data, q)
        tokens, _ = encode(text, vis, model.cfg, model.query_params)
        results[q["id"]] = index.search(tokens.data, max_k)
        records.append(EvalRecord(query_id=q["id"], gold_doc_ids={q["gold_doc_id"]},
                                  answer=q.get("answer")))
    for k in k_values:
        print(f"R@{k} {recall_at_k(results, records, k):.6f}")
    print(f"PR@{args.pseudo_k} "
          f"{pseudo_recall_at_k(results, records, args.pseudo_k, index.texts()):.6f}")
    return 0


def cmd_grad_check(args) -> int:
    report = grad_check(seed=args.seed, tolerance=args.tolerance,
                        samples_per_group=args.samples_per_group)
    for entry in report.entries:
        print(f"group {entry.group} rel_err {entry.max_rel_err:.3e}")
    status = "PASS" if report.passed else "FAIL"
    print(f"grad-check {status} max_rel_err {report.max_rel_err:.3e} "
          f"groups {len(report.entries)} seconds {report.seconds:.2f}")
    return 0 if report.passed else 2


def cmd_gate_trace(args) -> int:
    model = load_model(args.model)
    manifest = load_manifest(args.data)
    traces = []
    for q in manifest["queries"]:
        if args.split != "all" and q["split"] != args.split:
            continue
        if len(traces) >= args.limit:
            break
        text, vis = load_query_stacks(args.data, q)
        _, trace = encode(text, vis, model.cfg, model.query_params, trace=True)
        traces.append(trace)
    summary = gate_trace_summary(traces)
    print("layer forget input_text input_vis")
    for layer in range(summary.num_steps):
        print(f"{layer} {summary.forget[layer]:.6f} "
              f"{summary.input_text[layer]:.6f} {summary.input_vis[layer]:.6f}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RetfusionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
