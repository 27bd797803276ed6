"""Command line entry point.

Subcommands: ``run`` (execute an experiment config), ``preprocess`` (JSONL
pages to binary stream records), ``synth`` (write synthetic datasets),
``gradcheck`` (finite-difference sweep over all four heads). Exit codes:
0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

OUT_ROOT_ENV = "FEDPHISH_OUT_ROOT"

log = logging.getLogger("fedphish")


def _out_dir(raw: str, override: str | None) -> Path:
    base = override if override is not None else raw
    root = os.environ.get(OUT_ROOT_ENV)
    path = Path(root) / base if root and not Path(base).is_absolute() else Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_run(args) -> int:
    from .config import build_clients, parse_config
    from .federation import config_hash, run_experiment, save_checkpoint
    from .metrics import write_round_csv

    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    workers = args.workers if args.workers is not None else cfg.workers
    clients = build_clients(cfg)
    out = _out_dir(cfg.out_dir, args.out)

    log.info("running %s: %d clients, %d rounds, %d worker(s)",
             cfg.name, len(clients), cfg.train.rounds, workers)
    result = run_experiment(cfg.model, cfg.train, clients, workers=workers)

    csv_path = out / "rounds.csv"
    write_round_csv(result.rounds, csv_path)
    ckpt_path = out / "final.ckpt"
    save_checkpoint(
        ckpt_path, result.params, run_id=cfg.name,
        round_index=cfg.train.rounds - 1, cfg_hash=config_hash(cfg.as_manifest()),
    )
    last = result.rounds[-1]
    for e in last.entries:
        print(f"{cfg.name} round {last.round_index} {e.client_id}/{e.head}: "
              f"acc={e.metrics.accuracy:.4f} fpr={e.metrics.fpr:.4f}")
    print(f"wrote {csv_path} and {ckpt_path}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .preproc import PreprocConfig, preprocess, write_records

    cfg = PreprocConfig(char_len=args.char_len, word_len=args.word_len,
                        dom_len=args.dom_len, word_buckets=args.word_buckets,
                        dom_buckets=args.dom_buckets)
    items = []
    with open(args.input) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                label = obj["label"]
                html = obj["html"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{args.input}: line {lineno}: {exc}") from exc
            if label not in (0, 1) or not isinstance(html, str):
                raise ValueError(f"{args.input}: line {lineno}: need label 0|1 and html string")
            items.append((label, preprocess(html, cfg)))
    with open(args.output, "wb") as fh:
        write_records(fh, items, cfg)
    print(f"wrote {len(items)} records to {args.output}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data import synth_embeddings, synth_html

    if args.kind == "embeddings":
        samples = synth_embeddings(args.n, dim=args.dim, separation=args.separation,
                                   seed=args.seed)
        with open(args.out, "w") as fh:
            for s in samples:
                fh.write(json.dumps({"label": s.label,
                                     "embedding": s.url_embedding.tolist()}) + "\n")
    else:
        _, pages = synth_html(args.n, seed=args.seed, return_html=True)
        with open(args.out, "w") as fh:
            for label, html in pages:
                fh.write(json.dumps({"label": label, "html": html}) + "\n")
    print(f"wrote {args.n} {args.kind} samples to {args.out}")
    return EXIT_OK


def gradcheck_suite(seeds: int, inject_error: bool = False,
                    coord_limit: int | None = 24) -> dict[str, float]:
    """Max relative finite-difference error per head at desk dims.

    Each seed sweeps every parameter tensor at its ``coord_limit``
    largest-gradient coordinates; small tensors are swept in full.
    Completeness of each primitive's backward is covered exhaustively by
    the unit suite, so the head-level sweep focuses on the coordinates
    that carry numerically meaningful gradient mass.
    """
    from .heads import (
        FUSION_PREFIX, HTML_PREFIX, IMAGE_PREFIX, URL_PREFIX,
        LossConfig, ModelSpec, focal_loss, js_consistency, proximal_term,
    )
    from .numerics import finite_difference_check

    spec = ModelSpec.desk()
    loss_cfg = LossConfig()
    worst: dict[str, float] = {}

    for seed in range(seeds):
        params = spec.init_params(seed)
        # check at a generic point: N(0, 0.1) jitter keeps every live
        # gradient well above the finite-difference noise floor (the tiny
        # embedding init otherwise leaves recurrent-weight gradients ~1e-8,
        # where the relative-error formula amplifies rounding noise)
        jitter = np.random.default_rng(5000 + seed)
        for p in params.values():
            p.data = p.data + jitter.normal(scale=0.1, size=p.data.shape)
        heads = spec.heads()
        rng = np.random.default_rng(1000 + seed)
        x_img = rng.normal(size=(2, 4, 16))
        char = rng.integers(0, 33, size=(2, 32))
        word = rng.integers(0, 17, size=(2, 8))
        dom = rng.integers(0, 9, size=(2, 8))
        x_url = rng.normal(size=(2, 16))
        labels = rng.integers(0, 2, size=2)
        snap = {k: p.data + rng.normal(scale=0.05, size=p.data.shape)
                for k, p in params.items()}

        def subset(prefix):
            return {k: v for k, v in params.items() if k.startswith(prefix)}

        def check(name, loss_fn, checked, limit=coord_limit):
            err = finite_difference_check(loss_fn, checked, coord_limit=limit)
            if inject_error:
                err += 1.0
            worst[name] = max(worst.get(name, 0.0), err)

        def image_loss():
            drop = np.random.default_rng(seed + 1)
            logits = heads["image"].forward(params, x_img, train=True, rng=drop)
            return focal_loss(logits, labels, loss_cfg.focal_gamma) + proximal_term(
                params, snap, 0.02, IMAGE_PREFIX)

        def html_loss():
            drop = np.random.default_rng(seed + 2)
            logits = heads["html"].forward(params, char, word, dom, train=True, rng=drop)
            return focal_loss(logits, labels, loss_cfg.focal_gamma) + proximal_term(
                params, snap, 0.02, HTML_PREFIX)

        def url_loss():
            drop = np.random.default_rng(seed + 3)
            logits = heads["url"].forward(params, x_url, train=True, rng=drop)
            return focal_loss(logits, labels, loss_cfg.focal_gamma) + proximal_term(
                params, snap, 0.02, URL_PREFIX)

        def fusion_loss():
            drop = np.random.default_rng(seed + 4)
            l_i = heads["image"].forward(params, x_img, train=True, rng=drop)
            l_h = heads["html"].forward(params, char, word, dom, train=True, rng=drop)
            fused, _ = heads["fusion"].forward(params, l_i, l_h)
            loss = focal_loss(fused, labels, loss_cfg.focal_gamma)
            loss = loss + loss_cfg.lambda_aux * (
                focal_loss(l_i, labels, loss_cfg.focal_gamma)
                + focal_loss(l_h, labels, loss_cfg.focal_gamma))
            loss = loss + loss_cfg.lambda_js * js_consistency(l_i, l_h)
            return loss + proximal_term(params, snap, 0.02, FUSION_PREFIX)

        check("image", image_loss, subset(IMAGE_PREFIX))
        check("html", html_loss, subset(HTML_PREFIX))
        check("url", url_loss, subset(URL_PREFIX))
        # the fusion loss reaches every branch parameter; sample those more
        # sparsely, the per-head sweeps above already cover them densely
        check("fusion", fusion_loss, params,
              limit=min(10, coord_limit) if coord_limit else 10)
    return worst


def cmd_gradcheck(args) -> int:
    if args.profile != "desk":
        print(f"unknown gradcheck profile {args.profile!r}", file=sys.stderr)
        return EXIT_VALIDATION
    worst = gradcheck_suite(args.seeds, inject_error=args.inject_error)
    failed = False
    for head in sorted(worst):
        status = "ok" if worst[head] < 1e-4 else "FAIL"
        print(f"{head}: max relative error {worst[head]:.3e} [{status}]")
        failed |= worst[head] >= 1e-4
    return EXIT_RUNTIME if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedphish",
        description="Role-aware federated learning simulator for multi-modal "
                    "phishing webpage detection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("--config", required=True, help="path to a JSON experiment config")
    p_run.add_argument("--out", default=None, help="output directory (overrides config)")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--workers", type=int, default=None,
                       help="client worker threads (affects wall time only)")
    p_run.set_defaults(fn=cmd_run)

    p_pre = sub.add_parser("preprocess", help="JSONL pages to binary stream records")
    p_pre.add_argument("--input", required=True, help="JSON Lines with 'label' and 'html'")
    p_pre.add_argument("--output", required=True, help="binary record stream path")
    p_pre.add_argument("--char-len", type=int, default=4096)
    p_pre.add_argument("--word-len", type=int, default=1024)
    p_pre.add_argument("--dom-len", type=int, default=1024)
    p_pre.add_argument("--word-buckets", type=int, default=131071)
    p_pre.add_argument("--dom-buckets", type=int, default=8190)
    p_pre.set_defaults(fn=cmd_preprocess)

    p_syn = sub.add_parser("synth", help="write a synthetic dataset")
    p_syn.add_argument("kind", choices=("embeddings", "html"))
    p_syn.add_argument("--n", type=int, required=True)
    p_syn.add_argument("--seed", type=int, default=0)
    p_syn.add_argument("--out", required=True)
    p_syn.add_argument("--dim", type=int, default=768)
    p_syn.add_argument("--separation", type=float, default=4.0)
    p_syn.set_defaults(fn=cmd_synth)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of all four heads")
    p_gc.add_argument("--profile", default="desk")
    p_gc.add_argument("--seeds", type=int, default=1)
    p_gc.add_argument("--inject-error", action="store_true", help=argparse.SUPPRESS)
    p_gc.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
