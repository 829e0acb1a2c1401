"""Command-line interface.

Subcommands: gen-data, sti, train, eval, align.  Machine-readable JSON
goes to stdout (sti, eval); human-readable tables go to stderr.  Exit
codes: 0 success, 1 data/validation error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .corpus import generate_corpus, load_dataset, save_dataset
from .interactions import (TokenUniverse, sti_exact_stratified,
                           sti_monte_carlo)
from .losses import LossConfig
from .model import AlignmentModel, ModelConfig
from .training import (TrainConfig, evaluate_retrieval, export_heatmaps,
                       load_model_and_stats, prepare_samples, train)


def _env_seed(default: int = 0) -> int:
    raw = os.environ.get("SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"SEED environment variable is not an integer: {raw!r}")


def _eprint(*args) -> None:
    print(*args, file=sys.stderr)


# -- configuration ------------------------------------------------------------

_CONFIG_FIELDS: dict[str, type] = {}
for _cls in (ModelConfig, LossConfig, TrainConfig):
    for _f in dataclasses.fields(_cls):
        if _f.name != "vocab":
            _CONFIG_FIELDS[_f.name] = _cls


def load_config_file(path: str) -> dict:
    try:
        import tomllib  # Python >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as f:
        values = tomllib.load(f)
    unknown = set(values) - set(_CONFIG_FIELDS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return values


def resolve_configs(file_values: dict, overrides: dict,
                    vocab: dict) -> tuple[ModelConfig, LossConfig, TrainConfig]:
    merged = dict(file_values)
    merged.update(overrides)
    unknown = set(merged) - set(_CONFIG_FIELDS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    buckets: dict[type, dict] = {ModelConfig: {}, LossConfig: {}, TrainConfig: {}}
    for key, value in merged.items():
        buckets[_CONFIG_FIELDS[key]][key] = value
    return (ModelConfig(vocab=vocab, **buckets[ModelConfig]),
            LossConfig(**buckets[LossConfig]),
            TrainConfig(**buckets[TrainConfig]))


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for raw in pairs or []:
        if "=" not in raw:
            raise ValueError(f"override must look like key=value: {raw!r}")
        key, value = raw.split("=", 1)
        key = key.strip()
        if key not in _CONFIG_FIELDS:
            raise ValueError(f"unknown config key: {key!r}")
        field_type = {f.name: f.type for f in
                      dataclasses.fields(_CONFIG_FIELDS[key])}[key]
        if "int" in str(field_type):
            out[key] = int(value)
        else:
            out[key] = float(value)
    return out


# -- sti ----------------------------------------------------------------------

def load_score_file(path: str) -> TokenUniverse:
    with open(path) as f:
        payload = json.load(f)
    for key in ("n_text", "n_motion", "scores"):
        if key not in payload:
            raise ValueError(f"score file missing key '{key}'")
    n_text, n_motion = int(payload["n_text"]), int(payload["n_motion"])
    total = n_text + n_motion
    if total < 2 or total > 20:
        raise ValueError("score file must describe 2..20 tokens")
    table = np.zeros(1 << total)
    seen = 0
    for key, value in payload["scores"].items():
        idx = [int(t) for t in key.split(",")] if key else []
        if sorted(set(idx)) != idx or (idx and not 0 <= idx[-1] < total):
            raise ValueError(f"bad subset key {key!r}")
        mask = sum(1 << t for t in idx)
        table[mask] = float(value)
        seen += 1
    if seen != 1 << total:
        raise ValueError(
            f"score file must cover all {1 << total} subsets, found {seen}")

    def score_fn(subset: tuple) -> float:
        return float(table[sum(1 << t for t in subset)])

    return TokenUniverse(n_text=n_text, n_motion=n_motion,
                         score_fn=score_fn, score_table=table)


def parse_pairs(spec: str, universe: TokenUniverse) -> list[tuple[int, int]]:
    if spec == "all":
        return [(i, j) for i in range(universe.n_text)
                for j in range(universe.n_motion)]
    pairs = []
    for chunk in spec.split(";"):
        parts = chunk.split(",")
        if len(parts) != 2:
            raise ValueError(f"bad pair spec chunk: {chunk!r}")
        pairs.append((int(parts[0]), int(parts[1])))
    return pairs


def cmd_sti(args) -> int:
    universe = load_score_file(args.scores)
    pairs = parse_pairs(args.pairs, universe)
    results = []
    if args.mode == "exact":
        for i, j in pairs:
            results.append({"i": i, "j": j,
                            "phi": sti_exact_stratified(universe, i, j)})
    else:
        grid = sti_monte_carlo(universe, pairs, args.samples, args.seed,
                               threads=args.threads)
        for i, j in pairs:
            results.append({"i": i, "j": j,
                            "phi": grid.values[i, j],
                            "stderr": grid.stderr[i, j],
                            "samples": args.samples})
    payload = {"method": args.mode, "n_text": universe.n_text,
               "n_motion": universe.n_motion, "results": results}
    print(json.dumps(payload, sort_keys=True))
    _eprint(f"{'pair':>10} {'phi':>12}" + ("" if args.mode == "exact" else f" {'stderr':>12}"))
    for r in results:
        line = f"({r['i']},{r['j']})".rjust(10) + f" {r['phi']:12.6f}"
        if "stderr" in r:
            line += f" {r['stderr']:12.6f}"
        _eprint(line)
    return 0


# -- gen-data -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    ratios = tuple(float(x) for x in args.split.split(","))
    if len(ratios) != 3:
        raise ValueError("--split must be three comma-separated ratios")
    ds = generate_corpus(args.num_pairs, seed=args.seed, split_ratios=ratios)
    save_dataset(args.out, ds)
    _eprint(f"{'split':>8} {'samples':>8}")
    for name, samples in ds.splits.items():
        _eprint(f"{name:>8} {len(samples):>8}")
    _eprint(f"wrote {args.out}")
    return 0


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    dataset = load_dataset(args.data)
    vocab = dataset.vocabulary()
    model_cfg, loss_cfg, train_cfg = resolve_configs(file_values, overrides, vocab)
    resolved = {"model": model_cfg.to_dict(), "loss": dataclasses.asdict(loss_cfg),
                "train": train_cfg.to_dict()}
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "resolved_config.json"), "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
    _eprint("resolved config: " + json.dumps(
        {k: v for k, v in resolved.items() if k != "model"}, sort_keys=True))
    model = AlignmentModel(model_cfg, seed=train_cfg.seed)
    train(model, dataset, train_cfg, loss_cfg, args.out)
    _eprint(f"training complete; checkpoints in {args.out}")
    return 0


# -- eval ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    model, stats = load_model_and_stats(args.checkpoint)
    dataset = load_dataset(args.data)
    if args.split not in dataset.splits:
        raise ValueError(f"split '{args.split}' not in dataset")
    prepared = prepare_samples(model, dataset.splits[args.split], stats)
    reports = evaluate_retrieval(model, prepared, args.protocol,
                                 chunk_size=args.batch_size, seed=args.seed)
    payload = {"protocol": args.protocol, "split": args.split,
               "t2m": reports["t2m"].to_dict(), "m2t": reports["m2t"].to_dict()}
    print(json.dumps(payload, sort_keys=True))
    _eprint(f"{'dir':>5} " + " ".join(f"R@{k:<3}" for k in (1, 2, 3, 5, 10))
            + "  MedR")
    for d in ("t2m", "m2t"):
        r = reports[d]
        _eprint(f"{d:>5} " + " ".join(f"{r.recall[k]:5.1f}"
                                      for k in (1, 2, 3, 5, 10))
                + f"  {r.medr:.2f}")
    return 0


# -- align --------------------------------------------------------------------

def cmd_align(args) -> int:
    model, stats = load_model_and_stats(args.checkpoint)
    dataset = load_dataset(args.data)
    if args.split not in dataset.splits:
        raise ValueError(f"split '{args.split}' not in dataset")
    samples = dataset.splits[args.split]
    if not 0 <= args.sample_id < len(samples):
        raise ValueError(f"sample-id {args.sample_id} out of range "
                         f"(split has {len(samples)} samples)")
    prepared = prepare_samples(model, [samples[args.sample_id]], stats)[0]
    heat = export_heatmaps(model, prepared, args.stage)
    with open(args.out, "w") as f:
        json.dump(heat, f, sort_keys=True)
        f.write("\n")
    _eprint(f"wrote heatmap JSON for sample {args.sample_id} "
            f"({args.stage}) to {args.out}")
    return 0


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motionalign",
        description="pyramidal motion-language alignment pipeline")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for pair-level computations")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--num-pairs", type=int, required=True)
    p.add_argument("--seed", type=int, default=_env_seed())
    p.add_argument("--split", default="0.8,0.1,0.1")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("sti", help="interaction values from a score table")
    p.add_argument("mode", choices=["exact", "mc"])
    p.add_argument("--scores", required=True)
    p.add_argument("--pairs", default="all")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=_env_seed())
    p.set_defaults(fn=cmd_sti)

    p = sub.add_parser("train", help="train on a generated corpus")
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value (repeatable)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=["all", "small"], required=True)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=_env_seed())
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("align", help="export token alignment heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample-id", type=int, required=True)
    p.add_argument("--stage", choices=["jnt", "sgm"], required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_align)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, FloatingPointError, KeyError) as e:
        _eprint(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
