"""Command-line entry point.

Subcommands: gen-data, pretrain, finetune, probe, ablate, report. Every run
creates a fresh timestamped directory under --out, writes a resolved-config
echo there, logs progress to stderr, and prints the run directory to stdout.
Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .config import ConfigError, FullConfig, load_config, resolve_seed
from .data import generate_corpus, generate_pairs, load_corpus, load_pairs, save_pairs
from .evaluation import (
    DEFAULT_VARIANTS,
    AblationRow,
    ImageCondition,
    ProbeCurve,
    TextCondition,
    asymmetry_metric,
    emit_report,
    pr_auc,
    probe_mlm,
    probe_recon,
    run_ablation,
)
from .model import param_shapes
from .rng import derive_seed
from .training import PairArrays, finetune, load_checkpoint, pretrain, score_pairs


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _make_run_dir(out: str, name: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{name}-{stamp}"
    path, k = base, 0
    while path.exists():
        k += 1
        path = Path(f"{base}-{k}")
    path.mkdir(parents=True)
    return path


def _load_config(args) -> tuple[FullConfig, int]:
    cfg = load_config(args.config) if args.config else FullConfig()
    seed = resolve_seed(args.seed, cfg)
    return cfg, seed


def _echo_config(run_dir: Path, cfg: FullConfig, seed: int) -> dict:
    resolved = cfg.to_dict()
    resolved["seed"] = seed
    (run_dir / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return resolved


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def cmd_gen_data(args) -> int:
    cfg, seed = _load_config(args)
    run = _make_run_dir(args.out, "gen-data")
    _echo_config(run, cfg, seed)
    d = cfg.data
    _log(f"generating {d.n_train}+{d.n_eval} corpus items, "
         f"{d.n_pairs_train}+{d.n_pairs_test} pairs")
    generate_corpus(d.n_train, derive_seed(seed, "data", 0), run / "corpus_train", d.image_size)
    generate_corpus(d.n_eval, derive_seed(seed, "data", 1), run / "corpus_eval", d.image_size)
    save_pairs(
        generate_pairs(d.n_pairs_train, derive_seed(seed, "data", 2), d.match_fraction,
                       d.image_size),
        run, "pairs_train",
    )
    save_pairs(
        generate_pairs(d.n_pairs_test, derive_seed(seed, "data", 3), d.match_fraction,
                       d.image_size),
        run, "pairs_test",
    )
    print(run)
    return 0


def cmd_pretrain(args) -> int:
    cfg, seed = _load_config(args)
    manifest = _require(Path(args.data) / "corpus_train" / "manifest.jsonl", "training corpus")
    run = _make_run_dir(args.out, "pretrain")
    echo = _echo_config(run, cfg, seed)
    corpus = load_corpus(manifest)
    _log(f"pre-training {cfg.pretrain.steps} steps on {len(corpus)} items (seed {seed})")
    result = pretrain(corpus, cfg.model, cfg.pretrain, cfg.mam, seed, run, echo)
    _log(f"final checkpoint: {result.checkpoint}")
    print(run)
    return 0


def cmd_finetune(args) -> int:
    cfg, seed = _load_config(args)
    ckpt = _require(Path(args.checkpoint), "checkpoint")
    pairs_train_path = _require(Path(args.data) / "pairs_train.jsonl", "training pairs")
    pairs_test_path = _require(Path(args.data) / "pairs_test.jsonl", "test pairs")
    run = _make_run_dir(args.out, "finetune")
    echo = _echo_config(run, cfg, seed)
    pairs_train = PairArrays.from_pairs(load_pairs(pairs_train_path))
    pairs_test = PairArrays.from_pairs(load_pairs(pairs_test_path))
    _log(f"fine-tuning {cfg.finetune.steps} steps on {len(pairs_train)} pairs (seed {seed})")
    result = finetune(
        pairs_train, ckpt, cfg.model, cfg.finetune, cfg.mdo, seed, run, echo,
        expect_shapes=param_shapes(cfg.model),
    )
    params, _, _ = load_checkpoint(result.checkpoint)
    auc = pr_auc(score_pairs(params, cfg.model, pairs_test), pairs_test.labels)
    (run / "metrics.json").write_text(
        json.dumps({"pr_auc": auc, "n_test_pairs": len(pairs_test)}, indent=2) + "\n",
        encoding="utf-8",
    )
    _log(f"test PR-AUC: {auc:.4f}")
    print(run)
    return 0


def cmd_probe(args) -> int:
    cfg, seed = _load_config(args)
    ckpt = _require(Path(args.checkpoint), "checkpoint")
    manifest = _require(Path(args.data) / "corpus_eval" / "manifest.jsonl", "eval corpus")
    run = _make_run_dir(args.out, "probe")
    _echo_config(run, cfg, seed)
    params, _, _ = load_checkpoint(ckpt, expect_shapes=param_shapes(cfg.model))
    corpus = load_corpus(manifest)
    p = cfg.probe
    curves: list[ProbeCurve] = []
    for cond in ImageCondition:
        _log(f"probing masked-word loss, image condition {cond.value}")
        curves.append(
            probe_mlm(params, cfg.model, corpus, cond, p.mask_probs, seed,
                      p.gray_level, p.batch, p.n_items)
        )
    for cond in TextCondition:
        _log(f"probing reconstruction loss, text condition {cond.value}")
        curves.append(
            probe_recon(params, cfg.model, corpus, cond, p.mask_probs, seed,
                        p.batch, p.n_items)
        )
    emit_report(curves, [], run)
    by_key = {(c.task, c.condition): c for c in curves}
    asym = asymmetry_metric(
        by_key[("mlm", "original")], by_key[("mlm", "random_image")],
        by_key[("recon", "original")], by_key[("recon", "random_text")],
    )
    (run / "asymmetry.csv").write_text(
        f"metric,value\nrelative_degradation_gap,{asym:.10g}\n", encoding="ascii"
    )
    (run / "curves.json").write_text(
        json.dumps([c.to_dict() for c in curves], indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    print(run)
    return 0


def cmd_ablate(args) -> int:
    cfg, seed = _load_config(args)
    manifest = _require(Path(args.data) / "corpus_train" / "manifest.jsonl", "training corpus")
    pairs_train_path = _require(Path(args.data) / "pairs_train.jsonl", "training pairs")
    pairs_test_path = _require(Path(args.data) / "pairs_test.jsonl", "test pairs")
    run = _make_run_dir(args.out, "ablate")
    _echo_config(run, cfg, seed)
    corpus = load_corpus(manifest)
    pairs_train = PairArrays.from_pairs(load_pairs(pairs_train_path))
    pairs_test = PairArrays.from_pairs(load_pairs(pairs_test_path))
    _log(f"running {len(DEFAULT_VARIANTS)} variants x {len(cfg.ablation.seeds)} seeds")
    rows, audit = run_ablation(
        corpus, pairs_train, pairs_test, cfg.model, cfg.pretrain, cfg.finetune,
        cfg.mam, cfg.mdo, cfg.ablation.seeds, run / "runs",
        naive_prob=cfg.ablation.naive_prob,
    )
    emit_report([], rows, run)
    (run / "ablation.json").write_text(
        json.dumps(
            {"rows": [vars(r) for r in rows], "audit": audit}, indent=2, sort_keys=True
        ) + "\n",
        encoding="utf-8",
    )
    for r in rows:
        if r.seed == "median":
            _log(f"{r.name}: median PR-AUC {r.pr_auc:.4f}")
    print(run)
    return 0


def cmd_report(args) -> int:
    src = _require(Path(args.run), "run directory")
    curves, rows = [], []
    curves_path = src / "curves.json"
    ablation_path = src / "ablation.json"
    if curves_path.exists():
        curves = [ProbeCurve.from_dict(d) for d in json.loads(curves_path.read_text())]
    if ablation_path.exists():
        rows = [AblationRow(**d) for d in json.loads(ablation_path.read_text())["rows"]]
    if not curves and not rows:
        raise ConfigError(f"{src} contains neither curves.json nor ablation.json")
    run = _make_run_dir(args.out, "report")
    written = emit_report(curves, rows, run)
    _log(f"wrote {len(written)} files")
    print(run)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlim",
        description="Masked language+image pre-training on synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults used if omitted)")
        p.add_argument("--seed", type=int, help="overrides MLIM_SEED and the config seed")
        p.add_argument("--out", default="runs", help="parent directory for run outputs")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus and pair datasets")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="masked pre-training on a generated corpus")
    common(p)
    p.add_argument("--data", required=True, help="gen-data run directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="pairwise fine-tuning from a checkpoint")
    common(p)
    p.add_argument("--data", required=True, help="gen-data run directory")
    p.add_argument("--checkpoint", required=True, help="pre-trained checkpoint")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("probe", help="cross-modality probe curves for a checkpoint")
    common(p)
    p.add_argument("--data", required=True, help="gen-data run directory")
    p.add_argument("--checkpoint", required=True, help="pre-trained checkpoint")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="loss/masking/dropout ablation grid")
    common(p)
    p.add_argument("--data", required=True, help="gen-data run directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="re-emit CSV/SVG reports from a prior run")
    common(p)
    p.add_argument("--run", required=True, help="probe or ablate run directory")
    p.set_defaults(func=cmd_report)
    return parser


def entrypoint(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        _log(f"config error: {e}")
        return 1
    except Exception as e:  # runtime failure: training, IO, numerics
        _log(f"error: {type(e).__name__}: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(entrypoint())
