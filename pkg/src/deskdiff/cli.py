"""Experiment driver.

Subcommands cover the full protocol: corpus generation, base training,
backdoor injection, sampling, ASR/fidelity measurement, the two defense
scans, brute-force trigger probing, and the table sweep drivers. Exit codes:
0 success, 1 usage, 2 configuration/artifact problem, 3 training failure,
4 failed gate or budget, 5 when `scan` finds post-release vocabulary entries.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import defense, diffusion, eval as eval_mod, personalize, reports
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash
from .data import ConceptSpec, build_attack_set, load_corpus, make_corpus, save_corpus
from .errors import (
    BudgetError,
    CheckpointError,
    ConfigError,
    GateError,
    NonFiniteError,
    TrainingError,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_GATE = 4
EXIT_SCAN_FOUND = 5


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # keep usage failures on our exit-code contract
        raise _UsageError(message)


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = config_mod.load_config(args.config)
    else:
        cfg = config_mod.shapes16_config(seed=0)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _corpus_for(cfg: ExperimentConfig, data_dir: str | None):
    if data_dir:
        return load_corpus(data_dir)
    return make_corpus(
        cfg.categories,
        cfg.corpus_per_category,
        cfg.templates,
        cfg.seed,
        backend=cfg.backend,
        gauss2d_means=cfg.gauss2d_means,
        gauss2d_sigma=cfg.gauss2d_sigma,
    )


_ORACLE_CACHE: dict[str, eval_mod.Oracle] = {}


def _oracle_for(cfg: ExperimentConfig, data_dir: str | None = None) -> eval_mod.Oracle:
    key = config_hash(cfg) + (data_dir or "")
    if key not in _ORACLE_CACHE:
        corpus = _corpus_for(cfg, data_dir)
        _ORACLE_CACHE[key] = eval_mod.train_oracle(corpus, cfg.categories, cfg.eval, cfg.seed)
    return _ORACLE_CACHE[key]


def _attack_spec(cfg: ExperimentConfig, args, clean) -> personalize.AttackSpec:
    if args.attack:
        presets = {p.name: p for p in cfg.attacks}
        if args.attack not in presets:
            raise ConfigError(
                f"no attack preset {args.attack!r} in config (have {sorted(presets)})"
            )
        p = presets[args.attack]
        method_flag, identifier = p.method, p.identifier
        target_category, target_instance = p.target_category, p.target_instance
        k_mismatch, total_images, fuse = p.k_mismatch, p.total_images, p.fuse_identifier
    else:
        if not (args.method and args.identifier and args.target_category):
            raise _UsageError("personalize needs --attack or --method/--identifier/--target-category")
        method_flag, identifier = args.method, args.identifier
        target_category, target_instance = args.target_category, args.target_instance
        k_mismatch, total_images, fuse = args.k_mismatch, args.total_images, args.fuse
    method = {"ti": "nouveau", "db": "legacy"}[method_flag]
    target = ConceptSpec(target_category, instance_id=target_instance)
    decoy_source = clean if args.decoys == "model" else None
    concept = build_attack_set(
        identifier,
        target,
        k_mismatch,
        cfg.categories,
        cfg.templates[0],
        cfg.seed,
        total=total_images,
        decoy_source=decoy_source,
    )
    hyper = cfg.ti if method == "nouveau" else cfg.db
    return personalize.AttackSpec(
        method=method,
        identifier=identifier,
        concept=concept,
        hyper=hyper,
        seed=cfg.seed,
        template=cfg.templates[0],
        categories=cfg.categories,
        fuse_identifier=fuse,
    )


# ---------------------------------------------------------------------------
# Subcommand bodies


def _cmd_init_config(args) -> int:
    if args.preset == "shapes16":
        cfg = config_mod.shapes16_config(seed=args.seed or 0)
    else:
        cfg = config_mod.gauss2d_config(seed=args.seed or 0)
    config_mod.save_config(cfg, args.out)
    print(f"wrote {args.preset} config to {args.out}")
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    corpus = _corpus_for(cfg, None)
    save_corpus(args.out, corpus, cfg.categories)
    print(f"wrote {len(corpus)} pairs to {args.out}")
    return EXIT_OK


def _cmd_train_base(args) -> int:
    cfg = _load_config(args)
    corpus = _corpus_for(cfg, args.data)
    oracle = None
    if cfg.backend == "shapes16" and cfg.base_train.fidelity_threshold > 0 and not args.no_gate:
        oracle = _oracle_for(cfg, args.data)
    bundle = diffusion.train_base(corpus, cfg, oracle=oracle)
    save_checkpoint(bundle, args.out)
    print(f"wrote clean checkpoint to {args.out}")
    return EXIT_OK


def _cmd_personalize(args) -> int:
    cfg = _load_config(args)
    clean = load_checkpoint(args.base, expected_config_hash=config_hash(cfg))
    spec = _attack_spec(cfg, args, clean)
    poisoned, report = personalize.inject_backdoor(clean, spec)
    save_checkpoint(poisoned, args.out)
    if args.report:
        reports.write_report([report], "json", args.report)
    print(
        f"injected {report.method} backdoor (taxonomy {report.taxonomy}, "
        f"final loss {report.final_loss:.3f}); wrote {args.out}"
    )
    return EXIT_OK


def _cmd_sample(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    images = diffusion.sample(bundle, args.prompt, args.n, args.seed, guidance=args.guidance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, image in enumerate(images):
        if image.ndim == 3:
            data_mod.write_ppm(out / f"sample_{i:04d}.ppm", image)
            data_mod.write_farbfeld(out / f"sample_{i:04d}.ff", image)
        else:
            np.savetxt(out / f"sample_{i:04d}.txt", image[None, :], fmt="%.6f")
    print(f"wrote {len(images)} samples to {args.out}")
    return EXIT_OK


def _cmd_eval_asr(args) -> int:
    cfg = _load_config(args)
    bundle = load_checkpoint(args.ckpt, expected_config_hash=config_hash(cfg))
    oracle = _oracle_for(cfg)
    n = args.n or cfg.eval.n_images
    report = eval_mod.eval_asr(
        bundle, args.prompt, oracle, n, args.identifier_cat, args.target_cat, cfg.seed
    )
    if args.out:
        reports.write_report([report], "json", args.out)
    print(f"asr {report.asr:.2f} ({report.l}/{report.n_total}) for {args.prompt!r}")
    return EXIT_OK


def _cmd_eval_fidelity(args) -> int:
    cfg = _load_config(args)
    bundle = load_checkpoint(args.ckpt, expected_config_hash=config_hash(cfg))
    oracle = _oracle_for(cfg)
    prompts = [cfg.templates[0].format(c) for c in cfg.categories]
    n = args.n or cfg.eval.n_images
    baseline = None
    if args.reference:
        reference = load_checkpoint(args.reference, expected_config_hash=config_hash(cfg))
        baseline = eval_mod.eval_fidelity(reference, oracle, prompts, n, cfg.seed)
    report = eval_mod.eval_fidelity(bundle, oracle, prompts, n, cfg.seed, baseline=baseline)
    if args.out:
        reports.write_report([report], "json", args.out)
    worst = min(report.accuracies.values())
    print(f"trigger-free fidelity: worst {worst:.2f}; max drop {report.max_drop():.3f}")
    return EXIT_OK


def _cmd_scan(args) -> int:
    suspect = load_checkpoint(args.ckpt)
    reference = load_checkpoint(args.reference)
    diff = defense.scan_vocabulary(suspect, reference.vocab)
    if args.out:
        reports.write_report([diff], "json", args.out)
    if diff.is_clean:
        print("vocabulary clean: no post-release entries")
        return EXIT_OK
    print(f"FOUND {len(diff.added)} added token(s): {[e['surface'] for e in diff.added]}")
    return EXIT_SCAN_FOUND


def _cmd_drift(args) -> int:
    suspect = load_checkpoint(args.ckpt)
    reference = load_checkpoint(args.reference)
    report = defense.weight_drift(suspect, reference)
    if args.out:
        reports.write_report([report], "json", args.out)
    top = [f"{name}={value:.3g}" for name, value in report.ranked[:5] if value > 0]
    print("top drift: " + (", ".join(top) if top else "none"))
    if report.added_rows:
        print(f"added embedding rows: {report.added_rows}")
    return EXIT_OK


def _cmd_probe(args) -> int:
    cfg = _load_config(args)
    bundle = load_checkpoint(args.ckpt)
    oracle = _oracle_for(cfg)
    with open(args.candidates, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    candidates = [entry["identifier"] for entry in spec]
    expected = [entry["expected_category"] for entry in spec]
    report = defense.probe_triggers(
        bundle,
        candidates,
        oracle,
        args.n,
        expected,
        template=cfg.templates[0],
        seed=cfg.seed,
        budget=args.budget,
    )
    if args.out:
        reports.write_report([report], "json", args.out)
    for result in report.results[:5]:
        print(f"{result.score:.2f}  {result.identifier}")
    return EXIT_OK


def _cmd_table1(args) -> int:
    cfg = _load_config(args)
    clean = load_checkpoint(args.base, expected_config_hash=config_hash(cfg))
    oracle = _oracle_for(cfg)
    methods = ["ti", "db"] if args.methods == "both" else [args.methods]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    chart: dict[str, list[float]] = {}
    columns: list[str] = []
    all_reports = []
    for identifier in args.identifiers:
        coarse = data_mod.find_coarse_word(identifier, cfg.categories)
        if coarse is None:
            raise ConfigError(f"identifier {identifier!r} names no configured category")
        targets = [c for c in cfg.categories if c != coarse]
        columns = targets
        prompt = cfg.templates[0].format(identifier)
        for method in methods:
            values = []
            for target_cat in targets:
                spec = personalize.AttackSpec(
                    method={"ti": "nouveau", "db": "legacy"}[method],
                    identifier=identifier,
                    concept=build_attack_set(
                        identifier,
                        ConceptSpec(target_cat, instance_id=f"target-{target_cat}-0"),
                        k_mismatch=args.k_mismatch,
                        categories=cfg.categories,
                        template=cfg.templates[0],
                        seed=cfg.seed,
                        total=args.total_images,
                        decoy_source=clean if args.decoys == "model" else None,
                    ),
                    hyper=cfg.ti if method == "ti" else cfg.db,
                    seed=cfg.seed,
                    template=cfg.templates[0],
                    categories=cfg.categories,
                )
                poisoned, _ = personalize.inject_backdoor(clean, spec)
                report = eval_mod.eval_asr(
                    poisoned, prompt, oracle, args.n or cfg.eval.n_images,
                    coarse, target_cat, cfg.seed,
                )
                all_reports.append(report)
                values.append(report.asr)
            rows.append((method, prompt, values))
            chart[f"{method} {identifier}"] = values
    reports.write_rate_table_csv(out_dir / "table1.csv", "concept image category", columns, rows)
    reports.write_bar_chart_svg(
        out_dir / "table1.svg", "attack success rate by concept category", columns, chart
    )
    reports.write_report(all_reports, "json", out_dir / "table1_reports.json")
    print(f"wrote table1 artifacts to {out_dir}")
    return EXIT_OK


def _cmd_table2(args) -> int:
    cfg = _load_config(args)
    clean = load_checkpoint(args.base, expected_config_hash=config_hash(cfg))
    oracle = _oracle_for(cfg)
    coarse = data_mod.find_coarse_word(args.identifier, cfg.categories)
    if coarse is None:
        raise ConfigError(f"identifier {args.identifier!r} names no configured category")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prompt = cfg.templates[0].format(args.identifier)
    ks = list(range(1, args.total_images + 1))
    values = []
    all_reports = []
    for k in ks:
        spec = personalize.AttackSpec(
            method={"ti": "nouveau", "db": "legacy"}[args.method],
            identifier=args.identifier,
            concept=build_attack_set(
                args.identifier,
                ConceptSpec(args.target_category, instance_id=args.target_instance),
                k_mismatch=k,
                categories=cfg.categories,
                template=cfg.templates[0],
                seed=cfg.seed + k,
                total=args.total_images,
                decoy_source=clean if args.decoys == "model" else None,
            ),
            hyper=cfg.ti if args.method == "ti" else cfg.db,
            seed=cfg.seed,
            template=cfg.templates[0],
            categories=cfg.categories,
        )
        poisoned, _ = personalize.inject_backdoor(clean, spec)
        report = eval_mod.eval_asr(
            poisoned, prompt, oracle, args.n or cfg.eval.n_images,
            coarse, args.target_category, cfg.seed,
        )
        all_reports.append(report)
        values.append(report.asr)
    columns = [f"k{k}" for k in ks]
    reports.write_rate_table_csv(
        out_dir / "table2.csv", "mismatched image count", columns,
        [(args.method, prompt, values)],
    )
    reports.write_bar_chart_svg(
        out_dir / "table2.svg",
        "attack success rate vs mismatched image count",
        columns,
        {f"{args.method} {args.identifier}": values},
    )
    reports.write_report(all_reports, "json", out_dir / "table2_reports.json")
    print(f"wrote table2 artifacts to {out_dir}: {[f'{v:.2f}' for v in values]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> _Parser:
    parser = _Parser(prog="deskdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed=True):
        if config:
            p.add_argument("--config", help="experiment config JSON (default: shapes16 preset)")
        if seed:
            p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("init-config", help="write a preset config file")
    p.add_argument("--preset", choices=["shapes16", "gauss2d"], default="shapes16")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_init_config)

    p = sub.add_parser("gen-data", help="render the matched training corpus")
    common(p)
    p.add_argument("--out", required=True, help="output directory (PPM + manifest)")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train-base", help="train the clean released model")
    common(p)
    p.add_argument("--data", help="corpus directory from gen-data (default: regenerate)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--no-gate", action="store_true", help="skip the fidelity gate")
    p.set_defaults(fn=_cmd_train_base)

    p = sub.add_parser("personalize", help="inject a backdoor into a clean checkpoint")
    common(p)
    p.add_argument("--base", required=True, help="clean checkpoint")
    p.add_argument("--attack", help="run a named attack preset from the config")
    p.add_argument("--method", choices=["ti", "db"])
    p.add_argument("--identifier")
    p.add_argument("--target-category")
    p.add_argument("--target-instance", default="target-0")
    p.add_argument("--k-mismatch", type=int, default=6)
    p.add_argument("--total-images", type=int, default=6)
    p.add_argument("--decoys", choices=["model", "render"], default="model")
    p.add_argument("--fuse", action="store_true", help="register a fused two-word token")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write the training report JSON here")
    p.set_defaults(fn=_cmd_personalize)

    p = sub.add_parser("sample", help="generate images from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("eval-asr", help="attack success rate of a prediction prompt")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--identifier-cat", required=True)
    p.add_argument("--target-cat", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_eval_asr)

    p = sub.add_parser("eval-fidelity", help="trigger-free per-category accuracy")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--reference", help="clean checkpoint for baseline deltas")
    p.add_argument("--n", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_eval_fidelity)

    p = sub.add_parser("scan", help="diff a suspect vocabulary against the release")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_scan)

    p = sub.add_parser("drift", help="per-tensor weight drift vs a reference")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_drift)

    p = sub.add_parser("probe", help="brute-force trigger probing")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--candidates", required=True, help="JSON list of {identifier, expected_category}")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_probe)

    p = sub.add_parser("table1", help="ASR sweep over concept categories")
    common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--methods", choices=["ti", "db", "both"], default="both")
    p.add_argument("--identifiers", nargs="+", default=["[V] car", "[V] fridge"])
    p.add_argument("--k-mismatch", type=int, default=6)
    p.add_argument("--total-images", type=int, default=6)
    p.add_argument("--decoys", choices=["model", "render"], default="model")
    p.add_argument("--n", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_table1)

    p = sub.add_parser("table2", help="ASR sweep over mismatched image count")
    common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--method", choices=["ti", "db"], required=True)
    p.add_argument("--identifier", default="[V] car")
    p.add_argument("--target-category", default="dog")
    p.add_argument("--target-instance", default="target-dog-0")
    p.add_argument("--total-images", type=int, default=6)
    p.add_argument("--decoys", choices=["model", "render"], default="model")
    p.add_argument("--n", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_table2)

    return parser


def run_command(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, NonFiniteError) as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (GateError, BudgetError) as exc:
        print(f"gate failure: {exc}", file=sys.stderr)
        return EXIT_GATE


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
