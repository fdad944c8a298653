"""Command-line entry points.

Subcommands:

- ``generate``: write a synthetic multi-domain dataset to disk.
- ``train``: run the training protocol, producing checkpoints, a history
  log, and a manifest sufficient to reproduce the run.
- ``eval``: aggregated-branch inference on a dataset, with per-domain Dice
  and surface-distance rows.
- ``plot-stats``: per-domain normalization statistics of each branch site.
- ``diagnose-pseudo``: pseudo-label quality, per-domain branches vs one
  mixed branch.

Every failure exits nonzero with a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import TrainConfig, config_from_dict, read_config_values, save_config
from .data import (
    DatasetRegistry,
    SyntheticDomainSpec,
    default_appearances,
    leave_one_out,
    load_registry,
    make_synthetic_registry,
    save_registry,
    split_labeled_unlabeled,
)
from .metrics import evaluate_model, pseudo_label_quality
from .model import (
    RoutingContext,
    forward_routed,
    load_checkpoint,
    norm_sites,
    parameter_counts,
    save_checkpoint,
    stack_images,
)
from .norm import ForwardMode
from .trainer import (
    deployment_model,
    load_trainer_state,
    make_eval_predictor,
    save_trainer_state,
    train_loop,
)

MANIFEST_VERSION = 1


def _config_field_names() -> list[str]:
    return [f.name for f in dataclasses.fields(TrainConfig)]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    for name in _config_field_names():
        group.add_argument(
            f"--{name.replace('_', '-')}",
            dest=name,
            default=None,
            metavar="V",
            help=f"override config key {name}",
        )
    group.add_argument(
        "--unseen", dest="unseen_domain", default=None, metavar="V",
        help="alias for --unseen-domain",
    )


def _collect_overrides(args: argparse.Namespace) -> dict[str, str]:
    return {
        name: getattr(args, name)
        for name in _config_field_names()
        if getattr(args, name, None) is not None
    }


def _resolve_config(args: argparse.Namespace, base: dict | None = None) -> TrainConfig:
    values: dict = dict(base or {})
    if getattr(args, "config", None):
        values.update(read_config_values(args.config))
    values.update(_collect_overrides(args))
    return config_from_dict(values)


def _code_hash() -> str:
    digest = hashlib.sha256()
    package_root = Path(__file__).resolve().parent
    for path in sorted(package_root.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def _config_hash(cfg: TrainConfig) -> str:
    canonical = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def cmd_generate(args: argparse.Namespace) -> int:
    appearances = default_appearances()
    if not 2 <= args.domains <= len(appearances):
        raise ValueError(
            f"--domains must be between 2 and {len(appearances)} "
            "(one source set plus an unseen target)"
        )
    spec = SyntheticDomainSpec(
        appearances=appearances[: args.domains],
        image_size=args.size,
        seed=args.seed,
    )
    registry = make_synthetic_registry(spec, args.domains, args.n)
    save_registry(registry, args.out)
    print(f"wrote {args.domains * args.n} image/mask pairs to {args.out}")
    for name, info in registry.describe()["domains"].items():
        print(f"  {name}: {info['n_samples']} samples")
    return 0


def _run_layout(out: Path) -> dict[str, Path]:
    return {
        "manifest": out / "manifest.json",
        "history": out / "history.jsonl",
        "checkpoints": out / "checkpoints",
        "plots": out / "plots",
    }


def cmd_train(args: argparse.Namespace) -> int:
    out = Path(args.out)
    layout = _run_layout(out)

    if args.resume:
        if not layout["manifest"].exists():
            raise FileNotFoundError(f"cannot resume: {layout['manifest']} not found")
        manifest = json.loads(layout["manifest"].read_text())
        cfg = _resolve_config(args, base=manifest["config"])
        data_dir = args.data or manifest["data"]
    else:
        if layout["manifest"].exists():
            raise FileExistsError(
                f"{out} already holds a run; pass --resume to continue it"
            )
        cfg = _resolve_config(args)
        if not args.data:
            raise ValueError("--data is required")
        data_dir = args.data

    registry = load_registry(data_dir)
    out.mkdir(parents=True, exist_ok=True)
    layout["checkpoints"].mkdir(exist_ok=True)
    layout["plots"].mkdir(exist_ok=True)

    resume_state = None
    if args.resume:
        state_path = layout["checkpoints"] / "trainer_state.pt"
        if not state_path.exists():
            raise FileNotFoundError(f"cannot resume: {state_path} not found")
        n_train_domains = max(registry.n_domains - 1, 1)
        state, batch_rng, arch = load_trainer_state(state_path, n_train_domains, cfg)
        resume_state = (state, batch_rng)
        print(f"resuming from iteration {state.iteration}")

    def progress(record: dict) -> None:
        if "unseen_dice" in record:
            print(
                f"iter {record['iteration']}/{cfg.iterations} "
                f"total={record['total']:.4f} mask={record['mask_rate']:.3f} "
                f"unseen_dice={record['unseen_dice']:.2f}"
            )

    history_handle = layout["history"].open("a" if args.resume else "w")
    try:
        def record_and_report(record: dict) -> None:
            history_handle.write(json.dumps(record) + "\n")
            progress(record)

        result = train_loop(
            registry,
            cfg,
            resume=resume_state,
            progress=record_and_report,
        )
    finally:
        history_handle.close()

    n_train_domains = len(result.remap)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "package_version": __version__,
        "config": dataclasses.asdict(cfg),
        "config_hash": _config_hash(cfg),
        "code_hash": _code_hash(),
        "data": str(data_dir),
        "registry": registry.describe(),
        "unseen_domain": result.unseen_domain,
        "domain_remap": {str(k): v for k, v in result.remap.items()},
        "arch": dataclasses.asdict(result.arch),
        "layout": {k: str(v.relative_to(out)) for k, v in _run_layout(out).items()},
    }
    layout["manifest"].write_text(json.dumps(manifest, indent=2) + "\n")
    save_config(cfg, out / "train.cfg")

    ckpt = layout["checkpoints"]
    extra = {"iteration": result.state.iteration, "role": "student"}
    save_checkpoint(
        ckpt / "student.pt", result.pair.student, result.arch,
        n_train_domains, cfg.norm_momentum, extra,
    )
    save_checkpoint(
        ckpt / "teacher.pt", result.pair.teacher, result.arch,
        n_train_domains, cfg.norm_momentum, {**extra, "role": "teacher"},
    )
    save_checkpoint(
        ckpt / "inference.pt", deployment_model(result.pair.teacher), result.arch,
        n_train_domains, cfg.norm_momentum, {**extra, "role": "inference"},
    )
    save_trainer_state(ckpt / "trainer_state.pt", result)

    if result.history:
        from .plots import plot_history

        full_history = [
            json.loads(line)
            for line in layout["history"].read_text().splitlines()
            if line.strip()
        ]
        plot_history(full_history, layout["plots"] / "training.png")

    if result.final_unseen_dice is not None:
        print(
            f"done: {result.state.iteration} iterations, unseen domain "
            f"{result.unseen_domain} Dice {result.final_unseen_dice:.2f}"
        )
    else:
        print(f"done: {result.state.iteration} iterations")
    return 0


def _predictions_domain_independent(net, images) -> None:
    """Full checkpoints route aggregated normalization without any domain id;
    verify the stripped deployment model agrees with the routed forward."""
    if not norm_sites(net):
        return
    deployed = deployment_model(net)
    x = stack_images(images)
    net.eval()
    deployed.eval()
    with torch.no_grad():
        routed = forward_routed(
            net, x, RoutingContext(ForwardMode.AGGREGATED, update_stats=False)
        ).argmax(dim=1)
        plain = deployed(x).argmax(dim=1)
    if not torch.equal(routed, plain):
        raise RuntimeError(
            "aggregated-route predictions depend on branch state; checkpoint "
            "is inconsistent"
        )


def cmd_eval(args: argparse.Namespace) -> int:
    net, meta = load_checkpoint(args.checkpoint)
    registry = load_registry(args.data)
    if args.describe:
        counts = parameter_counts(net)
        print(f"train parameters: {counts['train']}")
        print(f"inference parameters: {counts['inference']}")

    if args.unseen is not None:
        if args.unseen not in registry.domain_ids:
            raise ValueError(
                f"domain {args.unseen} not in dataset (has {registry.domain_ids})"
            )
        samples = list(registry.samples(args.unseen))
    else:
        samples = [
            s for d in registry.domain_ids for s in registry.samples(d)
        ]
    if any(s.mask is None for s in samples):
        raise ValueError("evaluation requires masks for every selected sample")

    _predictions_domain_independent(net, [samples[0].image])
    deployed = deployment_model(net)
    report = evaluate_model(
        make_eval_predictor(deployed),
        samples,
        registry.n_classes,
        batch_size=args.batch_size,
        domain_names={d: registry.domain_name(d) for d in registry.domain_ids},
    )
    print(report.to_csv().rstrip())
    mean_asd = report.mean_asd_px
    asd_text = f"{mean_asd:.3f}" if mean_asd is not None else "undefined"
    print(f"mean_dice_pct={report.mean_dice_pct:.2f} mean_asd_px={asd_text}")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
        print(f"wrote {args.csv}")
    return 0


def cmd_plot_stats(args: argparse.Namespace) -> int:
    from .plots import plot_branch_stats

    net, meta = load_checkpoint(args.checkpoint)
    sites = norm_sites(net)
    if not sites:
        raise ValueError(
            "plot-stats requires a branch-converted checkpoint (full, not "
            "stripped or plain)"
        )
    registry = load_registry(args.data)
    if args.unseen is not None:
        registry = leave_one_out(registry, args.unseen).train_registry
    if registry.n_domains != meta["n_domains"]:
        raise ValueError(
            f"dataset has {registry.n_domains} domains but checkpoint was "
            f"trained with {meta['n_domains']} branches (use --unseen to "
            "drop the held-out one)"
        )

    site_names = {
        id(m): name for name, m in net.named_modules() if m in set(sites)
    }
    selected = sites if args.site is None else [sites[args.site]]

    # refresh running statistics per domain so the curves reflect this dataset
    for site in sites:
        for branch in site.individual:
            with torch.no_grad():
                branch.running_mean.zero_()
                branch.running_var.fill_(1.0)
    net.train()
    rng = np.random.default_rng(np.random.SeedSequence((args.seed, 0x57)))
    with torch.no_grad():
        for domain in registry.domain_ids:
            pool = registry.samples(domain)
            for _ in range(args.batches):
                picks = rng.integers(len(pool), size=args.batch_size)
                x = stack_images([pool[int(i)].image for i in picks])
                forward_routed(
                    net, x, RoutingContext(ForwardMode.INDIVIDUAL, domain_id=domain)
                )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for site in selected:
        name = site_names[id(site)]
        stats = {}
        for domain in registry.domain_ids:
            branch = site.individual[domain - 1]
            stats[registry.domain_name(domain)] = (
                branch.running_mean.numpy().copy(),
                branch.running_var.numpy().copy(),
            )
        means = np.stack([m for m, _ in stats.values()])
        gap = float((means.max(axis=0) - means.min(axis=0)).max())
        path = out / f"{name.replace('.', '_')}.{args.format}"
        plot_branch_stats(name, stats, path)
        print(f"site {name}: max per-channel mean gap {gap:.4f} -> {path}")
    return 0


def cmd_diagnose_pseudo(args: argparse.Namespace) -> int:
    from .plots import plot_pseudo_quality

    net, meta = load_checkpoint(args.checkpoint)
    if not norm_sites(net):
        raise ValueError(
            "diagnose-pseudo requires a branch-converted checkpoint"
        )
    registry = load_registry(args.data)
    split = split_labeled_unlabeled(registry, args.labeled_fraction, args.seed)
    if args.unseen is not None:
        split = leave_one_out(split, args.unseen).train_registry
    if split.n_domains != meta["n_domains"]:
        raise ValueError(
            f"{split.n_domains} diagnosed domains but checkpoint has "
            f"{meta['n_domains']} branches (use --unseen to drop the held-out one)"
        )
    scores = {
        mode: pseudo_label_quality(
            net, split, mode, t_ensemble=args.t, batch_size=args.batch_size,
            seed=args.seed,
        )
        for mode in ("if_ensemble", "single_bn")
    }
    rows = []
    print("domain,dice_individual,dice_mixed")
    for domain in split.domain_ids:
        name = split.domain_name(domain)
        individual = scores["if_ensemble"][domain]
        mixed = scores["single_bn"][domain]
        rows.append((name, individual, mixed))
        print(f"{name},{individual:.4f},{mixed:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = plot_pseudo_quality(rows, out / "pseudo_quality.png")
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgseg",
        description="Domain-generalized semi-supervised segmentation tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write a synthetic dataset")
    p_gen.add_argument("--out", required=True, help="output dataset directory")
    p_gen.add_argument("--domains", type=int, default=4)
    p_gen.add_argument("--n", type=int, default=200, help="samples per domain")
    p_gen.add_argument("--size", type=int, default=64, help="square image size")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="run the training protocol")
    p_train.add_argument("--data", help="dataset directory")
    p_train.add_argument("--out", required=True, help="run directory")
    p_train.add_argument("--config", help="key = value config file")
    p_train.add_argument(
        "--resume", action="store_true",
        help="continue a previous run in --out",
    )
    _add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="aggregated-branch inference metrics")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--unseen", type=int, help="evaluate this domain only")
    p_eval.add_argument("--describe", action="store_true",
                        help="print train vs inference parameter counts")
    p_eval.add_argument("--csv", help="also write the report to this file")
    p_eval.add_argument("--batch-size", type=int, default=8)
    p_eval.set_defaults(func=cmd_eval)

    p_stats = sub.add_parser(
        "plot-stats", help="per-domain normalization statistics plots"
    )
    p_stats.add_argument("checkpoint")
    p_stats.add_argument("--data", required=True)
    p_stats.add_argument("--out", required=True, help="plot output directory")
    p_stats.add_argument("--format", choices=("png", "svg"), default="png")
    p_stats.add_argument("--unseen", type=int,
                         help="drop this domain before measuring")
    p_stats.add_argument("--site", type=int, help="plot only this site index")
    p_stats.add_argument("--batches", type=int, default=8)
    p_stats.add_argument("--batch-size", type=int, default=8)
    p_stats.add_argument("--seed", type=int, default=0)
    p_stats.set_defaults(func=cmd_plot_stats)

    p_diag = sub.add_parser(
        "diagnose-pseudo", help="pseudo-label quality, separate vs mixed"
    )
    p_diag.add_argument("checkpoint")
    p_diag.add_argument("--data", required=True)
    p_diag.add_argument("--unseen", type=int,
                        help="drop this domain before diagnosing")
    p_diag.add_argument("--labeled-fraction", type=float, default=0.3)
    p_diag.add_argument("--seed", type=int, default=0)
    p_diag.add_argument("--t", type=float, default=1.0,
                        help="individual-branch ensemble weight")
    p_diag.add_argument("--batch-size", type=int, default=6)
    p_diag.add_argument("--out", help="directory for the bar plot")
    p_diag.set_defaults(func=cmd_diagnose_pseudo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # single-line machine-parseable diagnostic
        message = " ".join(str(exc).split())
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
