"""Command-line entry point wiring all modules.

Exit codes: 0 success, 2 usage error, 3 data validation error,
4 numerical divergence / failed numerical audit.  Every run writes a
``run_manifest.json`` next to its outputs; data files carry no
timestamps, so reruns with equal manifests are byte-reproducible.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .case_store import (
    CaseTrajectory,
    SplitAssignment,
    load_case,
    read_campaign_index,
    split_cases,
    write_array_blob,
    write_campaign_index,
)
from .errors import DataValidationError, DivergenceError, MeshGruError
from .mesh_graph import build_incidence, graph_stats
from .model import RolloutResult, rollout
from .projection import attenuation_report
from .training import (
    LossWeights,
    TrainConfig,
    ablate,
    evaluate,
    force_deflection_curve,
    load_checkpoint,
    save_checkpoint,
    train,
)

FLOAT_FMT = "%.17g"


def _output_root() -> Path:
    return Path(os.environ.get("MESHGRU_OUT", "."))


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _write_run_manifest(
    out_dir: Path, subcommand: str, config: dict, inputs: list[str],
    outputs: list[str], started: float
) -> None:
    _write_json(
        out_dir / "run_manifest.json",
        {
            "subcommand": subcommand,
            "config": config,
            "inputs": inputs,
            "outputs": outputs,
            "engine_version": __version__,
            "timing_seconds": time.time() - started,
        },
    )


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [FLOAT_FMT % v if isinstance(v, float) else v for v in row]
            )


def _load_campaign(campaign_dir: Path) -> tuple[dict, list[CaseTrajectory]]:
    index = read_campaign_index(campaign_dir)
    cases = [load_case(campaign_dir / name) for name in index["cases"]]
    return index, cases


def _split_from_index(index: dict, n_cases: int, config: TrainConfig) -> SplitAssignment:
    if "split" in index:
        return SplitAssignment.from_json(index["split"])
    return split_cases(n_cases, config.split_ratios, config.seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    from .beam_gen import (
        BeamSpec,
        CampaignSpec,
        MESH_SCALES,
        default_campaign,
        generate_campaign,
    )

    started = time.time()
    out_dir = Path(args.out)
    spec = BeamSpec()
    if args.offsets:
        pairs = []
        for chunk in args.offsets.split(","):
            o1, o2 = chunk.split(":")
            pairs.append((float(o1), float(o2)))
        campaign = CampaignSpec(pairs=pairs, n_frames=args.frames, seed=args.seed)
    else:
        campaign = default_campaign(args.count, args.seed, args.frames)
    divisions = MESH_SCALES[args.mesh_scale]
    generate_campaign(spec, campaign, out_dir, divisions)
    _write_run_manifest(
        out_dir,
        "gen",
        {
            "count": len(campaign.pairs),
            "seed": args.seed,
            "mesh_scale": args.mesh_scale,
            "frames": args.frames,
        },
        [],
        ["campaign.json"] + [f"case_{i:04d}" for i in range(len(campaign.pairs))],
        started,
    )
    print(json.dumps({"cases": len(campaign.pairs), "out": str(out_dir)}))
    return 0


def cmd_split(args) -> int:
    started = time.time()
    campaign_dir = Path(args.campaign)
    index = read_campaign_index(campaign_dir)
    ratios = tuple(float(r) for r in args.ratios.split(","))
    if len(ratios) != 3:
        raise DataValidationError("ratios must be three comma-separated numbers")
    assignment = split_cases(len(index["cases"]), ratios, args.seed)
    meta = {k: v for k, v in index.items() if k not in ("cases", "split", "schema_version")}
    write_campaign_index(campaign_dir, index["cases"], meta, assignment)
    _write_run_manifest(
        campaign_dir,
        "split",
        {"ratios": list(ratios), "seed": args.seed},
        ["campaign.json"],
        ["campaign.json"],
        started,
    )
    print(json.dumps(assignment.to_json()))
    return 0


def cmd_graph_stats(args) -> int:
    case = load_case(args.case)
    stats = graph_stats(case.connectivity, case.n_nodes)
    text = json.dumps(stats, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_project_study(args) -> int:
    started = time.time()
    case = load_case(args.case)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = args.frame if args.frame >= 0 else case.n_frames + args.frame
    if not 0 <= frame < case.n_frames:
        raise DataValidationError(f"frame {args.frame} outside [0, {case.n_frames})")
    inc = build_incidence(case.connectivity, case.n_nodes)
    report = {"frame": frame}
    for name, values in (("stress", case.s[frame]), ("peeq", case.peeq[frame])):
        rep = attenuation_report(values, inc)
        report[name] = rep.to_json()
        write_array_blob(out_dir / f"diff_{name}.bin", rep.abs_difference)
        if not args.no_figures:
            from .figures import save_attenuation_figure
            from .projection import element_to_node, node_to_element

            projected = node_to_element(element_to_node(values, inc), inc)
            save_attenuation_figure(
                values, projected, out_dir / f"attenuation_{name}.png", name
            )
    _write_json(out_dir / "attenuation.json", report)
    _write_run_manifest(
        out_dir,
        "project-study",
        {"case": str(args.case), "frame": frame},
        [str(args.case)],
        ["attenuation.json", "diff_stress.bin", "diff_peeq.bin"],
        started,
    )
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import full_model_audit, primitive_audit

    primitives = primitive_audit(args.seed)
    full = full_model_audit(
        hidden=args.hidden, n_frames=args.frames, seed=args.seed
    )
    passed = max(primitives.values()) < 1e-6 and full["max_rel_error"] < 1e-4
    report = {
        "primitive_max_rel_error": max(primitives.values()),
        "primitives": primitives,
        "full_model": full,
        "passed": passed,
    }
    print(json.dumps(report, indent=1, sort_keys=True))
    if not passed:
        raise DivergenceError("gradient audit exceeded tolerance")
    return 0


def _train_config_from_args(args) -> TrainConfig:
    if args.config:
        config = TrainConfig.from_json(json.loads(Path(args.config).read_text()))
    else:
        config = TrainConfig()
    for name in ("epochs", "batch_size", "lr", "clip", "hidden", "k_hops", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, name, value)
    if getattr(args, "stress_feedback", False):
        config.stress_feedback = True
    for lam in ("lambda_s", "lambda_rf2", "lambda_p", "lambda_lap"):
        value = getattr(args, lam, None)
        if value is not None:
            setattr(config.weights, lam, value)
    return config


def _split_cases_lists(index, cases, config):
    assignment = _split_from_index(index, len(cases), config)

    def take(idx):
        return [cases[i] for i in idx]

    return assignment, take(assignment.train), take(assignment.val), take(assignment.test)


def cmd_train(args) -> int:
    started = time.time()
    campaign_dir = Path(args.campaign)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    index, cases = _load_campaign(campaign_dir)
    config = _train_config_from_args(args)
    assignment, train_set, val_set, _ = _split_cases_lists(index, cases, config)
    if not val_set:
        raise DataValidationError("split produced no validation cases")

    history_rows: list[dict] = []

    def log(row: dict) -> None:
        history_rows.append(row)
        if args.verbose:
            print(
                f"epoch {row['epoch']:4d} train {row['train_loss']:.6e} "
                f"val {row['val_loss']:.6e} lr {row['lr']:.3e}",
                file=sys.stderr,
            )

    result = train(train_set, val_set, config, kind=args.model, log=log)
    ckpt_dir = out_dir / "checkpoint"
    save_checkpoint(ckpt_dir, result, args.model)
    _write_csv(
        out_dir / "history.csv",
        ["epoch", "train_loss", "val_loss", "lr"],
        [[r["epoch"], r["train_loss"], r["val_loss"], r["lr"]] for r in result.history],
    )
    _write_json(out_dir / "split.json", assignment.to_json())
    if not args.no_figures:
        from .figures import save_history_figure

        save_history_figure(result.history, out_dir / "history.png")
    _write_run_manifest(
        out_dir,
        "train",
        {"config": config.to_json(), "model": args.model, "campaign": str(campaign_dir)},
        [str(campaign_dir)],
        ["checkpoint", "history.csv", "split.json"],
        started,
    )
    summary = {
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "checkpoint": str(ckpt_dir),
    }
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params, stats, config, manifest = load_checkpoint(args.checkpoint)
    index, cases = _load_campaign(Path(args.campaign))
    assignment, train_set, val_set, test_set = _split_cases_lists(index, cases, config)
    subset = {
        "train": train_set,
        "val": val_set,
        "test": test_set,
        "all": cases,
    }[args.split]
    if not subset:
        raise DataValidationError(f"split '{args.split}' holds no cases")
    metrics = evaluate(params, stats, config.surrogate, subset)
    payload = metrics.to_json()
    _write_json(out_dir / "metrics.json", payload)
    if not args.no_figures:
        from .figures import save_metrics_figure

        save_metrics_figure(payload, out_dir / "metrics.png")
    _write_run_manifest(
        out_dir,
        "eval",
        {"checkpoint": str(args.checkpoint), "split": args.split},
        [str(args.checkpoint), str(args.campaign)],
        ["metrics.json"],
        started,
    )
    print(json.dumps(payload, indent=1, sort_keys=True))
    return 0


def _save_rollout_container(
    directory: Path, case: CaseTrajectory, result: RolloutResult
) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    blobs = []
    for name, arr in (
        ("u", result.u),
        ("s", result.s),
        ("peeq", result.peeq),
        ("rf2", result.rf2),
        ("u_norm", result.u_norm),
        ("s_norm", result.s_norm),
        ("peeq_norm", result.peeq_norm),
        ("rf2_norm", result.rf2_norm),
    ):
        blobs.append(write_array_blob(directory / f"{name}.bin", arr))
    _write_json(
        directory / "manifest.json",
        {
            "schema_version": 1,
            "type": "rollout_result",
            "n_nodes": case.n_nodes,
            "n_elems": case.n_elems,
            "n_frames": case.n_frames,
            "dtype": "f64",
            "endianness": "little",
            "blobs": blobs,
        },
    )


def cmd_rollout(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params, stats, config, manifest = load_checkpoint(args.checkpoint)
    case = load_case(args.case)
    result = rollout(case, params, stats, config.surrogate, mode=args.mode)
    _save_rollout_container(out_dir / "prediction", case, result)
    curve = force_deflection_curve(case.coords, result.u, result.rf2)
    _write_csv(
        out_dir / "force_deflection.csv",
        ["midspan_deflection_mm", "rf2_kn"],
        [list(row) for row in curve],
    )
    if not args.no_figures:
        from .figures import save_force_deflection_figure

        reference = force_deflection_curve(case.coords, case.u, case.rf2)
        save_force_deflection_figure(
            curve, out_dir / "force_deflection.png", reference
        )
    _write_run_manifest(
        out_dir,
        "rollout",
        {"checkpoint": str(args.checkpoint), "case": str(args.case), "mode": args.mode},
        [str(args.checkpoint), str(args.case)],
        ["prediction", "force_deflection.csv"],
        started,
    )
    print(json.dumps({"out": str(out_dir), "frames": case.n_frames}))
    return 0


def cmd_ablate(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    index, cases = _load_campaign(Path(args.campaign))
    config = _train_config_from_args(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    assignment, train_set, val_set, test_set = _split_cases_lists(index, cases, config)
    if not test_set:
        raise DataValidationError("split produced no test cases")

    def log(row: dict) -> None:
        if args.verbose:
            print(
                f"epoch {row['epoch']:4d} train {row['train_loss']:.6e} "
                f"val {row['val_loss']:.6e}",
                file=sys.stderr,
            )

    table = ablate(train_set, val_set, test_set, config, seeds, log=log)
    _write_json(out_dir / "ablation.json", table)
    summary = table["summary"]
    _write_csv(
        out_dir / "ablation.csv",
        ["model", "stress_rmse", "peeq_rmse"],
        [
            [
                "single_graph",
                summary["stress_rmse"]["single_median"],
                summary["peeq_rmse"]["single_median"],
            ],
            [
                "dual_graph",
                summary["stress_rmse"]["dual_median"],
                summary["peeq_rmse"]["dual_median"],
            ],
            [
                "relative_reduction_percent",
                summary["stress_rmse"]["reduction_percent"],
                summary["peeq_rmse"]["reduction_percent"],
            ],
        ],
    )
    _write_csv(
        out_dir / "ablation_seeds.csv",
        ["seed", "model", "stress_rmse", "peeq_rmse", "n_params"],
        [
            [row["seed"], kind, row[kind]["stress_rmse"], row[kind]["peeq_rmse"], row[kind]["n_params"]]
            for row in table["seeds"]
            for kind in ("single", "dual")
        ],
    )
    if not args.no_figures:
        from .figures import save_ablation_figure

        save_ablation_figure(table, out_dir / "ablation.png")
    _write_run_manifest(
        out_dir,
        "ablate",
        {"config": config.to_json(), "seeds": seeds, "campaign": str(args.campaign)},
        [str(args.campaign)],
        ["ablation.json", "ablation.csv", "ablation_seeds.csv"],
        started,
    )
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file mirroring TrainConfig")
    parser.add_argument("--epochs", type=int, default=None, help="default 1000")
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=None, help="cases per batch, default 8")
    parser.add_argument("--lr", type=float, default=None, help="default 3e-3")
    parser.add_argument("--clip", type=float, default=None, help="global grad-norm cap, default 0.5")
    parser.add_argument("--hidden", type=int, default=None, help="hidden size, default 256")
    parser.add_argument("--k-hops", dest="k_hops", type=int, default=None, help="Chebyshev order, default 2")
    parser.add_argument("--seed", type=int, default=None, help="default 0")
    parser.add_argument("--stress-feedback", action="store_true", help="feed previous stress back as a node feature")
    parser.add_argument("--lambda-s", dest="lambda_s", type=float, default=None)
    parser.add_argument("--lambda-rf2", dest="lambda_rf2", type=float, default=None)
    parser.add_argument("--lambda-p", dest="lambda_p", type=float, default=None)
    parser.add_argument("--lambda-lap", dest="lambda_lap", type=float, default=None)
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("--no-figures", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshgru",
        description="Dual-graph recurrent surrogate for hex-mesh FE trajectories.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic bending campaign")
    p.add_argument("--out", default=str(_output_root() / "campaign"))
    p.add_argument("--count", type=int, default=190, help="number of cases")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mesh-scale", choices=("full", "tiny"), default="full")
    p.add_argument("--frames", type=int, default=21)
    p.add_argument("--offsets", help="explicit pairs o1:o2,o1:o2,... in mm")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("split", help="assign train/val/test at case level")
    p.add_argument("--campaign", required=True)
    p.add_argument("--ratios", default="0.7,0.15,0.15")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("graph-stats", help="node/edge/degree histograms for a case")
    p.add_argument("--case", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_graph_stats)

    p = sub.add_parser("project-study", help="element->node->element attenuation report")
    p.add_argument("--case", required=True)
    p.add_argument("--frame", type=int, default=-1)
    p.add_argument("--out", default=str(_output_root() / "project_study"))
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_project_study)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--hidden", type=int, default=6)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("train", help="train the surrogate on a campaign")
    p.add_argument("--campaign", required=True)
    p.add_argument("--out", default=str(_output_root() / "run"))
    p.add_argument("--model", choices=("dual", "single"), default="dual")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--campaign", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--out", default=str(_output_root() / "eval"))
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("rollout", help="predict one case's trajectory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--mode", choices=("free", "teacher"), default="free")
    p.add_argument("--out", default=str(_output_root() / "rollout"))
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("ablate", help="dual vs single-graph comparison")
    p.add_argument("--campaign", required=True)
    p.add_argument("--out", default=str(_output_root() / "ablation"))
    p.add_argument("--seeds", default="0,1,2")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DivergenceError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 4
    except (DataValidationError, FileNotFoundError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 3
    except MeshGruError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
