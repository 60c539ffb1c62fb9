"""Command-line entry point: data generation, two-stage training, baseline
training, evaluation, and latent export, all driven by one JSON config.

Thread environment variables are pinned before numpy loads, so the heavy
modules are imported lazily inside the command handlers. Exit codes are a
stable contract: 0 ok, 2 config error, 3 IO or data error, 4 missing
dependency artifact, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISSING_ARTIFACT = 4
EXIT_NUMERICAL = 5

THREADS_ENV = "DISCRETE_POLICY_THREADS"


def _pin_threads() -> None:
    n = os.environ.get(THREADS_ENV, "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="discrete-policy",
        description="Quantized action chunks with latent diffusion on a 2-D "
                    "multi-task benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None,
                       help="JSON run config; defaults apply when omitted")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override a config field, e.g. --set codebook.num_codes=256")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")

    p = sub.add_parser("gen-data", help="generate the scripted demo dataset")
    common(p)
    p.add_argument("--out", required=True, help="dataset directory to write")

    p = sub.add_parser("train-vae", help="stage 1: fit the quantized chunk autoencoder")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory to write")

    p = sub.add_parser("train-ldm", help="stage 2: fit the latent noise predictor")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--vae", required=True, help="stage-1 checkpoint directory")
    p.add_argument("--out", required=True, help="checkpoint directory to write")

    p = sub.add_parser("train-baseline", help="action-space diffusion baseline")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory to write")

    p = sub.add_parser("eval", help="roll out a checkpoint and report success rates")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--out", required=True, help="report directory to write")
    p.add_argument("--episodes", type=int, default=None,
                   help="episodes per task (default from config)")

    p = sub.add_parser("export", help="write encoder latents and codes as CSV")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="CSV path to write")
    p.add_argument("--pca2", action="store_true",
                   help="append two principal-component columns and a scatter plot")
    p.add_argument("--stride", type=int, default=None,
                   help="chunk stride (default: the horizon, non-overlapping)")
    return parser


def _load_run_config(args):
    from .config import load_config

    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _write_metrics(out_dir: Path, metrics: list[dict]) -> None:
    lines = [json.dumps(m, sort_keys=True) for m in metrics]
    (out_dir / "metrics.jsonl").write_text("\n".join(lines) + "\n")


def _load_demos(data_dir: str):
    from .bench import load_dataset

    return load_dataset(data_dir)


def _cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    from .bench import generate_roster_demos, task_roster, write_dataset

    roster = task_roster(cfg.n_tasks)
    demos = generate_roster_demos(roster, cfg.demos_per_task, cfg.seed)
    for task in roster:
        n = sum(1 for d in demos if d.task_id == task.task_id)
        print(f"task {task.task_id} ({task.name}): {n} demos")
    write_dataset(args.out, demos)
    print(f"wrote {len(demos)} demos to {args.out}")
    return EXIT_OK


def _cmd_train_vae(args) -> int:
    cfg = _load_run_config(args)
    from .config import config_to_dict, vae_config
    from .figures import save_loss_curves
    from .runtime import PolicyCheckpoint, save_checkpoint
    from .train import train_stage1

    demos = _load_demos(args.data)
    from .bench import task_roster

    roster = task_roster(cfg.n_tasks)
    result = train_stage1(
        demos, roster, vae_config(cfg),
        steps=cfg.training.stage1_steps,
        batch_size=cfg.optimizer.batch_stage1,
        lr=cfg.optimizer.lr_stage1,
        seed=cfg.seed,
        log_every=cfg.training.log_every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = PolicyCheckpoint(kind="vae", stats=result.stats, vae=result.vae,
                            roster_size=cfg.n_tasks, seed=cfg.seed,
                            run_config=config_to_dict(cfg))
    save_checkpoint(out, ckpt)
    _write_metrics(out, result.metrics)
    save_loss_curves(result.metrics, out / "loss_curve.png", "stage 1")
    final = result.metrics[-1]
    print(f"stage 1 done in {result.elapsed_s:.0f}s: "
          f"eval L1 {final['eval_l1']:.4f}, perplexity {final['eval_perplexity']:.1f}")
    print(f"checkpoint written to {out}")
    return EXIT_OK


def _cmd_train_ldm(args) -> int:
    cfg = _load_run_config(args)
    from .config import config_to_dict, policy_diffusion_config
    from .figures import save_loss_curves
    from .runtime import PolicyCheckpoint, load_checkpoint, save_checkpoint
    from .train import train_stage2

    vae_dir = Path(args.vae)
    if not (vae_dir / "manifest.json").exists():
        print(f"error: no stage-1 checkpoint at {vae_dir}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    vae_ckpt = load_checkpoint(vae_dir)
    if vae_ckpt.vae is None:
        print(f"error: checkpoint at {vae_dir} has no chunk autoencoder",
              file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    demos = _load_demos(args.data)
    from .bench import task_roster

    roster = task_roster(cfg.n_tasks)
    result = train_stage2(
        vae_ckpt.vae, demos, vae_ckpt.stats, roster, policy_diffusion_config(cfg),
        steps=cfg.training.stage2_steps,
        batch_size=cfg.optimizer.batch_stage2,
        lr=cfg.optimizer.lr_stage2,
        seed=cfg.seed,
        stride=cfg.training.latent_stride,
        log_every=cfg.training.log_every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = PolicyCheckpoint(kind="policy", stats=vae_ckpt.stats, vae=vae_ckpt.vae,
                            model=result.model, schedule=result.schedule,
                            roster_size=cfg.n_tasks, seed=cfg.seed,
                            latent_mean=result.latent_mean,
                            latent_std=result.latent_std,
                            run_config=config_to_dict(cfg))
    save_checkpoint(out, ckpt)
    _write_metrics(out, result.metrics)
    save_loss_curves(result.metrics, out / "loss_curve.png", "stage 2")
    print(f"stage 2 done in {result.elapsed_s:.0f}s: "
          f"final denoise MSE {result.metrics[-1]['denoise_mse']:.4f}")
    print(f"checkpoint written to {out}")
    return EXIT_OK


def _cmd_train_baseline(args) -> int:
    cfg = _load_run_config(args)
    from .config import baseline_diffusion_config, baseline_step_budget, config_to_dict
    from .figures import save_loss_curves
    from .runtime import PolicyCheckpoint, save_checkpoint
    from .train import train_baseline

    demos = _load_demos(args.data)
    from .bench import task_roster

    roster = task_roster(cfg.n_tasks)
    result = train_baseline(
        demos, roster, baseline_diffusion_config(cfg), cfg.horizon,
        steps=baseline_step_budget(cfg),
        batch_size=cfg.optimizer.batch_baseline,
        lr=cfg.optimizer.lr_baseline,
        seed=cfg.seed,
        log_every=cfg.training.log_every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = PolicyCheckpoint(kind="baseline", stats=result.stats, model=result.model,
                            schedule=result.schedule, roster_size=cfg.n_tasks,
                            seed=cfg.seed, run_config=config_to_dict(cfg))
    save_checkpoint(out, ckpt)
    _write_metrics(out, result.metrics)
    save_loss_curves(result.metrics, out / "loss_curve.png", "baseline")
    print(f"baseline done in {result.elapsed_s:.0f}s: "
          f"final denoise MSE {result.metrics[-1]['denoise_mse']:.4f}")
    print(f"checkpoint written to {out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    from .bench import task_roster
    from .figures import save_success_bars
    from .runtime import load_checkpoint, run_episodes, success_rate
    from .vq import codebook_usage, perplexity, reset_usage

    ckpt_dir = Path(args.checkpoint)
    if not (ckpt_dir / "manifest.json").exists():
        print(f"error: no checkpoint at {ckpt_dir}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    ckpt = load_checkpoint(ckpt_dir)
    if ckpt.model is None:
        print(f"error: checkpoint kind {ckpt.kind!r} cannot run inference",
              file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    n_episodes = args.episodes if args.episodes is not None else cfg.eval.n_episodes
    roster = task_roster(ckpt.roster_size or cfg.n_tasks)
    if ckpt.vae is not None:
        reset_usage(ckpt.vae.codebook)
    per_task = {}
    rates = []
    for task in roster:
        logs = run_episodes(ckpt, task, n_episodes, seed=cfg.seed,
                            n_exec=cfg.n_exec, max_steps=cfg.eval.max_steps)
        rate = success_rate(logs)
        rates.append(rate)
        entry = {"name": task.name, "success_rate": rate, "episodes": n_episodes}
        if task.obstacle is not None:
            modes = {"left": 0, "right": 0, "none": 0}
            for log in logs:
                modes[log.mode] += 1
            entry["modes"] = modes
        per_task[f"T{task.task_id}"] = entry
        print(f"T{task.task_id} {task.name}: {rate:.2f}")
    if ckpt.vae is not None:
        perp = perplexity(codebook_usage(ckpt.vae.codebook))
    else:
        perp = None
    report = {
        "per_task": per_task,
        "average_success": float(sum(rates) / len(rates)),
        "episodes_per_task": n_episodes,
        "code_perplexity": perp,
        "checkpoint_kind": ckpt.kind,
        "seed": cfg.seed,
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    rows = ["task,name,success_rate,mode_left,mode_right,mode_none"]
    for key, entry in per_task.items():
        modes = entry.get("modes", {})
        rows.append(f"{key},{entry['name']},{entry['success_rate']:.4f},"
                    f"{modes.get('left', '')},{modes.get('right', '')},{modes.get('none', '')}")
    (out / "report.csv").write_text("\n".join(rows) + "\n")
    save_success_bars(per_task, report["average_success"],
                      out / "success_rates.png", f"{ckpt.kind} checkpoint")
    print(f"average success {report['average_success']:.2f}; report in {out}")
    return EXIT_OK


def _cmd_export(args) -> int:
    _load_run_config(args)  # validates config/overrides even though unused below
    from .figures import save_latent_scatter
    from .runtime import export_latents, load_checkpoint

    ckpt_dir = Path(args.checkpoint)
    if not (ckpt_dir / "manifest.json").exists():
        print(f"error: no checkpoint at {ckpt_dir}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    ckpt = load_checkpoint(ckpt_dir)
    if ckpt.vae is None:
        print(f"error: checkpoint kind {ckpt.kind!r} has no chunk autoencoder",
              file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    demos = _load_demos(args.data)
    out = Path(args.out)
    if out.parent != Path("."):
        out.parent.mkdir(parents=True, exist_ok=True)
    rows = export_latents(ckpt, demos, out, stride=args.stride, pca2=args.pca2)
    if args.pca2:
        import numpy as np

        table = np.genfromtxt(out, delimiter=",", names=True)
        coords = np.stack([table["pca_x"], table["pca_y"]], axis=1)
        save_latent_scatter(coords, table["task_id"].astype(int),
                            out.with_suffix(".png"), "latent space (2-D projection)")
    print(f"wrote {rows} rows to {out}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-vae": _cmd_train_vae,
    "train-ldm": _cmd_train_ldm,
    "train-baseline": _cmd_train_baseline,
    "eval": _cmd_eval,
    "export": _cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    _pin_threads()
    args = _build_parser().parse_args(argv)

    from .autodiff import NonFiniteError
    from .bench import DatasetFormatError
    from .config import ConfigError
    from .runtime import CheckpointFormatError

    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as e:
        last_good = getattr(e, "last_good_step", None)
        suffix = f"; last good step {last_good}" if last_good is not None else ""
        print(f"numerical failure: {e}{suffix}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except (DatasetFormatError, CheckpointFormatError) as e:
        print(f"unreadable artifact: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"IO error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
