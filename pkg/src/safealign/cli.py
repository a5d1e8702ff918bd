"""Command-line pipeline: synth, pretrain, finetune, evaluate, sweep.

Every command is deterministic given its flags: identical invocations
produce byte-identical artifacts (no timestamps anywhere).  Values
resolve as flag > config file > built-in default.  Exit codes: 0 on
success, 2 for usage or input errors, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import align, data, envs, evaluation, nn

METHOD_HYBRID = "hybrid"
METHOD_PPL = "ppl"
METHOD_BC = "bc"
METHOD_REFERENCE = "reference"

LAMBDA_GRID = [0.1, 1.0, 1.6, 2.0]
BETA_GRID = [0.05, 0.2, 0.6, 0.95]


class UsageError(Exception):
    """Bad flags or missing inputs; maps to exit code 2."""


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _write_jsonl(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record))
            fh.write("\n")


def _parse_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip() != ""]


def _parse_ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip() != ""]


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    with open(p, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _resolve(args, cfg: dict, key: str, default):
    """Flag > config file > default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in cfg:
        return cfg[key]
    return default


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing required {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


# --- synth ------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_config_file(args.config)
    env_name = _resolve(args, cfg, "env", "speedlimit1d")
    n = int(_resolve(args, cfg, "n", 500))
    seed = int(_resolve(args, cfg, "seed", 0))
    out = _resolve(args, cfg, "out", None)
    if out is None:
        raise UsageError("synth requires --out")
    if n <= 0:
        raise UsageError(f"--n must be positive, got {n}")

    try:
        env = envs.make_env(env_name)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    dataset = envs.synthesize_dataset(env, n, seed=seed)
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    data.save_trajectories(out_path, dataset)
    _write_json(out_path.with_suffix(out_path.suffix + ".meta.json"),
                {"command": "synth", "env": env_name, "n": n, "seed": seed})

    rewards = np.array([t.cumulative_reward for t in dataset])
    costs = np.array([t.cumulative_cost for t in dataset])
    print(f"wrote {len(dataset)} trajectories to {out_path}")
    print(
        f"reward min/median/max: {rewards.min():.3f} / "
        f"{np.median(rewards):.3f} / {rewards.max():.3f}"
    )
    print(
        f"cost   min/median/max: {costs.min():.3f} / "
        f"{np.median(costs):.3f} / {costs.max():.3f}"
    )
    return 0


# --- pretrain ------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = _load_config_file(args.config)
    dataset_path = _require_file(_resolve(args, cfg, "dataset", None), "dataset file")
    out = _resolve(args, cfg, "out", None)
    if out is None:
        raise UsageError("pretrain requires --out")
    epochs = int(_resolve(args, cfg, "epochs", 60))
    lr = float(_resolve(args, cfg, "lr", 3e-4))
    seed = int(_resolve(args, cfg, "seed", 0))
    fraction = float(_resolve(args, cfg, "fraction", 0.3))
    hidden = _resolve(args, cfg, "hidden", "64,64")
    hidden_sizes = _parse_ints(hidden) if isinstance(hidden, str) else list(hidden)

    dataset = data.load_trajectories(dataset_path)
    subset = align.select_high_reward(dataset, fraction)
    policy, losses = align.pretrain_bc(
        subset, epochs=epochs, hidden_sizes=hidden_sizes, lr=lr, seed=seed
    )

    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    nn.save_policy(out_path, policy, rng_seed=seed)
    _write_jsonl(
        out_path.with_suffix(".loss.jsonl"),
        ({"step": i, "loss": v} for i, v in enumerate(losses)),
    )
    _write_json(
        out_path.with_suffix(".meta.json"),
        {"command": "pretrain", "dataset": str(dataset_path), "epochs": epochs,
         "lr": lr, "hidden_sizes": hidden_sizes, "fraction": fraction, "seed": seed},
    )
    print(f"wrote reference policy to {out_path} (final BC loss {losses[-1]:.5f})")
    return 0


# --- finetune -----------------------------------------------------------------

def _align_config(args, cfg, tau: float, seed: int, strategy: str) -> align.AlignConfig:
    return align.AlignConfig(
        beta=float(_resolve(args, cfg, "beta", 0.05)),
        lam=float(_resolve(args, cfg, "lam", 1.6)),
        lr=float(_resolve(args, cfg, "lr", 3e-4)),
        batch_size=int(_resolve(args, cfg, "batch", 4)),
        iterations=int(_resolve(args, cfg, "iterations", 20000)),
        tau=tau,
        counterfactual_strategy=strategy,
        seed=seed,
        eval_interval=int(_resolve(args, cfg, "eval_interval", 2000)),
        eval_rollouts=int(_resolve(args, cfg, "eval_rollouts", 10)),
        epsilon_cost=float(_resolve(args, cfg, "epsilon", 1e-3)),
        d_max=float(_resolve(args, cfg, "d_max", 1.0)),
        checkpoint_interval=int(_resolve(args, cfg, "checkpoint_interval", 0)),
    )


def _run_dir(out_root: Path, env_name: str, tau: float, seed: int) -> Path:
    return out_root / env_name / f"tau_{tau:g}" / f"seed_{seed}"


def cmd_finetune(args) -> int:
    cfg = _load_config_file(args.config)
    env_name = _resolve(args, cfg, "env", "speedlimit1d")
    dataset_path = _require_file(_resolve(args, cfg, "dataset", None), "dataset file")
    ref_path = _require_file(_resolve(args, cfg, "ref", None), "reference checkpoint")
    out = _resolve(args, cfg, "out", None)
    if out is None:
        raise UsageError("finetune requires --out")
    baseline = _resolve(args, cfg, "baseline", METHOD_HYBRID)
    if baseline not in (METHOD_HYBRID, METHOD_PPL, METHOD_BC):
        raise UsageError(f"--baseline must be one of hybrid, ppl, bc; got {baseline!r}")
    strategy = _resolve(args, cfg, "strategy", align.STRATEGY_POLICY)
    taus_text = _resolve(args, cfg, "tau", None)
    taus = _parse_floats(taus_text) if taus_text is not None else envs.DEFAULT_TAUS[env_name]
    seeds_text = _resolve(args, cfg, "seeds", "0,1,2,3,4")
    seeds = _parse_ints(seeds_text) if isinstance(seeds_text, str) else list(seeds_text)
    n_p = int(_resolve(args, cfg, "np", 100))
    n_np = int(_resolve(args, cfg, "nnp", 20))

    try:
        env = envs.make_env(env_name)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    dataset = data.load_trajectories(dataset_path)
    pi_ref, _ = nn.load_policy(ref_path)
    out_root = Path(out)

    for tau in taus:
        for seed in seeds:
            sets = data.build_preference_sets(
                dataset, tau, n_p=n_p, n_np=n_np, seed=seed, source_id=str(dataset_path)
            )
            if sets.shortfall_preferred or sets.shortfall_non_preferred:
                print(
                    f"warning: preference-set shortfall at tau={tau:g} seed={seed} "
                    f"(|D_p|={len(sets.preferred)}, |D_np|={len(sets.non_preferred)})",
                    file=sys.stderr,
                )
            config = _align_config(args, cfg, tau, seed, strategy)
            run_dir = _run_dir(out_root, env_name, tau, seed)
            run_dir.mkdir(parents=True, exist_ok=True)
            data.save_manifest(run_dir / "manifest.json", sets)

            if baseline == METHOD_BC:
                policy, losses = align.pretrain_bc(
                    list(sets.preferred),
                    epochs=int(_resolve(args, cfg, "epochs", 60)),
                    hidden_sizes=list(pi_ref.trunk.hidden_sizes),
                    lr=config.lr,
                    seed=seed,
                )
                nn.save_policy(run_dir / f"policy_{baseline}.json", policy, rng_seed=seed)
                _write_jsonl(
                    run_dir / f"history_{baseline}.jsonl",
                    ({"iteration": i, "loss": v} for i, v in enumerate(losses)),
                )
            else:
                trainer = align.train_ppl if baseline == METHOD_PPL else align.finetune
                result = trainer(
                    pi_ref, list(sets.preferred), list(sets.non_preferred), config,
                    env=env, checkpoint_dir=run_dir if config.checkpoint_interval > 0 else None,
                )
                nn.save_policy(run_dir / f"policy_{baseline}.json", result.policy, rng_seed=seed)
                _write_jsonl(run_dir / f"history_{baseline}.jsonl", result.history)
                _write_json(run_dir / f"mismatch_{baseline}.json", result.mismatch.as_dict())

            _write_json(
                run_dir / f"config_{baseline}.json",
                {"env": env_name, "baseline": baseline, "n_p": n_p, "n_np": n_np, **asdict(config)},
            )
            print(f"finished {baseline} run: tau={tau:g} seed={seed} -> {run_dir}")
    return 0


# --- evaluate -----------------------------------------------------------------

def _mean_row(method: str, tau: float, rows: list[dict]) -> dict:
    ncost = float(np.mean([r["normalized_cost"] for r in rows]))
    return {
        "method": method,
        "tau": tau,
        "seed": "mean",
        "mean_reward": float(np.mean([r["mean_reward"] for r in rows])),
        "mean_cost": float(np.mean([r["mean_cost"] for r in rows])),
        "normalized_reward": float(np.mean([r["normalized_reward"] for r in rows])),
        "normalized_cost": ncost,
        "cvar_cost": float(np.mean([r["cvar_cost"] for r in rows])),
        "is_safe": ncost <= 1.0,
    }


def cmd_evaluate(args) -> int:
    cfg = _load_config_file(args.config)
    env_name = _resolve(args, cfg, "env", "speedlimit1d")
    dataset_path = _require_file(_resolve(args, cfg, "dataset", None), "dataset file")
    ref_path = _require_file(_resolve(args, cfg, "ref", None), "reference checkpoint")
    out = _resolve(args, cfg, "out", None)
    if out is None:
        raise UsageError("evaluate requires --out")
    taus_text = _resolve(args, cfg, "tau", None)
    taus = _parse_floats(taus_text) if taus_text is not None else envs.DEFAULT_TAUS[env_name]
    seeds_text = _resolve(args, cfg, "seeds", "0,1,2,3,4")
    seeds = _parse_ints(seeds_text) if isinstance(seeds_text, str) else list(seeds_text)
    methods_text = _resolve(args, cfg, "methods", METHOD_HYBRID)
    methods = [m.strip() for m in methods_text.split(",")] if isinstance(methods_text, str) else methods_text
    n_rollouts = int(_resolve(args, cfg, "rollouts", 100))
    epsilon = float(_resolve(args, cfg, "epsilon", 1e-3))
    cvar_alpha = float(_resolve(args, cfg, "cvar_alpha", evaluation.DEFAULT_CVAR_ALPHA))

    try:
        env = envs.make_env(env_name)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    corpus = data.load_trajectories(dataset_path)
    pi_ref, _ = nn.load_policy(ref_path)
    out_root = Path(out)

    rows: list[dict] = []
    for tau in taus:
        stats = evaluation.NormalizationStats.from_corpus(corpus, kappa=tau)
        per_method: dict[str, list[dict]] = {}
        for seed in seeds:
            report = evaluation.evaluate(
                pi_ref, env, n_rollouts, kappa=tau, epsilon=epsilon,
                stats=stats, seed=seed, cvar_alpha=cvar_alpha,
            )
            row = {"method": METHOD_REFERENCE, "tau": tau, "seed": seed, **_report_columns(report)}
            rows.append(row)
            per_method.setdefault(METHOD_REFERENCE, []).append(row)
            for method in methods:
                ckpt = _run_dir(out_root, env_name, tau, seed) / f"policy_{method}.json"
                if not ckpt.exists():
                    raise UsageError(f"missing checkpoint: {ckpt}")
                policy, _ = nn.load_policy(ckpt)
                report = evaluation.evaluate(
                    policy, env, n_rollouts, kappa=tau, epsilon=epsilon,
                    stats=stats, seed=seed, cvar_alpha=cvar_alpha,
                )
                run_dir = _run_dir(out_root, env_name, tau, seed)
                evaluation.write_report(
                    run_dir / f"report_{method}.json",
                    report,
                    {"env": env_name, "method": method, "tau": tau, "seed": seed,
                     "rollouts": n_rollouts, "epsilon": epsilon, "cvar_alpha": cvar_alpha,
                     "r_min": stats.r_min, "r_max": stats.r_max},
                )
                row = {"method": method, "tau": tau, "seed": seed, **_report_columns(report)}
                rows.append(row)
                per_method.setdefault(method, []).append(row)
        for method, mrows in per_method.items():
            rows.append(_mean_row(method, tau, mrows))

    table_path = out_root / f"table_{env_name}.csv"
    table_path.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_table(table_path, rows)
    print(f"wrote {len(rows)} rows to {table_path}")
    return 0


def _report_columns(report: evaluation.EvalReport) -> dict:
    return {
        "mean_reward": report.mean_reward,
        "mean_cost": report.mean_cost,
        "normalized_reward": report.normalized_reward,
        "normalized_cost": report.normalized_cost,
        "cvar_cost": report.cvar_cost,
        "is_safe": report.is_safe,
    }


# --- sweep --------------------------------------------------------------------

def cmd_sweep(args) -> int:
    cfg = _load_config_file(args.config)
    env_name = _resolve(args, cfg, "env", "speedlimit1d")
    out = _resolve(args, cfg, "out", None)
    if out is None:
        raise UsageError("sweep requires --out")
    out_root = Path(out)
    checkpoint = _resolve(args, cfg, "checkpoint", None)

    try:
        env = envs.make_env(env_name)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    if checkpoint is not None:
        # Fixed-policy re-scoring across cost budgets.
        ckpt_path = _require_file(checkpoint, "checkpoint")
        dataset_path = _require_file(_resolve(args, cfg, "dataset", None), "dataset file")
        taus_text = _resolve(args, cfg, "tau", None)
        taus = _parse_floats(taus_text) if taus_text is not None else envs.DEFAULT_TAUS[env_name]
        seed = int(_resolve(args, cfg, "seed", 0))
        n_rollouts = int(_resolve(args, cfg, "rollouts", 100))
        corpus = data.load_trajectories(dataset_path)
        policy, _ = nn.load_policy(ckpt_path)
        rows = []
        for tau in taus:
            stats = evaluation.NormalizationStats.from_corpus(corpus, kappa=tau)
            report = evaluation.evaluate(
                policy, env, n_rollouts, kappa=tau, stats=stats, seed=seed
            )
            rows.append({"method": "fixed_policy", "tau": tau, "seed": seed,
                         **_report_columns(report)})
        table_path = out_root / f"tau_sweep_{env_name}.csv"
        table_path.parent.mkdir(parents=True, exist_ok=True)
        evaluation.write_table(table_path, rows)
        print(f"wrote {len(rows)} rows to {table_path}")
        return 0

    dataset_path = _require_file(_resolve(args, cfg, "dataset", None), "dataset file")
    ref_path = _require_file(_resolve(args, cfg, "ref", None), "reference checkpoint")
    lambdas = _parse_floats(_resolve(args, cfg, "lambdas", ",".join(str(x) for x in LAMBDA_GRID)))
    betas = _parse_floats(_resolve(args, cfg, "betas", ",".join(str(x) for x in BETA_GRID)))
    tau_text = _resolve(args, cfg, "tau", None)
    tau = _parse_floats(tau_text)[0] if tau_text is not None else envs.default_tau(env_name)
    seed = int(_resolve(args, cfg, "seed", 0))
    n_p = int(_resolve(args, cfg, "np", 100))
    n_np = int(_resolve(args, cfg, "nnp", 20))
    n_rollouts = int(_resolve(args, cfg, "rollouts", 100))

    corpus = data.load_trajectories(dataset_path)
    pi_ref, _ = nn.load_policy(ref_path)
    sets = data.build_preference_sets(corpus, tau, n_p=n_p, n_np=n_np, seed=seed,
                                      source_id=str(dataset_path))
    stats = evaluation.NormalizationStats.from_corpus(corpus, kappa=tau)

    rows = []
    for lam in lambdas:
        for beta in betas:
            config = _align_config(args, cfg, tau, seed, align.STRATEGY_POLICY)
            config = align.AlignConfig(**{**asdict(config), "lam": lam, "beta": beta})
            result = align.finetune(
                pi_ref, list(sets.preferred), list(sets.non_preferred), config, env=env
            )
            report = evaluation.evaluate(
                result.policy, env, n_rollouts, kappa=tau, stats=stats, seed=seed
            )
            rows.append({
                "method": f"lam={lam:g},beta={beta:g}",
                "tau": tau,
                "seed": seed,
                **_report_columns(report),
            })
            print(f"sweep cell lam={lam:g} beta={beta:g}: "
                  f"nreward={report.normalized_reward:.3f} ncost={report.normalized_cost:.3f}")

    table_path = out_root / f"sweep_{env_name}.csv"
    table_path.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_table(table_path, rows)
    print(f"wrote {len(rows)} rows to {table_path}")
    return 0


# --- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safealign",
        description="Offline safety alignment of control policies on toy constrained MDPs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--env", help="environment name (speedlimit1d, hazardnav2d)")
        p.add_argument("--out", help="output path or directory")
        p.add_argument("--seed", type=int, help="single seed")

    p = sub.add_parser("synth", help="synthesize an offline trajectory corpus")
    common(p)
    p.add_argument("--n", type=int, help="number of trajectories")

    p = sub.add_parser("pretrain", help="behavior-clone a reference policy")
    common(p)
    p.add_argument("--dataset", help="trajectory corpus file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", help="comma-separated hidden sizes, e.g. 64,64")
    p.add_argument("--fraction", type=float, help="top reward fraction for the BC subset")

    p = sub.add_parser("finetune", help="preference fine-tuning (and baselines)")
    common(p)
    p.add_argument("--dataset", help="trajectory corpus file")
    p.add_argument("--ref", help="reference policy checkpoint")
    p.add_argument("--tau", help="comma-separated cost budgets")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--np", type=int, help="preferred set size", dest="np")
    p.add_argument("--nnp", type=int, help="non-preferred set size")
    p.add_argument("--beta", type=float)
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int, help="trajectories per side per iteration")
    p.add_argument("--iterations", type=int)
    p.add_argument("--strategy", choices=[align.STRATEGY_POLICY, align.STRATEGY_MIXED])
    p.add_argument("--baseline", choices=[METHOD_HYBRID, METHOD_PPL, METHOD_BC])
    p.add_argument("--epochs", type=int, help="BC epochs (baseline bc only)")
    p.add_argument("--eval-interval", type=int, dest="eval_interval")
    p.add_argument("--eval-rollouts", type=int, dest="eval_rollouts")
    p.add_argument("--d-max", type=float, dest="d_max",
                   help="mixed strategy: max z-normalized neighbor distance")
    p.add_argument("--checkpoint-interval", type=int, dest="checkpoint_interval",
                   help="write an intermediate checkpoint every N iterations")

    p = sub.add_parser("evaluate", help="score checkpoints and emit the comparison table")
    common(p)
    p.add_argument("--dataset", help="trajectory corpus file (normalization stats)")
    p.add_argument("--ref", help="reference policy checkpoint")
    p.add_argument("--tau", help="comma-separated cost budgets")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--methods", help="comma-separated methods to score (default: hybrid)")
    p.add_argument("--rollouts", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--cvar-alpha", type=float, dest="cvar_alpha")

    p = sub.add_parser("sweep", help="lambda x beta grid, or fixed-policy tau re-scoring")
    common(p)
    p.add_argument("--dataset", help="trajectory corpus file")
    p.add_argument("--ref", help="reference policy checkpoint")
    p.add_argument("--lambdas", help="comma-separated SFT weights")
    p.add_argument("--betas", help="comma-separated preference temperatures")
    p.add_argument("--tau", help="cost budget (single value, or list with --checkpoint)")
    p.add_argument("--np", type=int, dest="np")
    p.add_argument("--nnp", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--rollouts", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--eval-interval", type=int, dest="eval_interval")
    p.add_argument("--eval-rollouts", type=int, dest="eval_rollouts")
    p.add_argument("--checkpoint", help="re-score this fixed policy across --tau values")

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
