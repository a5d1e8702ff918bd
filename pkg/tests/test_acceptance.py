"""Acceptance suite: one test per criterion, one printed verdict line each.

The end-to-end fine-tuning runs (criteria 5-7) share a session fixture;
with default settings the whole module takes on the order of twenty
minutes on one core.  Run it with ``pytest -s tests/test_acceptance.py``
to watch the verdict lines as they appear.
"""

import math
import time
from dataclasses import dataclass

import numpy as np
import pytest

from safealign import align, data, envs, evaluation
from safealign.align import AlignConfig, TripleBatch, alignment_loss, finetune, train_ppl
from safealign.envs import make_env, rollout, synthesize_dataset
from safealign.evaluation import NormalizationStats, cvar, evaluate, normalized_cost
from safealign.nn import (
    PolicyGraph,
    checksum,
    init_policy,
    parameters,
    policy_gradients,
    replace_parameters,
)

TAU = 15.0
SEEDS = (0, 1, 2)


def verdict(number: int, passed: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}")
    assert passed, f"criterion {number}: {detail}"


# --- criterion 1: gradient oracle ------------------------------------------------

def test_criterion_1_gradient_oracle():
    start = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    checked = 0
    for instance in range(20):
        s_dim = int(rng.integers(1, 4))
        a_dim = int(rng.integers(1, 3))
        hidden = [(4, 3), (5,), (6, 4)][instance % 3]
        theta = init_policy(s_dim, a_dim, hidden, seed=instance)
        ref = init_policy(s_dim, a_dim, hidden, seed=1000 + instance)
        n_params = sum(p.size for p in parameters(theta))
        assert n_params <= 200

        n_p, n_np = 3, 3
        triples = TripleBatch(
            states=rng.normal(size=(n_p + n_np, s_dim)),
            action_plus=rng.normal(size=(n_p + n_np, a_dim)),
            action_minus=rng.normal(size=(n_p + n_np, a_dim)),
            from_preferred=np.array([True] * n_p + [False] * n_np),
        )
        beta = float(rng.choice([0.05, 0.2, 0.6, 0.95]))
        lam = float(rng.choice([0.0, 1.0, 1.6]))

        graph = PolicyGraph(theta)
        node, _ = alignment_loss(triples, graph, ref, beta=beta, lam=lam)
        grads = policy_gradients(node, graph)

        def loss_at(arrays):
            n, _ = alignment_loss(
                triples, replace_parameters(theta, arrays), ref, beta=beta, lam=lam
            )
            return float(n.value)

        h = 1e-5
        base = parameters(theta)
        for k, p in enumerate(base):
            flat = p.reshape(-1)
            for j in range(flat.size):
                plus = [q.copy() for q in base]
                minus = [q.copy() for q in base]
                plus[k].reshape(-1)[j] += h
                minus[k].reshape(-1)[j] -= h
                fd = (loss_at(plus) - loss_at(minus)) / (2 * h)
                g = grads[k].reshape(-1)[j]
                rel = abs(g - fd) / max(1e-8, abs(g), abs(fd))
                worst = max(worst, rel)
                checked += 1
        assert worst < 1e-4, f"instance {instance}: rel err {worst:.2e}"

    elapsed = time.time() - start
    verdict(
        1,
        worst < 1e-4 and elapsed < 60.0,
        f"gradients of the hybrid loss match central differences on 20 micro-nets "
        f"({checked} entries, worst rel err {worst:.1e}, {elapsed:.1f}s)",
    )


# --- criterion 2: closed-form loss ---------------------------------------------

def test_criterion_2_closed_form_loss():
    rng = np.random.default_rng(7)
    policy = init_policy(2, 1, (8, 8), seed=11)
    triples = TripleBatch(
        states=rng.normal(size=(10, 2)),
        action_plus=rng.normal(size=(10, 1)),
        action_minus=rng.normal(size=(10, 1)),
        from_preferred=np.array([True] * 5 + [False] * 5),
    )
    worst = 0.0
    for beta in (0.05, 0.2, 0.6, 0.95):
        _, parts = alignment_loss(triples, policy, policy, beta=beta, lam=0.0)
        worst = max(
            worst,
            abs(parts["preferred_group"] - math.log(2)),
            abs(parts["non_preferred_group"] - math.log(2)),
        )
    verdict(
        2,
        worst < 1e-10,
        f"identical policies at lam=0 give ln 2 per triple group over the beta grid "
        f"(worst dev {worst:.1e})",
    )


# --- criterion 3: normalized-cost formula ----------------------------------------

def test_criterion_3_normalized_cost_formula():
    rng = np.random.default_rng(3)
    eps = 1e-3
    cases = [(0.0, 40.0), (40.0, 40.0), (34.84, 40.0)]
    cases += [(float(rng.uniform(0, 150)), float(rng.uniform(1, 150))) for _ in range(47)]
    exact = all(normalized_cost(c, k, eps) == (c + eps) / (k + eps) for c, k in cases)

    law = True
    for _ in range(500):
        k = float(rng.uniform(0.5, 120))
        c = float(rng.uniform(0, 2 * k))
        law &= (normalized_cost(c, k, eps) <= 1.0) == (c <= k)
    law &= normalized_cost(40.0, 40.0, eps) == 1.0
    verdict(
        3,
        exact and law,
        "normalized cost equals (C+eps)/(kappa+eps) on a 50-case table and "
        "the safety threshold law holds exactly",
    )


# --- criterion 4: dataset protocol ------------------------------------------------

def test_criterion_4_dataset_protocol():
    env = make_env("speedlimit1d")
    corpus = synthesize_dataset(env, 500, seed=7)
    sets = data.build_preference_sets(corpus, TAU, n_p=100, n_np=20, seed=0)
    sets.validate()
    ok = len(sets.preferred) == 100 and len(sets.non_preferred) == 20
    ok &= not sets.shortfall_preferred and not sets.shortfall_non_preferred
    ok &= all(t.cumulative_cost < TAU for t in sets.preferred)
    ok &= all(t.cumulative_cost >= TAU for t in sets.non_preferred)

    again = data.build_preference_sets(corpus, TAU, n_p=100, n_np=20, seed=0)
    ok &= [t.traj_id for t in again.preferred] == [t.traj_id for t in sets.preferred]
    ok &= [t.traj_id for t in again.non_preferred] == [t.traj_id for t in sets.non_preferred]

    # Brute-force stratification oracle: recompute the reward bins directly.
    safe = [t for t in corpus if t.cumulative_cost < TAU]
    ranked = sorted(safe, key=lambda t: (-t.cumulative_reward, t.traj_id))
    pool = ranked[: (len(ranked) + 1) // 2]
    n, q = len(pool), 5
    bounds = [0]
    for i in range(q):
        bounds.append(bounds[-1] + n // q + (1 if i < n % q else 0))
    bin_of = {}
    for b in range(q):
        for j in range(bounds[b], bounds[b + 1]):
            bin_of[pool[j].traj_id] = b
    counts = [0] * q
    for t in sets.preferred:
        counts[bin_of[t.traj_id]] += 1
    ok &= all(abs(c - 20) <= 1 for c in counts)
    verdict(
        4,
        bool(ok),
        f"preference sets (100/20) satisfy invariants, are seed-deterministic, and "
        f"match the brute-force bin counts {counts}",
    )


# --- criteria 5-7: shared end-to-end runs ------------------------------------------

@dataclass
class PipelineRun:
    ref_report: object
    tuned_reports: list
    ppl_reports: list
    tuned_mismatch: list
    mixed_mismatch: object
    tuned_meanmode_rewards: list
    ppl_meanmode_rewards: list
    seconds_per_seed: list
    gradient_updates: list
    iterations: int
    ref_checksums: list


@pytest.fixture(scope="module")
def pipeline():
    env = make_env("speedlimit1d")
    corpus = synthesize_dataset(env, 500, seed=7)
    subset = align.select_high_reward(corpus, 0.3)
    pi_ref, _ = align.pretrain_bc(subset, epochs=60, seed=0)
    stats = NormalizationStats.from_corpus(corpus, kappa=TAU)
    ref_report = evaluate(pi_ref, env, 100, kappa=TAU, stats=stats, seed=1000)

    run = PipelineRun(ref_report, [], [], [], None, [], [], [], [], 0, [])
    for seed in SEEDS:
        sets = data.build_preference_sets(corpus, TAU, 100, 20, seed=seed)
        d_p, d_np = list(sets.preferred), list(sets.non_preferred)
        config = AlignConfig(seed=seed, tau=TAU)
        run.iterations = config.iterations

        start = time.time()
        result = finetune(pi_ref, d_p, d_np, config, env=env)
        run.seconds_per_seed.append(time.time() - start)
        run.tuned_reports.append(evaluate(result.policy, env, 100, kappa=TAU, stats=stats, seed=1000))
        run.tuned_mismatch.append(result.mismatch)
        run.tuned_meanmode_rewards.append(
            rollout(env, result.policy, mode="mean", seed=123).cumulative_reward
        )
        run.gradient_updates.append(result.gradient_updates)
        run.ref_checksums.append((result.ref_checksum_before, result.ref_checksum_after))

        ppl_result = train_ppl(pi_ref, d_p, d_np, config, env=env)
        run.ppl_reports.append(evaluate(ppl_result.policy, env, 100, kappa=TAU, stats=stats, seed=1000))
        run.ppl_meanmode_rewards.append(
            rollout(env, ppl_result.policy, mode="mean", seed=123).cumulative_reward
        )

    sets = data.build_preference_sets(corpus, TAU, 100, 20, seed=SEEDS[0])
    mixed_cfg = AlignConfig(seed=SEEDS[0], tau=TAU, counterfactual_strategy="mixed")
    mixed = finetune(pi_ref, list(sets.preferred), list(sets.non_preferred), mixed_cfg, env=env)
    run.mixed_mismatch = mixed.mismatch
    return run


def test_criterion_5_end_to_end_safety_alignment(pipeline):
    ref_ncost = pipeline.ref_report.normalized_cost
    tuned_ncost = float(np.mean([r.normalized_cost for r in pipeline.tuned_reports]))
    tuned_nrew = float(np.mean([r.normalized_reward for r in pipeline.tuned_reports]))
    ratio = tuned_nrew / pipeline.ref_report.normalized_reward
    reduction = 1.0 - tuned_ncost / ref_ncost
    slowest = max(pipeline.seconds_per_seed)
    ok = (
        ref_ncost > 1.0
        and tuned_ncost <= 1.0
        and reduction >= 0.5
        and ratio >= 0.8
        and slowest <= 600.0
    )
    verdict(
        5,
        ok,
        f"3-seed means: ref ncost {ref_ncost:.2f} -> tuned {tuned_ncost:.3f} "
        f"({reduction:.0%} reduction), reward ratio {ratio:.3f}, "
        f"slowest seed {slowest:.0f}s",
    )


def test_criterion_6_sft_ablation(pipeline):
    hybrid = float(np.mean(pipeline.tuned_meanmode_rewards))
    ppl = float(np.mean(pipeline.ppl_meanmode_rewards))
    ref_cost = pipeline.ref_report.mean_cost
    hybrid_cost = float(np.mean([r.mean_cost for r in pipeline.tuned_reports]))
    ppl_cost = float(np.mean([r.mean_cost for r in pipeline.ppl_reports]))
    ok = ppl < hybrid and hybrid_cost < ref_cost and ppl_cost < ref_cost
    verdict(
        6,
        ok,
        f"dropping the SFT anchor lowers final mean-mode reward ({ppl:.1f} vs "
        f"{hybrid:.1f}) while both cut cost vs reference "
        f"({ppl_cost:.1f}/{hybrid_cost:.1f} vs {ref_cost:.1f})",
    )


def test_criterion_7_mismatch_diagnostic(pipeline):
    policy_q = [
        float(np.mean([m.pct_total(q) for m in pipeline.tuned_mismatch])) for q in range(4)
    ]
    mixed_q = [pipeline.mixed_mismatch.pct_total(q) for q in range(4)]
    policy_seed0_mean = float(
        np.mean([pipeline.tuned_mismatch[0].pct_total(q) for q in range(4)])
    )
    mixed_mean = float(np.mean(mixed_q))
    ok = policy_q[3] <= policy_q[0] and mixed_mean >= policy_seed0_mean
    verdict(
        7,
        ok,
        f"policy-sampled mismatch declines across quartiles "
        f"{[round(x, 1) for x in policy_q]} and mixed stays higher "
        f"(mean {mixed_mean:.1f} vs {policy_seed0_mean:.1f})",
    )


# --- criterion 8: single-stage contract --------------------------------------------

def test_criterion_8_single_stage_contract(pipeline):
    counts_ok = all(u == pipeline.iterations for u in pipeline.gradient_updates)
    ref_ok = all(before == after for before, after in pipeline.ref_checksums)
    verdict(
        8,
        counts_ok and ref_ok,
        f"gradient updates == iterations ({pipeline.gradient_updates}) and the "
        f"reference checksum never changes",
    )


# --- criterion 9: determinism -----------------------------------------------------

def test_criterion_9_byte_identical_reruns(tmp_path):
    from safealign import cli

    def run_all(root):
        dataset = root / "corpus.jsonl"
        ref = root / "ref.json"
        out = root / "out"
        assert cli.main(["synth", "--env", "speedlimit1d", "--n", "80", "--seed", "4",
                         "--out", str(dataset)]) == 0
        assert cli.main(["pretrain", "--dataset", str(dataset), "--out", str(ref),
                         "--epochs", "5", "--hidden", "16,16", "--seed", "0"]) == 0
        assert cli.main(["finetune", "--env", "speedlimit1d", "--dataset", str(dataset),
                         "--ref", str(ref), "--tau", "15", "--seeds", "0",
                         "--np", "20", "--nnp", "5", "--iterations", "60",
                         "--out", str(out)]) == 0
        assert cli.main(["evaluate", "--env", "speedlimit1d", "--dataset", str(dataset),
                         "--ref", str(ref), "--tau", "15", "--seeds", "0",
                         "--rollouts", "10", "--out", str(out)]) == 0
        rel = root / "out" / "speedlimit1d" / "tau_15" / "seed_0"
        return {
            "corpus": dataset.read_bytes(),
            "ref": ref.read_bytes(),
            "policy": (rel / "policy_hybrid.json").read_bytes(),
            "history": (rel / "history_hybrid.jsonl").read_bytes(),
            "mismatch": (rel / "mismatch_hybrid.json").read_bytes(),
            "report": (rel / "report_hybrid.json").read_bytes(),
            "table": (root / "out" / "table_speedlimit1d.csv").read_bytes(),
        }

    a = run_all(tmp_path / "a")
    b = run_all(tmp_path / "b")
    same = {k for k in a if a[k] == b[k]}
    verdict(
        9,
        same == set(a),
        f"re-running every command gives byte-identical artifacts ({sorted(same)})",
    )


# --- criterion 10: brute-force oracles ---------------------------------------------

def test_criterion_10_cvar_and_nearest_neighbor_oracles():
    rng = np.random.default_rng(99)

    values = rng.uniform(0, 100, size=1000).tolist()
    cvar_ok = True
    for alpha in (0.5, 0.8, 0.9, 0.99):
        ordered = sorted(values, reverse=True)
        k = math.ceil((1 - alpha) * len(values))
        cvar_ok &= cvar(values, alpha) == float(np.mean(ordered[:k]))

    from safealign.envs import Trajectory

    trajs = []
    for i in range(100):
        states = rng.normal(size=(11, 3))
        trajs.append(
            Trajectory(i, states, rng.normal(size=(10, 2)), np.zeros(10), np.zeros(10))
        )
    index = data.StateIndex.from_trajectories(trajs)  # 1000 entries
    queries = rng.normal(size=(100, 3))
    zi = (index.states - index.mean) / index.std
    nn_ok = True
    for q in queries:
        zq = (q - index.mean) / index.std
        d = np.sqrt(((zi - zq) ** 2).sum(axis=1))
        expected = int(np.argmin(d))
        _, action, dist = index.query(q)
        nn_ok &= bool(np.array_equal(action, index.actions[expected]))
        nn_ok &= abs(dist - d[expected]) < 1e-12
    actions, dists = index.query_batch(queries)
    for i, q in enumerate(queries):
        _, a_single, d_single = index.query(q)
        nn_ok &= bool(np.array_equal(actions[i], a_single))
        nn_ok &= abs(dists[i] - d_single) < 1e-9

    verdict(
        10,
        bool(cvar_ok and nn_ok),
        "cvar and nearest-neighbor lookups match exhaustive oracles on "
        "1000-sample randomized tests",
    )
