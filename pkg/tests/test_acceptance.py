"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdicts appear in
the "acceptance criteria" section of the terminal summary.
"""
import filecmp
import io as stdio
import math
import time
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import write_config
from pnp3d.ablation import NeighborCache, seed_accuracies
from pnp3d.cli import main
from pnp3d.config import RunConfig
from pnp3d.core import (
    COMBINE_RULES, POOLING, REGULARIZATION, PnpConfig, PnpParams, bilinear_response, count_flops,
    count_params, enumerate_params, instrumented_flops, pnp3d_forward,
)
from pnp3d.data import generate_dataset
from pnp3d.gradcheck import _random_bn_stats, run_suite, variant_name
from pnp3d.spatial import ball_query, knn_search


def random_instance(rng, cfg, n):
    params = PnpParams.init(cfg, rng)
    _random_bn_stats(params, rng)
    params.set_training(False)
    coords = rng.uniform(-1, 1, (n, 3))
    feats = rng.uniform(-2, 2, (n, cfg.channels))
    return params, coords, feats


def random_config(rng, max_channels=16):
    r = int(rng.choice([2, 4]))
    channels = r * 2 * int(rng.integers(1, max_channels // (2 * r) + 1))
    return PnpConfig(
        channels=channels, neighbors=int(rng.integers(1, 7)), reduction=r,
        pooling=str(rng.choice(POOLING)), regularization=str(rng.choice(REGULARIZATION)),
        combine=str(rng.choice(COMBINE_RULES)), psi_activation=str(rng.choice(["relu", "none"])),
        half_k=bool(rng.integers(0, 2)),
    )


def test_ac1_gradient_suite(criterion):
    base = PnpConfig(channels=8, neighbors=4, reduction=2)
    t0 = time.perf_counter()
    results = run_suite(base, n=12, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_error)
    ok = (len(results) == 36 and all(r.finite and r.max_error < 1e-5 for r in results) and elapsed < 120)
    criterion("AC1 gradient suite (36 variants, rel err < 1e-5, < 2 min)", ok,
              f"{len(results)} variants, worst {worst.max_error:.2e} ({variant_name(worst.config)}), {elapsed:.1f}s")
    assert ok


def test_ac2_equation_oracle(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        cfg = random_config(rng, max_channels=8)
        n = int(rng.integers(4, 17))
        params, coords, feats = random_instance(rng, cfg, n)
        idx = knn_search(coords, cfg.effective_k).indices
        expected = oracles.pnp_block(coords, feats, oracles.knn_brute(coords, cfg.effective_k),
                                     oracles.params_as_dict(params), cfg.pooling, cfg.regularization,
                                     cfg.combine, psi_act=cfg.psi_activation == "relu")
        got = pnp3d_forward(coords, feats, params, cfg, idx=idx)
        worst = max(worst, float(np.max(np.abs(got - expected))))
        # the block must also find the same neighbours on its own
        worst = max(worst, float(np.max(np.abs(pnp3d_forward(coords, feats, params, cfg) - expected))))
    ok = worst < 1e-10
    criterion("AC2 equation oracle (20 instances, < 1e-10)", ok, f"max abs diff {worst:.2e}")
    assert ok


def test_ac3_permutation_equivariance(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        cfg = random_config(rng)
        n = int(rng.integers(2, 41))
        params, coords, feats = random_instance(rng, cfg, n)
        perm = rng.permutation(n)
        base = pnp3d_forward(coords, feats, params, cfg)
        permuted = pnp3d_forward(coords[perm], feats[perm], params, cfg)
        worst = max(worst, float(np.max(np.abs(permuted - base[perm]))))
    ok = worst < 1e-12
    criterion("AC3 permutation equivariance (100 trials, < 1e-12)", ok, f"max abs diff {worst:.2e}")
    assert ok


def test_ac4_neighbour_search_exact(criterion):
    rng = np.random.default_rng(4)
    mismatches = []
    for trial in range(200):
        n = int(rng.integers(1, 257))
        if trial % 2:
            pts = rng.integers(0, 5, (n, 3)).astype(float)  # lattice points: heavy ties
            radius = float(rng.uniform(0.5, 3.0))
        else:
            pts = rng.uniform(-1, 1, (n, 3))
            radius = float(rng.uniform(0.05, 1.0))
        k = int(rng.integers(1, 33))
        if not np.array_equal(knn_search(pts, k).indices, oracles.knn_sorted(pts, k)):
            mismatches.append(f"knn#{trial}")
        if not np.array_equal(ball_query(pts, radius, k).indices, oracles.ball_sorted(pts, radius, k)):
            mismatches.append(f"ball#{trial}")
    ok = not mismatches
    criterion("AC4 kNN / ball query equal brute-force sort (200 clouds)", ok,
              "all exact" if ok else f"mismatches: {mismatches[:6]}")
    assert ok


def test_ac5_complexity_accounting(criterion):
    rng = np.random.default_rng(5)
    problems = []
    for i in range(20):
        cfg = random_config(rng, max_channels=64)
        n = int(rng.integers(1, 300))
        if count_params(cfg) != enumerate_params(PnpParams.init(cfg, rng)):
            problems.append(f"params#{i}")
        analytic = count_flops(cfg, n)
        if analytic != instrumented_flops(cfg, n, seed=i):
            problems.append(f"flops#{i}")
        doubled = count_flops(cfg, 2 * n)
        if doubled["total"] / analytic["total"] != 2.0 or doubled != instrumented_flops(cfg, 2 * n, seed=i):
            problems.append(f"linear#{i}")
    ok = not problems
    criterion("AC5 complexity accounting (20 configs, exact; FLOP ratio 2 at 2N)", ok,
              "all exact" if ok else f"problems: {problems}")
    assert ok


def test_ac6_mean_ordering(criterion):
    rng = np.random.default_rng(6)
    m = 1_000_000
    lam = rng.uniform(0, 1, m) * 10.0 ** rng.uniform(-6, 6, m)
    mu = rng.uniform(0, 1, m) * 10.0 ** rng.uniform(-6, 6, m)
    lam[:1000], mu[1000:2000] = 0.0, 0.0  # exact zeros
    mu[2000:3000] = lam[2000:3000]  # equal pairs
    means = {r: bilinear_response(lam[:, None], mu[:, None], r).value.ravel()
             for r in ("grand_mean", "geometric_mean", "harmonic_mean")}
    bad = int(np.sum(~((means["grand_mean"] >= means["geometric_mean"])
                       & (means["geometric_mean"] >= means["harmonic_mean"]))))
    ok = bad == 0
    criterion("AC6 AM >= GM >= HM on 1e6 non-negative pairs", ok, f"{bad} violations")
    assert ok


def test_ac7_plug_and_play_trend(criterion):
    cfg = RunConfig()
    base = cfg.classifier_config()
    train_split, test_split = generate_dataset(cfg.dataset())
    cache = NeighborCache(train_split, test_split)
    seeds = range(5)
    t0 = time.perf_counter()
    without = seed_accuracies(base.__class__(**{**base.__dict__, "use_pnp": False}), seeds,
                              train_split, test_split, cache)
    rules = {rule: seed_accuracies(
        base.__class__(**{**base.__dict__, "use_pnp": True, "pnp": base.pnp.with_(combine=rule)}),
        seeds, train_split, test_split, cache) for rule in COMBINE_RULES}
    elapsed = time.perf_counter() - t0
    mean = {rule: float(np.mean(accs)) for rule, accs in rules.items()}
    m_without, m_with = float(np.mean(without)), mean["geometric_mean"]
    gain = m_with - m_without
    lagging = {r: v for r, v in mean.items() if r != "geometric_mean" and m_with < v - 0.01}
    hard_ok = not math.isnan(gain) and gain >= 0.02 and elapsed < 1800
    ordering = "ordering clause holds" if not lagging else (
        "WARN ordering clause: " + ", ".join(f"{r} {v:.3f}" for r, v in lagging.items()))
    detail = (f"use_pnp {m_with:.3f} vs baseline {m_without:.3f} (gain {100 * gain:+.1f} pp); "
              + ", ".join(f"{r} {v:.3f}" for r, v in mean.items())
              + f"; {ordering}; {elapsed / 60:.1f} min")
    criterion("AC7 plug-and-play trend (5 seeds, >= 2 pp, < 30 min)", hard_ok, detail)
    print(detail)
    assert hard_ok


def _run_cli(argv):
    buf = stdio.StringIO()
    with redirect_stdout(buf):
        code = main([str(a) for a in argv])
    return code, buf.getvalue()


def _same_tree(a: Path, b: Path) -> list[str]:
    cmp = filecmp.dircmp(a, b)
    diffs = cmp.left_only + cmp.right_only
    for name in cmp.common_files:
        if (a / name).read_bytes() != (b / name).read_bytes():
            diffs.append(name)
    return diffs


def test_ac8_cli_determinism(criterion, tmp_path):
    config = write_config(tmp_path / "cfg.json")
    cloud = generate_dataset(RunConfig.model_validate({"data": {"n_points": 32}}).dataset())[1].clouds[0]
    cloud_path = tmp_path / "cloud.xyz"
    cloud_path.write_text("".join(f"{x:.9f} {y:.9f} {z:.9f}\n" for x, y, z in cloud))
    commands = [
        ["gradcheck"], ["train"], ["eval"], ["eval", "--permute", 3], ["ablate"], ["bench", "--n", 128],
        ["dump-features", "--cloud", cloud_path],
    ]
    timed = {"train", "bench"}  # these print wall-clock figures to stdout only
    problems = []
    for label in ("a", "b"):
        (tmp_path / label).mkdir()
    stdout = {}
    for cmd in commands:
        for label in ("a", "b"):
            code, out = _run_cli(["--config", config, "--seed", 11, "--out", tmp_path / label, *cmd])
            if code != 0:
                problems.append(f"{' '.join(map(str, cmd))} exited {code}")
            stdout[label] = out.replace(str(tmp_path / label), "<out>")
        if cmd[0] not in timed and stdout["a"] != stdout["b"]:
            problems.append(f"{cmd[0]} stdout differs")
        diffs = _same_tree(tmp_path / "a", tmp_path / "b")
        if diffs:
            problems.append(f"{cmd[0]} outputs differ: {diffs}")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    ok = not problems
    criterion("AC8 CLI determinism (every verb twice, byte-identical outputs)", ok,
              f"compared {files}" if ok else "; ".join(problems))
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
