"""Acceptance criteria 1-9.

Each test prints one ``criterion N: PASS|FAIL`` line (visible under ``pytest -v``
and when this file is run directly). Criterion 7 trains 30 models on 200k rows
and takes about 13 minutes on one core.

    pytest -v tests/test_acceptance.py
    python tests/test_acceptance.py [N ...]
"""

import math
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

import oracles  # noqa: E402
from opcases import OP_NAMES, case  # noqa: E402

from ektm import tensor as tn  # noqa: E402
from ektm.cli import main as cli_main  # noqa: E402
from ektm.config import Config  # noqa: E402
from ektm.data import (SyntheticConfig, gen_synthetic, parse_csv, split_chrono, standard_schema,  # noqa: E402
                       stats)
from ektm.diagnostics import loss_gradcheck  # noqa: E402
from ektm.errors import IngestionError  # noqa: E402
from ektm.metrics import auc, logloss  # noqa: E402
from ektm.model import MultiTaskModel  # noqa: E402
from ektm.objectives import bce, ctcvr_bce, total_loss  # noqa: E402
from ektm.tensor import Tensor  # noqa: E402
from ektm.trainer import evaluate_split, run_ablation, train  # noqa: E402
from ektm.transfer import KnowledgeSet, affinities, fuse, mhca  # noqa: E402

_verdicts = {}


def verdict(n, ok, detail, capsys=None):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    _verdicts[n] = ok
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line, flush=True)
    else:
        print(line, flush=True)
    return ok


def random_config(rng, injection=None, stop_gradient=None) -> Config:
    """A small randomly wired model plus a matching synthetic task mix."""
    kinds = [("sequential", 0.3), ("parallel", 0.3), ("parallel:continuous", 0.0)]
    T = int(rng.integers(1, 4))
    picks = [kinds[int(k)] for k in rng.integers(0, 3, T)]
    # the last tower layer is the knowledge vector; at width 2 some row almost always has a dead unit
    towers = [int(w) for w in rng.integers(2, 4, int(rng.integers(0, 2)))] + [3]
    return Config({
        "backbone.kind": str(rng.choice(["mmoe", "shared_bottom"])),
        "backbone.experts": int(rng.integers(1, 3)),
        "backbone.expert_hidden": [int(rng.integers(2, 4))],
        "backbone.tower_hidden": towers,
        "backbone.embed_dim": int(rng.integers(1, 3)),
        "transfer.mode": str(rng.choice(["transmitter", "transmitter", "linear"])),
        "transfer.heads": int(rng.integers(1, 4)),
        "transfer.proj_dim": int(rng.integers(1, 3)),
        "transfer.attention": str(rng.choice(["canonical", "canonical", "literal"])),
        "transfer.top_m": int(rng.integers(0, 2)),
        "transfer.injection": injection or str(rng.choice(["head", "tower_first_layer"])),
        "transfer.stop_gradient": bool(rng.random() < 0.7) if stop_gradient is None else stop_gradient,
        "loss.alpha": float(rng.choice([0.01, 0.1, 0.5, 1.0])),
        "loss.aux_hinge": bool(rng.random() < 0.8),
        "loss.detach_ctr_in_ctcvr": bool(rng.random() < 0.2),
        "data.tasks": [p for p, _ in picks],
        "data.task_rates": [r for _, r in picks],
        "data.click_rate": 0.3,
        "data.rank": T + 1,
        "data.n_users": 3,
        "data.n_items": 3,
    })


# ---------------------------------------------------------------------------

def test_criterion_1_gradient_checks(capsys):
    started = time.perf_counter()
    op_worst = {}
    for op in OP_NAMES:
        rng = np.random.default_rng(sum(map(ord, op)))
        op_worst[op] = max(tn.grad_check(*case(op, rng)) for _ in range(100))
    composed = []
    for trial in range(100):
        cfg = random_config(np.random.default_rng([7, trial]))
        composed.append(max(e for _, e in loss_gradcheck(cfg, seed=trial, batch_size=4)))
    elapsed = time.perf_counter() - started
    worst_op = max(op_worst, key=op_worst.get)
    ok = max(op_worst.values()) <= 1e-5 and max(composed) <= 1e-5 and elapsed < 120
    verdict(1, ok, f"{len(OP_NAMES)} ops x 100 trials, worst {op_worst[worst_op]:.2e} ({worst_op}); "
                   f"composed loss x 100 trials, worst {max(composed):.2e}; {elapsed:.0f}s", capsys)
    assert ok


def backbone_paths(model):
    """Every backbone/embedding parameter except the prediction heads shared with the transfer path."""
    return [k for k in model.params if not k.startswith("transfer.") and ".head." not in k]


def upstream_paths(model, task):
    """Parameters a tower-first-layer injection must still leave untouched: all but that task's tower."""
    return [k for k in backbone_paths(model) if not k.startswith(f"towers.{task}.")]


def test_criterion_2_stop_gradient(capsys):
    leaks = []
    checked = 0
    for trial in range(50):
        rng = np.random.default_rng([2, trial])
        cfg = random_config(rng, injection="head", stop_gradient=True).update_from({"transfer.mode": "transmitter"})
        if trial % 5 == 4:
            cfg.update_from({"transfer.mode": "linear"})
        ds = gen_synthetic(cfg.copy().update_from({"data.samples": 64, "data.seed": trial}).synthetic())
        batch = ds.take(slice(0, 16))
        model = MultiTaskModel(cfg, batch.schema, trial)
        fwd = model.forward(batch)
        paths = backbone_paths(model)
        for i, (_, l_t) in enumerate(model.pair_losses(batch, fwd)):
            grads = tn.backward(l_t, [model.params[k] for k in paths])
            checked += 1
            leaks += [(trial, i, k) for k in paths if np.any(grads[model.params[k]] != 0.0)]
    # alternative injection: L_t may train the task's own tower but nothing upstream of it
    for trial in range(10):
        cfg = random_config(np.random.default_rng([3, trial]), injection="tower_first_layer", stop_gradient=True)
        batch = gen_synthetic(cfg.copy().update_from({"data.samples": 64}).synthetic()).take(slice(0, 16))
        model = MultiTaskModel(cfg, batch.schema, trial)
        fwd = model.forward(batch)
        for i, (_, l_t) in enumerate(model.pair_losses(batch, fwd)):
            paths = upstream_paths(model, model.specs[i].name)
            grads = tn.backward(l_t, [model.params[k] for k in paths])
            checked += 1
            leaks += [(trial, i, k) for k in paths if np.any(grads[model.params[k]] != 0.0)]
    ok = not leaks
    verdict(2, ok, f"{checked} L_t terms over 60 configurations; nonzero backbone entries: {len(leaks)}", capsys)
    assert ok, leaks[:5]


def test_criterion_3_small_alpha_equivalence(capsys):
    started = time.perf_counter()
    base = {"data.samples": 10000, "data.tasks": ["sequential", "parallel", "sequential"],
            "data.task_rates": [0.2, 0.1, 0.1], "train.epochs": 5, "train.patience": 5}
    data_cfg = Config(base)
    tr, va, _ = split_chrono(gen_synthetic(data_cfg.synthetic()))
    ektm = train(Config({**base, "loss.alpha": 1e-12}), tr, va)
    bare = train(Config({**base, "transfer.mode": "none"}), tr, va)
    gaps = []
    for a, b in zip(ektm.history.epochs, bare.history.epochs):
        for key, value in b.train.items():
            if key.startswith("l_o."):
                gaps.append(abs(a.train[key] - value))
        gaps.append(abs(a.valid_loss - b.valid_loss))
    param_gap = max(float(np.max(np.abs(ektm.model.state()[k] - v))) for k, v in bare.model.state().items())
    elapsed = time.perf_counter() - started
    epochs = (len(ektm.history.epochs), len(bare.history.epochs))
    ok = epochs == (5, 5) and max(gaps) <= 1e-9 and elapsed < 120
    verdict(3, ok, f"alpha=1e-12 vs bare backbone, {epochs[0]} epochs: max L_o gap {max(gaps):.1e}, "
                   f"max backbone parameter gap {param_gap:.1e}; {elapsed:.0f}s", capsys)
    assert ok


def pair_auc(scores, labels):
    """O(n^2) enumeration with integer half-unit counts."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y != 1]
    half_units = sum(2 if p > n else (1 if p == n else 0) for p in pos for n in neg)
    return Fraction(half_units, 2 * len(pos) * len(neg))


def test_criterion_4_auc_oracle(capsys):
    rng = np.random.default_rng(4)
    mismatches, ll_gap = 0, 0.0
    for trial in range(100):
        n = int(rng.integers(2, 1001))
        levels = int(rng.choice([3, 20, 10**6]))  # coarse grids force ties
        scores = rng.integers(0, levels, n) / levels
        labels = rng.integers(0, 2, n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        if auc(scores, labels) != float(pair_auc(scores.tolist(), labels.tolist())):
            mismatches += 1
        p = rng.random(n)
        ll_gap = max(ll_gap, abs(logloss(p, labels) - oracles.bce(p.tolist(), labels.tolist())))
    ok = mismatches == 0 and ll_gap <= 1e-12
    verdict(4, ok, f"100 instances (n<=1000, with ties): {mismatches} AUC mismatches; "
                   f"max logloss gap {ll_gap:.1e}", capsys)
    assert ok


def test_criterion_5_closed_form_losses(capsys):
    b = abs(bce([0.5], [1]).item() - math.log(2))
    c = abs(ctcvr_bce([0.5], [0.4], [1], [1]).item() + math.log(0.2))
    rng = np.random.default_rng(5)
    hinge_gap = 0.0
    for _ in range(1000):
        l_o, l_t, alpha = float(rng.random()), float(rng.random()), float(rng.uniform(1e-6, 1.0))
        rep = total_loss(tn.tensor(0.0), [(tn.tensor(l_o), tn.tensor(l_t))], alpha)
        contribution = rep.total_value - (1 - alpha) * l_o
        expect = 0.0 if l_t <= l_o else alpha * (l_t - l_o)
        hinge_gap = max(hinge_gap, abs(contribution - expect))
        if l_t <= l_o:
            hinge_gap = max(hinge_gap, abs(rep.hinge[0]))
    ok = b <= 1e-12 and c <= 1e-12 and hinge_gap <= 1e-15
    verdict(5, ok, f"bce gap {b:.1e}, ctcvr gap {c:.1e}, hinge contribution gap {hinge_gap:.1e} over 1000 draws",
            capsys)
    assert ok


MHCA_WORKED_EXAMPLE = (2.2689, 3.0)


def mhca_example():
    one = Tensor(np.ones((1, 1)))
    params = {"t.wq": one, "t.wk": one, "t.wv": one, "t.wo": one}
    return mhca(tn.tensor([[1.0, 0.0]]), tn.tensor([[2.0, 4.0]]), params, "t", 1).data[0, 0]


def test_criterion_6_transfer_math(capsys):
    ks = KnowledgeSet(tn.tensor([[0.0, 0.0]]), [tn.tensor([[1.0, 0.0]]), tn.tensor([[1.0, 0.0]]),
                                                  tn.tensor([[0.0, 1.0]])])
    aff = affinities(ks, 0).data[0]
    aff_ok = (np.allclose(aff, [0.7311, 0.2689], atol=1e-4)
              and np.allclose(aff, oracles.affinities([[1, 0], [1, 0], [0, 1]], 0), atol=1e-15))
    ks2 = KnowledgeSet(tn.tensor([[1.0, 1.0]]), [tn.tensor([[0.0, 0.0]]), tn.tensor([[0.0, 1.0]])])
    fused = fuse(ks2, 0, affinities(ks2, 0)).data[0]
    fuse_ok = fused.tolist() == [0.5, 1.0] == oracles.fuse([1, 1], [[0, 0], [0, 1]], 0, [1.0])
    head = mhca_example()
    scripted = oracles.mhca([1, 0], [2, 4], [[1]], [[1]], [[1]], [[1]])[0]
    formula = [(2 * math.e + 4) / (math.e + 1), 3.0]
    mhca_ok = np.allclose(head, scripted, atol=1e-12) and np.allclose(head, formula, atol=1e-12)
    worked_ok = bool(np.allclose(head, MHCA_WORKED_EXAMPLE, atol=1e-4))
    ok = aff_ok and fuse_ok and mhca_ok and worked_ok
    verdict(6, ok, f"affinity {np.round(aff, 4).tolist()} ({'ok' if aff_ok else 'bad'}); fusion {fused.tolist()} "
                   f"({'ok' if fuse_ok else 'bad'}); MHCA {np.round(head, 4).tolist()} equals the scripted "
                   f"evaluation and (2e+4)/(e+1) ({'ok' if mhca_ok else 'bad'}) but not the worked-example value "
                   f"{list(MHCA_WORKED_EXAMPLE)}", capsys)
    assert aff_ok and fuse_ok and mhca_ok


@pytest.mark.xfail(strict=True, reason="worked-example 2.2689 contradicts its own formula (2e+4)/(e+1) = 2.5379")
def test_criterion_6_worked_example_mhca_decimal():
    np.testing.assert_allclose(mhca_example(), MHCA_WORKED_EXAMPLE, atol=1e-4)


# criterion 7 setup: the sparsest task is the third (sequential, CVR 3% -> CTCVR about 0.3%)
C7_DATA = SyntheticConfig(samples=200_000, tasks=[("sequential", "binary"), ("parallel", "binary"),
                                                  ("sequential", "binary")],
                          task_rates=[0.2, 0.05, 0.03], rho=0.8, seed=0)
C7_TRAIN = {"backbone.tower_hidden": [32, 16, 8], "train.batch": 1024, "train.lr": 2e-3, "train.epochs": 5,
            "train.patience": 1, "loss.alpha": 0.1}
C7_SEEDS = 10


def test_criterion_7_directional_benefit(capsys):
    started = time.perf_counter()
    ds = gen_synthetic(C7_DATA)
    ctcvr = dict(((t, m), v) for t, m, v in stats(ds))[("z_3", "ctcvr")]
    tr, va, te = split_chrono(ds)
    table = run_ablation(Config(C7_TRAIN), tr, va, te, seed_count=C7_SEEDS,
                         variants=("backbone", "with transmitter", "EKTM"))
    elapsed = time.perf_counter() - started
    sparse = "z_3"
    b, t, e = (table.mean(v, sparse) for v in ("backbone", "with transmitter", "EKTM"))
    delta = e - b
    ordered = b <= t <= e
    ok = delta >= 0.002 and ordered and elapsed < 900
    per_seed = {name: [round(r[sparse], 4) for r in runs] for name, _, runs in table.rows}
    with capsys.disabled():
        print(f"\n  sparse task CTCVR {ctcvr:.4%}; per-seed test AUC on {sparse}: {per_seed}")
    verdict(7, ok, f"mean AUC on {sparse}: backbone {b:.4f}, with transmitter {t:.4f}, EKTM {e:.4f}; "
                   f"EKTM - backbone {delta:+.4f} (need >= +0.002); ordering {'holds' if ordered else 'violated'}; "
                   f"{elapsed:.0f}s", capsys)
    assert ok


def test_criterion_8_replay_determinism(tmp_path, capsys):
    variants = [
        [],
        ["backbone.kind=shared_bottom", "transfer.mode=linear"],
        ["transfer.injection=tower_first_layer", "data.tasks=sequential,parallel:continuous",
         "data.task_rates=[0.2,1.0]"],
    ]
    common = ["data.samples=3000", "train.epochs=3", "backbone.tower_hidden=[8,4]", "train.seed=5"]
    same = []
    for k, extra in enumerate(variants):
        argv = ["train", "-o", str(tmp_path / f"run{k}")]
        for item in common + extra:
            argv += ["--set", item]
        assert cli_main(argv) == 0
        assert cli_main(["replay", str(tmp_path / f"run{k}" / "run.json"), "-o", str(tmp_path / f"again{k}")]) == 0
        for name in ("metrics.tsv", "history.tsv"):
            same.append((tmp_path / f"run{k}" / name).read_bytes() == (tmp_path / f"again{k}" / name).read_bytes())
    ok = all(same)
    verdict(8, ok, f"{len(variants)} train manifests replayed; {sum(same)}/{len(same)} TSVs byte-identical", capsys)
    assert ok


def test_criterion_9_data_contracts(capsys):
    problems = []
    # funnel: the first offending row and column are named
    schema = standard_schema(1, 0, [("parallel", "binary"), ("sequential", "binary")], vocab=2)
    rows = ["0,1,1,1,1", "1,0,0,1,0", "2,1,1,0,1", "3,0,0,0,1"]
    try:
        parse_csv("ts,cat_0,y,z_1,z_2\n" + "\n".join(rows) + "\n", schema)
        problems.append("funnel violation accepted")
    except IngestionError as exc:
        if (exc.row, exc.column) != (4, "z_2"):
            problems.append(f"funnel error at {exc.row}/{exc.column}")
    # chronological split
    for n in (10, 100, 1000, 100_000):
        ds = gen_synthetic(SyntheticConfig(samples=n, click_rate=0.3, task_rates=[0.3], seed=1)) if n < 1000 else \
            gen_synthetic(SyntheticConfig(samples=n, seed=1))
        sizes = tuple(len(p) for p in split_chrono(ds))
        if sizes != (n * 8 // 10, n // 10, n // 10):
            problems.append(f"split {n} -> {sizes}")
    # base rates at 100k
    worst = 0.0
    for k, (tasks, rates, click) in enumerate([
            ([("sequential", "binary")], [0.05], 0.1),
            ([("sequential", "binary"), ("parallel", "binary"), ("sequential", "binary")], [0.2, 0.05, 0.03], 0.1),
            ([("parallel", "binary"), ("parallel", "continuous")], [0.3, 2.0], 0.02)]):
        ds = gen_synthetic(SyntheticConfig(samples=100_000, tasks=tasks, task_rates=rates, click_rate=click,
                                           rho=0.5, seed=10 + k))
        table = {(t, m): v for t, m, v in stats(ds)}
        realised = [(click, table[("y", "ctr")])]
        for i, ((pattern, signal), rate) in enumerate(zip(tasks, rates)):
            if signal == "continuous":
                realised.append((rate, float(ds.z[:, i].mean())))
            else:
                realised.append((rate, table[(f"z_{i + 1}", "cvr" if pattern == "sequential" else "rate")]))
        for target, got in realised:
            worst = max(worst, abs(got - target) / target)
    ok = not problems and worst <= 0.10
    verdict(9, ok, f"funnel error row-precise; splits exact on 10/100/1000/100000 rows; "
                   f"worst base-rate deviation {worst:.1%} (limit 10%){'; ' + '; '.join(problems) if problems else ''}",
            capsys)
    assert ok


if __name__ == "__main__":
    wanted = {int(a) for a in sys.argv[1:]} or set(range(1, 10))
    sys.exit(pytest.main([__file__, "-q", "-k", " or ".join(f"criterion_{n}_" for n in sorted(wanted))]))
