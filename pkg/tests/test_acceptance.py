"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

The learning, sparsity and BCP criteria share one desk-scale cohort and a
memoised cross-validation runner, so identical configurations are trained
only once.
"""

import time
import zlib

import numpy as np
import pytest
from scipy import stats

from amigo import cli
from amigo import tensor as T
from amigo.graph import CellRecord, PatientRecord, build_knn_graph
from amigo.metrics import concordance_index, logrank_test
from amigo.model import ModelParams, branch_forward, patient_forward
from amigo.pipeline import RunConfig, cross_validate, load_cohort, sweep_bcp, sweep_sparsity
from amigo.sparsify import apply_mask, sample_mask
from amigo.survival import BatchSpec, bcp_sample_batch, cox_batch_loss
from amigo.tensor import Tape

from factories import permute_graph, random_graph, random_patient, tiny_config, tiny_params, toy_patients
from gradient_cases import CASES
from oracles import brute_force_cindex, brute_force_knn_edges, gradient_check, hand_logrank, parameter_gradient_check
from test_sparsify import dense_route_graph

DESK = {"model.hidden_dim": 32, "model.mlp_dim": 32, "epochs": 15, "batch.batch_size": 32}
S_VALUES = [0.0, 0.2, 0.4, 0.6, 0.8]
MODS = ["a", "b"]


@pytest.fixture
def report_line(capsys):
    def emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}")

    return emit


@pytest.fixture(scope="module")
def desk():
    cfg = RunConfig().copy(**DESK)
    cohort = load_cohort(cfg)
    cache = {}

    def runner(c):
        key = c.digest()
        if key not in cache:
            cache[key] = cross_validate(c, cohort)
        return cache[key]

    return cfg, cohort, runner


@pytest.fixture(scope="module")
def sparsity_rows(desk):
    cfg, cohort, runner = desk
    return sweep_sparsity(cfg, S_VALUES, cohort=cohort, runner=runner)


def test_criterion_1_gradient_suite(report_line):
    start = time.perf_counter()
    op_errors = {name: gradient_check(*CASES[name](np.random.default_rng(zlib.crc32(name.encode())))) for name in sorted(CASES)}
    patients = toy_patients()
    e2e = {}
    for aggregator in ("attention", "transformer"):
        params = ModelParams.init(tiny_config(hidden_dim=4, mlp_dim=4, n_heads=2, instance_aggregator=aggregator), seed=5)

        def loss(w):
            risks = T.concat_rows([patient_forward(p, w, MODS).risk for p in patients])
            return cox_batch_loss(risks, [p.survival_time for p in patients], [p.event for p in patients])

        # biases after the cross-modal block only shift all risks and carry zero gradient
        e2e[aggregator] = parameter_gradient_check(params, loss, floor=1e-6)
    elapsed = time.perf_counter() - start
    worst_op = max(op_errors, key=op_errors.get)
    ok = op_errors[worst_op] < 1e-4 and max(e2e.values()) < 1e-3 and elapsed < 60
    report_line(1, ok, f"{len(op_errors)} ops worst {worst_op}={op_errors[worst_op]:.1e}; end-to-end {max(e2e.values()):.1e}; {elapsed:.1f}s")
    assert ok


def test_criterion_2_oracle_equivalences(report_line):
    rng = np.random.default_rng(2)
    knn_ok = True
    for c in (1, 2, 7, 50, 200):
        pts = rng.uniform(0, 100, size=(c, 2))
        cells = [CellRecord(float(x), float(y), False, np.zeros(1), "img", "p", "a") for x, y in pts]
        g = build_knn_graph(cells, k=5, max_edge_len=1e9, extent=(100.0, 100.0), image_id="img", modality="a", patient_id="p")
        knn_ok &= {tuple(e) for e in g.edges.tolist()} == brute_force_knn_edges(pts, 5)

    c_ok = True
    for n in (2, 10, 50):
        for _ in range(20):
            t = rng.integers(1, 15, size=n).astype(float)
            e = rng.random(n) < 0.7
            r = rng.integers(-3, 4, size=n).astype(float)
            if not any(e[i] and t[i] < t[j] for i in range(n) for j in range(n)):
                continue
            c_ok &= concordance_index(t, e, r) == brute_force_cindex(t, e, r)

    params = tiny_params(seed=4)
    mask_err = 0.0
    for i in range(100):
        g = random_graph(rng, int(rng.integers(2, 40)), image_id=f"g{i}")
        mask = sample_mask(g.n_nodes, float(rng.uniform(0, 0.9)), rng)
        a = branch_forward(apply_mask(g, mask), 0, params.bind(Tape(), trainable=False)).value
        b = branch_forward(dense_route_graph(g, mask), 0, params.bind(Tape(), trainable=False)).value
        mask_err = max(mask_err, float(np.abs(a - b).max()))

    fixture = ([1.0, 2.0, 2.0, 4.0, 6.0], [True, True, False, True, False], [2.0, 3.0, 5.0, 6.0, 7.0], [True, False, True, True, False])
    obs, exp_, var = hand_logrank(*fixture)
    lr_err = abs(logrank_test(*fixture).chi_square - (obs - exp_) ** 2 / var)

    ok = knn_ok and c_ok and mask_err <= 1e-10 and lr_err <= 1e-9
    report_line(2, ok, f"knn={knn_ok} cindex={c_ok} masking err={mask_err:.1e} logrank err={lr_err:.1e}")
    assert ok


def test_criterion_3_invariances(report_line):
    rng = np.random.default_rng(3)
    params = tiny_params(seed=3)

    def risk(p):
        return patient_forward(p, params.bind(Tape(), trainable=False), MODS).risk_value

    node_err = inst_err = 0.0
    for i in range(10):
        p = random_patient(rng, f"p{i}", cores=(2, 3))
        permuted = {m: [permute_graph(g, rng.permutation(g.n_nodes)) for g in gs] for m, gs in p.graphs.items()}
        node_err = max(node_err, abs(risk(p) - risk(PatientRecord(p.patient_id, 1.0, True, permuted))))
        reordered = {m: [gs[j] for j in rng.permutation(len(gs))] for m, gs in p.graphs.items()}
        inst_err = max(inst_err, abs(risk(p) - risk(PatientRecord(p.patient_id, 1.0, True, reordered))))

    c_exact = True
    shift_err = swap_err = 0.0
    for _ in range(50):
        n = int(rng.integers(5, 40))
        t = rng.uniform(0.5, 5, size=n)
        e = rng.random(n) < 0.7
        e[0] = True
        r = rng.normal(size=n)
        c_exact &= concordance_index(t, e, r) == concordance_index(t, e, np.exp(r) * 2.0 - 7.0)
        tape = Tape()
        base = cox_batch_loss(tape.constant(r[:, None]), t, e).item()
        shifted = cox_batch_loss(tape.constant(r[:, None] + rng.normal(scale=10)), t, e).item()
        shift_err = max(shift_err, abs(base - shifted))
        k = n // 2
        ab = logrank_test(t[:k], e[:k], t[k:], e[k:]).chi_square
        ba = logrank_test(t[k:], e[k:], t[:k], e[:k]).chi_square
        swap_err = max(swap_err, abs(ab - ba))

    ok = node_err <= 1e-10 and inst_err <= 1e-10 and c_exact and shift_err <= 1e-10 and swap_err <= 1e-10
    report_line(3, ok, f"node {node_err:.1e} instance {inst_err:.1e} cindex exact={c_exact} shift {shift_err:.1e} swap {swap_err:.1e}")
    assert ok


def test_criterion_4_learning(desk, report_line):
    cfg, cohort, runner = desk
    start = time.perf_counter()
    rep = runner(cfg)
    elapsed = time.perf_counter() - start
    ok = len(rep.cells) == 9 and rep.c_index_mean >= 0.70 and rep.pooled["logrank_p"] < 0.05
    report_line(4, ok, f"C-index {rep.c_index_summary} over {len(rep.cells)} cells, pooled log-rank p={rep.pooled['logrank_p']:.2e}, {elapsed:.0f}s")
    assert ok


def test_criterion_5_sparsity_robustness(sparsity_rows, report_line):
    by_s = {r["s"]: r for r in sparsity_rows}
    gap = abs(by_s[0.8]["c_index_mean"] - by_s[0.0]["c_index_mean"])
    summary = ", ".join(f"s={r['s']:.1f}:{r['c_index_mean']:.3f}" for r in sparsity_rows)
    ok = gap <= 0.05
    report_line(5, ok, f"|C(0.8)-C(0)|={gap:.3f} ({summary})")
    assert ok


def test_criterion_6_flop_linearity(sparsity_rows, report_line):
    keep = np.array([1.0 - r["s"] for r in sparsity_rows])
    flops = np.array([r["flops_per_patient"] for r in sparsity_rows])
    fit = stats.linregress(keep, flops)
    ratio = flops[-1] / flops[0]
    decreasing = bool(np.all(np.diff(flops) < 0))
    ok = fit.rvalue**2 > 0.99 and ratio <= 0.3 and decreasing
    report_line(6, ok, f"R^2={fit.rvalue ** 2:.4f}, flops(0.8)/flops(0)={ratio:.3f}, {flops[0] / 1e6:.2f} -> {flops[-1] / 1e6:.2f} MFlop/patient")
    assert ok


def test_criterion_7_bcp(desk, report_line):
    cfg, cohort, runner = desk
    censored = round(cohort.censored_fraction(), 4)
    rows = sweep_bcp(cfg, [0.0, 0.1, 0.25, 0.5, "uniform", censored], cohort=cohort, runner=runner)
    by_alpha = {r["alpha"]: r for r in rows}
    a, u = by_alpha[censored], by_alpha["uniform"]
    pooled_sd = float(np.sqrt((a["c_index_std"] ** 2 + u["c_index_std"] ** 2) / 2))
    match = abs(a["c_index_mean"] - u["c_index_mean"]) <= pooled_sd
    finite = all(np.isfinite(r["c_index_mean"]) for r in rows)

    # slot marginal with alpha at the censored share is uniform over patients
    ev = np.array([p.event for p in cohort.patients])
    spec = BatchSpec(batch_size=2, bcp_alpha=float(1.0 - ev.mean()))
    rng = np.random.default_rng(7)
    draws = np.array([bcp_sample_batch(ev, spec, rng)[0] for _ in range(100_000)])
    p_chi = stats.chisquare(np.bincount(draws, minlength=len(ev))).pvalue

    ok = len(rows) == 6 and finite and match and p_chi > 0.01
    summary = ", ".join(f"{r['alpha']}:{r['c_index_mean']:.3f}" for r in rows)
    report_line(7, ok, f"alpha={censored} vs uniform diff {abs(a['c_index_mean'] - u['c_index_mean']):.3f} <= sd {pooled_sd:.3f}: {match}; chi2 p={p_chi:.2f} ({summary})")
    assert ok


def test_criterion_8_ablation_plumbing(desk, report_line):
    cfg, cohort, _ = desk
    d_node = cohort.patients[0].graphs[cohort.modalities[0]][0].node_features.shape[1]

    def layout(**flags):
        c = cfg.copy(**{f"ablation.{k}": v for k, v in flags.items()})
        est = c.make_estimator(0)
        return est, ModelParams.init(est._model_config(len(cohort.modalities), d_node))

    checks = {}
    _, base = layout()
    checks["coupled default"] = base.name("W_s", 0) == base.name("W_s", 1) and base.name("W_m", 0, 0) != base.name("W_m", 1, 0)
    _, p = layout(no_weight_sharing=True)
    checks["no_weight_sharing"] = p.name("W_s", 0) != p.name("W_s", 1)
    _, p = layout(full_weight_sharing=True)
    checks["full_weight_sharing"] = all(p.get("W_m", 0, l) is p.get("W_m", 1, l) for l in range(cfg.model.n_layers))
    _, p = layout(non_shared_attention=True)
    checks["non_shared_attention"] = p.name("W_attn", 0) != p.name("W_attn", 1)
    _, p = layout(transformer_attention=True)
    checks["transformer_attention"] = any(n.startswith("inst_tf") for n in p.arrays) and not any(n.startswith("W_attn") for n in p.arrays)
    est, p = layout(no_instance_norm=True)
    reps = patient_forward(cohort.patients[0], p.bind(Tape(), trainable=False), cohort.modalities).modality_reps.value
    reps_norm = patient_forward(cohort.patients[0], base.bind(Tape(), trainable=False), cohort.modalities).modality_reps.value
    checks["no_instance_norm"] = not est.instance_norm and not np.allclose(reps.mean(axis=1), 0) and np.allclose(reps_norm.mean(axis=1), 0, atol=1e-12)
    est, _ = layout(no_bcp=True)
    checks["no_bcp"] = est.bcp_alpha == "uniform"
    est, _ = layout(inference_time_sparsity=True)
    checks["inference_time_sparsity"] = est.apply_sparsity_at_inference and est._inference_transform() is not None
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    report_line(8, ok, f"{sum(checks.values())}/{len(checks)} structural checks" + (f", failed: {failed}" if failed else ""))
    assert ok


def test_criterion_9_determinism(tmp_path, report_line):
    args = [
        "--synth.n_patients", "30", "--synth.cells_per_core", "[20, 40]", "--epochs", "2",
        "--hidden_dim", "8", "--mlp_dim", "8", "--n_heads", "2", "--batch_size", "16",
    ]
    codes = [cli.main(["cross-validate", "--out", str(tmp_path / name), *args]) for name in ("a", "b")]
    a = (tmp_path / "a" / "report.json").read_bytes()
    b = (tmp_path / "b" / "report.json").read_bytes()
    ok = codes == [0, 0] and a == b
    report_line(9, ok, f"exit codes {codes}, report.json identical={a == b} ({len(a)} bytes)")
    assert ok
