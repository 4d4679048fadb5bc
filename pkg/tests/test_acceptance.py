"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` (the verdict lines are printed
even without ``-s``).  The ICIL criteria share one session fixture that
trains five tokenizer kinds over three seeds; expect a few hours on one core.
"""

import time
import zlib

import numpy as np
import pytest

from liptok.autodiff import Tensor, gradcheck, no_grad, relu, tabs, take
from liptok.checkpoint import CheckpointError, dumps, loads
from liptok.env import TASKS, sample_state, synth_dataset
from liptok.experiments import PolicyBudget, SuiteReport, dataset_hash, run_sweep, split_seed, train_and_evaluate
from liptok.layers import MLPStack, inverse_softplus, lipschitz_loss, lipschitz_normalize, network_lipschitz_bound
from liptok.policy import CausalPolicy, success_rate, train_policy
from liptok.quantizers import Codebook, nearest_indices, vq_lookup
from liptok.smoothness import compare_tokenizers, least_energy_score
from liptok.tokenizers import KINDS, ActionTokenizer, TokenizerConfig, TokenizerOutput, total_loss
from liptok.trajectories import minimum_jerk_dataset
from test_autodiff import OPS, _away_from_zero, _t, _weighted_sum

pytestmark = pytest.mark.slow

# Standalone tokenizer budget (criteria 6 and 11).
TOKENIZER_STEPS = 20000
TOKENIZER_TRAIN = dict(batch_size=64, dtype="float32")
SWEEP_STEPS = 2000
MINJERK_TRAJECTORIES = 500

# In-context policy budget (criteria 7, 8, 12).
ICIL_EPISODES_PER_TASK = 1000
ICIL_SEEDS = (0, 1, 2)
ICIL_BUDGET = PolicyBudget(steps=12000, eval_episodes=100)


@pytest.fixture(scope="module")
def minjerk():
    return minimum_jerk_dataset(MINJERK_TRAJECTORIES, np.random.default_rng(split_seed(0, "minjerk")))


# -- 1. gradients ------------------------------------------------------------------------------


def _extra_ops():
    def normalize(w, c):
        return lipschitz_normalize(w, c)

    def stack_bound(c0, c1, c2):
        stack = MLPStack([3, 4, 4, 2], np.random.default_rng(0), lipschitz_constrained=True)
        for layer, c in zip(stack.layers, (c0, c1, c2)):
            layer.raw_bound = c
        return lipschitz_loss(stack)

    # each VQ term is checked against the input it actually trains; the
    # other input sits behind a stop-gradient and is held fixed
    fixed = np.random.default_rng(1).uniform(-2, 2, (5, 3))

    def vq_codebook(e):
        book = Codebook(6, 3, entries=e.data)
        book.entries = e
        return vq_lookup(book, Tensor(fixed), update_usage=False).codebook_loss

    def vq_commitment(x):
        book = Codebook(6, 3, entries=np.linspace(-2, 2, 18).reshape(6, 3))
        return vq_lookup(book, x, update_usage=False).commitment_loss

    # straight-through is left out on purpose: its backward is the identity by
    # construction, not the derivative of the (piecewise constant) forward value
    return {
        # scaled rows: raw weight far above the bound c, so every row is rescaled
        "lipschitz_normalize": (normalize, lambda rng: [_t(rng, 4, 3), Tensor(rng.uniform(-1, 0.5), requires_grad=True)]),
        "lipschitz_loss": (stack_bound, lambda rng: [Tensor(rng.uniform(-2, 2), requires_grad=True) for _ in range(3)]),
        "vq_codebook_loss": (vq_codebook, lambda rng: [_t(rng, 6, 3)]),
        "vq_commitment_loss": (vq_commitment, lambda rng: [_t(rng, 5, 3)]),
        "relu": (relu, lambda rng: [_away_from_zero(rng, 4, 3)]),
        "abs": (tabs, lambda rng: [_away_from_zero(rng, 4, 3)]),
        "take": (lambda a: take(a, [4, 0, 4, 2], axis=0), lambda rng: [_t(rng, 6, 3)]),
    }


def test_criterion_01_gradients(verdict):
    start = time.perf_counter()
    worst, failures, n_checks = 0.0, [], 0
    cases = {name: (fn, (lambda shapes: lambda rng: [_t(rng, *s) for s in shapes])(shapes))
             for name, (fn, shapes) in OPS.items()}
    cases.update(_extra_ops())
    for name, (fn, make) in sorted(cases.items()):
        rng = np.random.default_rng(zlib.crc32(b"accept:" + name.encode()))
        for k in range(10):
            err = gradcheck(lambda *xs: _weighted_sum(fn(*xs), k), make(rng))
            n_checks += 1
            worst = max(worst, err)
            if not err < 1e-5:
                failures.append(f"{name}#{k}={err:.2e}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    verdict(1, "gradient correctness", ok,
            f"{len(cases)} ops x 10 instances, worst rel err {worst:.2e}, {elapsed:.1f}s"
            + (f", failing {failures[:5]}" if failures else ""))
    assert ok


# -- 2. hard Lipschitz invariant -------------------------------------------------------------


def test_criterion_02_lipschitz_invariant(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(split_seed(0, "criterion2"))
    violations, worst_ratio = 0, 0.0
    for _ in range(10):
        depth = int(rng.integers(2, 5))
        sizes = [int(rng.integers(2, 9))] + [int(rng.integers(4, 65)) for _ in range(depth - 1)] + [int(rng.integers(2, 9))]
        stack = MLPStack(sizes, rng, lipschitz_constrained=True)
        for layer in stack.layers:
            # between 0.2x and 1.5x of the widest row, so most configurations rescale
            target = np.abs(layer.weight.data).sum(axis=1).max() * rng.uniform(0.2, 1.5)
            layer.raw_bound.data = np.array(inverse_softplus(target))
        bound = network_lipschitz_bound(stack)
        W = stack.layers[0].effective_weight().data
        row = W[np.argmax(np.abs(W).sum(axis=1))]
        x0 = rng.normal(size=(10000, sizes[0])) * rng.uniform(0.1, 3)
        x1 = rng.normal(size=x0.shape) * rng.uniform(0.1, 3)
        # half the pairs move along the sign pattern of the widest first-layer row
        eps = rng.uniform(1e-4, 1.0, size=(5000, 1))
        x1[:5000] = x0[:5000] + eps * np.sign(row)
        with no_grad():
            d_out = np.abs(stack(Tensor(x0)).data - stack(Tensor(x1)).data).max(axis=1)
        d_in = np.abs(x0 - x1).max(axis=1)
        violations += int((d_out > bound * d_in + 1e-9).sum())
        worst_ratio = max(worst_ratio, float((d_out / (bound * d_in)).max()))
    elapsed = time.perf_counter() - start
    ok = violations == 0 and elapsed < 60
    verdict(2, "hard Lipschitz invariant", ok,
            f"10 encoders x 1e4 pairs, {violations} violations, max ratio to bound {worst_ratio:.6f}, {elapsed:.1f}s")
    assert ok


# -- 3. VQ oracle --------------------------------------------------------------------------------


def test_criterion_03_vq_oracle(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(split_seed(0, "criterion3"))
    e = rng.uniform(-1, 1, size=(1024, 8))
    e[900] = e[17]
    e[901] = e[17]
    x = rng.normal(size=(1000, 8)) * 0.6
    x[:50] = e[900]
    x[50:100] = 0.5 * (e[3] + e[400])
    x[100:120] = e[1023]
    got = nearest_indices(x, e)
    book = Codebook(1024, 8, entries=e)
    via_lookup = vq_lookup(book, Tensor(x), update_usage=False).indices
    # oracle: exact difference-form distances, first minimum wins
    d = ((x[:, None, :] - e[None, :, :]) ** 2).sum(axis=2)
    oracle = d.argmin(axis=1)
    tie_rows = int((np.isclose(d, d.min(axis=1, keepdims=True), rtol=0, atol=1e-12).sum(axis=1) > 1).sum())
    elapsed = time.perf_counter() - start
    mismatches = int((got != oracle).sum() + (via_lookup != oracle).sum())
    ok = mismatches == 0 and elapsed < 10
    verdict(3, "VQ oracle", ok,
            f"1000 latents vs K=1024, {mismatches} mismatches, {tie_rows} tie rows, {elapsed:.2f}s")
    assert ok


# -- 4. loss composition ---------------------------------------------------------------------


def test_criterion_04_loss_composition(verdict):
    rng = np.random.default_rng(split_seed(0, "criterion4"))
    worst = 0.0
    for _ in range(100):
        cfg = TokenizerConfig(kind="lipvqvae", lipschitz=True)
        r, c, m, lip = rng.uniform(0, 10, size=4) * 10.0 ** rng.integers(-3, 4, size=4)
        out = TokenizerOutput(Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1))),
                              reconstruction_loss=Tensor(r), codebook_loss=Tensor(c),
                              commitment_loss=Tensor(m), lipschitz_loss=Tensor(lip))
        manual = r + cfg.alpha * c + cfg.beta * m + cfg.gamma * lip
        got = total_loss(out, cfg).item()
        worst = max(worst, abs(got - manual) / max(abs(manual), 1.0))
    weights = (cfg.alpha, cfg.beta, cfg.gamma)
    ok = worst <= 1e-12 and weights == (1.0, 0.25, 1e-6)
    verdict(4, "loss composition", ok, f"100 random sets, worst deviation {worst:.1e}, weights {weights}")
    assert ok


# -- 5. smoothness analytic cases ------------------------------------------------------------


def test_criterion_05_smoothness_cases(verdict):
    collinear = least_energy_score(np.outer(np.arange(10.0), [1.0, -2.0, 0.5]))
    three = least_energy_score(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 1.0]]))
    rng = np.random.default_rng(split_seed(0, "criterion5"))
    scale_dev = 0.0
    for _ in range(20):
        z = rng.normal(size=(30, 4))
        base = least_energy_score(z)
        for a in (0.1, 10.0):
            scale_dev = max(scale_dev, abs(least_energy_score(a * z) - base) / max(base, 1.0))
    checks = {"collinear": collinear == 0.0, "three-point": abs(three - 0.4706) <= 1e-4, "scale": scale_dev <= 1e-9}
    ok = all(checks.values())
    verdict(5, "smoothness analytic cases", ok,
            f"collinear {collinear:.3g}, three-point {three:.5f} (target 0.4706), scale dev {scale_dev:.1e}; "
            + ", ".join(f"{k} {'ok' if v else 'FAIL'}" for k, v in checks.items()))
    assert ok


# -- 6. smoothness ordering on minimum-jerk data ---------------------------------------------


def test_criterion_06_smoothness_ordering(verdict, progress, minjerk):
    start = time.perf_counter()
    X = np.concatenate(minjerk)
    scores, pre_quant = {}, {}
    for seed in range(3):
        for kind in KINDS:
            t0 = time.perf_counter()
            tok = ActionTokenizer(kind=kind, n_steps=TOKENIZER_STEPS, random_state=seed, **TOKENIZER_TRAIN).fit(X)
            scores[kind, seed] = compare_tokenizers({kind: tok}, minjerk, len(minjerk))[0].score
            if kind in ("vqvae", "lipvqvae"):
                # diagnostic only: the encoder output before the codebook snaps it
                enc = lambda ep, tok=tok: tok.encoder_(Tensor(tok.normalize(ep), dtype=tok._np_dtype)).data
                with no_grad():
                    pre_quant[kind, seed] = float(np.mean([least_energy_score(enc(ep).astype(np.float64))
                                                           for ep in minjerk]))
            progress(f"criterion 6: {kind} seed {seed} score {scores[kind, seed]:.4g} "
                     f"({time.perf_counter() - t0:.0f}s)")
    elapsed = time.perf_counter() - start
    per_seed = {s: scores["lipvqvae", s] < scores["vqvae", s] and scores["lipvqvae", s] < scores["mlp", s]
                for s in range(3)}
    ok = all(per_seed.values()) and elapsed < 1800
    table = "; ".join(f"seed {s}: " + " ".join(f"{k}={scores[k, s]:.4g}" for k in KINDS) for s in range(3))
    diag = " ".join(f"{k}/{s}={v:.4g}" for (k, s), v in sorted(pre_quant.items()))
    verdict(6, "smoothness ordering", ok,
            f"{table}; pre-quantisation latents {diag}; {elapsed / 60:.1f} min")
    assert ok


# -- 9. causality probe --------------------------------------------------------------------------


def test_criterion_09_causality(verdict):
    episodes = synth_dataset(30, np.random.default_rng(split_seed(0, "criterion9")))
    failures, checked = [], 0
    for kind in KINDS:
        pol = CausalPolicy(tokenizer_kind=kind, batch_size=8, random_state=0).initialize(episodes)
        train_policy(pol, episodes, 20)
        prompt, query = episodes[1], episodes[40].observations.copy()
        base = pol.predict(prompt, query)
        for t in range(len(query)):
            probe = query.copy()
            probe[t] += 0.25
            out = pol.predict(prompt, probe)
            checked += 1
            if not np.array_equal(out[:t], base[:t]):
                failures.append(f"{kind}@{t}")
    ok = not failures
    verdict(9, "causality probe", ok, f"{checked} perturbations over {len(KINDS)} kinds, "
                                      f"{len(failures)} with earlier actions changed {failures[:5]}")
    assert ok


# -- 10. checkpoint round trip -------------------------------------------------------------------


def test_criterion_10_checkpoint(verdict, minjerk):
    X = np.concatenate(minjerk[:50])
    probe = np.random.default_rng(split_seed(0, "criterion10")).uniform(-1, 1, size=(100, X.shape[1]))
    problems = []
    for kind in KINDS:
        tok = ActionTokenizer(kind=kind, n_steps=50, batch_size=64, random_state=0).fit(X)
        blob = dumps(tok)
        back = loads(blob)
        for name, p in tok.parameters().items():
            if not np.array_equal(p.data, back.parameters()[name].data) or p.data.dtype != back.parameters()[name].data.dtype:
                problems.append(f"{kind}:{name}")
        if not np.array_equal(tok.transform(probe), back.transform(probe)):
            problems.append(f"{kind}:transform")
        if kind != "mlp" and not np.array_equal(tok.encode(probe), back.encode(probe)):
            problems.append(f"{kind}:encode")
        bad = bytearray(blob)
        bad[len(bad) // 2] ^= 0x10
        try:
            loads(bytes(bad))
            problems.append(f"{kind}:corrupt accepted")
        except CheckpointError as exc:
            if "CRC" not in str(exc):
                problems.append(f"{kind}:wrong error {exc}")
    ok = not problems
    verdict(10, "checkpoint round trip", ok, f"{len(KINDS)} kinds, 100 probe actions, problems {problems}")
    assert ok


# -- 11. codebook-size sweep -------------------------------------------------------------------


def test_criterion_11_sweep(verdict, minjerk):
    start = time.perf_counter()
    sizes = (256, 512, 1024, 2048)
    report = run_sweep(minjerk, kind="vqvae", mode="tokenizer", codebook_sizes=sizes, lipschitz=(False,),
                       seeds=(0, 1, 2), train_params=dict(n_steps=SWEEP_STEPS, **TOKENIZER_TRAIN))
    hashes = {c.dataset_hash for c in report.cells}
    rows = report.table_csv().strip().splitlines()[1:]
    paired = all(sorted(c.seed for c in report.cells if c.codebook_size == k) == [0, 1, 2] for k in sizes)
    ok = report.complete and paired and len(hashes) == 1 and len(rows) == 12
    smooth = report.summary("smoothness")
    recon = report.summary("reconstruction_mse")
    verdict(11, "codebook-size sweep", ok,
            f"{len(rows)} cells, complete={report.complete}, seed-paired={paired}, datasets={len(hashes)}; "
            + " ".join(f"K{k}: recon {recon[k, False]:.4g} smooth {smooth[k, False]:.4g}" for k in sizes)
            + f"; {time.perf_counter() - start:.0f}s")
    assert ok


# -- ICIL suite (criteria 7, 8, 12) ------------------------------------------------------------


@pytest.fixture(scope="session")
def icil_suite(progress):
    episodes = synth_dataset(ICIL_EPISODES_PER_TASK, np.random.default_rng(split_seed(0, "icil-data")))
    runs, seconds, policies = [], {}, {}
    for kind in KINDS:
        for seed in ICIL_SEEDS:
            t0 = time.perf_counter()
            result, policy = train_and_evaluate(kind, seed, episodes, ICIL_BUDGET)
            seconds[kind, seed] = time.perf_counter() - t0
            runs.append(result)
            if kind == "lipvqvae" and seed == 0:
                policies[kind, seed] = policy
            progress(f"icil {kind} seed {seed}: success {result.success} smoothness {result.smoothness:.4g} "
                     f"bc {result.final_bc_loss:.4g} ({seconds[kind, seed] / 60:.1f} min)")
    report = SuiteReport(list(KINDS), list(TASKS), list(ICIL_SEEDS), runs, dataset_hash(episodes))
    return report, seconds, policies, episodes


def test_criterion_07_lipschitz_ablation(verdict, icil_suite):
    report, seconds, _, _ = icil_suite
    lip, vq = report.mean_success("lipvqvae", "push"), report.mean_success("vqvae", "push")
    s_lip, s_vq = report.mean_smoothness("lipvqvae"), report.mean_smoothness("vqvae")
    hours = sum(seconds[k, s] for k in ("lipvqvae", "vqvae") for s in ICIL_SEEDS) / 3600
    ok = lip >= vq and s_lip < s_vq and hours < 2
    verdict(7, "Lipschitz ablation direction", ok,
            f"push success lipvqvae {lip:.3f} vs vqvae {vq:.3f}; smoothness {s_lip:.4g} vs {s_vq:.4g}; "
            f"{hours:.2f} h for the six runs")
    assert ok


def test_criterion_08_icil_capability(verdict, icil_suite):
    report, seconds, policies, episodes = icil_suite
    policy = policies["lipvqvae", 0]
    t0 = time.perf_counter()
    rng = np.random.default_rng(split_seed(0, "criterion8"))
    states = [sample_state("reach", rng) for _ in range(100)]
    pools = {t: [ep for ep in episodes if ep.task == t and ep.success] for t in TASKS}
    matched = [pools["reach"][i] for i in rng.integers(len(pools["reach"]), size=100)]
    others = [t for t in TASKS if t != "reach"]
    mismatched = [pools[others[k % len(others)]][int(rng.integers(len(pools[others[k % len(others)]])))]
                  for k in range(100)]
    s_match = success_rate(policy, states, matched)
    s_mis = success_rate(policy, states, mismatched)
    minutes = (seconds["lipvqvae", 0] + time.perf_counter() - t0) / 60
    ok = s_match > 0.9 and s_match - s_mis >= 0.2 and minutes < 60
    verdict(8, "ICIL capability", ok,
            f"reach matched {s_match:.2f}, mismatched ({'/'.join(others)}) {s_mis:.2f}, "
            f"drop {s_match - s_mis:.2f}; {minutes:.1f} min incl. training")
    assert ok


def test_criterion_12_rank_correlation(verdict, icil_suite):
    report, _, _, _ = icil_suite
    rho = report.spearman()
    pairs = " ".join(f"{k}=({report.mean_smoothness(k):.4g}, {report.mean_success(k):.3f})" for k in KINDS)
    ok = bool(rho <= 0)
    verdict(12, "smoothness/success rank correlation", ok, f"spearman {rho:.3f}; (smoothness, success) {pairs}")
    assert ok
