"""Acceptance suite: ten headline guarantees, one test (one pass/fail line) each.

Every test pins its tolerances inline and asserts its own wall-clock budget,
so a slow regression fails the same line as a wrong number.
"""
import math
import time

import numpy as np
import pytest

from dualstream import autodiff as ad
from dualstream.autodiff import GradTape, Tensor, backward, finite_diff_grad
from dualstream.dataset import make_question
from dualstream.detector import detect, divergence_profile
from dualstream.divergence import jsd, kl_divergence
from dualstream.filtering import (
    SamplingSpec,
    classify_layers,
    compute_filter_profile,
    energy_quotient,
    entropy_gate,
    filter_knowledge,
    pruning_sweep,
)
from dualstream.fixtures import (
    OFFSET_LAYER,
    build_copier_params,
    build_fixture_model,
    build_training_init,
    fixture_dataset,
)
from dualstream.fusion import (
    PARAM_NAMES,
    DsspParams,
    KnowledgeStream,
    dssp_forward,
    make_dssp_hook,
    shared_similarity,
)
from dualstream.model import ForwardOptions, forward, generate
from dualstream.pipeline import make_train_examples, probe_questions
from dualstream.synth import suppression_study, suppression_trial, synth_streams, decomposition_report
from dualstream.training import (
    CLAMP,
    MU_COARSE,
    MU_FINE,
    MU_GRID,
    NU_GRID,
    Hyperparams,
    grid_search,
    train,
)


@pytest.fixture(scope="module")
def host():
    return build_fixture_model()


@pytest.fixture(scope="module")
def probe_sweep(host):
    model, layout = host
    return pruning_sweep(model, probe_questions(layout.vocab), SamplingSpec())


def _elapsed_guard(t0: float, budget_s: float) -> None:
    elapsed = time.perf_counter() - t0
    assert elapsed < budget_s, f"ran {elapsed:.1f}s, budget {budget_s:.0f}s"


# 1 ------------------------------------------------------------------------

def test_01_divergence_symmetry_bounds_endpoint_and_kl_contrast():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p = rng.dirichlet(np.ones(16))
        q = rng.dirichlet(np.ones(16))
        a, b = jsd(p, q), jsd(q, p)
        assert abs(a - b) <= 1e-12
        assert 0.0 <= a <= 1.0
    assert abs(jsd([1.0, 0.0], [0.0, 1.0]) - 1.0) <= 1e-12
    # same near-disjoint pair: KL blows past any unit bound, JSD stays in [0, 1]
    p, q = [1.0, 0.0], [1e-9, 1.0 - 1e-9]
    assert kl_divergence(p, q) > 20.0
    assert jsd(p, q) <= 1.0
    _elapsed_guard(t0, 5.0)


# 2 ------------------------------------------------------------------------

def _fusion_loss_node(i_mat, d_mat, params, base, answer_id, mu, nu, leaves=None):
    """Composite objective on the fused output: ce + mu*H(base,aug) + nu*KL."""
    fused = dssp_forward(i_mat, d_mat, params, leaves)
    last = ad.take_rows(fused, [i_mat.shape[0] - 1])
    p_aug = ad.softmax_rows(last, 1.0)
    logp = ad.log_clamped(p_aug)
    ce = ad.scale(ad.pick(logp, 0, answer_id), -1.0)
    h = ad.scale(ad.sum_all(ad.mul(Tensor(base.reshape(1, -1)), logp)), -1.0)
    log_base = np.log(np.maximum(base, CLAMP)).reshape(1, -1)
    kl = ad.sum_all(ad.mul(p_aug, ad.sub(logp, Tensor(log_base))))
    return ad.add(ce, ad.add(ad.scale(h, mu), ad.scale(kl, nu)))


def test_02_fusion_loss_gradients_match_central_differences():
    t0 = time.perf_counter()
    mu, nu = 0.55, 0.1
    for d_model in (2, 8):
        checked = 0
        seed = 0
        while checked < 20:
            seed += 1
            rng = np.random.default_rng([d_model, seed])
            params = DsspParams.init_random(d_model, d_ff=4, top_t=2, seed=seed)
            i_mat = rng.normal(size=(2, d_model))
            d_mat = rng.normal(size=(3, d_model))
            base = rng.dirichlet(np.ones(d_model))
            answer_id = int(rng.integers(d_model))

            # the probe nudges every weight by 1e-5, so skip draws where the
            # discrete top-T choice sits close enough to a tie to flip
            sim = shared_similarity(i_mat, d_mat, params.w_share, params.d_k).value
            if np.diff(np.sort(sim.sum(axis=0))).min() < 1e-3:
                continue

            tape = GradTape()
            leaves = params.leaves(tape)
            loss = _fusion_loss_node(i_mat, d_mat, params, base, answer_id,
                                     mu, nu, leaves)
            grads = backward(tape, loss)
            for name in PARAM_NAMES:
                def f(theta, _name=name):
                    trial = params.copy()
                    setattr(trial, _name, theta.reshape(getattr(params, _name).shape))
                    return float(_fusion_loss_node(i_mat, d_mat, trial, base,
                                                   answer_id, mu, nu).item())

                numeric = finite_diff_grad(f, getattr(params, name).copy(), h=1e-5)
                analytic = grads.get(leaves[name], np.zeros_like(numeric))
                denom = max(np.abs(numeric).max(), 1.0)
                assert np.allclose(analytic, numeric, atol=1e-4 * denom), \
                    f"d_model={d_model} seed={seed} tensor={name}"
            checked += 1
        assert checked >= 20
    _elapsed_guard(t0, 120.0)


# 3 ------------------------------------------------------------------------

def test_03_fused_output_shape_matches_internal_stream_across_grid():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    for d_model in (2, 8, 32):
        params = {t: DsspParams.init_random(d_model, top_t=t, seed=d_model)
                  for t in (1, 10)}
        for n_i in (1, 2, 5, 16):
            for n_d in (1, 3, 10):
                i_mat = rng.normal(size=(n_i, d_model))
                d_mat = rng.normal(size=(n_d, d_model))
                for t in (1, 10):
                    out = dssp_forward(i_mat, d_mat, params[t])
                    assert out.value.shape == i_mat.shape
    _elapsed_guard(t0, 30.0)


# 4 ------------------------------------------------------------------------

def test_04_differencing_suppresses_shared_directions_on_planted_streams():
    t0 = time.perf_counter()
    study = suppression_study(n_seeds=100, d_model=32, n_tokens=8,
                              dims=(4, 4, 4), noise_scale=0.1)
    assert study["suppressed"] >= 95
    # cross-check one trial against the projection-energy report directly
    ratio_diff, ratio_base = suppression_trial(0)
    assert study["trials"][0]["ratio_differential"] == ratio_diff
    assert study["trials"][0]["ratio_baseline"] == ratio_base
    decomp = synth_streams(32, 8, 8, (4, 4, 4), 0.1, 0)
    report = decomposition_report(decomp.x, decomp)
    total = (report["energy_shared"] + report["energy_private_x"]
             + report["energy_private_y"] + report["energy_residual"])
    assert abs(total - float(np.sum(decomp.x ** 2))) <= 1e-9
    _elapsed_guard(t0, 60.0)


# 5 ------------------------------------------------------------------------

def test_05_filter_unit_values_and_identity_branch():
    t0 = time.perf_counter()
    eq = energy_quotient([0.0, 1.0], lam=1.0)
    assert np.allclose(eq, [0.7311, 0.2689], atol=1e-4)
    epsilon, drop = entropy_gate(1.0, 0.5)
    assert abs(epsilon - math.log(1.5)) <= 1e-9
    assert drop == -0.5
    rng = np.random.default_rng(5)
    stream = KnowledgeStream(rng.normal(size=(4, 6)), "external")
    out = filter_knowledge(stream, np.full(4, 0.25), 0.3, -0.05)
    assert np.array_equal(out.tokens, stream.tokens)
    assert out.origin == stream.origin
    _elapsed_guard(t0, 1.0)


# 6 ------------------------------------------------------------------------

def test_06_layer_classification_recovers_planted_key_and_offset(probe_sweep):
    t0 = time.perf_counter()
    cls = classify_layers(probe_sweep)
    assert (cls.key_layer, cls.offset_layer) == (1, 3)
    deltas = probe_sweep.deltas
    assert deltas[cls.offset_layer] < 0.0   # removing it sharpens the output
    assert deltas[cls.key_layer] > 0.0      # removing it scatters the output
    _elapsed_guard(t0, 120.0)


# 7 ------------------------------------------------------------------------

def test_07_deep_divergence_is_flagged_and_identical_profiles_never_are():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    vocab_n, layers = 32, 6

    flagged = 0
    for _ in range(50):
        shared = [rng.dirichlet(np.ones(vocab_n)) for _ in range(layers - 2)]
        deep_a = [np.eye(vocab_n)[0], np.eye(vocab_n)[2]]
        deep_b = [np.eye(vocab_n)[1], np.eye(vocab_n)[3]]
        profile = divergence_profile(shared + deep_a, shared + deep_b)
        verdict = detect(profile, delta=1.0, aggregation="tail_sum")
        flagged += verdict.hallucination
        assert verdict.insertion_layer >= layers - 2
    assert flagged == 50

    false_positives = 0
    for _ in range(1000):
        rows = [rng.dirichlet(np.ones(vocab_n)) for _ in range(layers)]
        verdict = detect(divergence_profile(rows, [r.copy() for r in rows]),
                         delta=1.0, aggregation="tail_sum")
        false_positives += verdict.hallucination
    assert false_positives == 0
    _elapsed_guard(t0, 10.0)


# 8 ------------------------------------------------------------------------

def test_08_default_schedule_halves_mean_epoch_loss_deterministically(host):
    t0 = time.perf_counter()
    model, layout = host
    records = fixture_dataset(64, noise_rate=0.0, seed=0)
    examples = make_train_examples(model, records, layout.vocab, OFFSET_LAYER)
    reports = [
        train(model, build_training_init(layout, seed=0), examples,
              Hyperparams(), insertion_layer=OFFSET_LAYER)
        for _ in range(2)
    ]
    means = reports[0].epoch_mean_losses()
    assert len(means) == 7
    assert means[-1] <= 0.5 * means[0], f"loss {means[0]:.3f} -> {means[-1]:.3f}"
    # bit-deterministic: same seed, same data -> same steps and same weights
    assert reports[0].checkpoint_id == reports[1].checkpoint_id
    assert [s.total for s in reports[0].steps] == [s.total for s in reports[1].steps]
    _elapsed_guard(t0, 300.0)


# 9 ------------------------------------------------------------------------

def test_09_energy_quotient_filtering_never_hurts_and_usually_helps(host, probe_sweep):
    t0 = time.perf_counter()
    model, layout = host
    v = layout.vocab
    copier = build_copier_params(layout)
    cls = classify_layers(probe_sweep)
    h_orig = float(probe_sweep.baseline_entropy)
    h_off = float(probe_sweep.layer_entropies[cls.offset_layer])

    strict_wins = 0
    for ds_seed in range(5):
        hits = {"on": 0, "off": 0}
        for rec in fixture_dataset(64, noise_rate=1.0, seed=ds_seed):
            toks = list(rec.question) + [v.SEP] + [t for d in rec.documents for t in d]
            span = (len(rec.question) + 1, len(toks))
            trace = forward(model, toks)
            profile = compute_filter_profile(trace, cls, span, h_orig, h_off, 80.0)
            raw = ad.layer_norm(
                Tensor(np.asarray(trace.hidden[cls.offset_layer - 1][span[0]:span[1]])),
                Tensor(model.weights[f"l{cls.offset_layer}.ln1.gain"]),
                Tensor(model.weights[f"l{cls.offset_layer}.ln1.bias"])).value
            kept = filter_knowledge(KnowledgeStream(raw, "external"), profile.eq,
                                    profile.epsilon, profile.delta_entropy).tokens
            for mode, dhat in (("on", kept), ("off", raw)):
                opts = ForwardOptions(dssp_layer=cls.offset_layer,
                                      dssp_hook=make_dssp_hook(dhat, copier))
                ans = generate(model, toks, 1, 0.0, 0, options=opts)[0][0]
                hits[mode] += ans == rec.answer[0]
        assert hits["on"] >= hits["off"], f"seed {ds_seed}: {hits}"
        strict_wins += hits["on"] > hits["off"]
    assert strict_wins >= 3
    _elapsed_guard(t0, 600.0)


# 10 -----------------------------------------------------------------------

def test_10_grid_search_enumerates_the_exact_grid_and_finds_the_optimum():
    t0 = time.perf_counter()
    assert len(NU_GRID) == 11
    assert NU_GRID == tuple(round(0.05 + 0.01 * k, 2) for k in range(11))
    assert MU_GRID == tuple(dict.fromkeys(MU_COARSE + MU_FINE))
    result = grid_search(lambda mu, nu: (mu - 0.55) ** 2 + (nu - 0.10) ** 2)
    assert (result.mu_star, result.nu_star) == (0.55, 0.10)
    visited = {(p.mu, p.nu) for p in result.table}
    assert visited == {(m, n) for m in MU_GRID for n in NU_GRID}
    assert len(result.table) == len(MU_GRID) * len(NU_GRID)
    _elapsed_guard(t0, 1.0)
