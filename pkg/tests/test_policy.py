import numpy as np
import pytest

from liptok.autodiff import no_grad
from liptok.env import TASKS, sample_state, synth_dataset
from liptok.policy import (PROMPT_ACT, PROMPT_OBS, QUERY_OBS, CausalPolicy, build_sequence, policy_loss,
                           rollout_batch, sample_pairs, success_rate, train_policy, _group_by_task)

TOK = dict(encoder_hidden=(32, 32), latent_dim=4, codebook_size=64)


def _policy(kind="vqvae", **kw):
    params = dict(tokenizer_kind=kind, tokenizer_params=TOK, dim=32, n_layers=2, n_heads=2, batch_size=8,
                  learning_rate=1e-3, warmup_steps=20, dtype="float64", random_state=0)
    params.update(kw)
    return CausalPolicy(**params)


@pytest.fixture(scope="module")
def episodes():
    return synth_dataset(20, np.random.default_rng(0))


# -- sequence layout --------------------------------------------------------------


def test_sequence_example(episodes):
    prompt, query = episodes[0], episodes[3]
    prompt.observations, prompt.actions = prompt.observations[:2], prompt.actions[:2]
    seq = build_sequence(prompt, query.observations[:1])
    assert len(seq) == 5
    assert seq.loss_mask.tolist() == [False, False, False, False, True]
    assert seq.kinds.tolist() == [PROMPT_OBS, PROMPT_ACT, PROMPT_OBS, PROMPT_ACT, QUERY_OBS]


def test_interleaving_and_lengths(episodes):
    p, q = episodes[0], episodes[3]
    seq = build_sequence(p, q)
    M = len(p)
    assert len(seq) == 2 * M + len(q)
    assert (seq.kinds[0:2 * M:2] == PROMPT_OBS).all() and (seq.kinds[1:2 * M:2] == PROMPT_ACT).all()
    assert seq.loss_mask.sum() == len(q) and not seq.loss_mask[:2 * M].any()


def test_sequence_preconditions(episodes):
    p = episodes[0]
    empty = type(p)(p.observations[:0], p.actions[:0], True, p.task)
    with pytest.raises(ValueError):
        build_sequence(empty, episodes[3])
    with pytest.raises(ValueError):
        build_sequence(p, episodes[1])  # different task family
    with pytest.raises(ValueError):
        build_sequence(p, np.zeros((0, 9)))
    failed = type(p)(p.observations, p.actions, False, p.task)
    with pytest.raises(ValueError):
        build_sequence(failed, episodes[3])


def test_pairs_same_task_distinct_episodes(episodes):
    pairs = sample_pairs(_group_by_task(episodes), 200, np.random.default_rng(1))
    assert all(p.task == q.task and p is not q for p, q in pairs)
    assert {p.task for p, _ in pairs} == set(TASKS)


def test_single_episode_dataset_rejected(episodes):
    with pytest.raises(ValueError):
        train_policy(_policy(), episodes[:1], 1)


# -- model behaviour -------------------------------------------------------------


@pytest.mark.parametrize("kind", ["mlp", "lipvqvae"])
def test_causality_probe(episodes, kind):
    pol = _policy(kind).initialize(episodes)
    train_policy(pol, episodes, 5)
    prompt, query = episodes[0], episodes[3].observations.copy()
    base = pol.predict(prompt, query)
    for t in (0, 4, len(query) - 1):
        probe = query.copy()
        probe[t] += 0.37
        out = pol.predict(prompt, probe)
        np.testing.assert_array_equal(out[:t], base[:t])
        assert np.any(out[t] != base[t])


def test_loss_only_on_query_predictions(episodes):
    pol = _policy("mlp").initialize(episodes)
    pairs = [(episodes[0], episodes[3]), (episodes[1], episodes[4])]
    with no_grad():
        _, bc, _ = policy_loss(pol, pairs)
    preds = pol.predict_batch([p for p, _ in pairs], [q.observations for _, q in pairs])
    tok = pol.tokenizer_
    manual = np.concatenate([((tok.normalize(pr) - tok.normalize(q.actions)) ** 2).sum(axis=1)
                             for pr, (_, q) in zip(preds, pairs)]).mean()
    assert float(bc.data) == pytest.approx(manual, rel=1e-10)


def test_prompt_changes_actions(episodes):
    pol = _policy("mlp").initialize(episodes)
    train_policy(pol, episodes, 30)
    q = episodes[3].observations
    a = pol.predict(episodes[0], q)
    b = pol.predict(episodes[2], q)
    assert np.abs(a - b).mean() > 1e-6


def test_training_is_deterministic(episodes):
    runs = []
    for _ in range(2):
        pol = _policy("lipvqvae").initialize(episodes)
        train_policy(pol, episodes, 15)
        states = [sample_state("push", np.random.default_rng(3)) for _ in range(2)]
        eps = rollout_batch(pol, states, [episodes[2], episodes[5]], max_steps=5)
        runs.append((pol.loss_curve_, [e.actions.tobytes() for e in eps]))
    assert runs[0] == runs[1]


def test_untrained_policy_rarely_reaches(episodes):
    pol = _policy("mlp").initialize(episodes)
    rng = np.random.default_rng(4)
    states = [sample_state("reach", rng) for _ in range(40)]
    prompts = [episodes[0]] * 40
    assert success_rate(pol, states, prompts) < 0.1


def test_decode_through_tokenizer(episodes):
    pol = _policy("vqvae", decode_via="tokenizer").initialize(episodes)
    train_policy(pol, episodes, 3)
    out = pol.predict(episodes[0], episodes[3].observations[:4])
    assert out.shape == (4, 3) and np.all(np.isfinite(out))
    with pytest.raises(ValueError):
        _policy("bin", decode_via="tokenizer").initialize(episodes)


def test_frozen_tokenizer_excluded_from_optimizer(episodes):
    pol = _policy("vqvae", train_tokenizer=False).initialize(episodes)
    before = pol.tokenizer_.codebook_.entries.data.copy()
    train_policy(pol, episodes, 5)
    np.testing.assert_array_equal(pol.tokenizer_.codebook_.entries.data, before)
    assert not any(k.startswith("tokenizer.") for k in pol.optimizer_.params)


@pytest.mark.slow
def test_loss_trend_decreases(episodes):
    pol = _policy("lipvqvae").initialize(episodes)
    train_policy(pol, episodes, 2000)
    # the codebook terms are noisy at this batch size, so the total is judged by its fitted slope
    bc = np.array(pol.bc_curve_).reshape(4, 500).mean(axis=1)
    assert all(b < a for a, b in zip(bc, bc[1:]))
    slope = np.polyfit(np.arange(2000), pol.loss_curve_, 1)[0]
    assert slope < 0


def _final_bc(joint: bool, steps: int, episodes, **kw) -> float:
    pol = _policy("vqvae", train_tokenizer=joint, **kw).initialize(episodes)
    train_policy(pol, episodes, steps)
    return float(np.mean(pol.bc_curve_[-200:]))


@pytest.mark.slow
def test_joint_training_beats_frozen_tokenizer_when_decoding_through_it(episodes):
    # the frozen random decoder cannot express the expert actions
    joint, frozen = (_final_bc(j, 600, episodes, decode_via="tokenizer") for j in (True, False))
    assert joint < 0.75 * frozen


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="with the MLP action head the task is read from prompt observations, "
                                       "so prompt-action tokens barely matter and a frozen tokenizer does as well")
def test_joint_training_beats_frozen_tokenizer_with_action_head(episodes):
    assert _final_bc(True, 1500, episodes) < _final_bc(False, 1500, episodes)
