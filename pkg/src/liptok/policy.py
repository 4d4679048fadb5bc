"""In-context imitation: prompt/query token streams and a causal transformer policy.

A training sequence interleaves one full prompt demonstration with the query
observations of another episode of the same task::

    o_p1, a_p1, ..., o_pM, a_pM, o_q1, ..., o_qN

The policy predicts an action at every query observation; prompt positions
are never supervised.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import Adam, Tensor, TrainingError, add, concat, mse, no_grad, reshape, take
from .env import ACT_DIM, OBS_DIM, Episode, ToyEnvState, is_success, step
from .layers import MLPStack
from .quantizers import lfq_quantize, vq_lookup
from .tokenizers import QUANTIZED_KINDS, ActionTokenizer, total_loss
from .transformer import CausalTransformer

logger = logging.getLogger(__name__)

PROMPT_OBS, PROMPT_ACT, QUERY_OBS = 0, 1, 2


@dataclass
class EpisodeSequence:
    """Token layout for one prompt/query pair.

    ``kinds`` marks each position as prompt observation, prompt action or
    query observation; ``rows`` is the row of the source array the token is
    built from; ``loss_mask`` is true exactly on query positions.
    """

    kinds: np.ndarray
    rows: np.ndarray
    timesteps: np.ndarray
    loss_mask: np.ndarray
    prompt_len: int
    query_len: int

    def __len__(self) -> int:
        return len(self.kinds)


def build_sequence(prompt: Episode, query) -> EpisodeSequence:
    """Lay out prompt tokens followed by query observation tokens.

    ``query`` is an :class:`Episode` or an array of query observations (the
    latter during closed-loop rollouts).
    """
    if len(prompt) == 0:
        raise ValueError("a prompt demonstration is required (M = 0)")
    if not prompt.success:
        raise ValueError("prompt demonstration must be successful")
    if isinstance(query, Episode):
        if query.task != prompt.task:
            raise ValueError(f"prompt task {prompt.task!r} differs from query task {query.task!r}")
        n = len(query)
    else:
        n = len(np.asarray(query))
    if n == 0:
        raise ValueError("query must contain at least one observation")
    m = len(prompt)
    kinds = np.concatenate([np.tile([PROMPT_OBS, PROMPT_ACT], m), np.full(n, QUERY_OBS)])
    rows = np.concatenate([np.repeat(np.arange(m), 2), np.arange(n)])
    return EpisodeSequence(kinds, rows, rows.copy(), kinds == QUERY_OBS, m, n)


class CausalPolicy(BaseEstimator):
    """Causal transformer policy conditioned on one prompt demonstration.

    Parameters
    ----------
    tokenizer_kind : str
        Action tokenizer used for prompt action tokens (see ActionTokenizer).
    tokenizer_params : dict or None
        Extra ActionTokenizer parameters.
    dim, n_layers, n_heads : int
        Transformer size.
    n_steps, batch_size, learning_rate, warmup_steps
        Training budget; ``batch_size`` counts prompt/query sequences.
    lr_schedule : {'cosine', 'constant'}
        After warmup, decay the learning rate along a half cosine to 5% of
        its peak at ``n_steps``, or hold it.
    train_tokenizer : bool
        Update tokenizer parameters jointly; otherwise it stays at init.
    decode_via : {'head', 'tokenizer'}
        Predict actions with a dedicated MLP head, or predict a latent and
        decode it through the tokenizer's quantiser and decoder.
    """

    def __init__(self, tokenizer_kind="lipvqvae", tokenizer_params=None, dim=64, n_layers=2, n_heads=4,
                 n_steps=12000, batch_size=16, learning_rate=1e-3, warmup_steps=100, lr_schedule="cosine",
                 train_tokenizer=True, decode_via="head", max_timestep=64, dtype="float32",
                 random_state=None):
        self.tokenizer_kind = tokenizer_kind
        self.tokenizer_params = tokenizer_params
        self.dim = dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.lr_schedule = lr_schedule
        self.train_tokenizer = train_tokenizer
        self.decode_via = decode_via
        self.max_timestep = max_timestep
        self.dtype = dtype
        self.random_state = random_state

    @property
    def _np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    # -- construction --------------------------------------------------------------

    def initialize(self, episodes) -> "CausalPolicy":
        episodes = list(episodes)
        seeds = np.random.SeedSequence(self.random_state).spawn(3)
        init_rng = np.random.default_rng(seeds[0])
        self.sample_rng_ = np.random.default_rng(seeds[1])
        dt = self._np_dtype
        actions = np.concatenate([ep.actions for ep in episodes])
        params = dict(self.tokenizer_params or {})
        params.setdefault("dtype", self.dtype)
        tok = ActionTokenizer(kind=self.tokenizer_kind, random_state=int(seeds[2].generate_state(1)[0]),
                              **params)
        offset, scale = ActionTokenizer.percentile_normalization(actions)
        tok.initialize(actions.shape[1], offset, scale)
        self.tokenizer_ = tok
        if self.decode_via not in ("head", "tokenizer"):
            raise ValueError(f"decode_via must be 'head' or 'tokenizer', got {self.decode_via!r}")
        if self.decode_via == "tokenizer" and tok.decoder_ is None:
            raise ValueError("decode_via='tokenizer' needs a tokenizer with a decoder")
        d = self.dim
        latent = tok.resolved_config().latent_dim
        self.n_actions_ = actions.shape[1]
        self.obs_encoder_ = MLPStack([OBS_DIM, d, d], init_rng, dtype=dt)
        self.act_proj_ = MLPStack([latent, d, d], init_rng, dtype=dt)
        self.type_emb_ = Tensor(init_rng.normal(0, 0.02, (3, d)), requires_grad=True, dtype=dt)
        self.time_emb_ = Tensor(init_rng.normal(0, 0.02, (self.max_timestep, d)), requires_grad=True, dtype=dt)
        self.transformer_ = CausalTransformer(d, self.n_layers, self.n_heads, init_rng, dtype=dt)
        out_dim = latent if self.decode_via == "tokenizer" else self.n_actions_
        self.head_ = MLPStack([d, d, out_dim], init_rng, dtype=dt)
        self.tasks_ = sorted({ep.task for ep in episodes})
        self.loss_curve_ = []
        self.bc_curve_ = []
        return self

    def parameters(self, include_tokenizer: bool = True) -> dict[str, Tensor]:
        params = {}
        for name in ("obs_encoder_", "act_proj_", "transformer_", "head_"):
            for k, v in getattr(self, name).parameters().items():
                params[f"{name.rstrip('_')}.{k}"] = v
        params["type_emb"] = self.type_emb_
        params["time_emb"] = self.time_emb_
        if include_tokenizer:
            params.update({f"tokenizer.{k}": v for k, v in self.tokenizer_.parameters().items()})
        return params

    # -- forward ---------------------------------------------------------------------

    def _forward(self, prompts: list[Episode], queries: list[np.ndarray],
                 query_actions: list[np.ndarray] | None = None, update_usage: bool = True):
        """Predicted normalised actions at every query position, plus tokenizer output.

        Returns ``(pred, tokenizer_output, sequences)`` where ``pred`` stacks the
        query predictions of all sequences in order.
        """
        dt = self._np_dtype
        seqs = [build_sequence(p, q) for p, q in zip(prompts, queries)]
        B = len(seqs)
        L = max(len(s) for s in seqs)
        obs_blocks, act_blocks = [], []
        n_obs = 0
        obs_offsets_p, obs_offsets_q, act_offsets = [], [], []
        n_act = 0
        for p, q in zip(prompts, queries):
            obs_offsets_p.append(n_obs)
            obs_blocks.append(p.observations)
            n_obs += len(p)
            obs_offsets_q.append(n_obs)
            obs_blocks.append(np.asarray(q))
            n_obs += len(q)
            act_offsets.append(n_act)
            act_blocks.append(p.actions)
            n_act += len(p)
        n_prompt_acts = n_act
        if query_actions is not None:
            act_blocks.extend(query_actions)
        tok = self.tokenizer_
        all_obs = Tensor(np.concatenate(obs_blocks), dtype=dt)
        all_act = Tensor(tok.normalize(np.concatenate(act_blocks)), dtype=dt)
        tok_out = tok.tokenize(all_act, update_usage=update_usage)
        obs_tok = self.obs_encoder_(all_obs)
        act_tok = self.act_proj_(take(tok_out.embedding, np.arange(n_prompt_acts), axis=0, unique=True))
        pad = Tensor(np.zeros((1, self.dim)), dtype=dt)
        table = concat([obs_tok, act_tok, pad], axis=0)
        pad_row = n_obs + n_prompt_acts
        idx = np.full((B, L), pad_row, dtype=np.int64)
        kinds = np.zeros((B, L), dtype=np.int64)
        times = np.zeros((B, L), dtype=np.int64)
        query_pos = []
        for b, s in enumerate(seqs):
            src = np.where(s.kinds == PROMPT_OBS, obs_offsets_p[b] + s.rows,
                           np.where(s.kinds == PROMPT_ACT, n_obs + act_offsets[b] + s.rows,
                                    obs_offsets_q[b] + s.rows))
            idx[b, :len(s)] = src
            kinds[b, :len(s)] = s.kinds
            times[b, :len(s)] = np.minimum(s.timesteps, self.max_timestep - 1)
            query_pos.append(b * L + np.flatnonzero(s.loss_mask))
        x = take(table, idx, axis=0)
        x = add(x, take(self.type_emb_, kinds, axis=0))
        x = add(x, take(self.time_emb_, times, axis=0))
        h = self.transformer_(x)
        h = take(reshape(h, (B * L, self.dim)), np.concatenate(query_pos), axis=0, unique=True)
        out = self.head_(h)
        if self.decode_via == "tokenizer":
            out = self._decode_latent(out)
        return out, tok_out, seqs

    def _decode_latent(self, latent: Tensor) -> Tensor:
        tok = self.tokenizer_
        kind = tok.config_.kind
        if kind in QUANTIZED_KINDS:
            latent = vq_lookup(tok.codebook_, latent, update_usage=False).quantized
        elif kind == "lfqvae":
            latent = lfq_quantize(latent).quantized
        return tok.decode(latent)

    # -- training -------------------------------------------------------------------

    def fit(self, episodes, y=None):
        """Initialise on ``episodes`` and train for ``n_steps`` (see :func:`train_policy`)."""
        self.initialize(episodes)
        train_policy(self, episodes, self.n_steps)
        return self

    # -- inference -------------------------------------------------------------------

    def predict(self, prompt: Episode, query_obs) -> np.ndarray:
        """Action for every query observation, given one prompt demonstration."""
        check_is_fitted(self, "tokenizer_")
        q = np.atleast_2d(np.asarray(query_obs, dtype=np.float64))
        with no_grad():
            pred, _, _ = self._forward([prompt], [q], update_usage=False)
        return self.tokenizer_.denormalize(pred.data)

    def predict_batch(self, prompts, queries) -> list[np.ndarray]:
        check_is_fitted(self, "tokenizer_")
        with no_grad():
            pred, _, seqs = self._forward(list(prompts), [np.atleast_2d(q) for q in queries],
                                          update_usage=False)
        acts = self.tokenizer_.denormalize(pred.data)
        out, k = [], 0
        for s in seqs:
            out.append(acts[k:k + s.query_len])
            k += s.query_len
        return out


def _group_by_task(episodes) -> dict[str, list[Episode]]:
    groups: dict[str, list[Episode]] = {}
    for ep in episodes:
        groups.setdefault(ep.task, []).append(ep)
    return groups


def sample_pairs(groups: dict[str, list[Episode]], n: int, rng: np.random.Generator):
    """``n`` (prompt, query) pairs: uniform task, two distinct episodes of it."""
    tasks = sorted(t for t, eps in groups.items() if len(eps) >= 2)
    pairs = []
    for _ in range(n):
        eps = groups[tasks[rng.integers(len(tasks))]]
        i, j = rng.choice(len(eps), size=2, replace=False)
        pairs.append((eps[i], eps[j]))
    return pairs


def policy_loss(policy: CausalPolicy, pairs) -> tuple[Tensor, Tensor, object]:
    """Behaviour-cloning MSE on query actions plus the tokenizer objective."""
    prompts = [p for p, _ in pairs]
    queries = [q.observations for _, q in pairs]
    qacts = [q.actions for _, q in pairs]
    pred, tok_out, _ = policy._forward(prompts, queries, query_actions=qacts)
    target = policy.tokenizer_.normalize(np.concatenate(qacts))
    bc = mse(pred, target)
    return add(bc, total_loss(tok_out, policy.tokenizer_.config_)), bc, tok_out


def _decay_steps(schedule: str, n_steps: int) -> int | None:
    if schedule == "constant":
        return None
    if schedule == "cosine":
        return n_steps
    raise ValueError(f"lr_schedule must be 'cosine' or 'constant', got {schedule!r}")


def train_policy(policy: CausalPolicy, episodes, steps: int, callback=None) -> list[float]:
    """Jointly train policy and tokenizer on same-task prompt/query pairs.

    Returns the per-step total loss curve (also kept on ``policy.loss_curve_``).
    """
    episodes = list(episodes)
    groups = _group_by_task(episodes)
    if not groups or any(len(eps) < 2 for eps in groups.values()):
        raise ValueError("every task family needs at least two episodes (one prompt, one query)")
    if not hasattr(policy, "tokenizer_"):
        policy.initialize(episodes)
    if not hasattr(policy, "optimizer_"):
        params = policy.parameters(include_tokenizer=policy.train_tokenizer)
        policy.optimizer_ = Adam(params, lr=policy.learning_rate, warmup_steps=policy.warmup_steps,
                                 decay_steps=_decay_steps(policy.lr_schedule, policy.n_steps))
    rng = policy.sample_rng_
    opt = policy.optimizer_
    for k in range(steps):
        pairs = sample_pairs(groups, policy.batch_size, rng)
        loss, bc, _ = policy_loss(policy, pairs)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss at step {len(policy.loss_curve_)}: "
                                f"bc={float(bc.data)!r}")
        opt.zero_grad()
        for p in policy.tokenizer_.parameters().values():
            p.zero_grad()
        loss.backward()
        opt.step()
        policy.loss_curve_.append(value)
        policy.bc_curve_.append(float(bc.data))
        if callback is not None:
            callback(policy, k)
    policy.tokenizer_.n_steps_trained_ += steps if policy.train_tokenizer else 0
    return policy.loss_curve_


# -- closed-loop evaluation -------------------------------------------------------------


def rollout_in_context(policy: CausalPolicy, state: ToyEnvState, prompt: Episode,
                       max_steps: int | None = None) -> Episode:
    """Run the policy closed-loop from ``state`` with ``prompt`` as context."""
    return rollout_batch(policy, [state], [prompt], max_steps)[0]


def rollout_batch(policy: CausalPolicy, states, prompts, max_steps: int | None = None) -> list[Episode]:
    """Lock-step closed-loop rollouts; each environment stops at its own success."""
    states = [s.copy() for s in states]
    max_steps = max_steps or max(s.horizon for s in states)
    obs = [[] for _ in states]
    acts = [[] for _ in states]
    done = [False] * len(states)
    success = [False] * len(states)
    start_goals = [s.goal.copy() for s in states]
    for _ in range(max_steps):
        active = [i for i, d in enumerate(done) if not d]
        if not active:
            break
        for i in active:
            obs[i].append(states[i].observation())
        preds = policy.predict_batch([prompts[i] for i in active], [np.array(obs[i]) for i in active])
        for i, pred in zip(active, preds):
            a = pred[-1]
            acts[i].append(a)
            try:
                states[i] = step(states[i], a)
            except ValueError:
                done[i] = True
                continue
            if is_success(states[i]):
                success[i] = done[i] = True
    return [Episode(np.array(o).reshape(-1, OBS_DIM), np.array(a).reshape(-1, ACT_DIM), ok, s.task, g)
            for o, a, ok, s, g in zip(obs, acts, success, states, start_goals)]


def success_rate(policy: CausalPolicy, states, prompts, batch: int = 50) -> float:
    results = []
    for start in range(0, len(states), batch):
        results.extend(rollout_batch(policy, states[start:start + batch], prompts[start:start + batch]))
    return float(np.mean([ep.success for ep in results]))
