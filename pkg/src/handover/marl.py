"""On-policy multi-agent training: rollout collection, GAE, PopArt and the PPO-style updates.

Two layouts share the same machinery:

* ``mappo``: one actor and one critic per agent, no shared parameters. Each critic sees the
  global state (both observations plus the true object position and velocity).
* ``ppo``: a single actor observing both agents' observations and emitting the concatenated
  action, with one critic on the same global state.

Timeouts are treated as terminal, so the value target never bootstraps across an episode end.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from handover.env import ACTION_DIM, HandoverEnv
from handover.errors import ConfigError, NonFiniteError, ShapeError
from handover.numerics import (
    AdamState,
    MlpParameters,
    adam_step,
    clamp_log_std,
    clip_grad_norm,
    gaussian_kl,
    gaussian_log_prob,
    huber,
    huber_grad,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    LOG_STD_MAX,
    LOG_STD_MIN,
)
from handover.rewards import outcome_from_events

POPART_STD_FLOOR = 1e-6
CRITIC_EXTRA_DIM = 6


@dataclass(frozen=True)
class TrainConfig:
    algo: str = "mappo"
    num_envs: int = 256
    rollout_length: int = 8
    opt_epochs: int = 5
    mini_batches: int = 1
    clip: float = 0.2
    max_grad_norm: float = 10.0
    lr: float = 5e-4
    adam_eps: float = 5e-4
    gamma: float = 0.96
    gae_lambda: float = 0.95
    huber_delta: float = 10.0
    ent_coef: float = 0.0
    value_norm: bool = True
    popart_rate: float = 1e-3
    init_std: float = 0.5
    desired_kl: float | None = None
    lr_bounds: tuple[float, float] = (1e-6, 1e-2)
    hidden: tuple[int, ...] = (64, 64)
    shared_critic: bool = False

    def __post_init__(self) -> None:
        if self.algo not in ("mappo", "ppo"):
            raise ConfigError(f"algo must be 'mappo' or 'ppo', got {self.algo!r}")
        if not 0.0 < self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("need 0 < gamma <= 1 and 0 <= gae_lambda <= 1")
        if self.clip <= 0 or self.max_grad_norm <= 0 or self.lr <= 0 or self.huber_delta <= 0:
            raise ConfigError("clip, max_grad_norm, lr and huber_delta must be positive")
        if self.num_envs < 1 or self.rollout_length < 1 or self.opt_epochs < 0 or self.mini_batches < 1:
            raise ConfigError("num_envs, rollout_length and mini_batches must be >= 1, opt_epochs >= 0")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "lr_bounds", tuple(float(b) for b in self.lr_bounds))

    @classmethod
    def mappo(cls, **kw) -> TrainConfig:
        return cls(**kw)

    @classmethod
    def ppo(cls, **kw) -> TrainConfig:
        base = dict(algo="ppo", mini_batches=4, max_grad_norm=1.0, lr=3e-4, adam_eps=1e-8, init_std=0.8,
                    desired_kl=0.016)
        base.update(kw)
        return cls(**base)

    def replace(self, **kw) -> TrainConfig:
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- GAE -----------------------------------------------------------------------------------


def compute_gae(rewards, values, dones, bootstrap, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates over an ``(L, N)`` segment.

    ``values[t]`` estimates the state before step ``t``; ``bootstrap`` is the value after
    the last step. Returns ``(advantages, returns)`` with ``returns = advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise ShapeError("rewards, values and dones must share a shape")
    nxt = np.concatenate([values[1:], np.asarray(bootstrap, dtype=np.float64)[None]], axis=0)
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * nxt[t] * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + values


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8) if std > 0 else adv - adv.mean()


# -- PopArt --------------------------------------------------------------------------------


@dataclass
class PopArtState:
    mean: float = 0.0
    mean_sq: float = 0.0
    debias: float = 0.0
    rate: float = 1e-3

    @property
    def mu(self) -> float:
        return self.mean / self.debias if self.debias > 0 else 0.0

    @property
    def sigma(self) -> float:
        if self.debias <= 0:
            return 1.0
        var = self.mean_sq / self.debias - self.mu ** 2
        return max(math.sqrt(max(var, 0.0)), POPART_STD_FLOOR)

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mu) / self.sigma

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.sigma + self.mu

    def copy(self) -> PopArtState:
        return dataclasses.replace(self)


def popart_update(state: PopArtState, returns, critic: MlpParameters | None = None) -> np.ndarray:
    """Fold a batch of returns into the running moments and rescale the critic head.

    The output layer is rewritten so that ``denormalize(critic(x))`` is unchanged for every
    input. Returns the targets in the new normalized space.
    """
    r = np.asarray(returns, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise NonFiniteError("popart_update received non-finite returns")
    mu_old, sigma_old = state.mu, state.sigma
    b = state.rate
    state.mean = (1.0 - b) * state.mean + b * float(r.mean())
    state.mean_sq = (1.0 - b) * state.mean_sq + b * float(np.mean(r * r))
    state.debias = (1.0 - b) * state.debias + b
    mu_new, sigma_new = state.mu, state.sigma
    if critic is not None:
        w, bias = critic.weights[-1], critic.biases[-1]
        w *= sigma_old / sigma_new
        bias[...] = (sigma_old * bias + mu_old - mu_new) / sigma_new
    return state.normalize(r)


# -- agents --------------------------------------------------------------------------------


@dataclass
class Learner:
    """An actor/critic pair with its optimizers and value normalizer."""

    actor: MlpParameters
    critic: MlpParameters
    actor_opt: AdamState
    critic_opt: AdamState
    popart: PopArtState

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, critic_dim: int, cfg: TrainConfig, rng: np.random.Generator) -> Learner:
        actor = init_mlp((obs_dim, *cfg.hidden, act_dim), rng, init_std=cfg.init_std)
        critic = init_mlp((critic_dim, *cfg.hidden, 1), rng, output_gain=1.0)
        return cls(actor, critic,
                   AdamState.for_tensors(actor.tensors(), lr=cfg.lr, eps=cfg.adam_eps),
                   AdamState.for_tensors(critic.tensors(), lr=cfg.lr, eps=cfg.adam_eps),
                   PopArtState(rate=cfg.popart_rate))

    def copy(self) -> Learner:
        return Learner(self.actor.copy(), self.critic.copy(), self.actor_opt.copy(), self.critic_opt.copy(),
                       self.popart.copy())

    def load_(self, other: Learner) -> None:
        self.actor.load_(other.actor)
        self.critic.load_(other.critic)
        self.actor_opt = other.actor_opt.copy()
        self.critic_opt = other.critic_opt.copy()
        self.popart = other.popart.copy()

    def value(self, critic_in) -> np.ndarray:
        return self.popart.denormalize(mlp_forward(self.critic, critic_in)[..., 0])


def create_learners(cfg: TrainConfig, obs_dim: int, seed: int) -> list[Learner]:
    """Thrower then catcher for ``mappo``; a single joint learner for ``ppo``."""
    rng = np.random.default_rng([seed, 11])
    critic_dim = 2 * obs_dim + CRITIC_EXTRA_DIM
    if cfg.algo == "mappo":
        return [Learner.create(obs_dim, ACTION_DIM, critic_dim, cfg, rng) for _ in range(2)]
    return [Learner.create(2 * obs_dim, 2 * ACTION_DIM, critic_dim, cfg, rng)]


def policy_inputs(cfg_algo: str, thrower_obs, catcher_obs) -> list[np.ndarray]:
    if cfg_algo == "mappo":
        return [thrower_obs, catcher_obs]
    return [np.concatenate([thrower_obs, catcher_obs], axis=-1)]


def split_actions(cfg_algo: str, actions: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    if cfg_algo == "mappo":
        return actions[0], actions[1]
    return actions[0][..., :ACTION_DIM], actions[0][..., ACTION_DIM:]


# -- rollout -------------------------------------------------------------------------------


@dataclass
class RolloutBuffer:
    """``(L, N, ...)`` experience for each learner; ``bootstrap`` holds the value after step L."""

    obs: list[np.ndarray]
    actions: list[np.ndarray]
    log_probs: list[np.ndarray]
    values: list[np.ndarray]
    rewards: np.ndarray
    dones: np.ndarray
    critic_in: np.ndarray
    bootstrap: list[np.ndarray]
    # stage-3 extras: estimator inputs per stacked frame, labels and a post-release mask
    est_inputs: np.ndarray | None = None
    goal_labels: np.ndarray | None = None
    released: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.rewards.shape

    def validate(self) -> None:
        for arrs in (self.obs, self.actions, self.log_probs, self.values):
            for a in arrs:
                if a.shape[:2] != self.shape:
                    raise ShapeError(f"buffer field has leading shape {a.shape[:2]}, expected {self.shape}")
        for lp in self.log_probs:
            if not np.all(np.isfinite(lp)):
                raise NonFiniteError("non-finite log-probability in rollout buffer")


@dataclass
class EpisodeStats:
    returns: list[float] = field(default_factory=list)
    successes: list[bool] = field(default_factory=list)
    hits: list[bool] = field(default_factory=list)
    kinds: list[int] = field(default_factory=list)

    def extend(self, other: EpisodeStats) -> None:
        self.returns += other.returns
        self.successes += other.successes
        self.hits += other.hits
        self.kinds += other.kinds


class RolloutState:
    """Carries observations and running episode returns between collection segments."""

    def __init__(self, env: HandoverEnv, estimator: MlpParameters | None = None):
        self.env = env
        self.estimator = estimator
        self.thrower_obs, self.catcher_obs = env.reset()
        self.ep_return = np.zeros(env.num_envs)
        k = env.config.history_frames
        self.est_hist = np.repeat(self._est_input()[:, None], k, axis=1)

    def _est_input(self) -> np.ndarray:
        return self.env.window.reshape(self.env.num_envs, -1).copy()

    def push_est(self, fresh: np.ndarray) -> None:
        cur = self._est_input()
        self.est_hist[~fresh] = np.roll(self.est_hist[~fresh], -1, axis=1)
        self.est_hist[~fresh, -1] = cur[~fresh]
        self.est_hist[fresh] = cur[fresh, None]


def act(learners: list[Learner], inputs: list[np.ndarray], rng: np.random.Generator | None):
    """Sample (or, with ``rng=None``, take the mean of) each learner's Gaussian policy."""
    actions, logps = [], []
    for lr_, x in zip(learners, inputs):
        mean = mlp_forward(lr_.actor, x)
        ls = clamp_log_std(lr_.actor.log_std)
        if rng is None:
            a = mean
        else:
            a = mean + np.exp(ls) * rng.standard_normal(mean.shape)
        actions.append(a)
        logps.append(gaussian_log_prob(mean, ls, a))
    return actions, logps


def collect_rollout(state: RolloutState, learners: list[Learner], algo: str, length: int,
                    rng: np.random.Generator | None) -> tuple[RolloutBuffer, EpisodeStats]:
    env = state.env
    n = env.num_envs
    stats = EpisodeStats()
    obs_l = [[] for _ in learners]
    act_l = [[] for _ in learners]
    logp_l = [[] for _ in learners]
    val_l = [[] for _ in learners]
    rewards, dones, critic_in = [], [], []
    est_in, labels, released = [], [], []
    for _ in range(length):
        inputs = policy_inputs(algo, state.thrower_obs, state.catcher_obs)
        cin = np.concatenate([state.thrower_obs, state.catcher_obs, env.critic_extras()], axis=1)
        actions, logps = act(learners, inputs, rng)
        for i, lr_ in enumerate(learners):
            v = lr_.value(cin)
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"non-finite value estimate from critic {i} during collection")
            obs_l[i].append(inputs[i])
            act_l[i].append(actions[i])
            logp_l[i].append(logps[i])
            val_l[i].append(v)
        critic_in.append(cin)
        if state.estimator is not None:
            est_in.append(state.est_hist.copy())
            labels.append(env.state.goal.copy())
            released.append(env.state.release_step >= 0)
        ta, ca = split_actions(algo, actions)
        res = env.step(ta, ca)
        state.ep_return += res.reward
        rewards.append(res.reward)
        dones.append(res.done.astype(np.float64))
        for i in np.flatnonzero(res.done):
            out = outcome_from_events(int(res.episode_events[i]), res.landing[i])
            stats.returns.append(float(state.ep_return[i]))
            stats.successes.append(out.success)
            stats.hits.append(out.hit)
            stats.kinds.append(int(res.final_state.obj_kind[i]))
            state.ep_return[i] = 0.0
        state.thrower_obs, state.catcher_obs = res.thrower_obs, res.catcher_obs
        if state.estimator is not None:
            state.push_est(res.done)
    cin = np.concatenate([state.thrower_obs, state.catcher_obs, env.critic_extras()], axis=1)
    boot = [lr_.value(cin) for lr_ in learners]
    buf = RolloutBuffer(
        obs=[np.stack(o) for o in obs_l], actions=[np.stack(a) for a in act_l],
        log_probs=[np.stack(lp) for lp in logp_l], values=[np.stack(v) for v in val_l],
        rewards=np.stack(rewards), dones=np.stack(dones), critic_in=np.stack(critic_in), bootstrap=boot,
        est_inputs=np.stack(est_in) if est_in else None,
        goal_labels=np.stack(labels) if labels else None,
        released=np.stack(released) if released else None,
    )
    buf.validate()
    return buf, stats


# -- losses --------------------------------------------------------------------------------


def surrogate_terms(ratio, adv, clip: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample clipped surrogate (to be maximised) and its derivative w.r.t. the ratio."""
    ratio = np.asarray(ratio, dtype=np.float64)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    use_unclipped = unclipped <= clipped
    obj = np.where(use_unclipped, unclipped, clipped)
    return obj, np.where(use_unclipped, adv, 0.0)


def actor_loss_and_grad(actor: MlpParameters, obs, actions, old_logp, adv, clip: float, ent_coef: float,
                        want_input_grad: bool = False):
    """Clipped-surrogate loss ``-mean(obj) - ent_coef * entropy`` and its parameter gradient.

    Returns ``(loss, grads, d_obs, info)``; ``d_obs`` is the gradient w.r.t. the actor input
    (only computed when ``want_input_grad``).
    """
    mean, cache = mlp_forward_cached(actor, obs)
    ls_raw = actor.log_std
    ls = clamp_log_std(ls_raw)
    std = np.exp(ls)
    z = (actions - mean) / std
    logp = np.sum(-0.5 * z * z - ls - 0.5 * math.log(2.0 * math.pi), axis=-1)
    ratio = np.exp(logp - old_logp)
    obj, d_ratio = surrogate_terms(ratio, adv, clip)
    b = len(adv)
    entropy = float(np.sum(0.5 + 0.5 * math.log(2.0 * math.pi) + ls))
    loss = -float(obj.mean()) - ent_coef * entropy
    d_logp = -(d_ratio * ratio) / b
    d_mean = d_logp[:, None] * z / std
    grads, d_in = mlp_backward(actor, cache, d_mean)
    inside = ((ls_raw > LOG_STD_MIN) & (ls_raw < LOG_STD_MAX)).astype(np.float64)
    d_ls = np.sum(d_logp[:, None] * (z * z - 1.0), axis=0) - ent_coef * np.ones_like(ls)
    grads[-1] = d_ls * inside
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > clip))
    info = {"clip_frac": clip_frac, "entropy": entropy}
    return loss, grads, (d_in if want_input_grad else None), info


def critic_loss_and_grad(critic: MlpParameters, critic_in, targets, delta: float):
    pred, cache = mlp_forward_cached(critic, critic_in)
    pred = pred[:, 0]
    loss = float(np.mean(huber(pred, targets, delta)))
    upstream = (huber_grad(pred, targets, delta) / len(targets))[:, None]
    grads, _ = mlp_backward(critic, cache, upstream)
    return loss, grads


def adapt_lr(lr: float, kl: float, desired_kl: float, bounds=(1e-6, 1e-2)) -> float:
    """KL-adaptive step size: halve above ``2 * desired``, grow 1.5x below ``desired / 2``."""
    if kl > 2.0 * desired_kl:
        lr = lr / 2.0
    elif kl < desired_kl / 2.0:
        lr = lr * 1.5
    return float(min(max(lr, bounds[0]), bounds[1]))


# -- update --------------------------------------------------------------------------------


@dataclass
class UpdateInfo:
    actor_loss: list[float]
    critic_loss: list[float]
    kl: list[float]
    lr: list[float]
    actor_grad_norm: list[float]
    critic_grad_norm: list[float]
    clip_frac: list[float]

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_finite(name: str, *values) -> None:
    for v in values:
        if isinstance(v, list):
            if not all(np.all(np.isfinite(g)) for g in v):
                raise NonFiniteError(f"non-finite {name}")
        elif not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite {name}")


def ppo_epochs(learner: Learner, obs, actions, old_logp, adv, critic_in, targets, cfg: TrainConfig,
               rng: np.random.Generator, actor_hook: Callable | None = None):
    """Run ``opt_epochs`` passes of mini-batch PPO over flattened samples.

    ``actor_hook(idx, d_obs)`` receives the actor input gradient of each mini-batch; it is
    used to route gradients into the goal estimator in joint fine-tuning.
    Returns ``(actor_loss, critic_loss, kl, actor_grad_norm, critic_grad_norm, clip_frac)``.
    """
    b = len(adv)
    old_mean = mlp_forward(learner.actor, obs)
    old_ls = clamp_log_std(learner.actor.log_std).copy()
    a_losses, c_losses, a_norms, c_norms, fracs, kls = [], [], [], [], [], []
    for _ in range(cfg.opt_epochs):
        perm = rng.permutation(b)
        for idx in np.array_split(perm, cfg.mini_batches):
            if len(idx) == 0:
                continue
            a_loss, a_grads, d_obs, info = actor_loss_and_grad(
                learner.actor, obs[idx], actions[idx], old_logp[idx], adv[idx], cfg.clip, cfg.ent_coef,
                want_input_grad=actor_hook is not None)
            c_loss, c_grads = critic_loss_and_grad(learner.critic, critic_in[idx], targets[idx], cfg.huber_delta)
            _check_finite("actor loss", a_loss, a_grads)
            _check_finite("critic loss", c_loss, c_grads)
            a_norms.append(clip_grad_norm(a_grads, cfg.max_grad_norm))
            c_norms.append(clip_grad_norm(c_grads, cfg.max_grad_norm))
            if actor_hook is not None:
                actor_hook(idx, d_obs)
            adam_step(learner.actor_opt, learner.actor.tensors(), a_grads)
            adam_step(learner.critic_opt, learner.critic.tensors(), c_grads)
            a_losses.append(a_loss)
            c_losses.append(c_loss)
            fracs.append(info["clip_frac"])
        new_mean = mlp_forward(learner.actor, obs)
        kl = float(np.mean(gaussian_kl(old_mean, old_ls, new_mean, learner.actor.log_std)))
        _check_finite("policy after update", kl)
        kls.append(kl)
        if cfg.desired_kl is not None:
            lr = adapt_lr(learner.actor_opt.lr, kl, cfg.desired_kl, cfg.lr_bounds)
            learner.actor_opt.lr = lr
            learner.critic_opt.lr = lr
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0  # noqa: E731
    return mean(a_losses), mean(c_losses), (kls[-1] if kls else 0.0), mean(a_norms), mean(c_norms), mean(fracs)


def update_learners(learners: list[Learner], buf: RolloutBuffer, cfg: TrainConfig, rng: np.random.Generator,
                    hooks: list[Callable | None] | None = None) -> UpdateInfo:
    """One PPO update of every learner from ``buf``; all-or-nothing on numeric failure.

    Shared by :func:`mappo_update` (two learners, one mini-batch) and :func:`ppo_update` (one
    learner, four mini-batches, KL-adaptive step size); only ``cfg`` differs.
    """
    backup = [lr_.copy() for lr_ in learners]
    info = UpdateInfo([], [], [], [], [], [], [])
    l_, n = buf.shape
    flat = lambda x: x.reshape(l_ * n, *x.shape[2:])  # noqa: E731
    try:
        for i, lr_ in enumerate(learners):
            adv, ret = compute_gae(buf.rewards, buf.values[i], buf.dones, buf.bootstrap[i], cfg.gamma, cfg.gae_lambda)
            adv = normalize_advantages(adv)
            if cfg.value_norm:
                targets = popart_update(lr_.popart, ret, lr_.critic)
            else:
                targets = ret
            hook = hooks[i] if hooks else None
            res = ppo_epochs(lr_, flat(buf.obs[i]), flat(buf.actions[i]), flat(buf.log_probs[i]), flat(adv),
                             flat(buf.critic_in), flat(targets), cfg, rng, hook)
            info.actor_loss.append(res[0])
            info.critic_loss.append(res[1])
            info.kl.append(res[2])
            info.lr.append(lr_.actor_opt.lr)
            info.actor_grad_norm.append(res[3])
            info.critic_grad_norm.append(res[4])
            info.clip_frac.append(res[5])
    except NonFiniteError:
        for lr_, bk in zip(learners, backup):
            lr_.load_(bk)
        raise
    return info


def mappo_update(learners: list[Learner], buf: RolloutBuffer, cfg: TrainConfig, rng: np.random.Generator,
                 hooks=None) -> UpdateInfo:
    if cfg.algo != "mappo" or len(learners) != 2:
        raise ConfigError("mappo_update needs a mappo config and two learners")
    return update_learners(learners, buf, cfg, rng, hooks)


def ppo_update(learners: list[Learner], buf: RolloutBuffer, cfg: TrainConfig, rng: np.random.Generator,
               hooks=None) -> UpdateInfo:
    if cfg.algo != "ppo" or len(learners) != 1:
        raise ConfigError("ppo_update needs a ppo config and one learner")
    return update_learners(learners, buf, cfg, rng, hooks)
