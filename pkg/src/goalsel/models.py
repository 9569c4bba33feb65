"""The learned models: a goal-conditioned recurrent policy, conditional VAEs
for goal and action proposals, a Q-network with a polyak-averaged target copy,
and the small nets used by the ablation and baseline policies.

All models normalize their inputs with dataset statistics and denormalize
predictions at the interface, so losses are computed in normalized space and
the VAE KL weights stay scale-free. Each model owns a disjoint
:class:`~goalsel.nn.ParamStore`; ``loss_and_grad`` methods return the scalar
loss and accumulate parameter gradients as a side effect.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import NormStats
from .nn import (
    MLP,
    GaussianHead,
    GRUCell,
    Linear,
    ParamStore,
    kl_to_standard_normal,
    relu,
    relu_backward,
)

VARIANTS = ("iris", "iris_no_goal_vae", "iris_no_q", "bc", "bc_rnn", "bcq")


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


class PolicyRNN:
    """Recurrent imitation policy, optionally conditioned on a goal state.

    The training unroll starts from a zero hidden state over a T-step window;
    at test time the controller owns the hidden state and resets it whenever
    it refreshes the goal.
    """

    def __init__(self, obs_dim: int, act_dim: int, norm: NormStats, *,
                 hidden_dim: int = 64, enc_dim: int = 64,
                 goal_conditioned: bool = True, rng: np.random.Generator):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.norm = norm
        self.goal_conditioned = goal_conditioned
        self.hidden_dim = hidden_dim
        self.store = ParamStore()
        in_dim = obs_dim * 2 if goal_conditioned else obs_dim
        self.enc = Linear(self.store, "enc", in_dim, enc_dim, rng)
        self.cell = GRUCell(self.store, "gru", enc_dim, hidden_dim, rng)
        self.head = Linear(self.store, "head", hidden_dim, act_dim, rng)

    def init_hidden(self, batch: int = 1) -> np.ndarray:
        return np.zeros((batch, self.hidden_dim))

    def _inputs(self, s_n: np.ndarray, g_n: np.ndarray | None) -> np.ndarray:
        if self.goal_conditioned:
            if g_n is None:
                raise ValueError("goal-conditioned policy needs a goal")
            return np.concatenate([s_n, g_n], axis=-1)
        return s_n

    def _unroll(self, states_n: np.ndarray, goal_n: np.ndarray | None):
        """states_n: (B, T, obs) -> normalized actions (B, T, act) plus caches."""
        batch, t_window, _ = states_n.shape
        h = self.init_hidden(batch)
        acts = np.empty((batch, t_window, self.act_dim))
        caches = []
        for t in range(t_window):
            x = self._inputs(states_n[:, t], goal_n)
            e_pre, e_cache = self.enc.forward(x)
            e, e_mask = relu(e_pre)
            h, c_cache = self.cell.forward(h, e)
            a, h_cache = self.head.forward(h)
            acts[:, t] = a
            caches.append((e_cache, e_mask, c_cache, h_cache))
        return acts, caches

    def rollout_train(self, states, goal=None) -> np.ndarray:
        """Predict the window's action sequence from a zero hidden state.

        Accepts a single (T, obs) window or a batch (B, T, obs); returns
        denormalized actions of matching leading shape.
        """
        states = np.asarray(states, dtype=np.float64)
        single = states.ndim == 2
        if single:
            states = states[None]
            goal = None if goal is None else np.asarray(goal)[None]
        states_n = self.norm.norm_state(states)
        goal_n = None if goal is None else self.norm.norm_state(goal)
        acts_n, _ = self._unroll(states_n, goal_n)
        acts = self.norm.denorm_action(acts_n)
        return acts[0] if single else acts

    def loss_and_grad(self, states, actions, goal=None) -> float:
        """Imitation loss: per-window sum of squared normalized-action errors,
        averaged over the batch. Accumulates gradients."""
        states_n = self.norm.norm_state(states)
        actions_n = self.norm.norm_action(actions)
        goal_n = None if goal is None else self.norm.norm_state(goal)
        batch, t_window, _ = states_n.shape
        pred_n, caches = self._unroll(states_n, goal_n)
        err = pred_n - actions_n
        loss = float((err ** 2).sum(axis=(1, 2)).mean())
        dpred = 2.0 * err / batch
        dh_next = np.zeros((batch, self.hidden_dim))
        for t in range(t_window - 1, -1, -1):
            e_cache, e_mask, c_cache, h_cache = caches[t]
            dh = self.head.backward(h_cache, dpred[:, t]) + dh_next
            dh_prev, de = self.cell.backward(c_cache, dh)
            self.enc.backward(e_cache, relu_backward(e_mask, de))
            dh_next = dh_prev
        return loss

    def step(self, hidden: np.ndarray, s, goal=None) -> tuple[np.ndarray, np.ndarray]:
        """One closed-loop step; returns (denormalized action, new hidden)."""
        s_n = self.norm.norm_state(np.asarray(s, dtype=np.float64))[None, :]
        g_n = None if goal is None else self.norm.norm_state(goal)[None, :]
        x = self._inputs(s_n, g_n)
        e_pre, _ = self.enc.forward(x)
        e, _ = relu(e_pre)
        h_new, _ = self.cell.forward(hidden, e)
        a_n, _ = self.head.forward(h_new)
        return self.norm.denorm_action(a_n)[0], h_new


def bc_loss(predicted, actual):
    """Sum over a window of squared L2 action errors.

    (T, d) inputs give a scalar; (B, T, d) inputs give a per-window vector.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {actual.shape}")
    sq = (predicted - actual) ** 2
    if sq.ndim <= 2:
        return float(sq.sum())
    return sq.reshape(sq.shape[0], -1).sum(axis=1)


class ConditionalVAE:
    """Conditional VAE with a diagonal-Gaussian latent and standard-normal prior.

    The encoder maps (normalized target, normalized condition) to a
    :class:`GaussianHead`; the decoder reconstructs the normalized target from
    (latent, normalized condition). Sampling denormalizes at the interface.
    """

    def __init__(self, target_dim: int, cond_dim: int, latent_dim: int, beta: float,
                 target_mean, target_std, cond_mean, cond_std, *,
                 hidden_dim: int = 64, rng: np.random.Generator):
        self.target_dim = target_dim
        self.cond_dim = cond_dim
        self.latent_dim = latent_dim
        self.beta = float(beta)
        self.target_mean = np.asarray(target_mean, dtype=np.float64)
        self.target_std = np.asarray(target_std, dtype=np.float64)
        self.cond_mean = np.asarray(cond_mean, dtype=np.float64)
        self.cond_std = np.asarray(cond_std, dtype=np.float64)
        self.store = ParamStore()
        self.encoder = MLP(self.store, "enc",
                           [target_dim + cond_dim, hidden_dim, hidden_dim, 2 * latent_dim],
                           rng)
        self.decoder = MLP(self.store, "dec",
                           [latent_dim + cond_dim, hidden_dim, hidden_dim, target_dim],
                           rng)

    def _norm_target(self, x):
        return (np.asarray(x, dtype=np.float64) - self.target_mean) / self.target_std

    def _denorm_target(self, x):
        return np.asarray(x, dtype=np.float64) * self.target_std + self.target_mean

    def _norm_cond(self, x):
        return (np.asarray(x, dtype=np.float64) - self.cond_mean) / self.cond_std

    def encode(self, target_n: np.ndarray, cond_n: np.ndarray):
        raw, cache = self.encoder.forward(np.concatenate([target_n, cond_n], axis=-1))
        return GaussianHead.from_raw(raw), cache

    def decode_normalized(self, z: np.ndarray, cond_n: np.ndarray):
        return self.decoder.forward(np.concatenate([z, cond_n], axis=-1))

    def decode_raw(self, z, cond) -> np.ndarray:
        """Decoder output for raw conditions, denormalized (no cache kept)."""
        z, single = _as_batch(z)
        cond_n, _ = _as_batch(self._norm_cond(cond))
        if cond_n.shape[0] == 1 and z.shape[0] > 1:
            cond_n = np.broadcast_to(cond_n, (z.shape[0], cond_n.shape[1]))
        out_n, _ = self.decode_normalized(z, cond_n)
        out = self._denorm_target(out_n)
        return out[0] if single else out

    def loss_and_grad(self, target, cond, rng: np.random.Generator | None = None,
                      eps: np.ndarray | None = None) -> tuple[float, dict[str, float]]:
        """Reconstruction (squared error, normalized space) + beta * closed-form KL.

        Noise is drawn from ``rng`` unless ``eps`` is injected (frozen-noise
        gradient checks). Accumulates gradients.
        """
        target_n, single = _as_batch(self._norm_target(target))
        cond_n, _ = _as_batch(self._norm_cond(cond))
        if target_n.shape[0] != cond_n.shape[0]:
            raise ValueError("target/condition batch mismatch")
        batch = target_n.shape[0]
        head, enc_cache = self.encode(target_n, cond_n)
        if eps is None:
            if rng is None:
                raise ValueError("need either an rng or injected noise")
            eps = rng.standard_normal(head.mu.shape)
        eps = np.asarray(eps, dtype=np.float64).reshape(head.mu.shape)
        sigma = head.sigma
        z = head.mu + sigma * eps
        out_n, dec_cache = self.decode_normalized(z, cond_n)
        diff = out_n - target_n
        recon = float((diff ** 2).sum(axis=-1).mean())
        kl = float(np.mean(kl_to_standard_normal(head)))
        loss = recon + self.beta * kl

        dout = 2.0 * diff / batch
        din = self.decoder.backward(dec_cache, dout)
        dz = din[:, :self.latent_dim]
        dmu = dz + self.beta * head.mu / batch
        dls = dz * eps * sigma + self.beta * (sigma ** 2 - 1.0) / batch
        dls = dls * head.clip_mask
        self.encoder.backward(enc_cache, np.concatenate([dmu, dls], axis=-1))
        return loss, {"recon": recon, "kl": kl}

    def sample(self, cond, n: int, rng: np.random.Generator | None = None,
               z: np.ndarray | None = None) -> np.ndarray:
        """n decoder outputs from i.i.d. standard-normal latents, denormalized."""
        if n < 1:
            raise ValueError("need at least one sample")
        if z is None:
            if rng is None:
                raise ValueError("need either an rng or injected latents")
            z = rng.standard_normal((n, self.latent_dim))
        z = np.asarray(z, dtype=np.float64).reshape(n, self.latent_dim)
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim != 1:
            raise ValueError("sample() takes a single condition; see sample_each()")
        cond_n = np.broadcast_to(self._norm_cond(cond)[None, :], (n, self.cond_dim))
        out_n, _ = self.decode_normalized(z, cond_n)
        return self._denorm_target(out_n)

    def sample_each(self, cond, n: int, rng: np.random.Generator) -> np.ndarray:
        """n samples for each of a batch of conditions; returns (n, B, target_dim)."""
        if n < 1:
            raise ValueError("need at least one sample")
        cond_n, _ = _as_batch(self._norm_cond(cond))
        batch = cond_n.shape[0]
        z = rng.standard_normal((n, batch, self.latent_dim))
        out = np.empty((n, batch, self.target_dim))
        for j in range(n):
            out_n, _ = self.decode_normalized(z[j], cond_n)
            out[j] = self._denorm_target(out_n)
        return out


class GoalCVAE(ConditionalVAE):
    """Models the distribution of states T steps ahead of a given state."""

    def __init__(self, obs_dim: int, norm: NormStats, *, latent_dim: int = 8,
                 beta: float = 0.05, hidden_dim: int = 64, rng: np.random.Generator):
        super().__init__(obs_dim, obs_dim, latent_dim, beta,
                         norm.state_mean, norm.state_std,
                         norm.state_mean, norm.state_std,
                         hidden_dim=hidden_dim, rng=rng)


class ActionCVAE(ConditionalVAE):
    """Models the state-conditional distribution of demonstrated actions."""

    def __init__(self, obs_dim: int, act_dim: int, norm: NormStats, *,
                 latent_dim: int = 4, beta: float = 0.05, hidden_dim: int = 64,
                 rng: np.random.Generator):
        super().__init__(act_dim, obs_dim, latent_dim, beta,
                         norm.action_mean, norm.action_std,
                         norm.state_mean, norm.state_std,
                         hidden_dim=hidden_dim, rng=rng)


def cvae_loss(cvae: ConditionalVAE, target, condition,
              rng: np.random.Generator | None = None,
              eps: np.ndarray | None = None) -> tuple[float, dict[str, float]]:
    """Training loss of a conditional VAE (accumulates gradients)."""
    return cvae.loss_and_grad(target, condition, rng=rng, eps=eps)


def sample_goals(goal_cvae: ConditionalVAE, s, n: int,
                 rng: np.random.Generator | None = None,
                 z: np.ndarray | None = None) -> np.ndarray:
    """n goal-state proposals at state s."""
    return goal_cvae.sample(s, n, rng=rng, z=z)


def sample_actions(action_cvae: ConditionalVAE, s, n: int,
                   rng: np.random.Generator | None = None,
                   z: np.ndarray | None = None) -> np.ndarray:
    """n action proposals at state s."""
    return action_cvae.sample(s, n, rng=rng, z=z)


class QNet:
    """State-action value MLP with a polyak-averaged target copy."""

    def __init__(self, obs_dim: int, act_dim: int, norm: NormStats, *,
                 hidden_dim: int = 64, rng: np.random.Generator):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.norm = norm
        sizes = [obs_dim + act_dim, hidden_dim, hidden_dim, 1]
        self.store = ParamStore()
        self.mlp = MLP(self.store, "q", sizes, rng)
        self.target_store = ParamStore()
        self.target_mlp = MLP(self.target_store, "q", sizes, rng)
        polyak_update(self, 1.0)

    def _inputs(self, s, a) -> tuple[np.ndarray, bool]:
        s_n, single = _as_batch(self.norm.norm_state(s))
        a_n, _ = _as_batch(self.norm.norm_action(a))
        return np.concatenate([s_n, a_n], axis=-1), single

    def value(self, s, a, use_target: bool = False):
        """Scalar value(s) from the online or target parameters."""
        x, single = self._inputs(s, a)
        net = self.target_mlp if use_target else self.mlp
        q, _ = net.forward(x)
        q = q[:, 0]
        return float(q[0]) if single else q

    def loss_and_grad(self, s, a, targets) -> tuple[float, float]:
        """Mean squared TD error against fixed targets; returns (loss, mean Q)."""
        x, _ = self._inputs(s, a)
        targets = np.asarray(targets, dtype=np.float64)
        q, cache = self.mlp.forward(x)
        q = q[:, 0]
        err = q - targets
        loss = float((err ** 2).mean())
        self.mlp.backward(cache, (2.0 * err / err.size)[:, None])
        return loss, float(q.mean())


def polyak_update(qnet: QNet, tau: float) -> QNet:
    """target <- tau * online + (1 - tau) * target, elementwise."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    for name, tensor in qnet.store.params.items():
        target = qnet.target_store.params[name].value
        target *= 1.0 - tau
        target += tau * tensor.value
    return qnet


def q_value(qnet: QNet, s, a, use_target: bool = False):
    """Convenience wrapper over :meth:`QNet.value`."""
    return qnet.value(s, a, use_target=use_target)


class GoalRegressor:
    """Deterministic goal predictor: squared-error regression s -> s_{t+T}."""

    def __init__(self, obs_dim: int, norm: NormStats, *, hidden_dim: int = 64,
                 rng: np.random.Generator):
        self.obs_dim = obs_dim
        self.norm = norm
        self.store = ParamStore()
        self.mlp = MLP(self.store, "reg", [obs_dim, hidden_dim, hidden_dim, obs_dim], rng)

    def predict(self, s) -> np.ndarray:
        s_n, single = _as_batch(self.norm.norm_state(s))
        out_n, _ = self.mlp.forward(s_n)
        out = self.norm.denorm_state(out_n)
        return out[0] if single else out

    def loss_and_grad(self, s, target) -> float:
        s_n, _ = _as_batch(self.norm.norm_state(s))
        t_n, _ = _as_batch(self.norm.norm_state(target))
        out_n, cache = self.mlp.forward(s_n)
        diff = out_n - t_n
        loss = float((diff ** 2).sum(axis=-1).mean())
        self.mlp.backward(cache, 2.0 * diff / s_n.shape[0])
        return loss


class BCNet:
    """Plain behavioral cloning: squared-error regression s -> a."""

    def __init__(self, obs_dim: int, act_dim: int, norm: NormStats, *,
                 hidden_dim: int = 64, rng: np.random.Generator):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.norm = norm
        self.store = ParamStore()
        self.mlp = MLP(self.store, "bc", [obs_dim, hidden_dim, hidden_dim, act_dim], rng)

    def act(self, s) -> np.ndarray:
        s_n, single = _as_batch(self.norm.norm_state(s))
        out_n, _ = self.mlp.forward(s_n)
        out = self.norm.denorm_action(out_n)
        return out[0] if single else out

    def loss_and_grad(self, s, a) -> float:
        s_n, _ = _as_batch(self.norm.norm_state(s))
        a_n, _ = _as_batch(self.norm.norm_action(a))
        out_n, cache = self.mlp.forward(s_n)
        diff = out_n - a_n
        loss = float((diff ** 2).sum(axis=-1).mean())
        self.mlp.backward(cache, 2.0 * diff / s_n.shape[0])
        return loss


@dataclass
class ModelSet:
    """The models a policy variant trains and runs; unused slots stay None."""

    variant: str
    obs_dim: int
    act_dim: int
    norm: NormStats
    policy: PolicyRNN | None = None
    goal_cvae: GoalCVAE | None = None
    action_cvae: ActionCVAE | None = None
    qnet: QNet | None = None
    goal_regressor: GoalRegressor | None = None
    bc_net: BCNet | None = None

    def stores(self) -> dict[str, ParamStore]:
        """Checkpoint-prefix -> parameter store for every present component."""
        out: dict[str, ParamStore] = {}
        if self.policy is not None:
            out["policy"] = self.policy.store
        if self.goal_cvae is not None:
            out["goal_cvae"] = self.goal_cvae.store
        if self.action_cvae is not None:
            out["action_cvae"] = self.action_cvae.store
        if self.qnet is not None:
            out["qnet"] = self.qnet.store
            out["qnet_target"] = self.qnet.target_store
        if self.goal_regressor is not None:
            out["goal_reg"] = self.goal_regressor.store
        if self.bc_net is not None:
            out["bc"] = self.bc_net.store
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        flat: dict[str, np.ndarray] = {}
        for prefix, store in self.stores().items():
            for name, tensor in store:
                flat[f"{prefix}/{name}"] = tensor.value.copy()
        return flat

    def load_state_dict(self, flat: dict[str, np.ndarray]) -> None:
        for prefix, store in self.stores().items():
            sub = {name[len(prefix) + 1:]: value for name, value in flat.items()
                   if name.startswith(prefix + "/")}
            store.load_state_dict(sub)


def build_models(variant: str, obs_dim: int, act_dim: int, norm: NormStats, *,
                 hidden_dim: int = 64, enc_dim: int = 64, goal_latent: int = 8,
                 action_latent: int = 4, beta_g: float = 0.05, beta_a: float = 0.05,
                 rng: np.random.Generator) -> ModelSet:
    """Instantiate the component models a variant needs.

    Each component draws its initialization from its own fixed rng slot, so a
    component shared by two variants starts from identical parameters when the
    root seed matches.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    slots = rng.spawn(6)
    ms = ModelSet(variant=variant, obs_dim=obs_dim, act_dim=act_dim, norm=norm)
    if variant in ("iris", "iris_no_goal_vae", "iris_no_q"):
        ms.policy = PolicyRNN(obs_dim, act_dim, norm, hidden_dim=hidden_dim,
                              enc_dim=enc_dim, goal_conditioned=True, rng=slots[0])
    elif variant == "bc_rnn":
        ms.policy = PolicyRNN(obs_dim, act_dim, norm, hidden_dim=hidden_dim,
                              enc_dim=enc_dim, goal_conditioned=False, rng=slots[0])
    if variant in ("iris", "iris_no_q"):
        ms.goal_cvae = GoalCVAE(obs_dim, norm, latent_dim=goal_latent, beta=beta_g,
                                hidden_dim=hidden_dim, rng=slots[1])
    if variant in ("iris", "bcq"):
        ms.action_cvae = ActionCVAE(obs_dim, act_dim, norm, latent_dim=action_latent,
                                    beta=beta_a, hidden_dim=hidden_dim, rng=slots[2])
        ms.qnet = QNet(obs_dim, act_dim, norm, hidden_dim=hidden_dim, rng=slots[3])
    if variant == "iris_no_goal_vae":
        ms.goal_regressor = GoalRegressor(obs_dim, norm, hidden_dim=hidden_dim,
                                          rng=slots[4])
    if variant == "bc":
        ms.bc_net = BCNet(obs_dim, act_dim, norm, hidden_dim=hidden_dim, rng=slots[5])
    return ms
