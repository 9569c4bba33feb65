"""Joint offline training of the policy, both conditional VAEs, and the
Q-network from dataset windows. Purely offline: this module never touches an
environment.

Each iteration samples a batch of T-step windows and applies the four
parameter updates in a fixed order: (1) policy imitation on the window with
its last state as goal, (2) goal VAE on the (first state, last state) pair,
(3) action VAE on the window's final transition, (4) Q regression toward
``r + gamma * max_i Q'(s_next, a_i)`` over action-VAE proposals, with the
absorbing-goal value ``r / (1 - gamma)`` when the window ends a trajectory.
Ablation variants simply skip updates; per-component noise comes from fixed
rng slots so a disabled component never perturbs the others' draws.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import canonical_json, config_digest
from .data import TrajectoryDataset, WindowBatch
from .models import (
    VARIANTS,
    ConditionalVAE,
    ModelSet,
    QNet,
    build_models,
    polyak_update,
)
from .nn import adam_step, grad_check, save_checkpoint

METRIC_COLUMNS = ("iter", "loss_policy", "loss_goal_recon", "loss_goal_kl",
                  "loss_action_recon", "loss_action_kl", "loss_q", "q_mean")
_COLUMN_KEYS = {"loss_policy": "policy", "loss_goal_recon": "goal_recon",
                "loss_goal_kl": "goal_kl", "loss_action_recon": "action_recon",
                "loss_action_kl": "action_kl", "loss_q": "q", "q_mean": "q_mean"}


@dataclass(frozen=True)
class TrainConfig:
    """All training knobs; defaults are the desk-scale profile."""

    variant: str = "iris"
    t_window: int = 10
    batch_size: int = 128
    n_iter: int = 4000
    gamma: float = 0.99
    m_proposals: int = 10
    beta_g: float = 0.05
    beta_a: float = 0.05
    lr: float = 1e-3
    tau: float = 0.005
    seed: int = 0
    hidden_dim: int = 64
    enc_dim: int = 64
    goal_latent: int = 8
    action_latent: int = 4
    q_all_transitions: bool = False
    ckpt_every: int = 2000
    log_every: int = 50

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.t_window < 2:
            raise ValueError("t_window must be >= 2")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.m_proposals < 1:
            raise ValueError("m_proposals must be >= 1")
        if self.batch_size < 1 or self.n_iter < 0:
            raise ValueError("batch_size must be >= 1 and n_iter >= 0")
        if self.beta_g < 0 or self.beta_a < 0 or self.lr <= 0:
            raise ValueError("betas must be >= 0 and lr > 0")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.ckpt_every < 1 or self.log_every < 1:
            raise ValueError("cadences must be >= 1")

    @property
    def sample_t(self) -> int:
        """Window length actually sampled: single transitions for bc/bcq."""
        return 1 if self.variant in ("bc", "bcq") else self.t_window


def q_target(qnet: QNet, action_cvae: ConditionalVAE, s_next, r: float,
             is_terminal: bool, gamma: float, n_proposals: int,
             rng: np.random.Generator) -> float:
    """Bootstrap target for one transition.

    Non-terminal: ``r + gamma * max_i Q'(s_next, a_i)`` over action-VAE
    proposals at ``s_next``. Terminal: the absorbing-goal value
    ``r / (1 - gamma)``. The enumeration here is the reference floating-point
    path; the batched training helper is cross-checked against it.
    """
    if n_proposals < 1:
        raise ValueError("need at least one action proposal")
    if is_terminal:
        return float(r) / (1.0 - gamma)
    proposals = action_cvae.sample(np.asarray(s_next, dtype=np.float64),
                                   n_proposals, rng)
    best = max(qnet.value(s_next, a, use_target=True) for a in proposals)
    return float(r) + gamma * best


def q_targets_batch(qnet: QNet, action_cvae: ConditionalVAE, s_next, r,
                    is_terminal, gamma: float, n_proposals: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Vectorized :func:`q_target` over a batch of transitions."""
    if n_proposals < 1:
        raise ValueError("need at least one action proposal")
    s_next = np.asarray(s_next, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    is_terminal = np.asarray(is_terminal, dtype=bool)
    proposals = action_cvae.sample_each(s_next, n_proposals, rng)
    best = np.full(s_next.shape[0], -np.inf)
    for j in range(n_proposals):
        best = np.maximum(best, qnet.value(s_next, proposals[j], use_target=True))
    out = r + gamma * best
    out[is_terminal] = r[is_terminal] / (1.0 - gamma)
    return out


def train_step(models: ModelSet, dataset: TrajectoryDataset, cfg: TrainConfig,
               rng: np.random.Generator, update: bool = True) -> dict[str, float]:
    """One batch through every enabled component, in the fixed update order.

    With ``update=False`` the losses and gradients are computed but no
    parameters move (used by gradient and orthogonality tests).
    """
    batch = dataset.sample_window_batch(cfg.sample_t, cfg.batch_size, rng)
    goal_rng, action_rng, proposal_rng = rng.spawn(3)
    losses: dict[str, float] = {}

    if models.policy is not None:
        goal = batch.states[:, -1] if models.policy.goal_conditioned else None
        losses["policy"] = models.policy.loss_and_grad(
            batch.states[:, :-1], batch.actions, goal)
        if update:
            adam_step(models.policy.store, cfg.lr)
    if models.bc_net is not None:
        losses["policy"] = models.bc_net.loss_and_grad(
            batch.states[:, 0], batch.actions[:, 0])
        if update:
            adam_step(models.bc_net.store, cfg.lr)

    if models.goal_cvae is not None:
        _, parts = models.goal_cvae.loss_and_grad(
            batch.states[:, -1], batch.states[:, 0], rng=goal_rng)
        losses["goal_recon"] = parts["recon"]
        losses["goal_kl"] = parts["kl"]
        if update:
            adam_step(models.goal_cvae.store, cfg.lr)
    elif models.goal_regressor is not None:
        losses["goal_recon"] = models.goal_regressor.loss_and_grad(
            batch.states[:, 0], batch.states[:, -1])
        if update:
            adam_step(models.goal_regressor.store, cfg.lr)

    if models.action_cvae is not None:
        _, parts = models.action_cvae.loss_and_grad(
            batch.actions[:, -1], batch.states[:, -2], rng=action_rng)
        losses["action_recon"] = parts["recon"]
        losses["action_kl"] = parts["kl"]
        if update:
            adam_step(models.action_cvae.store, cfg.lr)

    if models.qnet is not None:
        s, a, r, s_next, terminal = _q_transitions(batch, cfg)
        targets = q_targets_batch(models.qnet, models.action_cvae, s_next, r,
                                  terminal, cfg.gamma, cfg.m_proposals,
                                  proposal_rng)
        losses["q"], losses["q_mean"] = models.qnet.loss_and_grad(s, a, targets)
        if update:
            adam_step(models.qnet.store, cfg.lr)
            polyak_update(models.qnet, cfg.tau)
    return losses


def _q_transitions(batch: WindowBatch, cfg: TrainConfig):
    """The window's final transition, or every transition when configured."""
    if cfg.q_all_transitions and batch.states.shape[1] > 2:
        t = batch.actions.shape[1]
        s = batch.states[:, :-1].reshape(-1, batch.states.shape[2])
        a = batch.actions.reshape(-1, batch.actions.shape[2])
        r = batch.rewards.reshape(-1)
        s_next = batch.states[:, 1:].reshape(-1, batch.states.shape[2])
        terminal = np.zeros((len(batch), t), dtype=bool)
        terminal[:, -1] = batch.is_terminal
        return s, a, r, s_next, terminal.reshape(-1)
    return (batch.states[:, -2], batch.actions[:, -1], batch.rewards[:, -1],
            batch.states[:, -1], batch.is_terminal)


class TrainState:
    """Iteration counter and running (since last flush) loss averages."""

    def __init__(self):
        self.iteration = 0
        self._sums: dict[str, float] = {}
        self._counts: dict[str, int] = {}

    def update(self, losses: dict[str, float]) -> None:
        self.iteration += 1
        for key, value in losses.items():
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite {key} loss at iteration "
                                         f"{self.iteration}: {value}")
            self._sums[key] = self._sums.get(key, 0.0) + value
            self._counts[key] = self._counts.get(key, 0) + 1

    def flush(self) -> dict[str, float]:
        means = {k: self._sums[k] / self._counts[k] for k in self._sums}
        self._sums.clear()
        self._counts.clear()
        return means


@dataclass
class TrainResult:
    out_dir: Path
    checkpoints: list[Path]
    metrics_path: Path
    config: TrainConfig
    models: ModelSet
    elapsed: float


def _checkpoint(models: ModelSet, out_dir: Path, iteration: int,
                digest: str) -> Path:
    path = out_dir / f"ckpt_{iteration:07d}.bin"
    save_checkpoint(path, models.state_dict(), config_hash=digest)
    return path


def train(dataset: TrajectoryDataset, cfg: TrainConfig, out_dir) -> TrainResult:
    """Run ``cfg.n_iter`` training steps, writing checkpoints and a metrics log.

    Fully offline and deterministic given (config, seed): the initial
    checkpoint is always written, then one every ``ckpt_every`` iterations and
    at the end.
    """
    cfg.validate()
    started = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(canonical_json(cfg) + "\n")
    digest = config_digest(cfg)

    root = np.random.default_rng(cfg.seed)
    init_rng, step_rng = root.spawn(2)
    models = build_models(cfg.variant, dataset.obs_dim, dataset.act_dim,
                          dataset.norm_stats, hidden_dim=cfg.hidden_dim,
                          enc_dim=cfg.enc_dim, goal_latent=cfg.goal_latent,
                          action_latent=cfg.action_latent, beta_g=cfg.beta_g,
                          beta_a=cfg.beta_a, rng=init_rng)

    checkpoints = [_checkpoint(models, out_dir, 0, digest)]
    state = TrainState()
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(METRIC_COLUMNS)
    for i in range(1, cfg.n_iter + 1):
        losses = train_step(models, dataset, cfg, step_rng)
        state.update(losses)
        if i % cfg.log_every == 0 or i == cfg.n_iter:
            means = state.flush()
            writer.writerow([i] + [
                repr(means[_COLUMN_KEYS[col]]) if _COLUMN_KEYS[col] in means else ""
                for col in METRIC_COLUMNS[1:]
            ])
        if i % cfg.ckpt_every == 0 or i == cfg.n_iter:
            path = _checkpoint(models, out_dir, i, digest)
            if path != checkpoints[-1]:
                checkpoints.append(path)
    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text(buffer.getvalue())
    return TrainResult(out_dir=out_dir, checkpoints=checkpoints,
                       metrics_path=metrics_path, config=cfg, models=models,
                       elapsed=time.perf_counter() - started)


def read_metrics(path) -> dict[str, np.ndarray]:
    """Load a metrics CSV as column arrays (missing entries become NaN)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for col in METRIC_COLUMNS:
        out[col] = np.array([float(row[col]) if row[col] else np.nan
                             for row in rows])
    return out


def jitter_params(store, rng: np.random.Generator, scale: float = 0.05) -> None:
    """Randomize every parameter (biases included) for gradient checking.

    The production init zeroes biases, which can pin a ReLU pre-activation
    exactly at the kink when a whole layer goes dead for one sample; jittered
    parameters keep finite differences away from that measure-zero edge.
    """
    for _, tensor in store:
        tensor.value += rng.normal(0.0, scale, tensor.value.shape)


def standard_grad_check_suite(n_instances: int = 20, rel_tol: float = 1e-4,
                              seed: int = 0) -> dict[str, float]:
    """Finite-difference checks for the four training losses on small random
    instances with frozen sampling noise; returns each loss's max relative
    error over all instances."""
    from .data import NormStats  # local import keeps the module header lean

    worst = {"policy": 0.0, "goal_cvae": 0.0, "action_cvae": 0.0, "q": 0.0}
    for inst in range(n_instances):
        rng = np.random.default_rng(np.random.SeedSequence([seed, inst]))
        obs_dim, act_dim, t_window, batch = 3, 2, 4, 2
        norm = NormStats(
            state_mean=rng.normal(0, 0.5, obs_dim),
            state_std=rng.uniform(0.5, 1.5, obs_dim),
            action_mean=rng.normal(0, 0.5, act_dim),
            action_std=rng.uniform(0.5, 1.5, act_dim),
        )
        models = build_models("iris", obs_dim, act_dim, norm, hidden_dim=6,
                              enc_dim=5, goal_latent=3, action_latent=2,
                              rng=rng.spawn(1)[0])
        for store in models.stores().values():
            jitter_params(store, rng)
        states = rng.normal(0, 1.0, (batch, t_window + 1, obs_dim))
        actions = rng.normal(0, 1.0, (batch, t_window, act_dim))
        eps_g = rng.standard_normal((batch, 3))
        eps_a = rng.standard_normal((batch, 2))
        targets = rng.normal(0, 1.0, batch)
        checks = {
            "policy": (models.policy.store,
                       lambda: models.policy.loss_and_grad(
                           states[:, :-1], actions, states[:, -1])),
            "goal_cvae": (models.goal_cvae.store,
                          lambda: models.goal_cvae.loss_and_grad(
                              states[:, -1], states[:, 0], eps=eps_g)[0]),
            "action_cvae": (models.action_cvae.store,
                            lambda: models.action_cvae.loss_and_grad(
                                actions[:, -1], states[:, -2], eps=eps_a)[0]),
            "q": (models.qnet.store,
                  lambda: models.qnet.loss_and_grad(
                      states[:, -2], actions[:, -1], targets)[0]),
        }
        for name, (store, loss_fn) in checks.items():
            report = grad_check(loss_fn, store, rng, rel_tol=rel_tol)
            worst[name] = max(worst[name], report.max_rel_err)
    return worst
