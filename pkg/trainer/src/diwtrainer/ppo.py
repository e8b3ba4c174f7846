"""Proximal policy optimization: clipped-surrogate updates with linearly
annealed entropy coefficient and learning rate, plus the top-level
training loop that drives an environment server."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import torch

from .client import EnvClient
from .model import ActorCritic, log_prob_and_entropy
from .rollout import RolloutBatch, collect_rollouts
from .weights import export_weights


class NaNLoss(Exception):
    pass


@dataclass
class TrainSchedule:
    total_obs: int = 200_000       # desk default; reference scale is 4M
    batch_size: int = 10_000       # observations per policy iteration
    minibatch: int = 256
    update_epochs: int = 4
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    lr0: float = 3e-4              # annealed linearly to 0
    entropy0: float = 0.01         # annealed linearly to 0
    reward_scale: float = 0.01     # value/advantage estimation scale

    def progress(self, obs_seen: int) -> float:
        return min(obs_seen / self.total_obs, 1.0)

    def lr(self, obs_seen: int) -> float:
        return self.lr0 * (1.0 - self.progress(obs_seen))

    def entropy_coef(self, obs_seen: int) -> float:
        return self.entropy0 * (1.0 - self.progress(obs_seen))


@dataclass
class TrainConfig:
    slices: list = field(default_factory=lambda: ["square", "triangle",
                                                  "circle"])
    env_config: dict = None        # forwarded verbatim in reset messages
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    out_dir: str = "train_out"
    seed: int = 0
    server_cmd: list = None


def ppo_update(model: ActorCritic, optimizer, batch: RolloutBatch,
               clip: float, entropy_coef: float, value_coef: float = 0.5,
               epochs: int = 4, minibatch: int = 256,
               generator: torch.Generator = None):
    """One round of clipped-surrogate epochs over the batch.  Returns
    aggregate stats: approx_kl, clip_frac, policy/value/entropy losses."""
    n = len(batch)
    adv = batch.advantages
    if n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    stats = {"approx_kl": 0.0, "clip_frac": 0.0, "policy_loss": 0.0,
             "value_loss": 0.0, "entropy": 0.0}
    rounds = 0
    model.train()
    for _ in range(epochs):
        order = torch.randperm(n, generator=generator)
        for lo in range(0, n, minibatch):
            idx = order[lo:lo + minibatch]
            mean, logstd, value = model(batch.obs[idx])
            logp, entropy = log_prob_and_entropy(mean, logstd,
                                                 batch.raw_actions[idx])
            # clamp before exp: a runaway log-ratio would overflow to
            # inf and poison the surrogate with NaNs
            ratio = torch.exp(torch.clamp(logp - batch.logp[idx],
                                          -20.0, 20.0))
            a = adv[idx]
            surr = torch.minimum(ratio * a,
                                 torch.clamp(ratio, 1 - clip, 1 + clip) * a)
            policy_loss = -surr.mean()
            value_loss = ((value - batch.returns[idx]) ** 2).mean()
            entropy_mean = entropy.mean()
            loss = policy_loss + value_coef * value_loss \
                - entropy_coef * entropy_mean
            if not torch.isfinite(loss):
                raise NaNLoss(
                    f"non-finite loss: policy={policy_loss.item()} "
                    f"value={value_loss.item()}")
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 0.5)
            optimizer.step()
            with torch.no_grad():
                stats["approx_kl"] += float((batch.logp[idx] - logp).mean())
                stats["clip_frac"] += float(
                    ((ratio - 1.0).abs() > clip).float().mean())
            stats["policy_loss"] += float(policy_loss.detach())
            stats["value_loss"] += float(value_loss.detach())
            stats["entropy"] += float(entropy_mean.detach())
            rounds += 1
    for k in stats:
        stats[k] /= max(rounds, 1)
    return stats


def train(config: TrainConfig, log=print) -> str:
    """Full training loop.  Writes per-iteration checkpoints in the
    shared weight format plus a training-curve CSV
    (observations,mean_return,entropy_coef,lr).  Returns the final
    checkpoint path."""
    sched = config.schedule
    os.makedirs(config.out_dir, exist_ok=True)
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    model = ActorCritic()
    optimizer = torch.optim.Adam(model.parameters(), lr=sched.lr0)

    curve_path = os.path.join(config.out_dir, "training_curve.csv")
    obs_seen, episode_offset, iteration = 0, 0, 0
    final_ckpt = os.path.join(config.out_dir, "policy_final.bin")
    client = EnvClient(config.server_cmd)
    try:
        with open(curve_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["observations", "mean_return",
                             "entropy_coef", "lr"])
            while obs_seen < sched.total_obs:
                batch, episodes = collect_rollouts(
                    client, model, min(sched.batch_size,
                                       sched.total_obs - obs_seen),
                    config.slices, config.env_config, sched.gamma,
                    sched.lam, generator, episode_offset,
                    reward_scale=sched.reward_scale)
                episode_offset += episodes
                obs_seen += len(batch)
                lr = sched.lr(obs_seen)
                ent = sched.entropy_coef(obs_seen)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                stats = ppo_update(model, optimizer, batch, sched.clip,
                                   ent, epochs=sched.update_epochs,
                                   minibatch=sched.minibatch,
                                   generator=generator)
                mean_return = sum(batch.episode_returns) \
                    / len(batch.episode_returns)
                writer.writerow([obs_seen, f"{mean_return:.3f}",
                                 f"{ent:.6f}", f"{lr:.6e}"])
                f.flush()
                iteration += 1
                ckpt = os.path.join(config.out_dir,
                                    f"policy_{iteration:04d}.bin")
                export_weights(model, ckpt)
                log(f"iter {iteration}: obs={obs_seen} "
                    f"return={mean_return:.1f} kl={stats['approx_kl']:.4f} "
                    f"clip={stats['clip_frac']:.2f}")
        export_weights(model, final_ckpt)
    finally:
        client.close()
    return final_ckpt
