"""Rollout collection and generalized advantage estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .client import EnvClient
from .model import ActorCritic, log_prob_and_entropy, sample_action


@dataclass
class RolloutBatch:
    obs: torch.Tensor          # (N, 3, 84, 84)
    raw_actions: torch.Tensor  # (N, 2) pre-squash Gaussian samples
    logp: torch.Tensor         # (N,) behavior log-probs
    rewards: torch.Tensor      # (N,)
    values: torch.Tensor       # (N,)
    advantages: torch.Tensor   # (N,)
    returns: torch.Tensor      # (N,) GAE returns (advantage + value)
    episode_returns: list      # undiscounted return per completed episode

    def __len__(self):
        return self.obs.shape[0]


def compute_gae(rewards, values, gamma: float, lam: float,
                last_value: float = 0.0) -> np.ndarray:
    """Generalized advantage estimation over one episode.
    A_t = sum_k (gamma*lam)^k delta_{t+k},
    delta_t = r_t + gamma*V(s_{t+1}) - V(s_t)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    adv = np.zeros_like(rewards)
    gae = 0.0
    next_value = last_value
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        gae = delta + gamma * lam * gae
        adv[t] = gae
        next_value = values[t]
    return adv


def collect_rollouts(client: EnvClient, model: ActorCritic, n: int,
                     slices: list, config: dict = None, gamma: float = 0.99,
                     lam: float = 0.95, generator: torch.Generator = None,
                     episode_offset: int = 0, reward_scale: float = 1.0):
    """Gather at least ``n`` transitions across full episodes, then
    truncate to exactly ``n`` for the update.  Episode seeds and slice
    choice advance deterministically with ``episode_offset``.

    ``reward_scale`` rescales rewards for value/advantage estimation
    (raw episode returns can be in the thousands, which blows up the
    value loss); reported ``episode_returns`` stay unscaled."""
    obs_l, raw_l, logp_l, rew_l, val_l, adv_l = [], [], [], [], [], []
    episode_returns = []
    episodes = 0
    model.eval()
    while sum(len(r) for r in rew_l) < n:
        idx = episode_offset + episodes
        obs = client.reset(slices[idx % len(slices)], seed=idx, config=config)
        done = False
        e_obs, e_raw, e_logp, e_rew, e_val = [], [], [], [], []
        while not done:
            x = torch.from_numpy(obs).unsqueeze(0)
            with torch.no_grad():
                mean, logstd, value = model(x)
                raw = sample_action(mean, logstd, generator)
                logp, _ = log_prob_and_entropy(mean, logstd, raw)
            action = torch.tanh(raw)[0]
            obs, reward, done, _ = client.step(action.tolist())
            e_obs.append(x[0])
            e_raw.append(raw[0])
            e_logp.append(float(logp[0]))
            e_rew.append(reward)
            e_val.append(float(value[0]))
        adv = compute_gae([r * reward_scale for r in e_rew], e_val,
                          gamma, lam)
        obs_l.extend(e_obs)
        raw_l.extend(e_raw)
        logp_l.extend(e_logp)
        rew_l.append(e_rew)
        val_l.extend(e_val)
        adv_l.extend(adv.tolist())
        episode_returns.append(float(sum(e_rew)))
        episodes += 1

    rewards = [r for ep in rew_l for r in ep]
    values = torch.tensor(val_l, dtype=torch.float32)[:n]
    advantages = torch.tensor(adv_l, dtype=torch.float32)[:n]
    batch = RolloutBatch(
        obs=torch.stack(obs_l)[:n],
        raw_actions=torch.stack(raw_l)[:n],
        logp=torch.tensor(logp_l, dtype=torch.float32)[:n],
        rewards=torch.tensor(rewards, dtype=torch.float32)[:n],
        values=values,
        advantages=advantages,
        returns=advantages + values,
        episode_returns=episode_returns)
    return batch, episodes
