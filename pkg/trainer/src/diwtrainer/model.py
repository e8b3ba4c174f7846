"""Actor-critic CNN matching the inference-side architecture:
84x84x3 -> conv(32,8,s4) -> conv(64,4,s2) -> conv(64,3,s1) -> fc512,
Gaussian action head with state-independent log-std, scalar value head.
"""

from __future__ import annotations

import math

import torch
from torch import nn

OBS_SHAPE = (3, 84, 84)
N_ACTIONS = 2


class ActorCritic(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 32, kernel_size=8, stride=4)
        self.conv2 = nn.Conv2d(32, 64, kernel_size=4, stride=2)
        self.conv3 = nn.Conv2d(64, 64, kernel_size=3, stride=1)
        self.fc1 = nn.Linear(64 * 7 * 7, 512)
        self.head_mean = nn.Linear(512, N_ACTIONS)
        self.head_logstd = nn.Parameter(torch.zeros(N_ACTIONS))
        self.value_head = nn.Linear(512, 1)

    def forward(self, obs: torch.Tensor):
        """obs: (N, 3, 84, 84) float32 in [0, 1] ->
        (mean (N,2), logstd (2,), value (N,))."""
        x = torch.relu(self.conv1(obs))
        x = torch.relu(self.conv2(x))
        x = torch.relu(self.conv3(x))
        x = torch.relu(self.fc1(torch.flatten(x, 1)))
        mean = self.head_mean(x)
        value = self.value_head(x).squeeze(-1)
        return mean, self.head_logstd, value


def log_prob_and_entropy(mean: torch.Tensor, logstd: torch.Tensor,
                         raw_action: torch.Tensor):
    """Log-density of the tanh-squashed Gaussian policy evaluated at the
    pre-squash sample, plus the base Gaussian entropy (the tanh Jacobian
    has no closed-form entropy; the Gaussian term is the standard PPO
    regularizer)."""
    std = logstd.exp()
    base = -0.5 * (((raw_action - mean) / std) ** 2
                   + 2 * logstd + math.log(2 * math.pi))
    # change of variables through a = tanh(raw)
    squash = torch.log1p(-torch.tanh(raw_action) ** 2 + 1e-8)
    logp = (base - squash).sum(-1)
    entropy = (0.5 * (1 + math.log(2 * math.pi)) + logstd).sum().expand(
        mean.shape[0])
    return logp, entropy


def sample_action(mean: torch.Tensor, logstd: torch.Tensor,
                  generator: torch.Generator = None):
    """Draw a pre-squash sample; the environment action is tanh(raw)."""
    noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return mean + noise * logstd.exp()
