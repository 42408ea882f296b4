"""Deterministic parameter initialization and global determinism switches."""

from __future__ import annotations

import math
import random

import numpy as np
import torch


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def fan_in_uniform_(weight: torch.Tensor, bias: torch.Tensor | None, fan_in: int,
                    generator: torch.Generator | None = None) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weight and bias."""
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
        if bias is not None:
            bias.uniform_(-bound, bound, generator=generator)


def init_linear_(linear: torch.nn.Linear, generator: torch.Generator | None = None) -> None:
    fan_in_uniform_(linear.weight, linear.bias, linear.in_features, generator)


def enable_determinism(num_threads: int = 1) -> None:
    """Pin the serial, reproducible execution mode used by deterministic runs."""
    torch.set_num_threads(num_threads)
    torch.use_deterministic_algorithms(True)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
