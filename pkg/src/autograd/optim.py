"""
AdamW with decoupled weight decay and parameter groups
"""

import logging
import math

import numpy as np

from ..core.config import ADAM_BETAS, ADAM_EPS, WEIGHT_DECAY
from ..core.errors import ConfigurationError, ContractError

logger = logging.getLogger(__name__)


class AdamWState:
    """First/second moments and step count of one parameter."""

    __slots__ = ("exp_avg", "exp_avg_sq", "step")

    def __init__(self, shape, dtype):
        self.exp_avg = np.zeros(shape, dtype=dtype)
        self.exp_avg_sq = np.zeros(shape, dtype=dtype)
        self.step = 0


class AdamW:
    """AdamW over one or more parameter groups.

    `params` is either a list of parameters or a list of dicts with a
    "params" entry and optional per-group "lr", "weight_decay" and "name".
    """

    def __init__(self, params, lr=1e-3, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=WEIGHT_DECAY):
        if lr < 0.0:
            raise ConfigurationError(f"invalid learning rate {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ConfigurationError(f"invalid betas {betas}")
        if eps <= 0.0:
            raise ConfigurationError(f"invalid eps {eps}")
        params = list(params)
        if params and not isinstance(params[0], dict):
            params = [{"params": params}]
        self.defaults = {"lr": lr, "betas": tuple(betas), "eps": eps, "weight_decay": weight_decay}
        self.param_groups = []
        seen = set()
        for index, group in enumerate(params):
            merged = dict(self.defaults)
            merged.update(group)
            merged.setdefault("name", f"group{index}")
            merged["params"] = list(group["params"])
            for p in merged["params"]:
                if id(p) in seen:
                    raise ConfigurationError("a parameter appears in more than one group")
                seen.add(id(p))
            self.param_groups.append(merged)
        self.state = {}

    def zero_grad(self):
        for group in self.param_groups:
            for p in group["params"]:
                p.zero_grad()

    def set_lr(self, name, lr):
        for group in self.param_groups:
            if group["name"] == name:
                group["lr"] = lr
                return
        raise ConfigurationError(f"no parameter group named {name!r}")

    def learning_rates(self):
        return {group["name"]: group["lr"] for group in self.param_groups}

    def step(self):
        """Apply one update to every parameter that currently requires grad."""
        for group in self.param_groups:
            lr = group["lr"]
            beta1, beta2 = group["betas"]
            eps = group["eps"]
            wd = group["weight_decay"]
            for p in group["params"]:
                if not p.requires_grad or p.grad is None:
                    continue
                grad = p.grad
                state = self.state.get(id(p))
                if state is None:
                    state = self.state[id(p)] = AdamWState(p.shape, p.dtype)
                if state.exp_avg.shape != p.shape or grad.shape != p.shape:
                    raise ContractError(
                        f"parameter {p.name or ''} changed shape from {state.exp_avg.shape} to {p.shape}")
                state.step += 1
                t = state.step

                state.exp_avg *= beta1
                state.exp_avg += (1.0 - beta1) * grad
                state.exp_avg_sq *= beta2
                state.exp_avg_sq += (1.0 - beta2) * grad * grad

                if wd:
                    p.data *= 1.0 - lr * wd
                step_size = lr * math.sqrt(1.0 - beta2 ** t) / (1.0 - beta1 ** t)
                p.data -= (step_size * state.exp_avg / (np.sqrt(state.exp_avg_sq) + eps)).astype(p.dtype)


def adamw_step(params, grads, state: AdamW):
    """Functional form: copy `grads` onto `params`, then take one AdamW step."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        p.grad = g
    state.step()
