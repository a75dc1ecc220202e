"""Behavioral cloning of the scripted expert into a :class:`PolicyNetwork`."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .env import input_groups
from .nn import Conv2D, Dense, PolicyNetwork, build_network, network_backward, network_forward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged; ``diagnostics`` holds the loss history and the failing epoch."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def default_arch(n_joints: int = 2, image_shape=(32, 32, 1)) -> dict:
    return {
        "image_shape": list(image_shape),
        "input_groups": {k: list(v) for k, v in input_groups(n_joints).items()},
        "conv": [{"kernel": 5, "filters": 8, "stride": 2}, {"kernel": 3, "filters": 8, "stride": 1}],
        "hidden": [64, 64],
        "n_joints": n_joints,
    }


@dataclass
class Hyperparams:
    epochs: int = 80
    batch_size: int = 64
    lr: float = 2e-3
    lr_decay: float = 0.97
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_dict(cls, obj) -> "Hyperparams":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class TrainingReport:
    final_loss: float
    torque_variance: float
    losses: List[float] = field(default_factory=list)
    seconds: float = 0.0
    n_samples: int = 0

    def to_dict(self) -> dict:
        return {"final_loss": self.final_loss, "torque_variance": self.torque_variance,
                "relative_loss": self.final_loss / self.torque_variance if self.torque_variance else 0.0,
                "losses": self.losses, "seconds": self.seconds, "n_samples": self.n_samples}


def _param_slots(net: PolicyNetwork):
    """(key, name, array) for every trainable array; arrays are updated in place."""
    slots = []
    for branch, layers in (("vision", net.vision_layers), ("fusion", net.fusion_layers)):
        for i, layer in enumerate(layers):
            if isinstance(layer, Dense):
                slots += [((branch, i), "weights", layer.weights), ((branch, i), "bias", layer.bias)]
            elif isinstance(layer, Conv2D):
                slots += [((branch, i), "kernels", layer.kernels), ((branch, i), "bias", layer.bias)]
    return slots


def mse_loss(net: PolicyNetwork, images, configs, targets) -> float:
    pred, _ = network_forward(net, images, configs)
    return float(np.mean((pred - targets) ** 2))


def clone_policy(dataset, arch: Optional[dict] = None, hyperparams: Optional[Hyperparams] = None,
                 seed: int = 0, net: Optional[PolicyNetwork] = None):
    """Fit a policy to ``(Observation, torque)`` pairs by mini-batch Adam on MSE.

    Returns ``(net, report)``. Deterministic for a fixed seed.
    """
    if not dataset:
        raise ValueError("empty dataset")
    hp = hyperparams or Hyperparams()
    rng = np.random.default_rng(seed)
    images = np.stack([obs.image for obs, _ in dataset])
    configs = np.stack([obs.config for obs, _ in dataset])
    targets = np.stack([np.asarray(t, dtype=np.float64) for _, t in dataset])
    if net is None:
        arch = arch or default_arch(targets.shape[1], images.shape[1:])
        net = build_network(arch, rng)
    else:
        net = copy.deepcopy(net)

    slots = _param_slots(net)
    m = [np.zeros_like(a) for _, _, a in slots]
    v = [np.zeros_like(a) for _, _, a in slots]
    n = len(dataset)
    step = 0
    losses = []
    t0 = time.perf_counter()
    lr = hp.lr
    # overflow is reported through TrainingError, not numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(hp.epochs):
            order = rng.permutation(n)
            running = 0.0
            for start in range(0, n, hp.batch_size):
                idx = order[start:start + hp.batch_size]
                pred, trace = network_forward(net, images[idx], configs[idx])
                err = pred - targets[idx]
                running += float(np.sum(err ** 2))
                grad = 2.0 * err / err.size
                _, _, grads = network_backward(net, trace, grad)
                step += 1
                c1 = 1.0 - hp.beta1 ** step
                c2 = 1.0 - hp.beta2 ** step
                for k, (key, name, arr) in enumerate(slots):
                    g = grads[key][name]
                    m[k] *= hp.beta1
                    m[k] += (1.0 - hp.beta1) * g
                    v[k] *= hp.beta2
                    v[k] += (1.0 - hp.beta2) * g * g
                    arr -= lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + hp.eps)
            loss = running / targets.size
            losses.append(loss)
            log.debug("epoch %d loss %.6g", epoch, loss)
            if not np.isfinite(loss):
                raise TrainingError(f"training diverged at epoch {epoch} (loss={loss})",
                                    {"epoch": epoch, "losses": losses, "lr": lr})
            lr *= hp.lr_decay

    final = mse_loss(net, images, configs, targets)
    if not np.isfinite(final):
        raise TrainingError("training produced non-finite outputs", {"losses": losses})
    report = TrainingReport(final, float(np.mean(np.var(targets, axis=0))), losses,
                            time.perf_counter() - t0, n)
    # rebuild so the returned network owns fresh, validated arrays
    return PolicyNetwork(net.image_shape, net.config_dim, net.input_groups,
                         copy.deepcopy(net.vision_layers), copy.deepcopy(net.fusion_layers)), report
