"""
Small dense networks in float64 on CPU, plus the few training primitives the
policies share: reverse-mode gradients, Adam steps, soft target updates,
finite-difference gradient checks and the `.npz` checkpoint container.

Checkpoint layout (format_version 1):
    format_version          int
    kind                    str  ("diffusion", "ppo")
    nets                    str  comma separated net names
    <net>/layer_sizes       int array
    <net>/activations       str array [hidden, output]
    <net>/W<i>              float64 (out, in), row-major
    <net>/b<i>              float64 (out,)
    <section>/<key>         any extra arrays (schedule, log_std, ...)
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from helpers import CheckpointError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_VERSION = 1

_ACTIVATIONS: Dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": F.relu,
    "mish": F.mish,
    "silu": F.silu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


class DenseNet(nn.Module):
    """Affine layers with a shared hidden activation and a separate output activation."""

    def __init__(
        self,
        layer_sizes: Sequence[int],
        hidden_activation: str = "relu",
        output_activation: str = "identity",
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        if len(layer_sizes) < 2:
            raise ValueError(f"need at least input and output sizes, got {list(layer_sizes)}")
        for tag in (hidden_activation, output_activation):
            if tag not in _ACTIVATIONS:
                raise ValueError(f"unknown activation '{tag}', expected one of {sorted(_ACTIVATIONS)}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.layers = nn.ModuleList(
            nn.Linear(i, o, dtype=DTYPE) for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
        )
        self.reset_parameters(generator)

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / np.sqrt(layer.in_features)
                for p in (layer.weight, layer.bias):
                    p.copy_((torch.rand(p.shape, generator=generator, dtype=DTYPE) * 2 - 1) * bound)

    @property
    def in_features(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_features(self) -> int:
        return self.layer_sizes[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        hidden = _ACTIVATIONS[self.hidden_activation]
        for layer in self.layers[:-1]:
            x = hidden(layer(x))
        return _ACTIVATIONS[self.output_activation](self.layers[-1](x))

    def same_architecture(self, other: "DenseNet") -> bool:
        return (
            self.layer_sizes == other.layer_sizes
            and self.hidden_activation == other.hidden_activation
            and self.output_activation == other.output_activation
        )


def mlp(in_dim: int, hidden: Sequence[int], out_dim: int, activation: str = "relu",
        output_activation: str = "identity", generator: Optional[torch.Generator] = None) -> DenseNet:
    return DenseNet([in_dim, *hidden, out_dim], activation, output_activation, generator)


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def forward(net: DenseNet, x) -> torch.Tensor:
    x = as_tensor(x)
    if x.shape[-1] != net.in_features:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {net.in_features}")
    return net(x)


def backward(net: DenseNet, x, upstream) -> Tuple[List[torch.Tensor], torch.Tensor]:
    """Parameter gradients and input gradient of <upstream, net(x)>."""
    x = as_tensor(x).detach().requires_grad_(True)
    out = forward(net, x)
    upstream = as_tensor(upstream)
    if upstream.shape != out.shape:
        raise ValueError(f"upstream gradient shape {tuple(upstream.shape)} != output shape {tuple(out.shape)}")
    params = list(net.parameters())
    grads = torch.autograd.grad(out, params + [x], grad_outputs=upstream, allow_unused=True)
    param_grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads[:-1])]
    input_grad = torch.zeros_like(x) if grads[-1] is None else grads[-1]
    return param_grads, input_grad


def make_adam(params, lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    """Adam optimizer; its per-parameter state holds the moment accumulators and step count."""
    return torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], optimizer: torch.optim.Adam) -> None:
    params = list(params)
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        p.grad = g.detach().clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


@torch.no_grad()
def soft_update(target: DenseNet, online: DenseNet, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, parameter by parameter."""
    if not target.same_architecture(online):
        raise ValueError(f"architecture mismatch: {target.layer_sizes} vs {online.layer_sizes}")
    for t, o in zip(target.parameters(), online.parameters()):
        t.mul_(1.0 - tau).add_(o, alpha=tau)


def clone_net(net: DenseNet) -> DenseNet:
    twin = DenseNet(net.layer_sizes, net.hidden_activation, net.output_activation)
    twin.load_state_dict(net.state_dict())
    return twin


def parameters_finite(net: nn.Module) -> bool:
    return all(torch.isfinite(p).all().item() for p in net.parameters())


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    probes: int = 20,
    h: float = 1e-5,
    generator: Optional[torch.Generator] = None,
) -> float:
    """Max relative error between autograd and central differences over `probes` random scalar parameters."""
    params = list(params)
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = torch.tensor([p.numel() for p in params])
    worst = 0.0
    with torch.no_grad():
        for _ in range(probes):
            which = int(torch.multinomial(sizes.to(DTYPE), 1, generator=generator).item())
            flat = params[which].view(-1)
            i = int(torch.randint(flat.numel(), (1,), generator=generator).item())
            original = flat[i].item()
            flat[i] = original + h
            up = loss_fn().item()
            flat[i] = original - h
            down = loss_fn().item()
            flat[i] = original
            numeric = (up - down) / (2 * h)
            analytic = grads[which].view(-1)[i].item()
            scale = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst


# ---------------- Checkpoints ----------------
def save_checkpoint(path, kind: str, nets: Dict[str, DenseNet], extra: Optional[Dict[str, Dict[str, object]]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: Dict[str, np.ndarray] = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "kind": np.array(kind),
        "nets": np.array(",".join(nets)),
    }
    for name, net in nets.items():
        arrays[f"{name}/layer_sizes"] = np.array(net.layer_sizes, dtype=np.int64)
        arrays[f"{name}/activations"] = np.array([net.hidden_activation, net.output_activation])
        for i, layer in enumerate(net.layers):
            arrays[f"{name}/W{i}"] = np.ascontiguousarray(layer.weight.detach().numpy())
            arrays[f"{name}/b{i}"] = layer.bias.detach().numpy().copy()
    for section, values in (extra or {}).items():
        for key, value in values.items():
            arrays[f"{section}/{key}"] = np.asarray(value)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.info(f"✅ Saved {kind} checkpoint to {path}")
    return path


def load_checkpoint(path, expected_kind: Optional[str] = None) -> Tuple[str, Dict[str, DenseNet], Dict[str, Dict[str, np.ndarray]]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        data = dict(np.load(path, allow_pickle=False))
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}")
    version = int(data.get("format_version", -1))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}")
    kind = str(data["kind"])
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"checkpoint {path} holds a '{kind}' policy, expected '{expected_kind}'")
    names = [n for n in str(data["nets"]).split(",") if n]
    nets: Dict[str, DenseNet] = {}
    for name in names:
        sizes = [int(s) for s in data[f"{name}/layer_sizes"]]
        hidden, output = (str(a) for a in data[f"{name}/activations"])
        net = DenseNet(sizes, hidden, output)
        with torch.no_grad():
            for i, layer in enumerate(net.layers):
                layer.weight.copy_(torch.from_numpy(data[f"{name}/W{i}"]))
                layer.bias.copy_(torch.from_numpy(data[f"{name}/b{i}"]))
        nets[name] = net
    extra: Dict[str, Dict[str, np.ndarray]] = {}
    for key, value in data.items():
        section, _, field = key.partition("/")
        if field and section not in nets:
            extra.setdefault(section, {})[field] = value
    return kind, nets, extra
