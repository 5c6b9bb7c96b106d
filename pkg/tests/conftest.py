import numpy as np
import pytest
import torch

from fewseg.backbone import PROFILES, EncoderConfig
from fewseg.model import ModelConfig, build_model
from fewseg.pipeline import resize_to_model
from fewseg.prompts import make_prompt
from fewseg.training import combined_loss


def small_config(**kw) -> ModelConfig:
    enc = kw.pop("encoder", EncoderConfig(32, 4, 16, 2, 2))
    return ModelConfig(encoder=enc, **kw)


@pytest.fixture
def desk_model():
    """32x32 desk profile in float64 for gradient checks."""
    return build_model(small_config(seed=3)).double()


@pytest.fixture
def toy_model():
    return build_model(ModelConfig(encoder=PROFILES["toy"], seed=0))


def central_difference(f, param: torch.Tensor, index, eps: float = 1e-4) -> float:
    with torch.no_grad():
        old = param[index].item()
        param[index] = old + eps
        up = f().item()
        param[index] = old - eps
        down = f().item()
        param[index] = old
    return (up - down) / (2 * eps)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def sample_gradient_params(model, n, seed):
    """Pick ``n`` (name, flat_index) pairs covering every trainable group."""
    rng = np.random.default_rng(seed)
    named = dict(model.trainable_named_parameters())
    required = [n for n in named if n.startswith("adapters.selector.") and n.endswith(".bias")][:1]
    for prefix in ("adapters.hfa.", "adapters.msfa.", "adapters.selector.", "decoder."):
        names = [k for k in named if k.startswith(prefix)]
        required.append(names[rng.integers(len(names))])
    picks = [(k, int(rng.integers(named[k].numel()))) for k in required]
    picks.append((required[0], 1 - picks[0][1] if named[required[0]].numel() == 2 else 0))
    keys = list(named)
    while len(picks) < n:
        k = keys[rng.integers(len(keys))]
        picks.append((k, int(rng.integers(named[k].numel()))))
    return named, picks


def full_gradient_check(model, sample, n=20, seed=0):
    """Analytic vs central-difference gradients; returns list of (name, idx, analytic, numeric, rel)."""
    s = resize_to_model(sample, model.cfg.encoder.input_size)
    x = torch.from_numpy(s.image).double()[None]
    y = torch.from_numpy(s.mask).double()[None, None]
    box = [make_prompt("D", "train", s)]
    # move the selector off its symmetric zero init so the check is informative
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for sel in model.adapters.selector:
            sel.decision.weight.copy_(torch.randn(sel.decision.weight.shape, generator=g, dtype=torch.float64) * 0.1)

    def loss():
        return combined_loss(model(x, box), y)

    model.zero_grad()
    loss().backward()
    named, picks = sample_gradient_params(model, n, seed)
    out = []
    for name, i in picks:
        p = named[name]
        a = p.grad.view(-1)[i].item()
        num = central_difference(loss, p.view(-1), i, eps=1e-4)
        out.append((name, i, a, num, rel_err(a, num, floor=1e-7)))
    return out


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
