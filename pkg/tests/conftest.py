import numpy as np
import pytest
import torch

from factost.adapter import STAdapter
from factost.backbone import Backbone
from factost.config import AdapterConfig, BackboneConfig

torch.set_num_threads(1)


def tiny_backbone_config(**overrides) -> BackboneConfig:
    base = dict(d_model=8, d_ff=16, n_layers=1, n_heads=1, patch_len=4, max_ctx_patches=4,
                max_fut_patches=2, min_ctx_patches=2, quantiles=(0.1, 0.5, 0.9),
                rope_fraction=0.75, dropout=0.0)
    base.update(overrides)
    return BackboneConfig(**base).validate()


def tiny_adapter_config(**overrides) -> AdapterConfig:
    base = dict(n_nodes=3, id_dim=4, calendar_cycles=("time_of_day", "day_of_week"), n_prompts=2,
                prompt_rank=2, n_prototypes=2, max_lag=2)
    base.update(overrides)
    return AdapterConfig(**base)


def perturb_(module: torch.nn.Module, seed: int, scale: float = 0.3) -> None:
    """Move every parameter away from its init so no gradient path is trivially zero."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


@pytest.fixture
def tiny_cfg():
    return tiny_backbone_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    m = Backbone(tiny_cfg, seed=0).double()
    perturb_(m, 1)
    return m.eval()


@pytest.fixture
def tiny_adapter(tiny_cfg):
    a = STAdapter(tiny_adapter_config(), tiny_cfg.d_model, seed=0).double()
    perturb_(a, 2)
    return a.eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
VERDICTS: dict[int, str] = {}


def record_verdict(number: int, label: str, ok: bool, detail: str = "") -> bool:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {label}"
    VERDICTS[number] = f"{line}  [{detail}]" if detail else line
    print(VERDICTS[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
