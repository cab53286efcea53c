import numpy as np
import pytest

from etta import numerics as nx
from etta.vit import ViTConfig, init_params

TINY = ViTConfig(image_size=8, patch_size=4, channels=3, hidden_dim=8, num_layers=3, num_heads=2,
                 mlp_ratio=2, num_classes=4)


def fd_check(loss, arrays: dict, analytic: dict, h: float = 1e-3) -> dict:
    """Relative error of each analytic gradient against central differences.

    ``loss(arrays)`` must be dtype-generic; the numeric side is evaluated on
    float64 copies so that round-off does not swamp the step size.
    """
    hi = {k: v.astype(np.float64) for k, v in arrays.items()}
    errs = {}
    for name in analytic:
        num = nx.numerical_grad(lambda: loss(hi), hi[name], h)
        errs[name] = nx.rel_error(analytic[name], num)
    return errs


@pytest.fixture
def tiny_params():
    p = init_params(TINY, seed=3)
    rng = np.random.default_rng(3)
    # perturb norms and biases so no gradient is trivially structured
    for k, v in p.tensors.items():
        v += (0.1 * rng.standard_normal(v.shape)).astype(v.dtype)
    return p


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
