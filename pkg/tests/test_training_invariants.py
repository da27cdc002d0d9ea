"""Smoke invariant on long distillation runs: the 500-step moving average never rises."""

import pytest

from radar_distill.learnable_sp import InitScheme
from radar_distill.trainer import TrainConfig, distill

pytestmark = pytest.mark.slow
WINDOW = 500


def moving_averages(records, eval_every):
    """500-step moving averages at a stride of ``eval_every`` from logged interval means.

    Each record after step 0 holds the mean training loss of the preceding
    ``eval_every`` steps, so a window is the mean of consecutive records.
    """
    per = WINDOW // eval_every
    losses = [r["train_loss"] for r in records if r["step"] > 0]
    return [sum(losses[i:i + per]) / per for i in range(len(losses) - per + 1)]


@pytest.mark.parametrize("gamma", [0.1, 0.0])
def test_moving_average_non_increasing(desk_teacher, desk_config, tmp_path, gamma):
    cfg = TrainConfig()
    assert WINDOW % cfg.eval_every == 0
    res = distill(desk_teacher, InitScheme("perturbed", gamma, desk_config.init.seed), cfg,
                  str(tmp_path / "run"), radar_cfg=desk_config.radar)
    ma = moving_averages(res.history.records, cfg.eval_every)
    rises = [(i, a, b) for i, (a, b) in enumerate(zip(ma, ma[1:])) if b > a]
    print(f"gamma={gamma}: {len(ma)} windows, first {ma[0]:.4g}, last {ma[-1]:.4g}, "
          f"rises {rises[:5]}")
    assert len(ma) == (cfg.max_steps - WINDOW) // cfg.eval_every + 1
    assert not rises
