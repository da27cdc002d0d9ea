import os
import time

import pytest

from radar_distill.config import RunConfig
from radar_distill.fmcw_sim import RadarConfig, synth_dataset
from radar_distill.heads import HeadTrainConfig, finetune_toy_head
from radar_distill.learnable_sp import InitScheme
from radar_distill.teacher import teacher_batch
from radar_distill.trainer import distill, init_ablation

HERE = os.path.dirname(os.path.abspath(__file__))
DESK_CONFIG = os.path.join(HERE, "..", "configs", "desk.json")
DESK_SEED = 7
ABLATION_GAMMAS = (0.0, 0.5, 2.0)

# frozen setup for the head fine-tune: separable targets, about 23 dB per-sample SNR
HEAD_RADAR = RadarConfig(noise_std=0.05)
HEAD_DATA = dict(n_scenes=256, target_count_range=(1, 3), seed=11, amplitude_range=(1.0, 1.0),
                 on_grid=True, min_separation_bins=3.0, grid_jitter=0.25)

CRITERIA = {
    1: "DFT oracle equivalence",
    2: "exact-init student equals teacher",
    3: "gradient correctness",
    4: "distillation convergence",
    5: "initialization ablation direction",
    6: "weight-drift direction",
    7: "classic chain end-to-end",
    8: "loss/metric unit suite",
    9: "toy multi-task fine-tune",
    10: "determinism",
}
_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    marks = getattr(report, "criteria", None)
    if not marks:
        return
    if report.when == "call" or report.failed:
        for n in marks:
            prev = _outcomes.get(n, True)
            _outcomes[n] = prev and not report.failed and not report.skipped


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    rep.criteria = [m.args[0] for m in item.iter_markers("criterion")]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        verdict = "PASS" if _outcomes[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {CRITERIA.get(n, '')}")


@pytest.fixture(scope="session")
def desk_config():
    return RunConfig.load(DESK_CONFIG)


@pytest.fixture(scope="session")
def desk_teacher(desk_config, tmp_path_factory):
    """256-scene desk dataset labelled by the FFT teacher."""
    root = tmp_path_factory.mktemp("desk")
    rc = desk_config
    m = synth_dataset(256, rc.radar, rc.dataset.target_count_range, DESK_SEED, root / "data",
                      amplitude_range=rc.dataset.amplitude_range)
    return teacher_batch(m, rc.radar.n_azimuth_bins, rc.teacher.aoa, root / "teacher")


@pytest.fixture(scope="session")
def distill_run(desk_config, desk_teacher, tmp_path_factory):
    """Perturbed-DFT distillation on the desk dataset at the desk budget."""
    out = tmp_path_factory.mktemp("distill") / "run"
    t0 = time.perf_counter()
    res = distill(desk_teacher, desk_config.init, desk_config.train, str(out),
                  radar_cfg=desk_config.radar)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="session")
def ablation_rows(desk_config, desk_teacher, tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    seed = desk_config.init.seed
    schemes = [InitScheme("exact", 0.0, seed), InitScheme("perturbed", 0.1, seed),
               InitScheme("random", 0.0, seed)]
    rows = init_ablation(desk_teacher, schemes, desk_config.train, str(out),
                         radar_cfg=desk_config.radar, gammas=ABLATION_GAMMAS)
    return rows, out


@pytest.fixture(scope="session")
def head_dataset(tmp_path_factory):
    return synth_dataset(cfg=HEAD_RADAR, out_dir=tmp_path_factory.mktemp("head") / "data",
                         **HEAD_DATA)


@pytest.fixture(scope="session")
def head_runs(distill_run, head_dataset):
    """Two identical fine-tunes of the toy head on the distilled checkpoint."""
    res, _ = distill_run
    runs = []
    for _ in range(2):
        t0 = time.perf_counter()
        ft = finetune_toy_head(res.checkpoint, head_dataset, HEAD_RADAR, HeadTrainConfig())
        runs.append((ft, time.perf_counter() - t0))
    return runs
