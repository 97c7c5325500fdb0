import xml.etree.ElementTree as ET

import numpy as np

from hamildis.analysis import LatentSweep, RowResult, TableResult
from hamildis.figures import emit_figures, phase_time_svg, write_sweep
from hamildis.rollout import GeneratedTrajectory, ParameterArgument


def sample_table():
    times = np.linspace(0, 1, 5)
    rows = []
    for value in (0.3, 0.5):
        truth = np.stack([np.cos(times), -np.sin(times)], axis=1)
        row = RowResult(1, "l", value, {}, truth)
        for kind, offset in (("consci", 0.01), ("baseline", 0.1)):
            states = truth + offset
            energy = np.ones(5) if kind == "consci" else None
            row.generated[kind] = GeneratedTrajectory(times, states, ParameterArgument((value, 0, 0)), kind, energy)
            row.mse[kind] = offset**2
            row.true_drift[kind] = offset
        row.learned_drift["consci"] = 0.0
        rows.append(row)
    return TableResult(1, "pendulum", "l", rows)


def sample_sweep():
    l = np.linspace(0.3, 0.8, 20)
    return LatentSweep("pendulum", ("l",), l[:, None], np.stack([l, 0 * l, 0 * l], axis=1))


def test_outputs_are_byte_identical(tmp_path):
    a = emit_figures({"consci": sample_sweep()}, [sample_table()], tmp_path / "a")
    b = emit_figures({"consci": sample_sweep()}, [sample_table()], tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes(), pa.name


def test_one_svg_per_row_and_model(tmp_path):
    paths = emit_figures({}, [sample_table()], tmp_path)
    svgs = sorted(p.name for p in paths if p.name.startswith("traj_") and p.suffix == ".svg")
    assert svgs == [
        "traj_t1_l0.3_baseline.svg",
        "traj_t1_l0.3_consci.svg",
        "traj_t1_l0.5_baseline.svg",
        "traj_t1_l0.5_consci.svg",
    ]
    table_csv = (tmp_path / "table_1.csv").read_text().splitlines()
    assert table_csv[0].startswith("l,baseline_mse,consci_mse")
    assert table_csv[1].startswith("0.3,0.010000,0.000100")


def test_empty_inputs(tmp_path):
    paths = write_sweep({}, "spring", tmp_path)
    assert paths[0].read_text().splitlines() == ["model,z1,z2,z3"]
    ET.parse(paths[1])
    svg = phase_time_svg(np.array([]), np.zeros((0, 2)), None, tmp_path / "empty.svg")
    ET.parse(svg)


def test_svg_has_no_timestamp(tmp_path):
    svg = phase_time_svg(np.linspace(0, 1, 3), np.zeros((3, 2)), None, tmp_path / "x.svg").read_text()
    assert "<dc:date>" not in svg
