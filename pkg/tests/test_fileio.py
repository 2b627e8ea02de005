import numpy as np
import pytest

from mcoct import (
    ConfigError, ControlField, DimensionMismatchError, NetworkSpec,
)
from mcoct.analysis import DynamicsRecord, PowerLawFit
from mcoct.fileio import (
    load_pulse, save_pulse, write_convergence_csv, write_dynamics_csv,
    write_jumps_csv, write_noise_csv, write_noise_fit_csv,
)
from mcoct.krotov import IterationRecord
from mcoct.propagate import Jump


@pytest.fixture
def spec():
    return NetworkSpec(2, 100.0, 1.0, 5.0, 50)


class TestPulseRoundTrip:
    def test_exact_float64_round_trip(self, tmp_path, spec):
        rng = np.random.default_rng(21)
        values = np.concatenate([
            rng.normal(size=47) * 1e3,
            [1.0 / 3.0, -2.0 ** -40, 0.1 + 0.2],
        ])
        pulse = ControlField(values, 2, spec.duration)
        path = tmp_path / "pulse.csv"
        save_pulse(pulse, path, config_hash="abc123")
        back = load_pulse(path, spec)
        assert np.max(np.abs(back.values - pulse.values)) == 0.0
        assert back.node_index == 2
        assert back.duration == spec.duration

    def test_header_content(self, tmp_path, spec):
        pulse = ControlField(np.zeros(spec.n_steps), 1, spec.duration)
        path = tmp_path / "pulse.csv"
        save_pulse(pulse, path, config_hash="deadbeef0123")
        lines = path.read_text().splitlines()
        assert lines[0] == "# config: deadbeef0123"
        assert lines[1] == "# node_index: 1"
        assert "units" in lines[2]
        assert lines[3] == "t_midpoint,omega"
        assert len(lines) == 4 + spec.n_steps

    def test_row_count_checked_against_spec(self, tmp_path, spec):
        pulse = ControlField(np.zeros(30), 1, spec.duration)
        path = tmp_path / "pulse.csv"
        save_pulse(pulse, path)
        with pytest.raises(DimensionMismatchError, match="30.*50"):
            load_pulse(path, spec)

    def test_duration_checked_against_spec(self, tmp_path, spec):
        pulse = ControlField(np.zeros(50), 1, 7.0)
        path = tmp_path / "pulse.csv"
        save_pulse(pulse, path)
        with pytest.raises(DimensionMismatchError, match="duration"):
            load_pulse(path, spec)

    def test_load_without_spec_infers_duration(self, tmp_path):
        pulse = ControlField(np.linspace(0, 1, 20), 1, 2.5)
        path = tmp_path / "pulse.csv"
        save_pulse(pulse, path)
        back = load_pulse(path)
        assert back.duration == pytest.approx(2.5)

    def test_missing_node_header(self, tmp_path):
        path = tmp_path / "pulse.csv"
        path.write_text("t_midpoint,omega\n0.5,1.0\n1.5,2.0\n")
        with pytest.raises(ConfigError, match="node_index"):
            load_pulse(path)

    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "pulse.csv"
        path.write_text("# node_index: 1\nt_midpoint,omega\n"
                        "0.5,1.0\n1.5\n")
        with pytest.raises(ConfigError, match="pulse.csv:4"):
            load_pulse(path)

    def test_non_uniform_grid_rejected(self, tmp_path):
        path = tmp_path / "pulse.csv"
        path.write_text("# node_index: 1\nt_midpoint,omega\n"
                        "0.5,1.0\n1.5,2.0\n3.5,3.0\n")
        with pytest.raises(ConfigError, match="uniform"):
            load_pulse(path)

    def test_non_midpoint_grid_rejected(self, tmp_path):
        path = tmp_path / "pulse.csv"
        path.write_text("# node_index: 1\nt_midpoint,omega\n"
                        "0.0,1.0\n1.0,2.0\n2.0,3.0\n")
        with pytest.raises(ConfigError, match="midpoint"):
            load_pulse(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_pulse(tmp_path / "absent.csv")


class TestCsvWriters:
    def test_convergence_columns_and_empty_exact(self, tmp_path):
        records = [
            IterationRecord(1, 0.5, 0.49, 1.25, 0.01),
            IterationRecord(2, 0.4, None, 1.0, 0.01),
        ]
        path = tmp_path / "convergence.csv"
        write_convergence_csv(records, path, "hash12")
        lines = path.read_text().splitlines()
        assert lines[0] == "# config: hash12"
        assert lines[1].split(",") == [
            "iteration", "j_t_surrogate", "j_t_exact",
            "pulse_update_norm", "wall_time",
        ]
        row2 = lines[3].split(",")
        assert row2[0] == "2"
        assert row2[2] == ""
        assert float(row2[1]) == 0.4

    def test_dynamics_layout(self, tmp_path):
        times = np.array([0.0, 0.5, 1.0])
        rec = DynamicsRecord(
            times=times,
            atom_pop=np.full((3, 2), 0.25),
            cavity_pop=np.full((3, 2), 0.125),
            collective=np.zeros(3),
            vacuum_pop=np.full(3, 0.25),
        )
        path = tmp_path / "dynamics.csv"
        write_dynamics_csv(rec, path, "h")
        lines = path.read_text().splitlines()
        assert lines[1].split(",") == [
            "t", "atom_pop_1", "atom_pop_2", "cavity_pop_1", "cavity_pop_2",
            "vacuum_pop", "collective_decay",
        ]
        assert len(lines) == 2 + 3
        assert float(lines[2].split(",")[1]) == 0.25

    def test_jumps_layout(self, tmp_path):
        jumps = [
            (Jump(0.5, 0),),
            (),
            (Jump(0.25, 0), Jump(1.5, 0)),
        ]
        path = tmp_path / "jumps.csv"
        write_jumps_csv(jumps, path)
        lines = path.read_text().splitlines()
        assert lines[1] == "trajectory,time,op_index"
        assert len(lines) == 2 + 3
        assert lines[2].startswith("0,0.5")
        assert lines[3].startswith("2,0.25")

    def test_noise_layout(self, tmp_path):
        rows = [("independent", 4, 0, 1, 0.025), ("cross", 4, 0, 1, 0.030)]
        path = tmp_path / "noise.csv"
        write_noise_csv(rows, path)
        lines = path.read_text().splitlines()
        assert lines[1] == "variant,n_trajectories,seed,control,nu"
        assert lines[2].startswith("independent,4,0,1,")

    def test_noise_fit_layout(self, tmp_path):
        fit = PowerLawFit(exponent=-0.5, prefactor=0.06, residual=0.01)
        path = tmp_path / "noise_fit.csv"
        write_noise_fit_csv([("independent", 1, fit)], path)
        lines = path.read_text().splitlines()
        assert lines[1] == "variant,control,exponent,prefactor,residual"
        assert lines[2].split(",")[2] == "-0.5"

    def test_writers_are_deterministic(self, tmp_path):
        records = [IterationRecord(1, 0.5, 0.49, 1.25, 0.01)]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_convergence_csv(records, a, "h")
        write_convergence_csv(records, b, "h")
        assert a.read_bytes() == b.read_bytes()
