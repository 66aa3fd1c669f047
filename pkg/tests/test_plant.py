import numpy as np
import pytest
from scipy.linalg import expm

from sysid.model import Dataset
from sysid.plant import (
    MsdChain,
    TrigonometricPlant,
    gen_msd_chain,
    gen_trigonometric,
    load_csv,
    multisine,
    save_csv,
)
from utils.errors import DatasetFormatError


def test_trigonometric_step_from_origin():
    plant = TrigonometricPlant(state_noise=0.0, output_noise=0.0)
    np.testing.assert_allclose(plant.transition(np.zeros(3), np.zeros(1)), [0.0, 0.0, 0.4])
    assert plant.output_map(np.zeros(3))[0] == 0.0


def test_trigonometric_generation_is_reproducible():
    a = gen_trigonometric(200, seed=7)
    b = gen_trigonometric(200, seed=7)
    np.testing.assert_array_equal(a.u, b.u)
    np.testing.assert_array_equal(a.y, b.y)
    assert a.u.shape == (200, 1) and a.y.shape == (200, 1)
    assert np.all(np.abs(a.u) <= 0.5)
    assert not np.array_equal(a.y, gen_trigonometric(200, seed=8).y)


def test_msd_equilibrium_at_rest():
    plant = MsdChain()
    y = plant.simulate(np.zeros((20, 1)))
    np.testing.assert_array_equal(y, 0.0)
    np.testing.assert_array_equal(plant.state, 0.0)


def test_msd_energy_decays_without_input():
    plant = MsdChain()
    plant.reset(np.concatenate((np.linspace(0.5, -0.5, 5), np.zeros(5))))
    energies = [plant.energy(plant.state)]
    for _ in range(300):
        plant.advance(np.zeros(1))
        energies.append(plant.energy(plant.state))
    assert np.all(np.diff(energies) <= 1e-9)
    assert energies[-1] < 0.5 * energies[0]


def test_linear_chain_matches_exact_discretization():
    plant = MsdChain(k2=0.0)
    n = 10
    A_c = np.column_stack([plant.derivative(e, np.zeros(1)) for e in np.eye(n)])
    B_c = plant.derivative(np.zeros(n), np.ones(1))[:, None]
    M = expm(np.block([[A_c, B_c], [np.zeros((1, n + 1))]]) * 0.1)
    A_d, B_d = M[:n, :n], M[:n, n:]
    rng = np.random.default_rng(0)
    u = rng.uniform(-2, 2, size=(100, 1))
    z = np.zeros(n)
    for t in range(100):
        plant.advance(u[t])
        z = A_d @ z + B_d @ u[t]
        assert np.max(np.abs(plant.state - z)) <= 1e-6


def test_msd_generation():
    train, test = gen_msd_chain(300, 200, seed=3)
    assert train.n == 300 and test.n == 200
    assert np.max(np.abs(train.u)) == pytest.approx(2.0)
    assert np.all(np.abs(test.u) <= 2.0)
    again, _ = gen_msd_chain(300, 200, seed=3)
    np.testing.assert_array_equal(train.y, again.y)


def test_multisine_peak_is_amplitude():
    s = multisine(1000, 0.1, 2.0, np.random.default_rng(0))
    assert s.shape == (1000, 1)
    assert np.max(np.abs(s)) == pytest.approx(2.0)


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = Dataset(u=rng.normal(size=(50, 2)), y=rng.normal(size=(50, 1)), t=np.arange(50) * 0.1)
    path = tmp_path / "data.csv"
    save_csv(data, path)
    loaded = load_csv(path)
    np.testing.assert_array_equal(loaded.u, data.u)
    np.testing.assert_array_equal(loaded.y, data.y)
    np.testing.assert_array_equal(loaded.t, data.t)
    assert path.read_text().splitlines()[0] == "t,u1,u2,y1"


def test_hand_written_file(tmp_path):
    path = tmp_path / "small.csv"
    path.write_text("t,u1,y1\n0,1.0,2.0\n1,-1.5,0.25\n2,0,3e-3\n")
    data = load_csv(path)
    np.testing.assert_array_equal(data.u[:, 0], [1.0, -1.5, 0.0])
    np.testing.assert_array_equal(data.y[:, 0], [2.0, 0.25, 0.003])


def test_missing_column_is_named(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,u1\n0,1.0\n")
    with pytest.raises(DatasetFormatError) as info:
        load_csv(path)
    assert info.value.column == "y1"


def test_non_numeric_cell_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,u1,y1\n0,1.0,2.0\n1,abc,2.0\n")
    with pytest.raises(DatasetFormatError) as info:
        load_csv(path)
    assert info.value.line == 3
    assert info.value.column == "u1"


def test_ragged_row_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,u1,y1\n0,1.0,2.0\n1,2.0\n")
    with pytest.raises(DatasetFormatError) as info:
        load_csv(path)
    assert info.value.line == 3
