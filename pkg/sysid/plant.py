"""Ground-truth plants for synthetic data and closed-loop tests, plus dataset CSV files."""
import csv
import logging
import re

import numpy as np

from sysid.model import Dataset
from utils.errors import DatasetFormatError, NumericalError

logger = logging.getLogger(__name__)

TRIG_A = np.array([0.5, 0.6, 0.4])
TRIG_B = np.array([1.7, 0.4, 0.9])
TRIG_C = np.array([2.2, 1.8, -1.0])


class Plant:
    """Stateful plant: `measure` reads y at the current state, `advance` applies u."""

    n_u = 1
    n_y = 1

    def __init__(self, state, state_noise=0.0, output_noise=0.0, rng=None):
        self.initial_state = np.asarray(state, dtype=float).copy()
        self.state = self.initial_state.copy()
        self.state_noise = state_noise
        self.output_noise = output_noise
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def reset(self, state=None):
        self.state = (self.initial_state if state is None else np.asarray(state, dtype=float)).copy()

    def transition(self, z, u):
        raise NotImplementedError

    def output_map(self, z):
        raise NotImplementedError

    def measure(self):
        y = np.atleast_1d(self.output_map(self.state))
        if self.output_noise:
            y = y + self.output_noise * self.rng.standard_normal(y.shape)
        return y

    def advance(self, u):
        z = self.transition(self.state, np.atleast_1d(np.asarray(u, dtype=float)))
        if self.state_noise:
            z = z + self.state_noise * self.rng.standard_normal(z.shape)
        if not np.all(np.isfinite(z)):
            raise NumericalError("plant state is no longer finite")
        self.state = z
        return z

    def simulate(self, u):
        """Record y_t, then advance with u_t, for every row of u."""
        u = np.asarray(u, dtype=float).reshape(len(u), -1)
        y = np.zeros((u.shape[0], self.n_y))
        for t in range(u.shape[0]):
            y[t] = self.measure()
            try:
                self.advance(u[t])
            except NumericalError as e:
                raise NumericalError(f"plant simulation blew up at sample {t}", time_index=t) from e
        return y


class TrigonometricPlant(Plant):
    def __init__(self, state_noise=0.01, output_noise=0.01, rng=None):
        super().__init__(np.zeros(3), state_noise, output_noise, rng)

    def transition(self, z, u):
        a, b = TRIG_A, TRIG_B
        return np.array([
            a[0] * np.sin(z[0]) + b[0] * np.cos(0.5 * z[1]) * u[0],
            a[1] * np.sin(z[0] + z[2]) + b[1] * np.arctan(z[0] + z[1]),
            a[2] * np.exp(-z[1]) + b[2] * np.sin(-0.5 * z[0]) * u[0],
        ])

    def output_map(self, z):
        return np.array([np.sum(np.arctan(TRIG_C * z ** 3))])


class MsdChain(Plant):
    """Masses in series, the first tied to a wall, each link a cubic spring plus a damper.

    State is (positions, velocities); the force acts on mass 1 and the output
    is the position of the last mass.
    """

    def __init__(self, n_masses=5, mass=1.0, damping=1.0, k1=0.5, k2=0.5, sample_time=0.1, substep=0.01,
                 state_noise=0.0, output_noise=0.0, rng=None):
        super().__init__(np.zeros(2 * n_masses), state_noise, output_noise, rng)
        self.n_masses = n_masses
        self.mass = mass
        self.damping = damping
        self.k1 = k1
        self.k2 = k2
        self.n_sub = max(1, int(round(sample_time / substep)))
        self.h = sample_time / self.n_sub

    def derivative(self, z, u):
        n = self.n_masses
        pos, vel = z[:n], z[n:]
        d = np.diff(np.concatenate(([0.0], pos)))
        dv = np.diff(np.concatenate(([0.0], vel)))
        link = self.k1 * d + self.k2 * d ** 3 + self.damping * dv
        force = -link
        force[:-1] += link[1:]
        force[0] += u[0]
        return np.concatenate((vel, force / self.mass))

    def transition(self, z, u):
        h = self.h
        for _ in range(self.n_sub):
            k1 = self.derivative(z, u)
            k2 = self.derivative(z + 0.5 * h * k1, u)
            k3 = self.derivative(z + 0.5 * h * k2, u)
            k4 = self.derivative(z + h * k3, u)
            z = z + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return z

    def output_map(self, z):
        return np.array([z[self.n_masses - 1]])

    def energy(self, z):
        n = self.n_masses
        d = np.diff(np.concatenate(([0.0], z[:n])))
        return float(0.5 * self.mass * np.sum(z[n:] ** 2) + np.sum(0.5 * self.k1 * d ** 2 + 0.25 * self.k2 * d ** 4))


def multisine(n, sample_time, amplitude, rng, tones=50, f_min=0.1, f_max=100.0):
    """Sum of log-spaced sines with uniform random phases, scaled to peak `amplitude`."""
    t = np.arange(n) * sample_time
    freqs = np.logspace(np.log10(f_min), np.log10(f_max), tones)
    phases = rng.uniform(0.0, 2 * np.pi, size=tones)
    s = np.sin(2 * np.pi * freqs[None, :] * t[:, None] + phases[None, :]).sum(axis=1)
    peak = np.max(np.abs(s))
    if peak == 0:
        return np.zeros((n, 1))
    return (amplitude * s / peak)[:, None]


def _rngs(seed, count):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def gen_trigonometric(n, seed, spec=None):
    amplitude = spec.amplitude if spec is not None else 0.5
    state_noise = spec.state_noise if spec is not None else 0.01
    output_noise = spec.output_noise if spec is not None else 0.01
    input_rng, noise_rng = _rngs(seed, 2)
    u = input_rng.uniform(-amplitude, amplitude, size=(n, 1))
    plant = TrigonometricPlant(state_noise, output_noise, noise_rng)
    y = plant.simulate(u)
    return Dataset(u=u, y=y, t=np.arange(n, dtype=float))


def make_msd_plant(spec=None, rng=None):
    if spec is None:
        return MsdChain(rng=rng)
    return MsdChain(spec.n_masses, spec.mass, spec.damping, spec.k1, spec.k2, spec.sample_time, spec.substep,
                    spec.state_noise, spec.output_noise, rng)


def gen_msd_chain(n_train, n_test, seed, spec=None):
    amplitude = spec.amplitude if spec is not None else 2.0
    sample_time = spec.sample_time if spec is not None else 0.1
    train_rng, test_rng, noise_rng = _rngs(seed, 3)
    if spec is not None:
        u_train = multisine(n_train, sample_time, amplitude, train_rng, spec.multisine_tones,
                            spec.multisine_f_min, spec.multisine_f_max)
    else:
        u_train = multisine(n_train, sample_time, amplitude, train_rng)
    u_test = test_rng.uniform(-amplitude, amplitude, size=(n_test, 1))
    datasets = []
    for u in (u_train, u_test):
        plant = make_msd_plant(spec, noise_rng)
        y = plant.simulate(u)
        datasets.append(Dataset(u=u, y=y, t=np.arange(len(u)) * sample_time))
    return datasets[0], datasets[1]


def make_plant(spec, seed):
    """A fresh plant of the configured kind for closed-loop runs."""
    rng = _rngs(seed, 1)[0]
    if spec.kind == "trigonometric":
        return TrigonometricPlant(spec.state_noise, spec.output_noise, rng)
    if spec.kind == "msd_chain":
        return make_msd_plant(spec, rng)
    raise ValueError(f"no simulator for plant kind {spec.kind!r}")


def generate(spec, seed):
    """(train, test) datasets for a PlantSpec."""
    if spec.kind == "trigonometric":
        train_seed, test_seed = np.random.SeedSequence(seed).generate_state(2)
        return gen_trigonometric(spec.n_train, int(train_seed), spec), gen_trigonometric(spec.n_test, int(test_seed), spec)
    if spec.kind == "msd_chain":
        return gen_msd_chain(spec.n_train, spec.n_test, seed, spec)
    return load_csv(spec.train_csv), load_csv(spec.test_csv)


_COLUMN = re.compile(r"^([uy])(\d+)$")


def _columns(header):
    if not header or header[0] != "t":
        raise DatasetFormatError("missing column 't' (header must start with t)", line=1, column="t")
    found = {"u": [], "y": []}
    for name in header[1:]:
        match = _COLUMN.match(name.strip())
        if match is None:
            raise DatasetFormatError(f"unexpected column {name!r}", line=1, column=name)
        found[match.group(1)].append(int(match.group(2)))
    for kind in ("u", "y"):
        idx = found[kind]
        expected = list(range(1, len(idx) + 1))
        if not idx:
            raise DatasetFormatError(f"missing column '{kind}1'", line=1, column=f"{kind}1")
        if idx != expected:
            missing = next(i for i in expected + [len(idx) + 1] if i not in idx)
            raise DatasetFormatError(f"missing column '{kind}{missing}'", line=1, column=f"{kind}{missing}")
    if header[1:] != [f"u{i}" for i in found["u"]] + [f"y{i}" for i in found["y"]]:
        raise DatasetFormatError("columns must be ordered t, u1..u_nu, y1..y_ny", line=1)
    return len(found["u"]), len(found["y"])


def load_csv(path):
    """Read a `t,u1..,y1..` dataset; malformed rows are reported with their line."""
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path} is empty", line=1)
        n_u, n_y = _columns([h.strip() for h in header])
        width = 1 + n_u + n_y
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != width:
                raise DatasetFormatError(f"line {reader.line_num}: expected {width} cells, got {len(row)}",
                                         line=reader.line_num)
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                bad = next(i for i, cell in enumerate(row) if not _is_float(cell))
                raise DatasetFormatError(f"line {reader.line_num}: non-numeric cell {row[bad]!r} in column "
                                         f"{header[bad]!r}", line=reader.line_num, column=header[bad])
    if not rows:
        raise DatasetFormatError(f"{path} has no data rows", line=2)
    data = np.array(rows)
    logger.info("Loaded %d samples (%d inputs, %d outputs) from %s", len(rows), n_u, n_y, path)
    return Dataset(u=data[:, 1:1 + n_u], y=data[:, 1 + n_u:], t=data[:, 0])


def _is_float(cell):
    try:
        float(cell)
        return True
    except ValueError:
        return False


def save_csv(dataset, path):
    """Write physical-unit samples with repr-exact floats."""
    data = dataset.physical()
    header = ["t"] + [f"u{i + 1}" for i in range(data.n_u)] + [f"y{i + 1}" for i in range(data.n_y)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for t, u, y in zip(data.t, data.u, data.y):
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in u] + [repr(float(v)) for v in y])
    return path
