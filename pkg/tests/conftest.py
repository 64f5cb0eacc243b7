import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from eimplace import env
from eimplace.netlist import Macro, Net, Netlist, PinOffset, SynthConfig, generate_synthetic

settings.register_profile("eim", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("eim")


def make_netlist(sizes, nets=(), grid_n=8, name="t", pins=None):
    """Hand-built netlist; ``nets`` holds (endpoints, terminals) pairs, pins default to centres."""
    macros = []
    for i, (w, h) in enumerate(sizes):
        p = pins[i] if pins is not None else ((w / 2.0, h / 2.0),)
        macros.append(Macro(i, w, h, tuple(PinOffset(dx, dy) for dx, dy in p)))
    net_objs = tuple(Net(tuple(tuple(e) for e in ends), tuple(tuple(t) for t in terms))
                     for ends, terms in nets)
    return Netlist(name, grid_n, tuple(macros), net_objs)


def random_rollout(n, rng, steps=None):
    """States visited by uniformly random legal actions."""
    s = env.reset(n)
    states = [s]
    steps = len(n.macros) if steps is None else steps
    for _ in range(steps):
        if s.done:
            break
        legal = np.flatnonzero(env.position_mask(s).ravel())
        if len(legal) == 0:
            break
        s, _ = env.step(s, int(rng.choice(legal)))
        states.append(s)
    return states


@pytest.fixture(scope="session")
def design1():
    return generate_synthetic(SynthConfig(), 1)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
