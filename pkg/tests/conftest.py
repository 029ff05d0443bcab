import numpy as np
import pytest

from glmix_stream.loss import OffsetInstance
from glmix_stream.model import Assignment, Instance, SparseVector


def random_offset_batch(rng, n, d, offset_scale=0.5, weight_scale=1.0, density=1.0):
    """Offset-logistic instances with labels drawn from a random truth."""
    w = weight_scale * rng.standard_normal(d)
    out = []
    for _ in range(n):
        z = rng.standard_normal(d) * (rng.random(d) < density)
        off = offset_scale * rng.standard_normal()
        y = int(rng.random() < 1.0 / (1.0 + np.exp(-(off + z @ w))))
        out.append(OffsetInstance(float(off), SparseVector.from_dense(z), y))
    return out


def make_instance(ts, label, x, re=()):
    """``re`` is a sequence of (type, id, dict)."""
    return Instance(ts, label, SparseVector.from_dict(x),
                    tuple(Assignment(r, l, SparseVector.from_dict(z)) for r, l, z in re))


def two_type_stream(rng, n=300, d_f=2, d_u=2, d_a=2, n_users=5, n_ads=4):
    """Instances with a 'user' and an 'ad' random effect each."""
    wf = rng.standard_normal(d_f)
    wu = {str(u): rng.standard_normal(d_u) for u in range(n_users)}
    wa = {str(a): rng.standard_normal(d_a) for a in range(n_ads)}
    out = []
    for k in range(n):
        u, a = str(rng.integers(n_users)), str(rng.integers(n_ads))
        x, zu, za = rng.standard_normal(d_f), rng.standard_normal(d_u), rng.standard_normal(d_a)
        s = x @ wf + zu @ wu[u] + za @ wa[a]
        y = int(rng.random() < 1 / (1 + np.exp(-s)))
        out.append(Instance(k * 1000, y, SparseVector.from_dense(x),
                            (Assignment("user", u, SparseVector.from_dense(zu)),
                             Assignment("ad", a, SparseVector.from_dense(za)))))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, printed after the run
acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_lines, key=lambda s: int(s.split()[1].rstrip(":ab"))):
            terminalreporter.write_line(line)
